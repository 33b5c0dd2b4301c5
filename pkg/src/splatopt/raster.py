"""Differentiable splat rasterizer.

Forward pass: project 3D Gaussians to pixel space (first-order EWA), sort by
depth, and alpha-composite front to back. Backward pass: analytic gradients
for every kernel attribute plus the view-space positional gradient that feeds
densification statistics.

The per-pixel compositing loops are JIT-compiled with numba; projection and
the gradient chain rules are vectorized numpy. Traversal is a per-kernel
bounding-box scan over the 3-sigma footprint, which realizes the same
contract as tile binning on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import (
    AuxMismatchError,
    Camera,
    DegenerateQuaternionError,
    GaussianCloud,
    world_to_camera,
)

ALPHA_CLAMP = 0.99
TRANSMITTANCE_FLOOR = 1e-4
COV_DILATION = 0.3
FOOTPRINT_SIGMA = 3.0

# Real spherical-harmonic constants (community ordering and signs).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = np.array([
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
])
SH_C3 = np.array([
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
])


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis for unit directions.

    dirs: (N, 3). Returns (N, (degree+1)^2).
    """
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    b = (degree + 1) ** 2
    out = np.empty((n, b), dtype=dirs.dtype)
    out[:, 0] = SH_C0
    if degree < 1:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = SH_C2[0] * xy
    out[:, 5] = SH_C2[1] * yz
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * xz
    out[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * xy * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each basis function w.r.t. the direction components.

    dirs: (N, 3). Returns (N, (degree+1)^2, 3).
    """
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    b = (degree + 1) ** 2
    g = np.zeros((n, b, 3), dtype=dirs.dtype)
    if degree < 1:
        return g
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g[:, 1, 1] = -SH_C1
    g[:, 2, 2] = SH_C1
    g[:, 3, 0] = -SH_C1
    if degree < 2:
        return g
    g[:, 4, 0] = SH_C2[0] * y
    g[:, 4, 1] = SH_C2[0] * x
    g[:, 5, 1] = SH_C2[1] * z
    g[:, 5, 2] = SH_C2[1] * y
    g[:, 6, 0] = SH_C2[2] * (-2.0 * x)
    g[:, 6, 1] = SH_C2[2] * (-2.0 * y)
    g[:, 6, 2] = SH_C2[2] * (4.0 * z)
    g[:, 7, 0] = SH_C2[3] * z
    g[:, 7, 2] = SH_C2[3] * x
    g[:, 8, 0] = SH_C2[4] * (2.0 * x)
    g[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree < 3:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[:, 9, 0] = SH_C3[0] * 6.0 * x * y
    g[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    g[:, 10, 0] = SH_C3[1] * y * z
    g[:, 10, 1] = SH_C3[1] * x * z
    g[:, 10, 2] = SH_C3[1] * x * y
    g[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
    g[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[:, 11, 2] = SH_C3[2] * 8.0 * y * z
    g[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
    g[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
    g[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
    g[:, 13, 2] = SH_C3[4] * 8.0 * x * z
    g[:, 14, 0] = SH_C3[5] * 2.0 * x * z
    g[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
    g[:, 14, 2] = SH_C3[5] * (xx - yy)
    g[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    g[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def eval_sh_color(coeffs: np.ndarray, view_direction: np.ndarray,
                  degree_active: int) -> np.ndarray:
    """View-dependent RGB from SH coefficients: basis dot coeffs + 0.5,
    clamped at zero.

    coeffs: (B, 3) or (N, B, 3) with B >= (degree_active+1)^2;
    view_direction: unit (3,) or (N, 3).
    """
    single = coeffs.ndim == 2
    cf = coeffs[None] if single else coeffs
    dirs = np.atleast_2d(np.asarray(view_direction, dtype=float))
    if dirs.shape[0] == 1 and cf.shape[0] > 1:
        dirs = np.broadcast_to(dirs, (cf.shape[0], 3))
    basis = sh_basis(dirs, degree_active)
    nb = basis.shape[1]
    rgb = np.einsum("nb,nbc->nc", basis, cf[:, :nb, :]) + 0.5
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


# ---------------------------------------------------------------------------
# Covariance construction and projection
# ---------------------------------------------------------------------------

def quat_to_rotmat(quats: np.ndarray) -> np.ndarray:
    """Normalized quaternions (N, 4) as (w,x,y,z) -> rotation matrices (N, 3, 3)."""
    q = np.atleast_2d(quats)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def compute_cov3d(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3D covariance R diag(exp(2 log_s)) R^T for one kernel."""
    q = np.asarray(rotation, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise DegenerateQuaternionError(f"quaternion norm {norm:.3e}")
    rot = quat_to_rotmat((q / norm)[None])[0]
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    m = rot * s[None, :]
    return m @ m.T


def _cov3d_batch(quats: np.ndarray, log_scales: np.ndarray):
    """Batched covariance build. Returns (cov3d, rotmat, scales, unit_quats, norms)."""
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateQuaternionError("quaternion with near-zero norm")
    qn = quats / norms
    rot = quat_to_rotmat(qn)
    s = np.exp(log_scales)
    m = rot * s[:, None, :]
    cov = m @ np.swapaxes(m, 1, 2)
    return cov, rot, s, qn, norms[:, 0]


def project_cov2d(camera: Camera, mean: np.ndarray, cov3d: np.ndarray) -> np.ndarray:
    """EWA projection of one 3D covariance to pixel space.

    Returns the 2x2 covariance with the low-pass dilation already added.
    Raises BehindCameraError when the camera-space depth is not positive.
    """
    from .core import BehindCameraError

    cam = world_to_camera(camera, np.asarray(mean, dtype=np.float64))
    x, y, z = cam
    if z <= 0:
        raise BehindCameraError(f"depth {z} <= 0")
    j = np.array([[camera.fx / z, 0.0, -camera.fx * x / (z * z)],
                  [0.0, camera.fy / z, -camera.fy * y / (z * z)]])
    t = j @ camera.rotation
    cov2d = t @ cov3d @ t.T
    return cov2d + COV_DILATION * np.eye(2)


# ---------------------------------------------------------------------------
# numba compositing kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _composite_forward(x0, x1, y0, y1, starts, mx, my, conic, opac, col, width,
                       gval, alpha, t_in, timg, cimg):
    for k in range(x0.shape[0]):
        p = starts[k]
        ok = opac[k]
        cr, cg, cb = col[k, 0], col[k, 1], col[k, 2]
        ca, cb_, cc = conic[k, 0], conic[k, 1], conic[k, 2]
        mxk, myk = mx[k], my[k]
        for py in range(y0[k], y1[k] + 1):
            dy = py - myk
            rowbase = py * width
            for px in range(x0[k], x1[k] + 1):
                dx = px - mxk
                m = ca * dx * dx + 2.0 * cb_ * dx * dy + cc * dy * dy
                gv = np.exp(-0.5 * m)
                raw = ok * gv
                al = raw if raw < ALPHA_CLAMP else ALPHA_CLAMP
                pix = rowbase + px
                t = timg[pix]
                gval[p] = gv
                alpha[p] = al
                t_in[p] = t
                if t >= TRANSMITTANCE_FLOOR:
                    w = al * t
                    cimg[pix, 0] += w * cr
                    cimg[pix, 1] += w * cg
                    cimg[pix, 2] += w * cb
                    timg[pix] = t * (1.0 - al)
                p += 1


@numba.njit(cache=True, nogil=True)
def _composite_replay(x0, x1, y0, y1, starts, col, width, alpha, t_in, cimg):
    for k in range(x0.shape[0]):
        p = starts[k]
        cr, cg, cb = col[k, 0], col[k, 1], col[k, 2]
        for py in range(y0[k], y1[k] + 1):
            rowbase = py * width
            for px in range(x0[k], x1[k] + 1):
                t = t_in[p]
                if t >= TRANSMITTANCE_FLOOR:
                    w = alpha[p] * t
                    pix = rowbase + px
                    cimg[pix, 0] += w * cr
                    cimg[pix, 1] += w * cg
                    cimg[pix, 2] += w * cb
                p += 1


@numba.njit(cache=True, nogil=True)
def _composite_backward(x0, x1, y0, y1, starts, mx, my, conic, opac, col, width,
                        gval, alpha, t_in, timg_final, dL, bgdot,
                        sacc, d_opac, d_mean, d_conic, d_col):
    for k in range(x0.shape[0] - 1, -1, -1):
        p = starts[k]
        ok = opac[k]
        cr, cg, cb = col[k, 0], col[k, 1], col[k, 2]
        ca, cb_, cc = conic[k, 0], conic[k, 1], conic[k, 2]
        mxk, myk = mx[k], my[k]
        for py in range(y0[k], y1[k] + 1):
            dy = py - myk
            rowbase = py * width
            for px in range(x0[k], x1[k] + 1):
                t = t_in[p]
                if t >= TRANSMITTANCE_FLOOR:
                    pix = rowbase + px
                    dx = px - mxk
                    al = alpha[p]
                    gv = gval[p]
                    d0, d1, d2 = dL[pix, 0], dL[pix, 1], dL[pix, 2]
                    q = d0 * cr + d1 * cg + d2 * cb
                    om = 1.0 - al
                    dal = t * q - sacc[pix] / om - bgdot[pix] * timg_final[pix] / om
                    w = al * t
                    sacc[pix] += w * q
                    if ok * gv < ALPHA_CLAMP:
                        d_opac[k] += dal * gv
                        dg = dal * ok
                        dm = -0.5 * gv * dg
                        d_mean[k, 0] -= dm * 2.0 * (ca * dx + cb_ * dy)
                        d_mean[k, 1] -= dm * 2.0 * (cb_ * dx + cc * dy)
                        d_conic[k, 0] += dm * dx * dx
                        d_conic[k, 1] += dm * 2.0 * dx * dy
                        d_conic[k, 2] += dm * dy * dy
                    d_col[k, 0] += w * d0
                    d_col[k, 1] += w * d1
                    d_col[k, 2] += w * d2
                p += 1


# ---------------------------------------------------------------------------
# RenderAux and gradients
# ---------------------------------------------------------------------------

@dataclass
class RenderAux:
    """Replayable record of one forward render.

    Holds the depth-sorted visible kernels' projection intermediates and the
    per-pair compositing state (Gaussian value, alpha, incoming transmittance)
    in traversal order, which is sufficient to replay the image bit-exactly
    and to run the backward pass without re-compositing.
    """

    width: int
    height: int
    n_source: int
    sh_degree_active: int
    background: np.ndarray
    # per visible kernel, depth-sorted
    source_index: np.ndarray
    depth: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray          # (K, 3): inverse covariance (a, b, c)
    cov2d: np.ndarray          # (K, 2, 2), dilated
    cam_points: np.ndarray     # (K, 3)
    color: np.ndarray          # (K, 3) after offset and clamp
    opacity: np.ndarray        # (K,) activated
    radius: np.ndarray         # (K,) footprint radius in pixels
    bbox: np.ndarray           # (K, 4): x0, x1, y0, y1 inclusive
    pair_starts: np.ndarray    # (K,) offsets into the pair arrays
    # per pixel-kernel pair
    gval: np.ndarray
    alpha: np.ndarray
    t_in: np.ndarray
    # per pixel
    timg_final: np.ndarray     # (H*W,) transmittance after compositing

    @property
    def n_pairs(self) -> int:
        return self.gval.shape[0]

    def replay(self) -> np.ndarray:
        """Re-run the blend from stored pair state; bit-exact with forward."""
        cimg = np.zeros((self.height * self.width, 3))
        _composite_replay(self.bbox[:, 0], self.bbox[:, 1], self.bbox[:, 2],
                          self.bbox[:, 3], self.pair_starts,
                          np.ascontiguousarray(self.color), self.width,
                          self.alpha, self.t_in, cimg)
        cimg += self.timg_final[:, None] * self.background[None, :]
        return cimg.reshape(self.height, self.width, 3)


@dataclass
class ParamGradients:
    """Gradients matching every cloud attribute plus densification extras."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    color_coeffs: np.ndarray
    viewspace: np.ndarray      # (N, 2) dL/d pixel-space mean
    touched: np.ndarray        # (N,) bool: kernel contributed to this render

    @staticmethod
    def zeros(cloud: GaussianCloud) -> "ParamGradients":
        return ParamGradients(
            positions=np.zeros_like(cloud.positions),
            rotations=np.zeros_like(cloud.rotations),
            log_scales=np.zeros_like(cloud.log_scales),
            opacity_logits=np.zeros_like(cloud.opacity_logits),
            color_coeffs=np.zeros_like(cloud.color_coeffs),
            viewspace=np.zeros((cloud.count, 2), dtype=cloud.dtype),
            touched=np.zeros(cloud.count, dtype=bool),
        )


def precompute_cov3d(cloud: GaussianCloud) -> np.ndarray:
    """View-independent 3D covariances, shared across the views of one
    accumulation step."""
    if cloud.count == 0:
        return np.zeros((0, 3, 3))
    return _cov3d_batch(cloud.rotations, cloud.log_scales)[0]


def _project_cloud(cloud: GaussianCloud, camera: Camera, sh_degree_active: int,
                   cov3d: np.ndarray | None = None):
    """Project all kernels; cull and depth-sort. Returns the per-kernel
    bundle used by both forward and backward, or None when nothing is visible."""
    n = cloud.count
    if n == 0:
        return None
    cam_pts = world_to_camera(camera, cloud.positions)
    z = cam_pts[:, 2]
    vis = z > camera.near
    if not vis.any():
        return None

    if cov3d is None:
        cov3d = _cov3d_batch(cloud.rotations, cloud.log_scales)[0]

    idx = np.flatnonzero(vis)
    cp = cam_pts[idx]
    x, y, zz = cp[:, 0], cp[:, 1], cp[:, 2]
    fx, fy = camera.fx, camera.fy
    rot = camera.rotation

    # first-order EWA: cov2d = T cov3d T^T + dilation, T = J W built from
    # the live Jacobian entries and the camera rotation rows
    inv_z = 1.0 / zz
    inv_z2 = inv_z * inv_z
    t0 = (fx * inv_z)[:, None] * rot[0][None, :] \
        + (-fx * x * inv_z2)[:, None] * rot[2][None, :]
    t1 = (fy * inv_z)[:, None] * rot[1][None, :] \
        + (-fy * y * inv_z2)[:, None] * rot[2][None, :]
    cv = cov3d[idx]
    w0 = np.einsum("ki,kij->kj", t0, cv)
    w1 = np.einsum("ki,kij->kj", t1, cv)
    a = np.einsum("kj,kj->k", w0, t0) + COV_DILATION
    b = np.einsum("kj,kj->k", w0, t1)
    c = np.einsum("kj,kj->k", w1, t1) + COV_DILATION
    det = a * c - b * b
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.ceil(FOOTPRINT_SIGMA * np.sqrt(lam_max))

    mean2d = np.stack([fx * x / zz + camera.cx, fy * y / zz + camera.cy], axis=1)

    x0 = np.maximum(np.ceil(mean2d[:, 0] - radius), 0)
    x1 = np.minimum(np.floor(mean2d[:, 0] + radius), camera.width - 1)
    y0 = np.maximum(np.ceil(mean2d[:, 1] - radius), 0)
    y1 = np.minimum(np.floor(mean2d[:, 1] + radius), camera.height - 1)
    good = (x1 >= x0) & (y1 >= y0) & (det > 0) & np.isfinite(det)
    if not good.any():
        return None
    keep = np.flatnonzero(good)
    idx = idx[keep]

    order = np.lexsort((idx, zz[keep]))
    sel = keep[order]
    src = idx[order]

    conic = np.stack([c[sel] / det[sel], -b[sel] / det[sel], a[sel] / det[sel]], axis=1)

    center = camera.center()
    view = cloud.positions[src] - center[None, :]
    vnorm = np.linalg.norm(view, axis=1, keepdims=True)
    dirs = view / vnorm
    basis = sh_basis(dirs, sh_degree_active)
    nb = basis.shape[1]
    color_pre = np.einsum("nb,nbc->nc", basis, cloud.color_coeffs[src, :nb, :]) + 0.5
    color = np.maximum(color_pre, 0.0)

    bbox = np.stack([x0[sel], x1[sel], y0[sel], y1[sel]], axis=1).astype(np.int64)
    counts = (bbox[:, 1] - bbox[:, 0] + 1) * (bbox[:, 3] - bbox[:, 2] + 1)
    starts = np.zeros(len(sel), dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])

    cov2d = np.empty((len(sel), 2, 2))
    cov2d[:, 0, 0] = a[sel]
    cov2d[:, 0, 1] = b[sel]
    cov2d[:, 1, 0] = b[sel]
    cov2d[:, 1, 1] = c[sel]

    return {
        "src": src,
        "depth": zz[sel].copy(),
        "cam_points": cp[sel].copy(),
        "cov2d": cov2d,
        "conic": np.ascontiguousarray(conic),
        "mean2d": np.ascontiguousarray(mean2d[sel]),
        "radius": radius[sel].copy(),
        "bbox": bbox,
        "starts": starts,
        "n_pairs": int(counts.sum()),
        "color": np.ascontiguousarray(color),
        "opacity": sigmoid_np(cloud.opacity_logits[src]),
    }


def sigmoid_np(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward_render(cloud: GaussianCloud, camera: Camera,
                   sh_degree_active: int | None = None,
                   background=(0.0, 0.0, 0.0),
                   cov3d: np.ndarray | None = None):
    """Render the cloud through the camera.

    Returns (image (H, W, 3), RenderAux). Kernels behind the near plane or
    with footprints missing the image are culled; blending follows depth
    order with alpha clamped to [0, 0.99] and early termination once the
    accumulated transmittance drops below 1e-4. Pass `cov3d` from
    precompute_cov3d to share the covariance build across several views.
    """
    if sh_degree_active is None:
        sh_degree_active = cloud.sh_degree
    sh_degree_active = min(sh_degree_active, cloud.sh_degree)
    bg = np.asarray(background, dtype=np.float64)
    h, w = camera.height, camera.width

    proj = _project_cloud(cloud, camera, sh_degree_active, cov3d)
    if proj is None:
        image = np.tile(bg, (h, w, 1))
        aux = RenderAux(
            width=w, height=h, n_source=cloud.count,
            sh_degree_active=sh_degree_active, background=bg,
            source_index=np.zeros(0, dtype=np.int64),
            depth=np.zeros(0), mean2d=np.zeros((0, 2)), conic=np.zeros((0, 3)),
            cov2d=np.zeros((0, 2, 2)), cam_points=np.zeros((0, 3)),
            color=np.zeros((0, 3)), opacity=np.zeros(0), radius=np.zeros(0),
            bbox=np.zeros((0, 4), dtype=np.int64),
            pair_starts=np.zeros(0, dtype=np.int64),
            gval=np.zeros(0), alpha=np.zeros(0), t_in=np.zeros(0),
            timg_final=np.ones(h * w),
        )
        return image, aux

    npairs = proj["n_pairs"]
    gval = np.empty(npairs)
    alpha = np.empty(npairs)
    t_in = np.empty(npairs)
    timg = np.ones(h * w)
    cimg = np.zeros((h * w, 3))
    bbox = proj["bbox"]
    _composite_forward(bbox[:, 0], bbox[:, 1], bbox[:, 2], bbox[:, 3],
                       proj["starts"], proj["mean2d"][:, 0], proj["mean2d"][:, 1],
                       proj["conic"], proj["opacity"], proj["color"], w,
                       gval, alpha, t_in, timg, cimg)
    cimg += timg[:, None] * bg[None, :]
    image = cimg.reshape(h, w, 3)

    aux = RenderAux(
        width=w, height=h, n_source=cloud.count,
        sh_degree_active=sh_degree_active, background=bg,
        source_index=proj["src"], depth=proj["depth"], mean2d=proj["mean2d"],
        conic=proj["conic"], cov2d=proj["cov2d"], cam_points=proj["cam_points"],
        color=proj["color"], opacity=proj["opacity"], radius=proj["radius"],
        bbox=bbox, pair_starts=proj["starts"],
        gval=gval, alpha=alpha, t_in=t_in, timg_final=timg,
    )
    return image, aux


def backward_render(cloud: GaussianCloud, camera: Camera, aux: RenderAux,
                    dL_dimage: np.ndarray) -> ParamGradients:
    """Analytic gradients of a scalar loss through the forward render.

    dL_dimage must match the rendered image shape. Returns gradients for all
    cloud attributes, the per-kernel view-space positional gradient, and the
    touched-kernel mask. Untouched kernels carry exactly zero gradient.
    """
    if aux.n_source != cloud.count:
        raise AuxMismatchError(f"aux built for {aux.n_source} kernels, cloud has {cloud.count}")
    if dL_dimage.shape != (aux.height, aux.width, 3):
        raise AuxMismatchError(
            f"gradient shape {dL_dimage.shape} != {(aux.height, aux.width, 3)}")
    if aux.height != camera.height or aux.width != camera.width:
        raise AuxMismatchError("aux does not match camera dimensions")

    grads = ParamGradients.zeros(cloud)
    k = aux.source_index.size
    if k == 0:
        return grads
    grads.touched[aux.source_index] = True

    dL = np.ascontiguousarray(dL_dimage.reshape(-1, 3), dtype=np.float64)
    bgdot = dL @ aux.background

    sacc = np.zeros(aux.height * aux.width)
    d_opac = np.zeros(k)
    d_mean = np.zeros((k, 2))
    d_conic = np.zeros((k, 3))
    d_col = np.zeros((k, 3))
    bbox = aux.bbox
    _composite_backward(bbox[:, 0], bbox[:, 1], bbox[:, 2], bbox[:, 3],
                        aux.pair_starts, aux.mean2d[:, 0], aux.mean2d[:, 1],
                        aux.conic, aux.opacity, aux.color, aux.width,
                        aux.gval, aux.alpha, aux.t_in, aux.timg_final, dL, bgdot,
                        sacc, d_opac, d_mean, d_conic, d_col)

    src = aux.source_index
    fx, fy = camera.fx, camera.fy
    rot = camera.rotation
    x, y, z = aux.cam_points[:, 0], aux.cam_points[:, 1], aux.cam_points[:, 2]

    # ---- opacity: activated -> logit
    o = aux.opacity
    grads.opacity_logits[src] = d_opac * o * (1.0 - o)

    # ---- view-space positional gradient (pixel units), kept for densify stats
    grads.viewspace[src] = d_mean

    # ---- conic -> dilated 2D covariance: dSigma = -M Gm M, expanded in
    # symmetric 2x2 components
    ma, mb, mc = aux.conic[:, 0], aux.conic[:, 1], aux.conic[:, 2]
    gp, gq, gr = d_conic[:, 0], 0.5 * d_conic[:, 1], d_conic[:, 2]
    h00 = ma * gp + mb * gq
    h01 = ma * gq + mb * gr
    h10 = mb * gp + mc * gq
    h11 = mb * gq + mc * gr
    g2_00 = -(h00 * ma + h01 * mb)
    g2_01 = -(h00 * mb + h01 * mc)
    g2_11 = -(h10 * mb + h11 * mc)

    # ---- cov2d = T cov3 T^T with T = J W; T rows from the camera rotation
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    a1 = fx * inv_z
    a2 = -fx * x * inv_z2
    b1 = fy * inv_z
    b2 = -fy * y * inv_z2
    t0 = a1[:, None] * rot[0][None, :] + a2[:, None] * rot[2][None, :]
    t1 = b1[:, None] * rot[1][None, :] + b2[:, None] * rot[2][None, :]

    rot3 = quat_to_rotmat(unit_quats(cloud, src))
    s = np.exp(cloud.log_scales[src])
    m3 = rot3 * s[:, None, :]
    cov3 = m3 @ np.swapaxes(m3, 1, 2)

    # g_cov3 = T^T g2 T via u = g2 row combinations
    u = g2_00[:, None] * t0 + g2_01[:, None] * t1
    v = g2_01[:, None] * t0 + g2_11[:, None] * t1
    g_cov3 = t0[:, :, None] * u[:, None, :] + t1[:, :, None] * v[:, None, :]

    # g_T = 2 g2 T cov3; rows of W = T cov3
    w0 = np.einsum("ki,kij->kj", t0, cov3)
    w1 = np.einsum("ki,kij->kj", t1, cov3)
    g_t0 = 2.0 * (g2_00[:, None] * w0 + g2_01[:, None] * w1)
    g_t1 = 2.0 * (g2_01[:, None] * w0 + g2_11[:, None] * w1)

    # J entries -> camera-space point (only 4 J entries are live)
    g_j00 = g_t0 @ rot[0]
    g_j02 = g_t0 @ rot[2]
    g_j11 = g_t1 @ rot[1]
    g_j12 = g_t1 @ rot[2]
    d_cam = np.empty((k, 3))
    d_cam[:, 0] = g_j02 * (-fx * inv_z2)
    d_cam[:, 1] = g_j12 * (-fy * inv_z2)
    d_cam[:, 2] = (g_j00 * (-fx * inv_z2) + g_j11 * (-fy * inv_z2)
                   + g_j02 * (2.0 * fx * x * inv_z2 * inv_z)
                   + g_j12 * (2.0 * fy * y * inv_z2 * inv_z))

    # ---- pixel mean -> camera-space point (same Jacobian as the mean)
    d_cam[:, 0] += d_mean[:, 0] * a1
    d_cam[:, 1] += d_mean[:, 1] * b1
    d_cam[:, 2] += d_mean[:, 0] * a2 + d_mean[:, 1] * b2

    # ---- camera point -> world position
    g_pos = d_cam @ rot

    # ---- cov3d -> rotation / log-scale
    g_m3 = 2.0 * (g_cov3 @ m3)
    d_s = np.einsum("kij,kij->kj", rot3, g_m3)
    grads.log_scales[src] = d_s * s

    g_r3 = g_m3 * s[:, None, :]
    grads.rotations[src] = quat_rotation_backward(cloud.rotations[src], g_r3)

    # ---- color: offset/clamp -> SH coefficients and view direction
    center = camera.center()
    view = cloud.positions[src] - center[None, :]
    vnorm = np.linalg.norm(view, axis=1, keepdims=True)
    dirs = view / vnorm
    basis = sh_basis(dirs, aux.sh_degree_active)
    nb = basis.shape[1]
    color_pre = np.einsum("nb,nbc->nc", basis, cloud.color_coeffs[src, :nb, :]) + 0.5
    d_pre = d_col * (color_pre > 0)
    grads.color_coeffs[src, :nb, :] = basis[:, :, None] * d_pre[:, None, :]

    if aux.sh_degree_active > 0:
        bgrad = sh_basis_grad(dirs, aux.sh_degree_active)  # (k, nb, 3)
        u = np.einsum("nbc,nc->nb", cloud.color_coeffs[src, :nb, :], d_pre)
        d_dir = np.einsum("nb,nbj->nj", u, bgrad)
        # through normalization: dL/dv = (I - d d^T) / |v| @ dL/dd
        dd_dot = np.einsum("nj,nj->n", d_dir, dirs)
        d_view = (d_dir - dirs * dd_dot[:, None]) / vnorm
        g_pos += d_view

    grads.positions[src] = g_pos
    return grads


def unit_quats(cloud: GaussianCloud, src: np.ndarray) -> np.ndarray:
    q = cloud.rotations[src]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_rotation_backward(quats_raw: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR through R(q/|q|) back to the raw quaternion."""
    norms = np.linalg.norm(quats_raw, axis=1, keepdims=True)
    q = quats_raw / norms
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g_rot[:, 0, 0], g_rot[:, 0, 1], g_rot[:, 0, 2]
    g10, g11, g12 = g_rot[:, 1, 0], g_rot[:, 1, 1], g_rot[:, 1, 2]
    g20, g21, g22 = g_rot[:, 2, 0], g_rot[:, 2, 1], g_rot[:, 2, 2]

    d_w = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    d_x = 2.0 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
                 + z * g20 + w * g21 - 2 * x * g22)
    d_y = 2.0 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
                 - w * g20 + z * g21 - 2 * y * g22)
    d_z = 2.0 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
                 + y * g12 + x * g20 + y * g21)
    d_unit = np.stack([d_w, d_x, d_y, d_z], axis=1)
    dot = np.einsum("kj,kj->k", d_unit, q)
    return (d_unit - q * dot[:, None]) / norms
