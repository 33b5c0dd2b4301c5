"""Multi-view regulated optimization step.

One training iteration samples M distinct views, renders and backpropagates
each, SUMS the per-view gradients into a single buffer, and applies one Adam
update. Gradients are summed, not averaged, so learning rates keep their
single-view scale; a mean mode exists for experiments.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import GaussianCloud, MTooLargeError, ShapeMismatchError
from .loss import combined_loss
from .raster import backward_render, forward_render, precompute_cov3d


# ---------------------------------------------------------------------------
# View sampling
# ---------------------------------------------------------------------------

class ViewSampler:
    """Epoch-balanced sampler over dataset view indices.

    Each draw returns M distinct indices taken from a shuffled epoch
    permutation; the permutation reshuffles at epoch boundaries, so over any
    full epoch per-view draw counts differ by at most one.
    """

    def __init__(self, n_views: int, rng: np.random.Generator):
        if n_views < 1:
            raise ValueError("sampler needs at least one view")
        self.n_views = n_views
        self.rng = rng
        self._queue: list[int] = []

    def _refill(self, exclude: set) -> None:
        perm = list(self.rng.permutation(self.n_views))
        if exclude:
            # keep the carried-over leftovers distinct from the permutation
            # prefix they will be drawn with
            need = self.n_views - len(exclude)
            for i in range(min(need, len(perm))):
                if perm[i] in exclude:
                    for j in range(len(perm) - 1, i, -1):
                        if perm[j] not in exclude:
                            perm[i], perm[j] = perm[j], perm[i]
                            break
        self._queue.extend(int(v) for v in perm)

    def sample(self, m: int) -> list[int]:
        if m > self.n_views:
            raise MTooLargeError(f"requested {m} views from {self.n_views}")
        if len(self._queue) < m:
            self._refill(set(self._queue))
        out = self._queue[:m]
        del self._queue[:m]
        return out


def sample_views(sampler: ViewSampler, m: int) -> list[int]:
    """Draw M distinct view indices from the sampler's epoch permutation."""
    return sampler.sample(m)


# ---------------------------------------------------------------------------
# Gradient buffer
# ---------------------------------------------------------------------------

@dataclass
class GradientBuffer:
    """Accumulator for one optimizer step plus densification statistics.

    viewspace_norm_accum holds, per kernel, the summed norms of the
    view-space positional gradients scaled to half-screen units
    (d/d_pixel * W/2, H/2), matching the threshold calibration of the
    baseline densifier. touch_count counts views that rendered the kernel.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    color_coeffs: np.ndarray
    viewspace_norm_accum: np.ndarray
    world_grad_accum: np.ndarray
    touch_count: np.ndarray
    max_radii_frac: np.ndarray

    @staticmethod
    def zeros(cloud: GaussianCloud) -> "GradientBuffer":
        n = cloud.count
        return GradientBuffer(
            positions=np.zeros_like(cloud.positions),
            rotations=np.zeros_like(cloud.rotations),
            log_scales=np.zeros_like(cloud.log_scales),
            opacity_logits=np.zeros_like(cloud.opacity_logits),
            color_coeffs=np.zeros_like(cloud.color_coeffs),
            viewspace_norm_accum=np.zeros(n),
            world_grad_accum=np.zeros((n, 3)),
            touch_count=np.zeros(n, dtype=np.int64),
            max_radii_frac=np.zeros(n),
        )

    def attribute_arrays(self) -> dict:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "color_coeffs": self.color_coeffs,
        }

    def reset(self) -> None:
        for arr in self.attribute_arrays().values():
            arr.fill(0.0)
        self.viewspace_norm_accum.fill(0.0)
        self.world_grad_accum.fill(0.0)
        self.touch_count.fill(0)
        self.max_radii_frac.fill(0.0)


def _render_one_view(cloud, image, camera, lam, sh_degree_active, background, cov3d):
    rendered, aux = forward_render(cloud, camera, sh_degree_active,
                                   background=background, cov3d=cov3d)
    scalar, loss_map, dL = combined_loss(rendered, image, lam)
    grads = backward_render(cloud, camera, aux, dL)
    screen = max(camera.width, camera.height)
    radii_frac = np.zeros(cloud.count)
    if aux.source_index.size:
        radii_frac[aux.source_index] = aux.radius / screen
    half = np.array([camera.width / 2.0, camera.height / 2.0])
    vs_norm = np.linalg.norm(grads.viewspace * half[None, :], axis=1)
    return scalar, loss_map, grads, vs_norm, radii_frac


def accumulate_multiview(cloud: GaussianCloud, views, lam: float,
                         sh_degree_active: int | None = None,
                         background=(0.0, 0.0, 0.0), threads: int = 1,
                         mode: str = "sum"):
    """Render M (image, camera) pairs and sum their gradients.

    Returns (GradientBuffer, mean scalar loss, list of per-view loss maps).
    Per-view work may fan out to a thread pool; the merge always runs in
    view order, so results do not depend on the thread count. mode="mean"
    divides the attribute gradients by M after summation.
    """
    if len(views) < 1:
        raise ValueError("need at least one view")
    buffer = GradientBuffer.zeros(cloud)
    cov3d = precompute_cov3d(cloud)

    def work(pair):
        image, camera = pair
        return _render_one_view(cloud, image, camera, lam, sh_degree_active,
                                background, cov3d)

    if threads > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, views))
    else:
        results = [work(v) for v in views]

    loss_maps = []
    total = 0.0
    for scalar, loss_map, grads, vs_norm, radii_frac in results:
        total += scalar
        loss_maps.append(loss_map)
        buffer.positions += grads.positions
        buffer.rotations += grads.rotations
        buffer.log_scales += grads.log_scales
        buffer.opacity_logits += grads.opacity_logits
        buffer.color_coeffs += grads.color_coeffs
        buffer.viewspace_norm_accum += vs_norm
        buffer.world_grad_accum += grads.positions
        buffer.touch_count += grads.touched
        np.maximum(buffer.max_radii_frac, radii_frac, out=buffer.max_radii_frac)
    if mode == "mean" and len(views) > 1:
        inv = 1.0 / len(views)
        for arr in buffer.attribute_arrays().values():
            arr *= inv
    return buffer, total / len(views), loss_maps


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class AdamState:
    """Per-attribute first/second moments with 3DGS learning-rate groups."""

    m: dict
    v: dict
    t: int
    scene_extent: float
    lr_position_init: float
    lr_position_final: float
    lr_position_max_steps: int
    lrs: dict

    @staticmethod
    def create(cloud: GaussianCloud, scene_extent: float, config) -> "AdamState":
        m = {k: np.zeros_like(a) for k, a in cloud.attribute_arrays().items()}
        v = {k: np.zeros_like(a) for k, a in cloud.attribute_arrays().items()}
        lrs = {
            "rotations": config.lr_rotation,
            "log_scales": config.lr_scale,
            "opacity_logits": config.lr_opacity,
            "color_dc": config.lr_color_dc,
            "color_rest": config.lr_color_dc / config.lr_color_rest_div,
        }
        return AdamState(
            m=m, v=v, t=0, scene_extent=scene_extent,
            lr_position_init=config.lr_position_init * scene_extent,
            lr_position_final=config.lr_position_final * scene_extent,
            lr_position_max_steps=config.lr_position_max_steps,
            lrs=lrs,
        )

    def position_lr(self) -> float:
        """Exponential (log-linear) decay of the position learning rate."""
        frac = min(max(self.t / self.lr_position_max_steps, 0.0), 1.0)
        return float(np.exp((1.0 - frac) * np.log(self.lr_position_init)
                            + frac * np.log(self.lr_position_final)))

    def resize(self, keep_indices: np.ndarray, n_new: int) -> None:
        """Keep moments of surviving kernels; new kernels start at zero."""
        for store in (self.m, self.v):
            for key, arr in store.items():
                kept = arr[keep_indices]
                pad_shape = (n_new,) + arr.shape[1:]
                store[key] = np.concatenate([kept, np.zeros(pad_shape, dtype=arr.dtype)])


def adam_step(cloud: GaussianCloud, buffer: GradientBuffer, state: AdamState) -> None:
    """Standard bias-corrected Adam update on every attribute group.

    Mutates the cloud and the state; zeroes the buffer afterwards.
    """
    for key, grad in buffer.attribute_arrays().items():
        if grad.shape != getattr(cloud, key).shape:
            raise ShapeMismatchError(f"{key}: buffer {grad.shape} vs cloud "
                                     f"{getattr(cloud, key).shape}")
        if state.m[key].shape != grad.shape:
            raise ShapeMismatchError(f"{key}: adam state {state.m[key].shape} "
                                     f"vs gradient {grad.shape}")

    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    pos_lr = state.position_lr()

    for key, grad in buffer.attribute_arrays().items():
        param = getattr(cloud, key)
        m = state.m[key]
        v = state.v[key]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        mhat = m / bc1
        vhat = v / bc2
        if key == "positions":
            param -= pos_lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        elif key == "color_coeffs":
            step = mhat / (np.sqrt(vhat) + ADAM_EPS)
            param[:, 0, :] -= state.lrs["color_dc"] * step[:, 0, :]
            if param.shape[1] > 1:
                param[:, 1:, :] -= state.lrs["color_rest"] * step[:, 1:, :]
        else:
            param -= state.lrs[key] * mhat / (np.sqrt(vhat) + ADAM_EPS)

    for arr in buffer.attribute_arrays().values():
        arr.fill(0.0)
