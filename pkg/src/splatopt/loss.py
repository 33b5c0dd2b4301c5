"""Training loss (L1 + D-SSIM) with per-pixel loss maps and eval metrics.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
C2 = 0.03^2, channel-averaged, reflect-padded borders. The combined loss
returns the analytic gradient w.r.t. every rendered pixel, including the
exact adjoint of the reflect padding so finite differences agree at the
borders too.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .core import DimensionMismatchError, ImageTooSmallError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 99.0


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


_WIN = _gaussian_window()
_HALF = SSIM_WINDOW // 2

_fold_cache: dict = {}


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Source index for every position of a reflect-padded axis."""
    idx = np.arange(-pad, n + pad)
    period = 2 * n - 2 if n > 1 else 1
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - idx, idx)
    return idx


def _fold_matrices(h: int, w: int):
    """0/1 matrices realizing the adjoint of reflect padding per axis."""
    key = (h, w)
    if key not in _fold_cache:
        rows = _reflect_indices(h, _HALF)
        cols = _reflect_indices(w, _HALF)
        fr = np.zeros((h, h + 2 * _HALF))
        fr[rows, np.arange(h + 2 * _HALF)] = 1.0
        fc = np.zeros((w + 2 * _HALF, w))
        fc[np.arange(w + 2 * _HALF), cols] = 1.0
        _fold_cache[key] = (fr, fc)
    return _fold_cache[key]


def _pad_reflect(img: np.ndarray) -> np.ndarray:
    """Reflect-pad the two trailing axes of a (..., H, W) array."""
    pad = [(0, 0)] * (img.ndim - 2) + [(_HALF, _HALF), (_HALF, _HALF)]
    return np.pad(img, pad, mode="reflect")


def _windowed(padded: np.ndarray) -> np.ndarray:
    """Valid windowed average over the trailing axes of a padded array."""
    t = correlate1d(padded, _WIN, axis=-2, mode="constant")
    t = correlate1d(t, _WIN, axis=-1, mode="constant")
    return t[..., _HALF:-_HALF, _HALF:-_HALF]


def _windowed_adjoint(grad: np.ndarray) -> np.ndarray:
    """Adjoint of _windowed: upstream (..., H, W) -> gradient on the padded
    array (the window is symmetric, so the kernel is its own flip)."""
    pad = [(0, 0)] * (grad.ndim - 2) + [(2 * _HALF, 2 * _HALF)] * 2
    z = np.pad(grad, pad, mode="constant")
    t = correlate1d(z, _WIN, axis=-2, mode="constant")
    t = correlate1d(t, _WIN, axis=-1, mode="constant")
    return t[..., _HALF:-_HALF, _HALF:-_HALF]


def _fold_pad_adjoint(gpad: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of reflect padding: fold padded-cell gradients onto sources."""
    fr, fc = _fold_matrices(h, w)
    return fr @ gpad @ fc


def _check_pair(rendered: np.ndarray, target: np.ndarray):
    if rendered.shape != target.shape:
        raise DimensionMismatchError(
            f"image shapes differ: {rendered.shape} vs {target.shape}")
    if rendered.ndim != 3 or rendered.shape[2] != 3:
        raise DimensionMismatchError(f"expected (H, W, 3), got {rendered.shape}")


def l1_map(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel channel-mean absolute error, (H, W)."""
    _check_pair(rendered, target)
    return np.abs(rendered - target).mean(axis=2)


def _ssim_stack(x: np.ndarray, y: np.ndarray, with_grad_cache: bool):
    """Per-pixel SSIM for channel-stacked (C, H, W) images."""
    xp = _pad_reflect(x)
    yp = _pad_reflect(y)
    mu_x = _windowed(xp)
    mu_y = _windowed(yp)
    xx = _windowed(xp * xp)
    yy = _windowed(yp * yp)
    xy = _windowed(xp * yp)
    sig_x = xx - mu_x ** 2
    sig_y = yy - mu_y ** 2
    sig_xy = xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sig_xy + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = sig_x + sig_y + SSIM_C2
    ssim_map = (a1 * a2) / (b1 * b2)
    if not with_grad_cache:
        return ssim_map, None
    cache = dict(xp=xp, yp=yp, mu_x=mu_x, mu_y=mu_y, a1=a1, a2=a2, b1=b1,
                 b2=b2, ssim=ssim_map)
    return ssim_map, cache


def _ssim_stack_backward(cache: dict, upstream, h: int, w: int) -> np.ndarray:
    """Gradient of sum(upstream * ssim_map) w.r.t. the rendered channels."""
    mu_x, mu_y = cache["mu_x"], cache["mu_y"]
    a1, a2, b1, b2 = cache["a1"], cache["a2"], cache["b1"], cache["b2"]
    s = cache["ssim"]
    inv_b1b2 = 1.0 / (b1 * b2)
    d_a1 = upstream * a2 * inv_b1b2
    d_a2 = upstream * a1 * inv_b1b2
    d_b1 = -upstream * s / b1
    d_b2 = -upstream * s / b2
    d_sig_x = d_b2
    d_sig_xy = 2.0 * d_a2
    g_mu_x = (2.0 * mu_y * d_a1 + 2.0 * mu_x * d_b1
              - 2.0 * mu_x * d_sig_x - mu_y * d_sig_xy)
    gpad = _windowed_adjoint(g_mu_x)
    gpad += _windowed_adjoint(d_sig_x) * 2.0 * cache["xp"]
    gpad += _windowed_adjoint(d_sig_xy) * cache["yp"]
    return _fold_pad_adjoint(gpad, h, w)


def _stack(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(img, 2, 0))


def ssim(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over pixels and channels."""
    _check_pair(rendered, target)
    h, w = rendered.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ImageTooSmallError(f"SSIM needs min(H, W) >= {SSIM_WINDOW}, got {(h, w)}")
    smap, _ = _ssim_stack(_stack(rendered), _stack(target), False)
    return float(smap.mean())


def dssim_map(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel (1 - SSIM)/2, channel-averaged, (H, W)."""
    _check_pair(rendered, target)
    h, w = rendered.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ImageTooSmallError(f"SSIM needs min(H, W) >= {SSIM_WINDOW}, got {(h, w)}")
    smap, _ = _ssim_stack(_stack(rendered), _stack(target), False)
    return ((1.0 - smap) / 2.0).mean(axis=0)


def combined_loss(rendered: np.ndarray, target: np.ndarray, lam: float):
    """Training loss: (1-lam) * mean L1 + lam * mean D-SSIM.

    Returns (scalar, loss_map (H, W), dL/d rendered (H, W, 3)). The map uses
    the same per-pixel combination, so its mean equals the scalar.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    _check_pair(rendered, target)
    h, w = rendered.shape[:2]
    npix = h * w

    diff = rendered - target
    l1m = np.abs(diff).mean(axis=2)
    grad = (1.0 - lam) * np.sign(diff) / (3.0 * npix)

    if lam > 0.0:
        if min(h, w) < SSIM_WINDOW:
            raise ImageTooSmallError(
                f"SSIM needs min(H, W) >= {SSIM_WINDOW}, got {(h, w)}")
        smap, cache = _ssim_stack(_stack(rendered), _stack(target), True)
        upstream = -lam / (6.0 * npix)
        sgrad = _ssim_stack_backward(cache, upstream, h, w)
        grad += np.moveaxis(sgrad, 0, 2)
        dmap = ((1.0 - smap) / 2.0).mean(axis=0)
        loss_map = (1.0 - lam) * l1m + lam * dmap
    else:
        loss_map = (1.0 - lam) * l1m

    scalar = float(loss_map.mean())
    return scalar, loss_map, grad


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; identical images
    report the 99 dB cap."""
    _check_pair(rendered, target)
    mse = float(np.mean((rendered - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP_DB)
