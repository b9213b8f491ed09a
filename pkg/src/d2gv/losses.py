"""Differentiable reconstruction loss: MSE + lambda_s * (1 - SSIM).

SSIM here uses an 11x11 Gaussian window (sigma 1.5) applied as a normalised
zero-padded filter, ``A x = (K * x) / (K * 1)``, so the statistics stay
unbiased at borders, every image size down to 1x1 works, and the adjoint is
simply ``A^T y = K * (y / (K * 1))``.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

C1 = 0.01 ** 2
C2 = 0.03 ** 2
WINDOW = 11
SIGMA = 1.5


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_WIN = gaussian_window()


def _blur(x: np.ndarray) -> np.ndarray:
    y = correlate1d(x, _WIN, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WIN, axis=1, mode="constant", cval=0.0)


class _Filter:
    def __init__(self, shape):
        self.norm = _blur(np.ones(shape[:2] + (1,) * (len(shape) - 2)))

    def __call__(self, x):
        return _blur(x) / self.norm

    def adjoint(self, y):
        return _blur(y / self.norm)


def ssim_with_grad(pred: np.ndarray, truth: np.ndarray, need_grad: bool = True):
    """Mean SSIM over pixels and channels and, optionally, dSSIM/dpred."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    A = _Filter(x.shape)
    mx, my = A(x), A(y)
    exx, eyy, exy = A(x * x), A(y * y), A(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2.0 * mx * my + C1
    a2 = 2.0 * cxy + C2
    b1 = mx * mx + my * my + C1
    b2 = vx + vy + C2
    smap = (a1 * a2) / (b1 * b2)
    val = float(smap.mean())
    if not need_grad:
        return val, None
    g = 1.0 / smap.size
    d_mx = 2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * smap * (1.0 / b1 - 1.0 / b2)
    d_exx = -smap / b2
    d_exy = 2.0 * a1 / (b1 * b2)
    grad = A.adjoint(g * d_mx) + 2.0 * x * A.adjoint(g * d_exx) + y * A.adjoint(g * d_exy)
    return val, grad


def mse_with_grad(pred: np.ndarray, truth: np.ndarray):
    diff = pred - truth
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def reconstruction_loss(pred: np.ndarray, truth: np.ndarray, lambda_s: float = 0.3,
                        use_l2: bool = True, use_ssim: bool = True):
    """Loss value, dL/dpred and the SSIM value for one rendered frame.

    ``use_l2`` / ``use_ssim`` switch the two terms off for the loss ablations.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    loss = 0.0
    grad = np.zeros_like(pred)
    if use_l2:
        l2, g = mse_with_grad(pred, truth)
        loss += l2
        grad += g
    s, gs = ssim_with_grad(pred, truth, need_grad=use_ssim)
    if use_ssim:
        loss += lambda_s * (1.0 - s)
        grad -= lambda_s * gs
    return loss, grad, s


def multiscale_loss(pred: np.ndarray, truth: np.ndarray, lambda_s: float = 0.3):
    """L2 + lambda_s * (1 - SSIM) at one scale; returns ``(loss, dL/dpred)``."""
    loss, grad, _ = reconstruction_loss(pred, truth, lambda_s)
    return loss, grad
