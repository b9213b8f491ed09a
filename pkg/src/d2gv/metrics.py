"""Evaluation metrics: PSNR, SSIM / MS-SSIM, bits per pixel and Bjontegaard deltas."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import correlate1d

from .losses import C1, C2, gaussian_window

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give ``inf``."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def psnr_capped(a, b, peak: float = 1.0) -> float:
    """PSNR with identical frames reported as :data:`PSNR_CAP` (for CSV output)."""
    return min(psnr(a, b, peak), PSNR_CAP)


def _valid_blur(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    y = correlate1d(x, win, axis=0, mode="constant")
    y = correlate1d(y, win, axis=1, mode="constant")
    h = len(win) // 2
    return y[h:x.shape[0] - h, h:x.shape[1] - h]


def _ssim_terms(x: np.ndarray, y: np.ndarray, win: np.ndarray):
    """Per-channel mean SSIM and mean contrast-structure term, 'valid' window positions."""
    mx, my = _valid_blur(x, win), _valid_blur(y, win)
    vx = _valid_blur(x * x, win) - mx * mx
    vy = _valid_blur(y * y, win) - my * my
    cxy = _valid_blur(x * y, win) - mx * my
    cs = (2.0 * cxy + C2) / (vx + vy + C2)
    lum = (2.0 * mx * my + C1) / (mx * mx + my * my + C1)
    axes = (0, 1)
    return (lum * cs).mean(axis=axes), cs.mean(axis=axes)


def ssim(a, b) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, data range 1), channel-averaged.

    Images smaller than the window use a window clipped to the image size.
    """
    a, b = _check(a, b)
    a3, b3 = np.atleast_3d(a), np.atleast_3d(b)
    win = _window_for(min(a3.shape[:2]))
    s, _ = _ssim_terms(a3, b3, win)
    return float(np.mean(s))


def _window_for(short_side: int) -> np.ndarray:
    size = 11 if short_side >= 11 else (short_side if short_side % 2 else short_side - 1)
    return gaussian_window(max(size, 1))


def ms_ssim_levels(short_side: int) -> int:
    """Pyramid depth: 5 levels need a short side of 11 * 2^4 = 176 pixels."""
    levels = 5
    while levels > 1 and short_side < 11 * 2 ** (levels - 1):
        levels -= 1
    return levels


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b) -> float:
    """Multi-scale SSIM with the standard five weights.

    Shallower pyramids (small images) use the leading weights renormalised to
    sum to one. Computed per channel, then averaged. Negative contrast terms
    are clamped at zero before exponentiation.
    """
    a, b = _check(a, b)
    x, y = np.atleast_3d(a), np.atleast_3d(b)
    levels = ms_ssim_levels(min(x.shape[:2]))
    w = np.asarray(MS_SSIM_WEIGHTS[:levels])
    w = w / w.sum()
    win = _window_for(min(x.shape[:2]))
    vals = []
    for lev in range(levels):
        s, cs = _ssim_terms(x, y, win)
        vals.append(s if lev == levels - 1 else cs)
        if lev < levels - 1:
            x, y = _avg_pool2(x), _avg_pool2(y)
    stack = np.maximum(np.stack(vals), 0.0)        # (levels, channels)
    per_channel = np.prod(stack ** w[:, None], axis=0)
    return float(np.mean(per_channel))


# ---------------------------------------------------------------------------
# rate accounting


def bpp(num_bytes: float, width: int, height: int, frames: int) -> float:
    """Bits per pixel over the whole clip."""
    return 8.0 * num_bytes / (width * height * frames)


def bpp_from_params(param_count: int, width: int, height: int, frames: int, bytes_per_param: int = 4) -> float:
    return bpp(param_count * bytes_per_param, width, height, frames)


# ---------------------------------------------------------------------------
# Bjontegaard


@dataclass
class RdCurve:
    rate: np.ndarray
    quality: np.ndarray

    def __post_init__(self):
        rate = np.asarray(self.rate, dtype=np.float64)
        quality = np.asarray(self.quality, dtype=np.float64)
        order = np.argsort(rate)
        self.rate, self.quality = rate[order], quality[order]
        if len(self.rate) < 2:
            raise ValueError("an RD curve needs at least two points")
        if np.any(np.diff(self.rate) <= 0) or np.any(self.rate <= 0):
            raise ValueError("rates must be positive and strictly increasing")
        if not np.all(np.isfinite(self.quality)):
            raise ValueError("qualities must be finite")

    @classmethod
    def from_csv(cls, path, rate_col: str = "bpp", quality_col: str = "psnr") -> "RdCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r[rate_col]) for r in rows], [float(r[quality_col]) for r in rows])


def _integral(x: np.ndarray, y: np.ndarray, lo: float, hi: float) -> float:
    order = np.argsort(x)
    return float(PchipInterpolator(x[order], y[order]).integrate(lo, hi))


def bd_metrics(test: RdCurve, anchor: RdCurve) -> tuple[float, float]:
    """(BD-rate in %, BD-PSNR in dB) of ``test`` relative to ``anchor``.

    Piecewise-cubic (PCHIP) interpolation in (log rate, quality), integrated
    over the overlapping interval. Negative BD-rate means ``test`` needs fewer
    bits for the same quality.
    """
    for c in (test, anchor):
        if len(c.rate) < 4:
            raise ValueError("Bjontegaard metrics need at least four points per curve")
    lt, la = np.log(test.rate), np.log(anchor.rate)

    lo, hi = max(lt.min(), la.min()), min(lt.max(), la.max())
    if hi <= lo:
        raise ValueError("rate ranges do not overlap")
    bd_psnr = (_integral(lt, test.quality, lo, hi) - _integral(la, anchor.quality, lo, hi)) / (hi - lo)

    qlo = max(test.quality.min(), anchor.quality.min())
    qhi = min(test.quality.max(), anchor.quality.max())
    if qhi <= qlo:
        raise ValueError("quality ranges do not overlap")
    for q in (test.quality, anchor.quality):
        if np.any(np.diff(np.sort(q)) == 0):
            raise ValueError("BD-rate needs distinct quality values")
    avg = (_integral(test.quality, lt, qlo, qhi) - _integral(anchor.quality, la, qlo, qhi)) / (qhi - qlo)
    bd_rate = (math.exp(avg) - 1.0) * 100.0
    return bd_rate, bd_psnr
