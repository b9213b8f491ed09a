"""Small synthetic clips used for smoke tests and calibration."""

from __future__ import annotations

import numpy as np


def blob_gop(frames: int = 8, width: int = 64, height: int = 64, seed: int = 0) -> np.ndarray:
    """Soft blobs translating and changing colour over a smooth background.

    Returns a (T, H, W, 3) float array in [0, 1]. Blob motion over the clip
    is a fixed fraction of the frame size, so ``frames`` only changes the
    temporal sampling.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    bg = np.stack([0.15 + 0.25 * xs / width, 0.2 + 0.2 * ys / height,
                   np.full_like(xs, 0.3)], axis=-1)
    n_blobs = 3
    start = rng.uniform([0.2 * width, 0.2 * height], [0.5 * width, 0.8 * height], size=(n_blobs, 2))
    shift = rng.uniform([0.15 * width, -0.15 * height], [0.3 * width, 0.15 * height], size=(n_blobs, 2))
    radius = rng.uniform(0.08, 0.14, size=n_blobs) * min(width, height)
    c0 = rng.uniform(0.2, 0.9, size=(n_blobs, 3))
    c1 = rng.uniform(0.2, 0.9, size=(n_blobs, 3))
    out = np.empty((frames, height, width, 3))
    for k in range(frames):
        a = k / max(frames - 1, 1)
        img = bg.copy()
        for b in range(n_blobs):
            cx, cy = start[b] + a * shift[b]
            w = np.exp(-0.5 * ((xs - cx) ** 2 + (ys - cy) ** 2) / radius[b] ** 2)[..., None]
            img = img * (1 - w) + w * ((1 - a) * c0[b] + a * c1[b])
        out[k] = img
    return np.clip(out, 0.0, 1.0)
