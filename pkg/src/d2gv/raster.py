"""Additive 2D Gaussian rasterizer with an analytic backward pass.

Images are ``(height, width, 3)`` float64 arrays in linear RGB. Pixel ``(px, py)``
of a grid rendered at ``raster_scale`` r samples the full-resolution point
``((px + 0.5) r, (py + 0.5) r)``. Every pixel is the plain sum of
``color_n * phi_n(x)`` over primitives, truncated beyond ``cutoff`` Mahalanobis
units; there is no alpha blending.

The forward pass walks 16x16 pixel tiles and, inside a tile, primitives in
index order, so each pixel is written by exactly one tile and always
accumulates in the same order. The backward pass is owned per primitive: each
primitive's gradient is a sum over its own bounding box in raster order. Both
are deterministic whatever the thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .gaussian import GaussianSet, _as_set

CUTOFF = 3.5
TILE = 16


@dataclass
class GradientBuffer:
    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_theta: np.ndarray
    d_color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 3)))

    @property
    def d_log_sx(self) -> np.ndarray:
        return self.d_log_scale[:, 0]

    @property
    def d_log_sy(self) -> np.ndarray:
        return self.d_log_scale[:, 1]

    def __len__(self) -> int:
        return len(self.d_mu)

    def as_dict(self) -> dict[str, np.ndarray]:
        """Same keys as :meth:`GaussianSet.params`."""
        return {"mu": self.d_mu, "log_scale": self.d_log_scale, "theta": self.d_theta, "color": self.d_color}

    def scatter(self, indices: np.ndarray, total: int) -> "GradientBuffer":
        """Embed gradients of a subset back into a buffer of ``total`` primitives."""
        out = GradientBuffer.zeros(total)
        out.d_mu[indices] = self.d_mu
        out.d_log_scale[indices] = self.d_log_scale
        out.d_theta[indices] = self.d_theta
        out.d_color[indices] = self.d_color
        return out


def output_shape(width: int, height: int, raster_scale: float) -> tuple[int, int]:
    """(height, width) of the grid covering the full-resolution frame at ``raster_scale``."""
    return math.ceil(height / raster_scale - 1e-9), math.ceil(width / raster_scale - 1e-9)


def _prepare(gs: GaussianSet, width: int, height: int, raster_scale: float, cutoff: float):
    cs, sn = np.cos(gs.theta), np.sin(gs.theta)
    ivx = np.exp(-2.0 * gs.log_scale[:, 0])
    ivy = np.exp(-2.0 * gs.log_scale[:, 1])
    vx, vy = 1.0 / ivx, 1.0 / ivy
    bbox = np.zeros((len(gs), 4), dtype=np.int64)
    if len(gs):
        if np.isfinite(cutoff):
            ex = cutoff * np.sqrt(cs * cs * vx + sn * sn * vy)
            ey = cutoff * np.sqrt(sn * sn * vx + cs * cs * vy)
            x0 = np.ceil((gs.mu[:, 0] - ex) / raster_scale - 0.5)
            x1 = np.floor((gs.mu[:, 0] + ex) / raster_scale - 0.5) + 1
            y0 = np.ceil((gs.mu[:, 1] - ey) / raster_scale - 0.5)
            y1 = np.floor((gs.mu[:, 1] + ey) / raster_scale - 0.5) + 1
            bbox[:, 0] = np.clip(x0, 0, width)
            bbox[:, 1] = np.clip(x1, 0, width)
            bbox[:, 2] = np.clip(y0, 0, height)
            bbox[:, 3] = np.clip(y1, 0, height)
        else:
            bbox[:, 1] = width
            bbox[:, 3] = height
    cut2 = cutoff * cutoff if np.isfinite(cutoff) else np.inf
    return cs, sn, ivx, ivy, bbox, cut2


@numba.njit(parallel=True, cache=True)
def _forward_kernel(out, mu, cs, sn, ivx, ivy, color, bbox, scale, cut2, tile):
    height, width = out.shape[0], out.shape[1]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n_prims = mu.shape[0]
    for t in numba.prange(ntx * nty):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width)
        ty1 = min(ty0 + tile, height)
        for n in range(n_prims):
            x0 = max(bbox[n, 0], tx0)
            x1 = min(bbox[n, 1], tx1)
            y0 = max(bbox[n, 2], ty0)
            y1 = min(bbox[n, 3], ty1)
            if x0 >= x1 or y0 >= y1:
                continue
            c = cs[n]
            s = sn[n]
            for py in range(y0, y1):
                dy = (py + 0.5) * scale - mu[n, 1]
                for px in range(x0, x1):
                    dx = (px + 0.5) * scale - mu[n, 0]
                    u1 = c * dx + s * dy
                    u2 = -s * dx + c * dy
                    q = u1 * u1 * ivx[n] + u2 * u2 * ivy[n]
                    if q <= cut2:
                        w = math.exp(-0.5 * q)
                        out[py, px, 0] += color[n, 0] * w
                        out[py, px, 1] += color[n, 1] * w
                        out[py, px, 2] += color[n, 2] * w


@numba.njit(parallel=True, cache=True)
def _backward_kernel(grads, loss_grad, mu, cs, sn, ivx, ivy, color, bbox, scale, cut2):
    # grads columns: d_mu_x, d_mu_y, d_log_sx, d_log_sy, d_theta, d_r, d_g, d_b
    n_prims = mu.shape[0]
    for n in numba.prange(n_prims):
        c = cs[n]
        s = sn[n]
        a = ivx[n]
        b = ivy[n]
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        g3 = 0.0
        g4 = 0.0
        g5 = 0.0
        g6 = 0.0
        g7 = 0.0
        for py in range(bbox[n, 2], bbox[n, 3]):
            dy = (py + 0.5) * scale - mu[n, 1]
            for px in range(bbox[n, 0], bbox[n, 1]):
                dx = (px + 0.5) * scale - mu[n, 0]
                u1 = c * dx + s * dy
                u2 = -s * dx + c * dy
                q = u1 * u1 * a + u2 * u2 * b
                if q > cut2:
                    continue
                w = math.exp(-0.5 * q)
                lr = loss_grad[py, px, 0]
                lg = loss_grad[py, px, 1]
                lb = loss_grad[py, px, 2]
                g5 += lr * w
                g6 += lg * w
                g7 += lb * w
                # dL/dq = -(w / 2) * sum_ch dL/dpix * color
                gq = -0.5 * w * (lr * color[n, 0] + lg * color[n, 1] + lb * color[n, 2])
                if gq == 0.0:
                    continue
                k1 = 2.0 * u1 * a
                k2 = 2.0 * u2 * b
                g0 += gq * (-k1 * c + k2 * s)
                g1 += gq * (-k1 * s - k2 * c)
                g2 += gq * (-2.0 * u1 * u1 * a)
                g3 += gq * (-2.0 * u2 * u2 * b)
                g4 += gq * (2.0 * u1 * u2 * (a - b))
        grads[n, 0] = g0
        grads[n, 1] = g1
        grads[n, 2] = g2
        grads[n, 3] = g3
        grads[n, 4] = g4
        grads[n, 5] = g5
        grads[n, 6] = g6
        grads[n, 7] = g7


def _check_dims(width, height):
    if int(width) <= 0 or int(height) <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")


def render(gaussians, width: int, height: int, raster_scale: float = 1.0,
           cutoff: float = CUTOFF) -> np.ndarray:
    """Render a primitive set onto a ``height x width`` grid with pixel spacing ``raster_scale``."""
    _check_dims(width, height)
    if raster_scale <= 0:
        raise ValueError("raster_scale must be positive")
    gs = _as_set(gaussians)
    out = np.zeros((int(height), int(width), 3))
    if len(gs) == 0:
        return out
    cs, sn, ivx, ivy, bbox, cut2 = _prepare(gs, width, height, raster_scale, cutoff)
    _forward_kernel(out, gs.mu, cs, sn, ivx, ivy, gs.color, bbox, float(raster_scale), cut2, TILE)
    return out


def render_backward(gaussians, loss_grad: np.ndarray, width: int, height: int,
                    raster_scale: float = 1.0, cutoff: float = CUTOFF) -> GradientBuffer:
    """Gradients of a scalar loss w.r.t. every primitive, given dL/dpixel."""
    _check_dims(width, height)
    loss_grad = np.ascontiguousarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (int(height), int(width), 3):
        raise ValueError(f"loss_grad shape {loss_grad.shape} does not match {(height, width, 3)}")
    gs = _as_set(gaussians)
    grads = np.zeros((len(gs), 8))
    if len(gs):
        cs, sn, ivx, ivy, bbox, cut2 = _prepare(gs, width, height, raster_scale, cutoff)
        _backward_kernel(grads, loss_grad, gs.mu, cs, sn, ivx, ivy, gs.color, bbox,
                         float(raster_scale), cut2)
    return GradientBuffer(grads[:, 0:2].copy(), grads[:, 2:4].copy(), grads[:, 4].copy(),
                          grads[:, 5:8].copy())


def render_at_scale(gaussians, width: int, height: int, r: float, cutoff: float = CUTOFF) -> np.ndarray:
    """Render a (pre-selected) subset of a ``width x height`` frame downsampled by ``r``."""
    if r < 1:
        raise ValueError("scale factor r must be >= 1")
    h, w = output_shape(width, height, r)
    return render(gaussians, w, h, r, cutoff)


def _area_weights(n_in: int, n_out: int, r: float) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix averaging the input cells each output cell covers."""
    edges = np.arange(n_out + 1) * r
    lo = np.minimum(edges[:-1], n_in)
    hi = np.minimum(edges[1:], n_in)
    cells = np.arange(n_in)
    overlap = np.clip(np.minimum(hi[:, None], cells[None, :] + 1) - np.maximum(lo[:, None], cells[None, :]), 0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def area_downsample(image: np.ndarray, r: float) -> np.ndarray:
    """Box-filter downsample by ``r``; output is ``ceil(H / r) x ceil(W / r)``.

    Partial cells at the right/bottom edge average only the pixels they cover.
    """
    if r == 1:
        return np.array(image, dtype=np.float64)
    height, width = image.shape[:2]
    h, w = output_shape(width, height, r)
    ay = _area_weights(height, h, r)
    ax = _area_weights(width, w, r)
    rows = np.tensordot(ay, np.asarray(image, dtype=np.float64), axes=(1, 0))
    return np.einsum("jw,iwc->ijc", ax, rows)
