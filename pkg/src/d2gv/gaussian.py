"""2D Gaussian primitives and the closed-form integrals built on them.

A primitive is a kernel ``phi(x) = exp(-1/2 (x - mu)^T Sigma^-1 (x - mu))`` with
``Sigma = R(theta) diag(sx^2, sy^2) R(theta)^T``. Positions and scales are in
full-resolution pixel units; scales are stored as logs so they stay positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Gaussian2D:
    mu: np.ndarray
    log_sx: float
    log_sy: float
    theta: float
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.log_sx = float(self.log_sx)
        self.log_sy = float(self.log_sy)
        self.theta = float(self.theta)

    @classmethod
    def from_scales(cls, mu, sx, sy, theta=0.0, color=(0.0, 0.0, 0.0)) -> "Gaussian2D":
        return cls(mu, math.log(sx), math.log(sy), theta, color)

    @property
    def sx(self) -> float:
        return math.exp(self.log_sx)

    @property
    def sy(self) -> float:
        return math.exp(self.log_sy)

    def canonical_theta(self) -> float:
        """Rotation reduced to [0, pi); the covariance is pi-periodic in theta."""
        return canonical_theta(self.theta)


def canonical_theta(theta):
    return np.mod(theta, np.pi)


class GaussianSet:
    """Structure-of-arrays container for N primitives.

    ``mu`` (N, 2), ``log_scale`` (N, 2), ``theta`` (N,), ``color`` (N, 3).
    Indexing with an int gives a :class:`Gaussian2D`; with a slice, mask or
    index array gives a new set (copied).
    """

    __slots__ = ("mu", "log_scale", "theta", "color")

    def __init__(self, mu, log_scale, theta, color):
        self.mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(-1, 2)
        self.log_scale = np.ascontiguousarray(log_scale, dtype=np.float64).reshape(-1, 2)
        self.theta = np.ascontiguousarray(theta, dtype=np.float64).reshape(-1)
        self.color = np.ascontiguousarray(color, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        if not (len(self.log_scale) == len(self.theta) == len(self.color) == n):
            raise ValueError("inconsistent primitive counts")

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, gaussians) -> "GaussianSet":
        if isinstance(gaussians, GaussianSet):
            return gaussians
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.array([[g.log_sx, g.log_sy] for g in gaussians]),
            np.array([g.theta for g in gaussians]),
            np.stack([g.color for g in gaussians]),
        )

    def to_list(self) -> list[Gaussian2D]:
        return [self[i] for i in range(len(self))]

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Gaussian2D(
                self.mu[idx].copy(), self.log_scale[idx, 0], self.log_scale[idx, 1],
                self.theta[idx], self.color[idx].copy(),
            )
        return GaussianSet(self.mu[idx], self.log_scale[idx], self.theta[idx], self.color[idx])

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.mu.copy(), self.log_scale.copy(), self.theta.copy(), self.color.copy())

    @staticmethod
    def concat(a: "GaussianSet", b: "GaussianSet") -> "GaussianSet":
        return GaussianSet(
            np.concatenate([a.mu, b.mu]),
            np.concatenate([a.log_scale, b.log_scale]),
            np.concatenate([a.theta, b.theta]),
            np.concatenate([a.color, b.color]),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def params(self) -> dict[str, np.ndarray]:
        """Live views of the trainable arrays, keyed by name."""
        return {"mu": self.mu, "log_scale": self.log_scale, "theta": self.theta, "color": self.color}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.params().values())

    def equals(self, other: "GaussianSet") -> bool:
        """Bitwise equality of every field."""
        return len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values())
        )


def _as_set(gaussians) -> GaussianSet:
    if isinstance(gaussians, GaussianSet):
        return gaussians
    if isinstance(gaussians, Gaussian2D):
        return GaussianSet.from_list([gaussians])
    return GaussianSet.from_list(gaussians)


# ---------------------------------------------------------------------------
# covariance algebra


def covariance(g: Gaussian2D) -> np.ndarray:
    """R(theta) diag(sx^2, sy^2) R(theta)^T as a 2x2 array."""
    return covariances(_as_set(g))[0]


def covariances(gs: GaussianSet) -> np.ndarray:
    """Stacked (N, 2, 2) covariances."""
    c, s = np.cos(gs.theta), np.sin(gs.theta)
    vx, vy = np.exp(2.0 * gs.log_scale[:, 0]), np.exp(2.0 * gs.log_scale[:, 1])
    out = np.empty((len(gs), 2, 2))
    out[:, 0, 0] = c * c * vx + s * s * vy
    out[:, 1, 1] = s * s * vx + c * c * vy
    out[:, 0, 1] = out[:, 1, 0] = c * s * (vx - vy)
    return out


def kernel_eval(g: Gaussian2D, x) -> float:
    d = np.asarray(x, dtype=np.float64) - g.mu
    c, s = math.cos(g.theta), math.sin(g.theta)
    u1 = c * d[0] + s * d[1]
    u2 = -s * d[0] + c * d[1]
    q = (u1 / g.sx) ** 2 + (u2 / g.sy) ** 2
    return math.exp(-0.5 * q)


def footprint_sigma_max(g, raster_scale: float = 1.0):
    """sqrt(lambda_max) of the covariance expressed on a grid of spacing ``raster_scale``.

    Accepts a single primitive (returns float) or a :class:`GaussianSet`
    (returns an (N,) array). The rotation does not change the eigenvalues, so
    this is just ``max(sx, sy) / raster_scale``.
    """
    if raster_scale <= 0:
        raise ValueError("raster_scale must be positive")
    if isinstance(g, Gaussian2D):
        return math.exp(max(g.log_sx, g.log_sy)) / raster_scale
    gs = _as_set(g)
    return np.exp(gs.log_scale.max(axis=1)) / raster_scale


def footprint_sigma_min(g, raster_scale: float = 1.0):
    if isinstance(g, Gaussian2D):
        return math.exp(min(g.log_sx, g.log_sy)) / raster_scale
    gs = _as_set(g)
    return np.exp(gs.log_scale.min(axis=1)) / raster_scale


def l2_norm_sq(g):
    """Squared L2 norm of the kernel, pi * sx * sy."""
    if isinstance(g, Gaussian2D):
        return math.pi * math.exp(g.log_sx + g.log_sy)
    gs = _as_set(g)
    return math.pi * np.exp(gs.log_scale.sum(axis=1))


def _pair_terms(cov_i, cov_j, d):
    """Shared pieces of the Gram / correlation closed forms (broadcasting over leading axes)."""
    sa = cov_i[..., 0, 0] + cov_j[..., 0, 0]
    sb = cov_i[..., 0, 1] + cov_j[..., 0, 1]
    sc = cov_i[..., 1, 1] + cov_j[..., 1, 1]
    det_sum = sa * sc - sb * sb
    # d^T (Si + Sj)^-1 d via the 2x2 adjugate
    maha = (sc * d[..., 0] ** 2 - 2.0 * sb * d[..., 0] * d[..., 1] + sa * d[..., 1] ** 2) / det_sum
    return det_sum, np.exp(-0.5 * maha)


def _det(cov):
    return cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]


def gram_entry(gi: Gaussian2D, gj: Gaussian2D) -> float:
    """<phi_i, phi_j> over R^2.

    ``2 pi / sqrt(det(Si^-1 + Sj^-1)) * exp(-1/2 d^T (Si + Sj)^-1 d)``; since
    ``det(Si^-1 + Sj^-1) = det(Si + Sj) / (det Si det Sj)`` the prefactor is
    evaluated as ``2 pi sqrt(det Si det Sj / det(Si + Sj))``.
    """
    ci, cj = covariance(gi), covariance(gj)
    det_sum, expo = _pair_terms(ci, cj, gi.mu - gj.mu)
    si_sj = math.exp(gi.log_sx + gi.log_sy + gj.log_sx + gj.log_sy)
    return float(2.0 * math.pi * si_sj / math.sqrt(det_sum) * expo)


def correlation_entry(gi: Gaussian2D, gj: Gaussian2D) -> float:
    """Normalised inner product G_ij / sqrt(G_ii G_jj), in (0, 1]."""
    ci, cj = covariance(gi), covariance(gj)
    det_sum, expo = _pair_terms(ci, cj, gi.mu - gj.mu)
    # (det Si det Sj)^(1/4) = sqrt(sx_i sy_i sx_j sy_j)
    root = math.exp(0.5 * (gi.log_sx + gi.log_sy + gj.log_sx + gj.log_sy))
    return float(2.0 * root / math.sqrt(det_sum) * expo)


def gram_matrix(gs: GaussianSet) -> np.ndarray:
    """Dense (N, N) Gram matrix of the set, closed form."""
    gs = _as_set(gs)
    cov = covariances(gs)
    d = gs.mu[:, None, :] - gs.mu[None, :, :]
    det_sum, expo = _pair_terms(cov[:, None], cov[None, :], d)
    area = np.exp(gs.log_scale.sum(axis=1))
    G = 2.0 * np.pi * np.outer(area, area) / np.sqrt(det_sum) * expo
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, np.pi * area)
    return G


def correlation_pairs(gs: GaussianSet, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """R_ij for paired index arrays (used by the kNN ranking)."""
    cov = covariances(gs)
    det_sum, expo = _pair_terms(cov[i], cov[j], gs.mu[i] - gs.mu[j])
    root = np.exp(0.5 * (gs.log_scale[i].sum(axis=-1) + gs.log_scale[j].sum(axis=-1)))
    return 2.0 * root / np.sqrt(det_sum) * expo
