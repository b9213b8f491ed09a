"""Nyquist-style selection of the primitives that survive downsampling by r."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .gaussian import _as_set, footprint_sigma_max

DEFAULT_EPSILON = 0.01


class EmptyGroupWarning(UserWarning):
    pass


def nyquist_beta(epsilon: float) -> float:
    """Smallest sigma / grid-spacing ratio keeping the kernel's spectrum at or below
    ``epsilon`` (relative to DC) at the grid's Nyquist frequency: sqrt(2 ln(1/eps)) / pi."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    return math.sqrt(2.0 * math.log(1.0 / epsilon)) / math.pi


DEFAULT_BETA = nyquist_beta(DEFAULT_EPSILON)


@dataclass(frozen=True)
class ScaleGroup:
    scale: float
    indices: np.ndarray
    beta: float

    def __len__(self) -> int:
        return len(self.indices)


def group_for_scale(canonical, r: float, beta: float = DEFAULT_BETA) -> ScaleGroup:
    """Indices (sorted) of primitives whose footprint sigma_max is at least ``beta * r``.

    An empty group is legal; it renders a black frame and raises an
    :class:`EmptyGroupWarning`.
    """
    if r < 1:
        raise ValueError("scale r must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    gs = _as_set(canonical)
    sig = footprint_sigma_max(gs, 1.0) if len(gs) else np.zeros(0)
    idx = np.flatnonzero(sig >= beta * r)
    if len(idx) == 0:
        warnings.warn(f"no primitive survives grouping at r={r}, beta={beta:.4f}", EmptyGroupWarning,
                      stacklevel=2)
    return ScaleGroup(float(r), idx, float(beta))


def antialias_margin(g, r: float) -> float:
    """Relative spectral magnitude exp(-sigma_min^2 omega_N^2 / 2) at omega_N = pi / r.

    This is the worst (narrowest) axis of the kernel; see :func:`is_alias_free`.
    """
    sig = math.exp(min(g.log_sx, g.log_sy))
    omega = math.pi / r
    return math.exp(-0.5 * sig * sig * omega * omega)


def is_alias_free(g, r: float, epsilon: float) -> bool:
    return antialias_margin(g, r) <= epsilon
