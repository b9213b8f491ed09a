"""A trained Group of Pictures and the decode path (deform, group, prune, render)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .deformation import DeformationNet, deform
from .gaussian import GaussianSet, canonical_theta
from .grouping import DEFAULT_BETA, group_for_scale
from .pruning import (DEFAULT_K_NEIGHBORS, DEFAULT_LAMBDA, PruneRanking, prune_to_budget,
                      rank_primitives)
from .raster import render_at_scale


@dataclass
class RenderRequest:
    t: float
    scale: float = 1.0
    budget: int | None = None
    keep_ratio: float | None = None
    grouping: bool = True
    beta: float = DEFAULT_BETA


@dataclass
class GopModel:
    canonical: GaussianSet
    net: DeformationNet
    timestamps: np.ndarray
    width: int
    height: int
    first_frame: int = 0
    _ranking: PruneRanking | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)

    @property
    def n_prims(self) -> int:
        return len(self.canonical)

    def param_count(self) -> int:
        """Per-primitive count of 8 (centre, scales-as-3, colour) plus the network weights."""
        return param_count(self)

    def copy(self) -> "GopModel":
        return GopModel(self.canonical.copy(), self.net.copy(), self.timestamps.copy(), self.width,
                        self.height, self.first_frame)

    def equals(self, other: "GopModel") -> bool:
        return (self.width, self.height, self.first_frame) == (other.width, other.height, other.first_frame) \
            and np.array_equal(self.timestamps, other.timestamps) \
            and self.canonical.equals(other.canonical) and self.net.equals(other.net)

    # -- progressive order ---------------------------------------------------

    def ranking(self, k_neighbors: int = DEFAULT_K_NEIGHBORS, lam: float = DEFAULT_LAMBDA) -> PruneRanking:
        if self._ranking is None:
            self._ranking = rank_primitives(self.canonical, k_neighbors, lam)
        return self._ranking

    def reorder_by_ranking(self, k_neighbors: int = DEFAULT_K_NEIGHBORS,
                           lam: float = DEFAULT_LAMBDA) -> np.ndarray:
        """Permute the canonical set into transmission order; returns the permutation used."""
        order = rank_primitives(self.canonical, k_neighbors, lam).order
        self.canonical = self.canonical[order]
        self.mark_stored_order()
        return order

    def mark_stored_order(self) -> None:
        """Declare the current primitive order to be the transmission order."""
        n = self.n_prims
        self._ranking = PruneRanking(np.ones(n), np.zeros(n), np.arange(n, dtype=np.int64))

    def prefix(self, k: int) -> "GopModel":
        """The model restricted to the first ``k`` primitives of its stored order."""
        m = GopModel(self.canonical[: max(0, k)], self.net, self.timestamps, self.width, self.height,
                     self.first_frame)
        m.mark_stored_order()
        return m

    def finalize(self, k_neighbors: int = DEFAULT_K_NEIGHBORS, lam: float = DEFAULT_LAMBDA) -> None:
        """Round to what the container stores (f32 values, theta in [0, pi)) and sort by ranking."""
        gs = self.canonical
        gs.theta[:] = canonical_theta(gs.theta)
        for arr in list(gs.params().values()) + list(self.net.params().values()):
            arr[...] = arr.astype(np.float32)
        gs.theta[:] = np.where(gs.theta >= np.float32(np.pi), 0.0, gs.theta)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float32).astype(np.float64)
        self.reorder_by_ranking(k_neighbors, lam)

    # -- decoding ------------------------------------------------------------

    def frame_time(self, k: int) -> float:
        return float(self.timestamps[k])

    def deformed(self, t: float) -> GaussianSet:
        return deform(self.net, self.canonical, t)

    def select(self, scale: float = 1.0, budget: int | None = None, keep_ratio: float | None = None,
               grouping: bool = True, beta: float = DEFAULT_BETA) -> np.ndarray:
        """Sorted indices decoded at ``scale`` under an optional primitive budget."""
        if grouping:
            group = group_for_scale(self.canonical, scale, beta).indices
        else:
            group = np.arange(self.n_prims)
        if budget is None and keep_ratio is None:
            return group
        return prune_to_budget(group, self.ranking(), budget=budget, keep_ratio=keep_ratio)

    def render(self, t: float, scale: float = 1.0, budget: int | None = None,
               keep_ratio: float | None = None, grouping: bool = True,
               beta: float = DEFAULT_BETA) -> np.ndarray:
        idx = self.select(scale, budget, keep_ratio, grouping, beta)
        sub = self.canonical[idx]
        return render_at_scale(deform(self.net, sub, t), self.width, self.height, scale)

    def render_request(self, req: RenderRequest) -> np.ndarray:
        return self.render(req.t, req.scale, req.budget, req.keep_ratio, req.grouping, req.beta)


def param_count(model) -> int:
    """N_prim * 8 + P_MLP for one GoP, or the sum over a list of GoPs."""
    if isinstance(model, (list, tuple)):
        return int(sum(param_count(m) for m in model))
    return 8 * model.n_prims + model.net.param_count()


def gop_bounds(total_frames: int, gop_size: int) -> list[tuple[int, int]]:
    """[start, stop) frame ranges of consecutive GoPs; the last may be short."""
    if total_frames < 1 or gop_size < 1:
        raise ValueError("need at least one frame and a positive GoP size")
    n = math.ceil(total_frames / gop_size)
    return [(g * gop_size, min((g + 1) * gop_size, total_frames)) for g in range(n)]


def uniform_timestamps(n_frames: int) -> np.ndarray:
    """Frame k of an n-frame GoP sits at k / (n - 1); a single frame sits at 0."""
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1)


def locate_time(models: list[GopModel], frame: float) -> tuple[int, float]:
    """Map a global frame position (integer or fractional) to (GoP index, local t)."""
    for g, m in enumerate(models):
        last = m.first_frame + m.n_frames - 1
        nxt = models[g + 1].first_frame if g + 1 < len(models) else math.inf
        if frame < nxt or g == len(models) - 1:
            if m.n_frames == 1:
                return g, 0.0
            local = (min(max(frame, m.first_frame), last) - m.first_frame) / (m.n_frames - 1)
            lo, hi = float(m.timestamps[0]), float(m.timestamps[-1])
            return g, lo + local * (hi - lo)
    raise ValueError("no GoPs")
