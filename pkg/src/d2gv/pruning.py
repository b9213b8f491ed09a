"""D-optimal subset selection over the primitives' kernels.

Selecting K of N primitives is posed as maximising log det G[S], with G the
Gram matrix of the kernels. Writing G = D R D splits the objective into a
per-primitive coverage term (log G_nn) and an overlap term log det R[S]; the
overlap term is approximated by -1/2 sum R_ij^2, which gives a one-shot score

    score_n = sx_n * sy_n * exp(-lambda * rho_n),   rho_n = sum_{j in kNN(n)} R_nj^2

whose descending order is the progressive transmission order. Exact
(enumeration) and greedy selectors are kept as references.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .gaussian import GaussianSet, _as_set, correlation_pairs, gram_matrix

DEFAULT_K_NEIGHBORS = 8
DEFAULT_LAMBDA = 3.0
BRUTE_FORCE_MAX_N = 20


class SingularSubsetError(ValueError):
    """G[S] is singular or indefinite, usually because S holds duplicate primitives."""


class SurrogateNotApplicable(ValueError):
    """||R[S] - I||_2 >= 1, so the quadratic overlap surrogate has no bound."""


class BudgetWarning(UserWarning):
    pass


@dataclass
class GramMatrix:
    G: np.ndarray
    D: np.ndarray   # sqrt of the diagonal
    R: np.ndarray

    @classmethod
    def from_array(cls, G: np.ndarray) -> "GramMatrix":
        G = np.asarray(G, dtype=np.float64)
        D = np.sqrt(np.diag(G))
        R = G / np.outer(D, D)
        np.fill_diagonal(R, 1.0)
        return cls(G, D, R)

    def __len__(self) -> int:
        return len(self.G)


def _as_array(G) -> np.ndarray:
    return G.G if isinstance(G, GramMatrix) else np.asarray(G, dtype=np.float64)


def build_gram(gaussians) -> GramMatrix:
    gs = _as_set(gaussians)
    if len(gs) == 0:
        raise ValueError("need at least one primitive")
    return GramMatrix.from_array(gram_matrix(gs))


def empirical_gram(gaussians, xs: np.ndarray, ys: np.ndarray) -> GramMatrix:
    """Pixel-sum Gram matrix sum_t Phi_t^T Phi_t, scaled by the cell area.

    ``gaussians`` is one set or a sequence of sets (one per timestamp, same
    primitive count); ``xs``/``ys`` are uniformly spaced sample coordinates.
    No truncation is applied, so this converges to :func:`build_gram` as the
    grid is refined and enlarged.
    """
    sets = [gaussians] if isinstance(gaussians, GaussianSet) else list(gaussians)
    sets = [_as_set(s) for s in sets]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    n = len(sets[0])
    G = np.zeros((n, n))
    for gs in sets:
        c, s = np.cos(gs.theta), np.sin(gs.theta)
        ivx, ivy = np.exp(-2.0 * gs.log_scale[:, 0]), np.exp(-2.0 * gs.log_scale[:, 1])
        d = pts[:, None, :] - gs.mu[None, :, :]
        u1 = c * d[..., 0] + s * d[..., 1]
        u2 = -s * d[..., 0] + c * d[..., 1]
        phi = np.exp(-0.5 * (u1 * u1 * ivx + u2 * u2 * ivy))
        G += phi.T @ phi
    return GramMatrix.from_array(G * cell)


# ---------------------------------------------------------------------------
# exact objective and reference selectors


def logdet_subset(G, S) -> float:
    """log det G[S] via Cholesky; raises :class:`SingularSubsetError` if G[S] is not PD."""
    A = _as_array(G)
    S = np.asarray(list(S), dtype=np.int64)
    if len(S) == 0:
        raise ValueError("subset must be non-empty")
    sub = A[np.ix_(S, S)]
    try:
        L = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError as exc:
        raise SingularSubsetError(f"G[S] not positive definite for S={S.tolist()}") from exc
    piv = np.diag(L)
    if np.min(piv * piv) <= 1e-13 * np.max(np.diag(sub)):
        raise SingularSubsetError(f"G[S] numerically singular for S={S.tolist()}")
    return float(2.0 * np.sum(np.log(piv)))


def _check_budget(n: int, K: int):
    if K < 1 or K > n:
        raise ValueError(f"budget K={K} must lie in [1, {n}]")


def brute_force_dopt(G, K: int) -> tuple[int, ...]:
    """Exact arg max of log det G[S] over all K-subsets (lexicographically first on ties)."""
    A = _as_array(G)
    n = len(A)
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"enumeration limited to N <= {BRUTE_FORCE_MAX_N}, got {n}")
    _check_budget(n, K)
    best, best_val = None, -math.inf
    for S in itertools.combinations(range(n), K):
        try:
            val = logdet_subset(A, S)
        except SingularSubsetError:
            continue
        if val > best_val:
            best, best_val = S, val
    if best is None:
        raise SingularSubsetError("every K-subset is singular")
    return best


def greedy_dopt(G, K: int) -> tuple[int, ...]:
    """Greedy maximum-marginal-gain selection.

    Uses the incremental Cholesky update: the gain of adding j to S is
    log of its residual variance given S. Candidates whose residual vanishes
    (duplicates of selected primitives) are never picked while others remain.
    """
    A = _as_array(G)
    n = len(A)
    _check_budget(n, K)
    resid = np.diag(A).copy()
    scale = resid.copy()
    C = np.zeros((K, n))
    chosen: list[int] = []
    for m in range(K):
        gain = np.full(n, -np.inf)
        ok = resid > 1e-12 * scale
        gain[ok] = np.log(resid[ok])
        gain[chosen] = -np.inf
        j = int(np.argmax(gain))
        if not np.isfinite(gain[j]):
            raise SingularSubsetError("no candidate increases the determinant")
        chosen.append(j)
        e = (A[j] - C[:m, j] @ C[:m]) / math.sqrt(resid[j])
        C[m] = e
        resid = resid - e * e
    return tuple(chosen)


# ---------------------------------------------------------------------------
# quadratic overlap surrogate


def spectral_norm_power(A: np.ndarray, iters: int = 10000, tol: float = 1e-13) -> float:
    """||A||_2 of a symmetric matrix by power iteration on A."""
    n = len(A)
    if n == 0 or not np.any(A):
        return 0.0
    v = np.ones(n) / math.sqrt(n) + 1e-3 * np.arange(n) / n
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = A @ (A @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new = math.sqrt(nrm)
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return float(np.linalg.norm(A @ v))


def surrogate_overlap(R, S, alpha: float | None = None) -> tuple[float, float]:
    """(-1/2 sum_{i != j} R_ij^2, alpha / (3 (1 - alpha)) sum_{i != j} R_ij^2) over S.

    ``alpha`` defaults to ||R[S] - I||_2 from power iteration; when it reaches 1
    the expansion behind the bound diverges and :class:`SurrogateNotApplicable`
    is raised.
    """
    Rm = R.R if isinstance(R, GramMatrix) else np.asarray(R, dtype=np.float64)
    S = np.asarray(list(S), dtype=np.int64)
    A = Rm[np.ix_(S, S)] - np.eye(len(S))
    np.fill_diagonal(A, 0.0)
    if alpha is None:
        alpha = spectral_norm_power(A)
    if alpha >= 1.0:
        raise SurrogateNotApplicable(f"||R[S] - I||_2 = {alpha:.4f} >= 1")
    frob = float(np.sum(A * A))
    return -0.5 * frob, alpha / (3.0 * (1.0 - alpha)) * frob


# ---------------------------------------------------------------------------
# kNN-localised ranking


@numba.njit(cache=True)
def _knn_grid(pts, k, cell, x0, y0, nx, ny, cell_start, cell_items, out_idx):
    n = pts.shape[0]
    big = max(nx, ny) + 1
    for q in range(n):
        best_d = np.full(k, np.inf)
        best_i = np.full(k, -1, dtype=np.int64)
        cx = min(max(int((pts[q, 0] - x0) / cell), 0), nx - 1)
        cy = min(max(int((pts[q, 1] - y0) / cell), 0), ny - 1)
        ring = 0
        while True:
            for gy in range(cy - ring, cy + ring + 1):
                if gy < 0 or gy >= ny:
                    continue
                for gx in range(cx - ring, cx + ring + 1):
                    if gx < 0 or gx >= nx:
                        continue
                    if max(abs(gx - cx), abs(gy - cy)) != ring:
                        continue
                    c = gy * nx + gx
                    for it in range(cell_start[c], cell_start[c + 1]):
                        j = cell_items[it]
                        if j == q:
                            continue
                        dx = pts[j, 0] - pts[q, 0]
                        dy = pts[j, 1] - pts[q, 1]
                        d2 = dx * dx + dy * dy
                        # insertion into the (distance, index)-sorted candidate list
                        if d2 > best_d[k - 1] or (d2 == best_d[k - 1] and j > best_i[k - 1] >= 0):
                            continue
                        pos = k - 1
                        while pos > 0 and (best_d[pos - 1] > d2 or (best_d[pos - 1] == d2 and best_i[pos - 1] > j)):
                            best_d[pos] = best_d[pos - 1]
                            best_i[pos] = best_i[pos - 1]
                            pos -= 1
                        best_d[pos] = d2
                        best_i[pos] = j
            reach = ring * cell
            if best_i[k - 1] >= 0 and best_d[k - 1] < reach * reach:
                break
            ring += 1
            if ring > big:
                break
        for m in range(k):
            out_idx[q, m] = best_i[m]


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """(N, min(k, N - 1)) indices of each point's nearest neighbours, excluding itself.

    Uniform-grid spatial hash; neighbours sorted by distance, ties by index.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = len(pts)
    k = min(int(k), n - 1)
    if k <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    lo = pts.min(axis=0)
    ext = float(max(np.max(pts.max(axis=0) - lo), 1e-9))
    side = max(1, int(math.ceil(math.sqrt(n / 2.0))))
    cell = ext / side * (1.0 + 1e-9)
    nx = ny = side
    cx = np.minimum((pts[:, 0] - lo[0]) / cell, nx - 1).astype(np.int64)
    cy = np.minimum((pts[:, 1] - lo[1]) / cell, ny - 1).astype(np.int64)
    cid = cy * nx + cx
    items = np.argsort(cid, kind="stable").astype(np.int64)
    start = np.searchsorted(cid[items], np.arange(nx * ny + 1)).astype(np.int64)
    out = np.empty((n, k), dtype=np.int64)
    _knn_grid(pts, k, cell, lo[0], lo[1], nx, ny, start, items, out)
    return out


@dataclass
class PruneRanking:
    score: np.ndarray
    rho: np.ndarray
    order: np.ndarray   # indices, best first

    def __len__(self) -> int:
        return len(self.order)

    def rank_of(self) -> np.ndarray:
        """Position of each primitive in the transmission order."""
        pos = np.empty(len(self.order), dtype=np.int64)
        pos[self.order] = np.arange(len(self.order))
        return pos


def _order(score: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(score)), -score)).astype(np.int64)


def rank_primitives(gaussians, k_neighbors: int = DEFAULT_K_NEIGHBORS,
                    lam: float = DEFAULT_LAMBDA) -> PruneRanking:
    """Score every primitive by area times an exponential overlap penalty."""
    if k_neighbors < 0 or lam < 0:
        raise ValueError("k_neighbors and lambda must be non-negative")
    gs = _as_set(gaussians)
    n = len(gs)
    area = np.exp(gs.log_scale.sum(axis=1))
    rho = np.zeros(n)
    if n > 1 and k_neighbors > 0:
        nbr = knn_indices(gs.mu, k_neighbors)
        i = np.repeat(np.arange(n), nbr.shape[1])
        r = correlation_pairs(gs, i, nbr.ravel()).reshape(nbr.shape)
        rho = np.sum(r * r, axis=1)
    score = area * np.exp(-lam * rho)
    return PruneRanking(score, rho, _order(score))


def rank_by_area(gaussians) -> PruneRanking:
    return rank_primitives(gaussians, 0, 0.0)


def rank_by_color_magnitude(gaussians) -> PruneRanking:
    """Stand-in anchor ordering by |c|, used only as a BD-rate reference."""
    gs = _as_set(gaussians)
    score = np.linalg.norm(gs.color, axis=1)
    return PruneRanking(score, np.zeros(len(gs)), _order(score))


def prune_to_budget(group, ranking: PruneRanking, budget: int | None = None,
                    keep_ratio: float | None = None) -> np.ndarray:
    """Sorted indices of the best ``budget`` members of ``group`` in ranking order.

    ``group`` is a :class:`~d2gv.grouping.ScaleGroup` or any index array.
    Exactly one of ``budget`` and ``keep_ratio`` must be given; budgets above
    the group size are clamped with a :class:`BudgetWarning`. Prefixes nest:
    a smaller budget always selects a subset of a larger one.
    """
    members = np.asarray(getattr(group, "indices", group), dtype=np.int64)
    if (budget is None) == (keep_ratio is None):
        raise ValueError("give exactly one of budget and keep_ratio")
    if keep_ratio is not None:
        if not 0.0 <= keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in [0, 1]")
        budget = int(round(keep_ratio * len(members)))
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if budget > len(members):
        warnings.warn(f"budget {budget} exceeds group size {len(members)}; clamped", BudgetWarning,
                      stacklevel=2)
        budget = len(members)
    in_group = np.zeros(len(ranking), dtype=bool)
    in_group[members] = True
    ordered = ranking.order[in_group[ranking.order]]
    return np.sort(ordered[:budget])
