"""Independent reference computations used by the tests.

Nothing here calls the closed forms under test: integrals are done by
brute-force quadrature, derivatives by central differences, selections by
enumeration.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def cov_matrix(sx, sy, theta):
    """R diag(sx^2, sy^2) R^T by explicit matrix multiplication."""
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag([sx * sx, sy * sy]) @ R.T


def kernel_on_grid(mu, cov, X, Y):
    inv = np.linalg.inv(cov)
    dx, dy = X - mu[0], Y - mu[1]
    q = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
    return np.exp(-0.5 * q)


def quadrature_inner(mu1, s1, th1, mu2, s2, th2, box_sigmas=12.0, spacing_div=8.0):
    """Trapezoid rule for <phi_1, phi_2> over a box spanning +-12 max-std around
    both centres with spacing min-std / 8."""
    c1, c2 = cov_matrix(*s1, th1), cov_matrix(*s2, th2)
    smax = max(max(s1), max(s2))
    smin = min(min(s1), min(s2))
    lo = np.minimum(mu1, mu2) - box_sigmas * smax
    hi = np.maximum(mu1, mu2) + box_sigmas * smax
    h = smin / spacing_div
    xs = np.linspace(lo[0], hi[0], int(math.ceil((hi[0] - lo[0]) / h)) + 1)
    ys = np.linspace(lo[1], hi[1], int(math.ceil((hi[1] - lo[1]) / h)) + 1)
    wx = np.full(len(xs), xs[1] - xs[0])
    wx[[0, -1]] *= 0.5
    wy = np.full(len(ys), ys[1] - ys[0])
    wy[[0, -1]] *= 0.5
    total = 0.0
    step = max(1, 2_000_000 // len(xs))
    for a in range(0, len(ys), step):
        Y, X = np.meshgrid(ys[a:a + step], xs, indexing="ij")
        f = kernel_on_grid(mu1, c1, X, Y) * kernel_on_grid(mu2, c2, X, Y)
        total += wy[a:a + step] @ f @ wx
    return float(total)


def central_difference(f, x0: float, h: float) -> float:
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def gradient_fd(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of scalar f over every entry of array x."""
    out = np.empty_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def enumerate_best_subset(G: np.ndarray, K: int):
    """Exhaustive arg-max of log det G[S] over |S| = K; returns (subset, value)."""
    best, best_val = None, -math.inf
    for S in itertools.combinations(range(G.shape[0]), K):
        sign, val = np.linalg.slogdet(G[np.ix_(S, S)])
        val = val if sign > 0 else -math.inf
        if val > best_val:
            best, best_val = S, val
    return best, best_val


def brute_knn(points: np.ndarray, k: int) -> list[set]:
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return [set(np.argsort(row, kind="stable")[:k]) for row in d]


# ---------------------------------------------------------------------------
# rasterizer finite differences

FIELDS = (("mu", 2), ("log_scale", 2), ("theta", 1), ("color", 3))


def mahalanobis_grid(gs, width, height, r):
    """(N, H, W) squared Mahalanobis distances of every pixel sample point."""
    xs = (np.arange(width) + 0.5) * r
    ys = (np.arange(height) + 0.5) * r
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    out = []
    for n in range(len(gs)):
        sx, sy = np.exp(gs.log_scale[n])
        inv = np.linalg.inv(cov_matrix(sx, sy, gs.theta[n]))
        dx, dy = X - gs.mu[n, 0], Y - gs.mu[n, 1]
        out.append(inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy)
    return np.array(out)


def _get(gs, name, n, k):
    a = getattr(gs, name)
    return a[n] if a.ndim == 1 else a[n, k]


def _set(gs, name, n, k, v):
    a = getattr(gs, name)
    if a.ndim == 1:
        a[n] = v
    else:
        a[n, k] = v


def render_fd_check(gs, weights, width, height, r, cutoff, h=1e-3, rtol=1e-3, atol=1e-6):
    """Compare render_backward against finite differences of sum(weights * render).

    The derivative uses the fourth-order central stencil with step h, so the
    oracle's own truncation error stays well below the tolerance. Returns
    (checked, passed, skipped). A coordinate is skipped when its stencil
    moves some pixel across the truncation ellipse, where the truncated image
    is not differentiable.
    """
    from d2gv.raster import render, render_backward

    grads = render_backward(gs, weights, width, height, r, cutoff).as_dict()
    checked = passed = skipped = 0
    cut2 = cutoff * cutoff
    truncated = np.isfinite(cut2)
    for n in range(len(gs)):
        one = np.array([n])
        for name, dim in FIELDS:
            for k in range(dim):
                x0 = _get(gs, name, n, k)
                vals, masks = [], []
                for x in (x0 + 2 * h, x0 + h, x0 - h, x0 - 2 * h):
                    p = gs.copy()
                    _set(p, name, n, k, x)
                    vals.append(float(np.sum(weights * render(p, width, height, r, cutoff))))
                    if truncated and name != "color":
                        masks.append(mahalanobis_grid(p[one], width, height, r)[0] <= cut2)
                if masks:
                    base = mahalanobis_grid(gs[one], width, height, r)[0] <= cut2
                    if any(not np.array_equal(m, base) for m in masks):
                        skipped += 1
                        continue
                fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
                an = float(grads[name][n] if dim == 1 else grads[name][n, k])
                checked += 1
                if abs(an - fd) <= max(rtol * abs(fd), atol):
                    passed += 1
    return checked, passed, skipped


def random_scene(rng, n, width, height):
    from d2gv.gaussian import GaussianSet
    return GaussianSet(rng.uniform([0, 0], [width, height], (n, 2)),
                       rng.uniform(np.log(1.0), np.log(5.0), (n, 2)),
                       rng.uniform(0, np.pi, n), rng.uniform(-1, 1, (n, 3)))


# ---------------------------------------------------------------------------
# end-to-end finite differences (rasterizer + deformation + integrator + loss)

def end_to_end(net, gs, t, target, r=1.0, lambda_s=0.3, cutoff=3.5):
    """Loss value and analytic gradients (net dict, canonical dict) for one frame."""
    from d2gv.deformation import deform_backward, deform_with_cache
    from d2gv.losses import reconstruction_loss
    from d2gv.raster import render, render_backward

    h, w = target.shape[:2]
    deformed, cache = deform_with_cache(net, gs, t)
    img = render(deformed, w, h, r, cutoff)
    loss, grad, _ = reconstruction_loss(img, target, lambda_s)
    up = render_backward(deformed, grad, w, h, r, cutoff)
    ng, cg = deform_backward(net, gs, t, up, cache)
    return loss, ng, cg.as_dict()


def end_to_end_fd_check(net, gs, t, target, n_samples, rng, r=1.0, h=1e-5, rtol=1e-2, atol=1e-8,
                        cutoff=3.5):
    """Sample coordinates across Gaussian fields and every network array;
    returns a list of (name, analytic, numeric, ok).

    ``ok`` is None (skipped) when the perturbation moves a pixel of some
    deformed primitive across the truncation ellipse, where the loss jumps.
    """
    from d2gv.deformation import PARAM_NAMES, deform

    side_h, side_w = target.shape[:2]
    cut2 = cutoff * cutoff

    def inside():
        return mahalanobis_grid(deform(net, gs, t), side_w, side_h, r) <= cut2

    _, ng, cg = end_to_end(net, gs, t, target, r, cutoff=cutoff)
    base = inside() if np.isfinite(cut2) else None
    pools = [("net", n) for n in PARAM_NAMES] + [("gs", n) for n, _ in FIELDS]
    results = []
    for i in range(n_samples):
        kind, name = pools[i % len(pools)]
        arr = getattr(net, name) if kind == "net" else getattr(gs, name)
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        an = float((ng if kind == "net" else cg)[name][idx])
        x0 = arr[idx]
        vals, crossed = [], False
        for x in (x0 + h, x0 - h):
            arr[idx] = x
            vals.append(end_to_end(net, gs, t, target, r, cutoff=cutoff)[0])
            if base is not None and not np.array_equal(inside(), base):
                crossed = True
        arr[idx] = x0
        fd = (vals[0] - vals[1]) / (2 * h)
        ok = None if crossed else abs(an - fd) <= max(rtol * abs(fd), atol)
        results.append((f"{kind}.{name}{list(idx)}", an, fd, ok))
    return results


def tiny_net(rng, width, height, latent=8, hidden=12, integrator="rk4", state_conditioned=False,
             scale=0.5, **kw):
    """A small network with non-trivial heads so every path carries gradient."""
    from d2gv.deformation import DeformationNet

    net = DeformationNet.init(rng, width, height, latent_dim=latent, hidden=hidden, integrator=integrator,
                              state_conditioned=state_conditioned, **kw)
    net.Wd[...] = rng.normal(0, scale, net.Wd.shape)
    net.bd[...] = rng.normal(0, 0.1, net.bd.shape)
    net.Wo[...] = rng.normal(0, 0.3, net.Wo.shape)
    net.bo[...] = 0.5
    return net


# ---------------------------------------------------------------------------
# D-optimal selection instances

def dopt_instance(rng, box=20.0, n_range=(4, 12), k_max=4, alpha_max=None):
    """Random primitives (scales 0.5..5 px) in a box; optionally rejection-sampled
    until ||R - I||_2 <= alpha_max, with the norm taken from eigvalsh."""
    from d2gv.gaussian import GaussianSet
    from d2gv.pruning import build_gram

    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        k = int(rng.integers(1, min(k_max, n) + 1))
        gs = GaussianSet(rng.uniform(0, box, (n, 2)), rng.uniform(np.log(0.5), np.log(5.0), (n, 2)),
                         rng.uniform(0, np.pi, n), np.zeros((n, 3)))
        G = build_gram(gs)
        if alpha_max is None or np.abs(np.linalg.eigvalsh(G.R - np.eye(n))).max() <= alpha_max:
            return gs, k, G


def random_correlation(rng, n, alpha_max):
    """Random correlation matrix with ||R - I||_2 <= alpha_max (rescaled off-diagonal)."""
    A = rng.normal(size=(n, n))
    A = (A + A.T) / 2
    np.fill_diagonal(A, 0.0)
    norm = np.abs(np.linalg.eigvalsh(A)).max()
    A *= rng.uniform(0.01, alpha_max) / norm
    return np.eye(n) + A


# ---------------------------------------------------------------------------
# MS-SSIM by explicit window enumeration

def _window_stats(x, y, win2d):
    from numpy.lib.stride_tricks import sliding_window_view
    k = win2d.shape[0]
    px = sliding_window_view(x, (k, k))
    py = sliding_window_view(y, (k, k))
    mx = np.einsum("ijab,ab->ij", px, win2d)
    my = np.einsum("ijab,ab->ij", py, win2d)
    vx = np.einsum("ijab,ab->ij", (px - mx[..., None, None]) ** 2, win2d)
    vy = np.einsum("ijab,ab->ij", (py - my[..., None, None]) ** 2, win2d)
    cxy = np.einsum("ijab,ab->ij", (px - mx[..., None, None]) * (py - my[..., None, None]), win2d)
    return mx, my, vx, vy, cxy


def ms_ssim_reference(a, b, weights=(0.0448, 0.2856, 0.3001, 0.2363, 0.1333)):
    """Per-channel MS-SSIM from centred window moments (5 levels, 2x2 mean pooling)."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    win2d = np.outer(g, g) / np.outer(g, g).sum()
    out = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch].astype(np.float64), b[..., ch].astype(np.float64)
        val = 1.0
        for lev, w in enumerate(weights):
            mx, my, vx, vy, cxy = _window_stats(x, y, win2d)
            cs = (2 * cxy + c2) / (vx + vy + c2)
            if lev == len(weights) - 1:
                lum = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
                val *= max(np.mean(lum * cs), 0.0) ** w
            else:
                val *= max(np.mean(cs), 0.0) ** w
                h, wd = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
                x = x[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean(axis=(1, 3))
                y = y[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean(axis=(1, 3))
        out.append(val)
    return float(np.mean(out))


def random_model(rng, n=30, w=24, h=20, latent=8, hidden=16, n_frames=5, first_frame=0, finalize=True, **net_kw):
    """A small finalized GopModel with random canonical set and non-trivial network weights."""
    from d2gv.deformation import DeformationNet
    from d2gv.model import GopModel, uniform_timestamps

    gs = random_scene(rng, n, w, h)
    net = DeformationNet.init(rng, w, h, latent_dim=latent, hidden=hidden, head_std=0.3, **net_kw)
    net.Wo[:] = rng.normal(0, 0.3, net.Wo.shape)
    model = GopModel(gs, net, uniform_timestamps(n_frames), w, h, first_frame)
    if finalize:
        model.finalize()
    return model
