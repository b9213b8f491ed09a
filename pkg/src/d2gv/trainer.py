"""Two-stage per-GoP fitting.

Coarse stage: one static Gaussian set fitted to every frame of the GoP.
Fine stage: the set and the deformation network are optimised jointly; each
iteration draws a frame and a training scale (with probability proportional
to its weight), renders the scale's primitive group of the deformed set and
backpropagates MSE + lambda_s * (1 - SSIM) against the area-downsampled frame.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .deformation import DeformationNet, deform_backward, deform_with_cache
from .gaussian import GaussianSet
from .grouping import DEFAULT_BETA, EmptyGroupWarning
from .losses import reconstruction_loss
from .metrics import psnr
from .model import GopModel, gop_bounds, uniform_timestamps
from .pruning import DEFAULT_K_NEIGHBORS, DEFAULT_LAMBDA
from .raster import area_downsample, render, render_backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gop_size: int = 10
    primitive_count: int = 200
    coarse_iters: int = 5000
    coarse_lr: float = 1e-2
    fine_iters: int = 20000
    gaussian_lr: float = 5e-3
    mlp_lr_init: float = 1.6e-4
    mlp_lr_final: float = 1.6e-5
    mlp_lr_max_steps: int | None = None
    # Adam steps on centres are taken in units of half the larger image side,
    # i.e. the learning rates above act on normalised coordinates.
    position_lr_scale: float | None = None
    scales: tuple[float, ...] = (1, 2, 4, 8)
    scale_weights: tuple[float, ...] | None = None
    lambda_s: float = 0.3
    beta: float = DEFAULT_BETA
    latent_dim: int = 32
    hidden: int = 156
    pos_bands: int = 10
    time_bands: int = 6
    steps_per_unit: int = 4
    k_neighbors: int = DEFAULT_K_NEIGHBORS
    prune_lambda: float = DEFAULT_LAMBDA
    seed: int = 0
    log_every: int = 500
    # ablations
    no_coarse: bool = False
    loss_l2_only: bool = False
    loss_ssim_only: bool = False
    no_ode: bool = False
    no_dc: bool = False
    no_dc_no_gate: bool = False
    euler_integrator: bool = False
    state_conditioned_ode: bool = False
    no_grouping: bool = False

    def __post_init__(self):
        self.scales = tuple(float(r) for r in self.scales)
        if self.scale_weights is None:
            self.scale_weights = tuple(8.0 if r == 1.0 else 1.0 for r in self.scales)
        self.scale_weights = tuple(float(w) for w in self.scale_weights)
        if len(self.scale_weights) != len(self.scales):
            raise ValueError("one weight per training scale")
        if any(r < 1 for r in self.scales) or any(w < 0 for w in self.scale_weights) \
                or sum(self.scale_weights) <= 0:
            raise ValueError("scales must be >= 1 and weights non-negative with positive sum")
        for name in ("gop_size", "primitive_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("coarse_iters", "fine_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.loss_l2_only and self.loss_ssim_only:
            raise ValueError("loss_l2_only and loss_ssim_only are exclusive")
        if self.no_ode and (self.euler_integrator or self.state_conditioned_ode):
            raise ValueError("no_ode excludes integrator options")

    @property
    def integrator(self) -> str:
        if self.no_ode:
            return "direct"
        return "euler" if self.euler_integrator else "rk4"

    def loss_terms(self) -> tuple[bool, bool]:
        return not self.loss_ssim_only, not self.loss_l2_only


class Adam:
    """Adam over a dict of arrays updated in place (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, params: dict[str, np.ndarray], b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lrs: dict[str, float]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)


def exponential_lr(step: int, init: float, final: float, max_steps: int) -> float:
    """Log-linear decay from ``init`` to ``final`` over ``max_steps``, constant afterwards."""
    frac = min(max(step / max(max_steps, 1), 0.0), 1.0)
    return math.exp(math.log(init) * (1.0 - frac) + math.log(final) * frac)


def _check_frames(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 1 or frames.shape[-1] != 3:
        raise ValueError("frames must be a non-empty (T, H, W, 3) stack")
    return frames


def _gaussian_lrs(cfg: TrainConfig, lr: float, width: int, height: int) -> dict[str, float]:
    pos = cfg.position_lr_scale if cfg.position_lr_scale is not None else 0.5 * max(width, height)
    return {"mu": lr * pos, "log_scale": lr, "theta": lr, "color": lr}


def _guard(value: float, where: str, it: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss in {where} stage at iteration {it}")


def init_canonical(frames, count: int, seed=0) -> GaussianSet:
    """Random initial set: uniform centres, isotropic scale sqrt(WH / count) / 2,
    uniform rotation, colours read from the temporal-mean frame.

    Colours are divided by pi/2, the expected overlap of ``count`` such
    kernels, so the initial render is close to the mean frame in level.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    frames = _check_frames(frames)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    _, h, w, _ = frames.shape
    mean = frames.mean(axis=0)
    mu = rng.uniform([0.0, 0.0], [w, h], size=(count, 2))
    s = math.sqrt(w * h / count) / 2.0
    theta = rng.uniform(0.0, math.pi, size=count)
    px = np.clip(mu[:, 0].astype(int), 0, w - 1)
    py = np.clip(mu[:, 1].astype(int), 0, h - 1)
    color = mean[py, px] / (math.pi / 2.0)
    return GaussianSet(mu, np.full((count, 2), math.log(s)), theta, color)


def coarse_fit(frames, config: TrainConfig, canonical: GaussianSet | None = None,
               history: list | None = None) -> GaussianSet:
    """Fit one static set to all frames (mean per-frame loss at scale 1)."""
    frames = _check_frames(frames)
    t, h, w, _ = frames.shape
    gs = (canonical if canonical is not None else init_canonical(frames, config.primitive_count, config.seed)).copy()
    use_l2, use_ssim = config.loss_terms()
    opt = Adam(gs.params())
    lrs = _gaussian_lrs(config, config.coarse_lr, w, h)
    for it in range(config.coarse_iters):
        img = render(gs, w, h)
        loss, grad = 0.0, np.zeros_like(img)
        for f in frames:
            l, g, _ = reconstruction_loss(img, f, config.lambda_s, use_l2, use_ssim)
            loss += l / t
            grad += g / t
        _guard(loss, "coarse", it)
        if history is not None:
            history.append(loss)
        opt.step(render_backward(gs, grad, w, h).as_dict(), lrs)
    return gs


def _new_net(config: TrainConfig, rng, width, height) -> DeformationNet:
    return DeformationNet.init(
        rng, width, height, latent_dim=config.latent_dim, hidden=config.hidden,
        pos_bands=config.pos_bands, time_bands=config.time_bands, integrator=config.integrator,
        steps_per_unit=config.steps_per_unit, state_conditioned=config.state_conditioned_ode,
        use_dc=not (config.no_dc or config.no_dc_no_gate), use_gate=not config.no_dc_no_gate,
    )


@dataclass
class FitLog:
    rows: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def evaluate_psnr(model: GopModel, frames, scale: float = 1.0, grouping: bool = True,
                  beta: float = DEFAULT_BETA, timestamps=None) -> list[float]:
    """Per-frame PSNR of ``model`` at ``scale`` against area-downsampled ``frames``."""
    ts = model.timestamps if timestamps is None else timestamps
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyGroupWarning)
        return [psnr(model.render(t, scale, grouping=grouping, beta=beta), area_downsample(f, scale))
                for t, f in zip(ts, frames)]


def fine_fit(frames, canonical: GaussianSet, config: TrainConfig, timestamps=None,
             rng: np.random.Generator | None = None, fit_log: FitLog | None = None) -> GopModel:
    """Jointly optimise the canonical set and a fresh deformation network."""
    frames = _check_frames(frames)
    n_frames, h, w, _ = frames.shape
    ts = uniform_timestamps(n_frames) if timestamps is None else np.asarray(timestamps, dtype=np.float64)
    if len(ts) != n_frames:
        raise ValueError("one timestamp per frame")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    gs = canonical.copy()
    net = _new_net(config, rng, w, h)
    model = GopModel(gs, net, ts, w, h)

    use_l2, use_ssim = config.loss_terms()
    targets = {r: [area_downsample(f, r) for f in frames] for r in config.scales}
    probs = np.asarray(config.scale_weights) / sum(config.scale_weights)
    g_opt = Adam(gs.params())
    n_opt = Adam(net.params())
    g_lrs = _gaussian_lrs(config, config.gaussian_lr, w, h)
    horizon = config.mlp_lr_max_steps or config.fine_iters
    warned: set[float] = set()

    for it in range(config.fine_iters):
        k = int(rng.integers(n_frames))
        r = float(config.scales[int(rng.choice(len(config.scales), p=probs))])
        if config.no_grouping:
            idx = np.arange(len(gs))
        else:
            idx = np.flatnonzero(np.exp(gs.log_scale.max(axis=1)) >= config.beta * r)
        if len(idx) == 0:
            if r not in warned:
                warnings.warn(f"empty primitive group at scale {r}; skipped", EmptyGroupWarning, stacklevel=2)
                warned.add(r)
            continue
        sub = gs[idx]
        deformed, cache = deform_with_cache(net, sub, ts[k])
        target = targets[r][k]
        th, tw = target.shape[:2]
        img = render(deformed, tw, th, r)
        loss, grad, _ = reconstruction_loss(img, target, config.lambda_s, use_l2, use_ssim)
        _guard(loss, "fine", it)
        up = render_backward(deformed, grad, tw, th, r)
        n_grads, c_grads = deform_backward(net, sub, ts[k], up, cache)
        g_opt.step(c_grads.scatter(idx, len(gs)).as_dict(), g_lrs)
        lr = exponential_lr(it, config.mlp_lr_init, config.mlp_lr_final, horizon)
        n_opt.step(n_grads, {name: lr for name in n_grads})
        if fit_log is not None:
            fit_log.losses.append(loss)
            if config.log_every and ((it + 1) % config.log_every == 0 or it + 1 == config.fine_iters):
                row = {"iter": it + 1, "loss": loss}
                for rr in config.scales:
                    row[f"psnr_x{rr:g}"] = float(np.mean(evaluate_psnr(model, frames, rr, not config.no_grouping,
                                                                       config.beta)))
                fit_log.rows.append(row)
                log.info("iter %d loss %.5f %s", it + 1, loss, row)
    return model


def fit_gop(frames, config: TrainConfig, timestamps=None, seed=None, fit_log: FitLog | None = None,
            first_frame: int = 0) -> GopModel:
    """Coarse + fine fit of one GoP, then rounding and transmission ordering."""
    frames = _check_frames(frames)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    gs = init_canonical(frames, config.primitive_count, rng)
    if not config.no_coarse:
        gs = coarse_fit(frames, config, gs)
    model = fine_fit(frames, gs, config, timestamps, rng, fit_log)
    model.first_frame = first_frame
    model.finalize(config.k_neighbors, config.prune_lambda)
    return model


def fit_video(frames, config: TrainConfig, fit_logs: list | None = None) -> list[GopModel]:
    """Split into ceil(T / G) GoPs and fit each independently.

    GoP g is seeded with ``(config.seed, g)`` so results do not depend on the
    order in which GoPs are trained.
    """
    frames = _check_frames(frames)
    models = []
    for g, (a, b) in enumerate(gop_bounds(len(frames), config.gop_size)):
        fl = FitLog() if fit_logs is not None else None
        seed = np.random.SeedSequence([config.seed, g])
        models.append(fit_gop(frames[a:b], config, seed=seed, fit_log=fl, first_frame=a))
        if fit_logs is not None:
            fit_logs.append(fl)
    return models


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
