"""Time-conditioned deformation of a canonical Gaussian set.

Each primitive carries a latent state s(t) with s(0) = 0 and

    ds/dt = MLP(enc(mu), enc(t))            (optionally also fed s)

integrated with fixed-step RK4 (or Euler). A linear head maps s(t) to a centre
offset and a colour offset, and a separate linear head on the same encodings
gives a sigmoid gate, so the frame at t uses

    mu' = mu + dmu,    c' = gate * (c + dc)

while the covariance parameters pass through untouched. Gradients are exact
for the unrolled integrator (discretize-then-optimize).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianSet
from .raster import GradientBuffer

INTEGRATORS = ("rk4", "euler", "direct")

# weight names in serialization order
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wd", "bd", "Wo", "bo")


def positional_encoding(v, bands: int) -> np.ndarray:
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)].

    ``v`` may be a scalar, a k-vector, or an (N, k) batch; the encoding is taken
    along the last axis and has length ``k * (2 * bands + 1)``.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    parts = [v]
    for k in range(bands):
        a = (2.0 ** k) * np.pi * v
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    return np.concatenate(parts, axis=-1) if not scalar else np.concatenate(parts)


def _encoding_jacobian(v: np.ndarray, bands: int) -> np.ndarray:
    """d enc / dv for (N, k) inputs, returned as (N, k * (2 bands + 1), k)."""
    n, k = v.shape
    blocks = [np.broadcast_to(np.eye(k), (n, k, k))]
    for b in range(bands):
        a = (2.0 ** b) * np.pi
        blocks.append(a * np.cos(a * v)[:, :, None] * np.eye(k))
        blocks.append(-a * np.sin(a * v)[:, :, None] * np.eye(k))
    return np.concatenate(blocks, axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class DeformationNet:
    """Weights and integrator settings of the deformation field.

    ``W1`` has rows for [enc(mu) | enc(t) | s] (the last block only when
    ``state_conditioned``). ``Wd`` maps the latent state to (dmu_x, dmu_y, dr, dg, db);
    ``Wo`` maps [enc(mu) | enc(t)] to the gate logit.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wd: np.ndarray
    bd: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    width: int
    height: int
    pos_bands: int = 10
    time_bands: int = 6
    integrator: str = "rk4"
    steps_per_unit: int = 4
    state_conditioned: bool = False
    use_dc: bool = True
    use_gate: bool = True

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.state_conditioned and self.integrator == "direct":
            raise ValueError("a state-conditioned field needs an integrator")
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, height: int, latent_dim: int = 32,
             hidden: int = 156, pos_bands: int = 10, time_bands: int = 6,
             integrator: str = "rk4", steps_per_unit: int = 4, state_conditioned: bool = False,
             use_dc: bool = True, use_gate: bool = True, gate_bias: float = 5.0,
             head_std: float = 1e-3) -> "DeformationNet":
        if latent_dim < 1 or hidden < 1:
            raise ValueError("latent_dim and hidden must be >= 1")
        enc_dim = 2 * (2 * pos_bands + 1) + (2 * time_bands + 1)
        in_dim = enc_dim + (latent_dim if state_conditioned else 0)
        W1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, hidden))
        W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, latent_dim))
        Wd = rng.normal(0.0, head_std, (latent_dim, 5))
        Wo = np.zeros((enc_dim, 1))
        return cls(W1, np.zeros(hidden), W2, np.zeros(latent_dim), Wd, np.zeros(5), Wo,
                   np.full(1, gate_bias), width, height, pos_bands, time_bands, integrator,
                   steps_per_unit, state_conditioned, use_dc, use_gate)

    @property
    def latent_dim(self) -> int:
        return self.W2.shape[1]

    @property
    def hidden(self) -> int:
        return self.W2.shape[0]

    @property
    def pos_dim(self) -> int:
        return 2 * (2 * self.pos_bands + 1)

    @property
    def enc_dim(self) -> int:
        return self.pos_dim + 2 * self.time_bands + 1

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def param_count(self) -> int:
        return int(sum(a.size for a in self.params().values()))

    def copy(self) -> "DeformationNet":
        kw = {name: getattr(self, name).copy() for name in PARAM_NAMES}
        return DeformationNet(**kw, width=self.width, height=self.height, pos_bands=self.pos_bands,
                              time_bands=self.time_bands, integrator=self.integrator,
                              steps_per_unit=self.steps_per_unit,
                              state_conditioned=self.state_conditioned, use_dc=self.use_dc,
                              use_gate=self.use_gate)

    def equals(self, other: "DeformationNet") -> bool:
        same_cfg = (self.width, self.height, self.pos_bands, self.time_bands, self.integrator,
                    self.steps_per_unit, self.state_conditioned, self.use_dc, self.use_gate) == (
            other.width, other.height, other.pos_bands, other.time_bands, other.integrator,
            other.steps_per_unit, other.state_conditioned, other.use_dc, other.use_gate)
        return same_cfg and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)

    # -- encodings -----------------------------------------------------------

    def encode_positions(self, mu: np.ndarray) -> np.ndarray:
        """enc(mu / [W, H]) for (N, 2) canonical centres."""
        return positional_encoding(mu / np.array([self.width, self.height], dtype=np.float64),
                                   self.pos_bands)

    def encode_time(self, t: float) -> np.ndarray:
        return positional_encoding(np.array([t], dtype=np.float64), self.time_bands)


def step_count(t: float, steps_per_unit: int) -> int:
    return max(0, math.ceil(steps_per_unit * t - 1e-9))


def _schedule(net: DeformationNet, t: float) -> tuple[int, float]:
    """(number of steps, step size) for integrating 0 -> t."""
    n = step_count(t, net.steps_per_unit)
    return (n, t / n) if n else (0, 0.0)


@dataclass
class _Stage:
    enc_t: np.ndarray
    s_in: np.ndarray | None
    h: np.ndarray          # tanh activations


@dataclass
class _Trace:
    enc_mu: np.ndarray
    pre_mu: np.ndarray     # enc(mu) @ W1[pos rows] + b1
    steps: list = field(default_factory=list)   # list of (step size, [stages])
    state: np.ndarray | None = None


def _rhs(net: DeformationNet, tr: _Trace, s: np.ndarray, tau: float):
    enc_t = net.encode_time(tau)
    e = net.pos_dim
    z = tr.pre_mu + enc_t @ net.W1[e:net.enc_dim]
    s_in = None
    if net.state_conditioned:
        s_in = s
        z = z + s @ net.W1[net.enc_dim:]
    h = np.tanh(z)
    return h @ net.W2 + net.b2, _Stage(enc_t, s_in, h)


def _integrate(net: DeformationNet, mu0: np.ndarray, t: float) -> _Trace:
    enc_mu = net.encode_positions(mu0)
    tr = _Trace(enc_mu, enc_mu @ net.W1[: net.pos_dim] + net.b1)
    n = len(mu0)
    s = np.zeros((n, net.latent_dim))
    if net.integrator == "direct":
        f, st = _rhs(net, tr, s, t)
        tr.steps.append((1.0, [st]))
        tr.state = f
        return tr
    nsteps, h = _schedule(net, t)
    for k in range(nsteps):
        t0 = k * h
        if net.integrator == "euler":
            f, st = _rhs(net, tr, s, t0)
            s = s + h * f
            tr.steps.append((h, [st]))
        else:
            k1, s1 = _rhs(net, tr, s, t0)
            k2, s2 = _rhs(net, tr, s + 0.5 * h * k1, t0 + 0.5 * h)
            k3, s3 = _rhs(net, tr, s + 0.5 * h * k2, t0 + 0.5 * h)
            k4, s4 = _rhs(net, tr, s + h * k3, t0 + h)
            s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            tr.steps.append((h, [s1, s2, s3, s4]))
    tr.state = s
    return tr


def integrate_state(net: DeformationNet, mu0, t: float) -> np.ndarray:
    """Latent state s(t) for canonical centre(s) ``mu0`` ((2,) or (N, 2))."""
    mu0 = np.asarray(mu0, dtype=np.float64)
    single = mu0.ndim == 1
    s = _integrate(net, mu0.reshape(-1, 2), float(t)).state
    return s[0] if single else s


def _heads(net: DeformationNet, tr: _Trace, t: float):
    out = tr.state @ net.Wd + net.bd
    dmu = out[:, :2]
    dc = out[:, 2:5] if net.use_dc else np.zeros((len(out), 3))
    if net.use_gate:
        x = np.concatenate([tr.enc_mu, np.broadcast_to(net.encode_time(t), (len(out), net.enc_dim - net.pos_dim))], axis=1)
        gate = _sigmoid(x @ net.Wo + net.bo)[:, 0]
    else:
        x = None
        gate = np.ones(len(out))
    return dmu, dc, gate, x


def deform(net: DeformationNet, canonical: GaussianSet, t: float) -> GaussianSet:
    """The primitive set at time ``t``; covariance fields are copied unchanged."""
    gs, _ = deform_with_cache(net, canonical, t)
    return gs


def deform_with_cache(net: DeformationNet, canonical: GaussianSet, t: float):
    tr = _integrate(net, canonical.mu, float(t))
    dmu, dc, gate, x = _heads(net, tr, t)
    out = GaussianSet(canonical.mu + dmu, canonical.log_scale.copy(), canonical.theta.copy(),
                      gate[:, None] * (canonical.color + dc))
    return out, (tr, dmu, dc, gate, x)


def gate_values(net: DeformationNet, canonical: GaussianSet, t: float) -> np.ndarray:
    tr = _Trace(net.encode_positions(canonical.mu), None)
    tr.state = np.zeros((len(canonical), net.latent_dim))
    return _heads(net, tr, t)[2]


def _stage_backward(net: DeformationNet, st: _Stage, g_f: np.ndarray, grads: dict, g_pre: np.ndarray):
    """Backprop one RHS evaluation; returns dL/ds_in (or None) and accumulates weights."""
    grads["W2"] += st.h.T @ g_f
    grads["b2"] += g_f.sum(axis=0)
    g_z = (g_f @ net.W2.T) * (1.0 - st.h * st.h)
    g_pre += g_z
    gz_sum = g_z.sum(axis=0)
    grads["W1"][net.pos_dim:net.enc_dim] += np.outer(st.enc_t, gz_sum)
    if st.s_in is None:
        return None
    grads["W1"][net.enc_dim:] += st.s_in.T @ g_z
    return g_z @ net.W1[net.enc_dim:].T


def deform_backward(net: DeformationNet, canonical: GaussianSet, t: float, upstream: GradientBuffer,
                    cache=None):
    """Exact gradients of the unrolled deformation given dL/d(deformed set).

    Returns ``(net_grads, canonical_grads)``: a dict keyed like
    :meth:`DeformationNet.params` and a :class:`GradientBuffer`. The canonical
    centre gradient includes both the direct offset path and the path through
    the positional encoding.
    """
    if cache is None:
        _, cache = deform_with_cache(net, canonical, t)
    tr, dmu, dc, gate, x = cache
    n = len(canonical)
    grads = {name: np.zeros_like(a) for name, a in net.params().items()}
    g_cmu = upstream.d_mu.copy()
    g_color_out = upstream.d_color

    # c' = gate * (c + dc)
    g_c = gate[:, None] * g_color_out
    g_enc_mu = np.zeros_like(tr.enc_mu)
    if net.use_gate:
        g_gate = np.sum(g_color_out * (canonical.color + dc), axis=1)
        g_logit = (g_gate * gate * (1.0 - gate))[:, None]
        grads["Wo"] += x.T @ g_logit
        grads["bo"] += g_logit.sum(axis=0)
        g_enc_mu += g_logit @ net.Wo[: net.pos_dim].T
    g_out = np.zeros((n, 5))
    g_out[:, :2] = upstream.d_mu
    if net.use_dc:
        g_out[:, 2:] = g_c
    grads["Wd"] += tr.state.T @ g_out
    grads["bd"] += g_out.sum(axis=0)
    g_s = g_out @ net.Wd.T

    g_pre = np.zeros_like(tr.pre_mu)
    if net.integrator == "direct":
        _stage_backward(net, tr.steps[0][1][0], g_s, grads, g_pre)
    elif net.integrator == "euler":
        for h, (st,) in reversed(tr.steps):
            g_in = _stage_backward(net, st, h * g_s, grads, g_pre)
            if g_in is not None:
                g_s = g_s + g_in
    else:
        for h, (st1, st2, st3, st4) in reversed(tr.steps):
            g_k4 = (h / 6.0) * g_s
            g_k3 = (h / 3.0) * g_s
            g_k2 = (h / 3.0) * g_s
            g_k1 = (h / 6.0) * g_s
            g_acc = g_s
            g_in = _stage_backward(net, st4, g_k4, grads, g_pre)
            if g_in is not None:
                g_acc = g_acc + g_in
                g_k3 = g_k3 + h * g_in
            g_in = _stage_backward(net, st3, g_k3, grads, g_pre)
            if g_in is not None:
                g_acc = g_acc + g_in
                g_k2 = g_k2 + 0.5 * h * g_in
            g_in = _stage_backward(net, st2, g_k2, grads, g_pre)
            if g_in is not None:
                g_acc = g_acc + g_in
                g_k1 = g_k1 + 0.5 * h * g_in
            g_in = _stage_backward(net, st1, g_k1, grads, g_pre)
            if g_in is not None:
                g_acc = g_acc + g_in
            g_s = g_acc

    grads["W1"][: net.pos_dim] += tr.enc_mu.T @ g_pre
    grads["b1"] += g_pre.sum(axis=0)
    g_enc_mu += g_pre @ net.W1[: net.pos_dim].T

    dims = np.array([net.width, net.height], dtype=np.float64)
    jac = _encoding_jacobian(canonical.mu / dims, net.pos_bands)
    g_cmu += np.einsum("ne,nek->nk", g_enc_mu, jac) / dims

    canon = GradientBuffer(g_cmu, upstream.d_log_scale.copy(), upstream.d_theta.copy(), g_c)
    return grads, canon


def discrete_velocity(positions, dt: float = 1.0) -> np.ndarray:
    """Finite-difference velocities (mu_k - mu_{k-1}) / dt along the first axis."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 2:
        raise ValueError("need at least two samples for a velocity")
    return np.diff(positions, axis=0) / dt


def velocity_jitter(positions, dt: float = 1.0) -> float:
    """max_k |v_k - v_{k-1}| (0 for fewer than three samples)."""
    v = discrete_velocity(positions, dt)
    if len(v) < 2:
        return 0.0
    return float(np.max(np.linalg.norm(np.diff(v, axis=0).reshape(len(v) - 1, -1), axis=1)))
