import math

import numpy as np
import pytest

from d2gv.deformation import (DeformationNet, deform, deform_backward, deform_with_cache,
                              discrete_velocity, gate_values, integrate_state, positional_encoding,
                              step_count, velocity_jitter)
from d2gv.gaussian import GaussianSet
from d2gv.raster import GradientBuffer
from oracles import random_scene, tiny_net


def scene(rng, n=5, w=32, h=24):
    return random_scene(rng, n, w, h)


class TestEncoding:
    def test_examples(self):
        np.testing.assert_allclose(positional_encoding(0.0, 2), [0, 0, 1, 0, 1], atol=1e-15)
        np.testing.assert_allclose(positional_encoding(1.0, 1), [1, 0, -1], atol=1e-15)
        assert positional_encoding(np.zeros(2), 10).shape == (42,)

    def test_layout(self):
        v = np.array([0.3, 0.7])
        e = positional_encoding(v, 3)
        np.testing.assert_array_equal(e[:2], v)
        for k in range(3):
            np.testing.assert_allclose(e[2 + 4 * k:4 + 4 * k], np.sin(2 ** k * np.pi * v))
            np.testing.assert_allclose(e[4 + 4 * k:6 + 4 * k], np.cos(2 ** k * np.pi * v))

    def test_rejects_zero_bands(self):
        with pytest.raises(ValueError):
            positional_encoding(0.5, 0)

    def test_network_input_width(self):
        net = DeformationNet.init(np.random.default_rng(0), 64, 64)
        assert net.W1.shape == (55, 156)
        assert net.latent_dim == 32


class TestIntegrator:
    def test_step_count(self):
        assert step_count(0.0, 4) == 0
        assert step_count(1.0, 4) == 4
        assert step_count(0.3, 4) == 2
        assert step_count(0.25, 4) == 1

    def test_zero_time_zero_state(self):
        net = DeformationNet.init(np.random.default_rng(1), 32, 32, latent_dim=8, hidden=16)
        np.testing.assert_array_equal(integrate_state(net, [4.0, 5.0], 0.0), np.zeros(8))

    @pytest.mark.parametrize("integrator", ["euler", "rk4"])
    def test_constant_derivative_is_exact(self, integrator):
        rng = np.random.default_rng(2)
        net = DeformationNet.init(rng, 32, 32, latent_dim=6, hidden=10, integrator=integrator)
        u = rng.normal(size=6)
        net.W2[...] = 0.0
        net.b2[...] = u
        for t in (0.1, 0.37, 1.0):
            np.testing.assert_allclose(integrate_state(net, [3.0, 9.0], t), t * u, rtol=1e-14, atol=1e-15)

    def _fine_reference(self, net, mu, t=1.0):
        ref = net.copy()
        ref.integrator = "euler"
        ref.steps_per_unit = net.steps_per_unit * 64
        return integrate_state(ref, mu, t)

    @pytest.mark.parametrize("state_conditioned", [False, True])
    @pytest.mark.parametrize("time_bands,steps", [(2, 4), (6, 64)])
    def test_rk4_closer_than_euler(self, state_conditioned, time_bands, steps):
        """The comparison needs a resolved right-hand side: the top temporal band
        oscillates at 2^(bands-1) pi per unit time, so 6 bands need a fine step."""
        rng = np.random.default_rng(3)
        for _ in range(5):
            rk = DeformationNet.init(rng, 32, 32, latent_dim=8, hidden=16, state_conditioned=state_conditioned,
                                     time_bands=time_bands, steps_per_unit=steps)
            eu = rk.copy()
            eu.integrator = "euler"
            mu = rng.uniform(0, 32, (4, 2))
            ref = self._fine_reference(rk, mu)
            assert np.linalg.norm(integrate_state(rk, mu, 1.0) - ref) <= np.linalg.norm(
                integrate_state(eu, mu, 1.0) - ref)

    @pytest.mark.parametrize("integrator,order", [("euler", 1), ("rk4", 4)])
    @pytest.mark.parametrize("state_conditioned", [False, True])
    def test_convergence_order(self, integrator, order, state_conditioned):
        rng = np.random.default_rng(4)
        net = DeformationNet.init(rng, 32, 32, latent_dim=4, hidden=8, time_bands=1, pos_bands=2,
                                  integrator=integrator, state_conditioned=state_conditioned)
        if state_conditioned:
            net.W1[net.enc_dim:] *= 0.5
        mu = rng.uniform(0, 32, (3, 2))
        exact = net.copy()
        exact.integrator = "rk4"
        exact.steps_per_unit = 4096
        s_ref = integrate_state(exact, mu, 1.0)
        steps = [4, 8, 16, 32]
        errs = []
        for n in steps:
            net.steps_per_unit = n
            errs.append(np.linalg.norm(integrate_state(net, mu, 1.0) - s_ref))
        slope = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
        assert abs(slope - order) <= 0.3, slope


class TestDeform:
    def test_zero_heads_halve_colour(self):
        rng = np.random.default_rng(5)
        net = DeformationNet.init(rng, 32, 24, latent_dim=8, hidden=16, head_std=0.0, gate_bias=0.0)
        gs = scene(rng)
        out = deform(net, gs, 0.6)
        np.testing.assert_array_equal(out.mu, gs.mu)
        np.testing.assert_allclose(out.color, 0.5 * gs.color, rtol=1e-15)

    def test_covariance_untouched(self):
        rng = np.random.default_rng(6)
        net = tiny_net(rng, 32, 24)
        gs = scene(rng, 20)
        for t in (0.0, 0.3, 1.0):
            out = deform(net, gs, t)
            np.testing.assert_array_equal(out.log_scale, gs.log_scale)
            np.testing.assert_array_equal(out.theta, gs.theta)

    def test_time_zero_no_offsets(self):
        rng = np.random.default_rng(7)
        net = tiny_net(rng, 32, 24)
        net.bd[...] = 0.0
        gs = scene(rng)
        out, (_, dmu, dc, gate, _) = deform_with_cache(net, gs, 0.0)
        np.testing.assert_array_equal(dmu, 0.0)
        np.testing.assert_array_equal(dc, 0.0)
        np.testing.assert_array_equal(out.mu, gs.mu)
        np.testing.assert_allclose(out.color, gate[:, None] * gs.color)

    def test_gate_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            net = tiny_net(rng, 32, 24)
            g = gate_values(net, scene(rng, 50), rng.uniform())
            assert np.all((g > 0) & (g < 1))

    def test_initial_gate_near_one(self):
        net = DeformationNet.init(np.random.default_rng(9), 32, 24)
        g = gate_values(net, scene(np.random.default_rng(9)), 0.5)
        np.testing.assert_allclose(g, 1 / (1 + math.exp(-5.0)), rtol=1e-12)

    def test_deterministic(self):
        a = tiny_net(np.random.default_rng(10), 32, 24)
        b = tiny_net(np.random.default_rng(10), 32, 24)
        gs = scene(np.random.default_rng(11), 30)
        assert deform(a, gs, 0.77).equals(deform(b, gs, 0.77))

    def test_empty_set(self):
        net = tiny_net(np.random.default_rng(12), 32, 24)
        assert len(deform(net, GaussianSet.empty(), 0.5)) == 0

    def test_ablation_switches(self):
        rng = np.random.default_rng(13)
        gs = scene(rng)
        net = tiny_net(rng, 32, 24, use_dc=False)
        _, (_, _, dc, _, _) = deform_with_cache(net, gs, 0.5)
        np.testing.assert_array_equal(dc, 0.0)
        net = tiny_net(rng, 32, 24, use_dc=False, use_gate=False)
        out = deform(net, gs, 0.5)
        np.testing.assert_array_equal(out.color, gs.color)


def linear_functional(rng, n):
    """Random upstream buffer; L = <a, mu'> + <b, c'>."""
    return GradientBuffer(rng.normal(size=(n, 2)), np.zeros((n, 2)), np.zeros(n), rng.normal(size=(n, 3)))


def functional_value(net, gs, t, up):
    out = deform(net, gs, t)
    return float(np.sum(up.d_mu * out.mu) + np.sum(up.d_color * out.color))


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(14)
        net, gs = tiny_net(rng, 32, 24), scene(rng)
        grads, cg = deform_backward(net, gs, 0.8, GradientBuffer.zeros(len(gs)))
        for v in list(grads.values()) + list(cg.as_dict().values()):
            np.testing.assert_array_equal(v, 0.0)

    @pytest.mark.parametrize("integrator,state_conditioned", [("rk4", False), ("euler", False),
                                                              ("rk4", True), ("euler", True),
                                                              ("direct", False)])
    def test_every_weight_matches_finite_differences(self, integrator, state_conditioned):
        """3 primitives, d_s = 8, two integration steps (t = 1 at 2 steps per unit)."""
        rng = np.random.default_rng(15)
        net = tiny_net(rng, 32, 24, latent=8, hidden=6, integrator=integrator,
                       state_conditioned=state_conditioned, pos_bands=2, time_bands=2, steps_per_unit=2)
        gs = scene(rng, 3)
        up = linear_functional(rng, 3)
        grads, _ = deform_backward(net, gs, 1.0, up)
        h = 1e-4
        for name, arr in net.params().items():
            for idx in np.ndindex(arr.shape):
                x0 = arr[idx]
                arr[idx] = x0 + h
                fp = functional_value(net, gs, 1.0, up)
                arr[idx] = x0 - h
                fm = functional_value(net, gs, 1.0, up)
                arr[idx] = x0
                fd = (fp - fm) / (2 * h)
                assert grads[name][idx] == pytest.approx(fd, rel=1e-3, abs=1e-8), (name, idx)

    def test_canonical_gradients(self):
        rng = np.random.default_rng(16)
        net = tiny_net(rng, 32, 24, latent=8, hidden=6, pos_bands=3, time_bands=2)
        gs = scene(rng, 4)
        up = linear_functional(rng, 4)
        _, cg = deform_backward(net, gs, 0.6, up)
        h = 1e-5
        for name in ("mu", "color"):
            arr = getattr(gs, name)
            for idx in np.ndindex(arr.shape):
                x0 = arr[idx]
                arr[idx] = x0 + h
                fp = functional_value(net, gs, 0.6, up)
                arr[idx] = x0 - h
                fm = functional_value(net, gs, 0.6, up)
                arr[idx] = x0
                assert cg.as_dict()[name][idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-4, abs=1e-9)

    def test_centre_gradient_has_both_paths(self):
        rng = np.random.default_rng(17)
        net = tiny_net(rng, 32, 24)
        gs = scene(rng, 4)
        up = linear_functional(rng, 4)
        # encoding path off: a field that ignores mu passes dL/dmu' straight through
        flat = net.copy()
        flat.Wd[...] = 0.0
        flat.Wo[...] = 0.0
        _, cg = deform_backward(flat, gs, 0.6, up)
        np.testing.assert_array_equal(cg.d_mu, up.d_mu)
        # direct path off: only colour upstream, so any mu gradient comes through the encoding
        up_c = GradientBuffer(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros(4), up.d_color)
        _, cg = deform_backward(net, gs, 0.6, up_c)
        assert np.abs(cg.d_mu).max() > 1e-6
        # and the full gradient is the sum of the two
        _, full = deform_backward(net, gs, 0.6, up)
        up_m = GradientBuffer(up.d_mu, np.zeros((4, 2)), np.zeros(4), np.zeros((4, 3)))
        _, only_m = deform_backward(net, gs, 0.6, up_m)
        np.testing.assert_allclose(full.d_mu, cg.d_mu + only_m.d_mu, rtol=1e-12, atol=1e-15)
        assert np.abs(only_m.d_mu - up.d_mu).max() > 1e-9

    def test_covariance_gradients_pass_through(self):
        rng = np.random.default_rng(18)
        net, gs = tiny_net(rng, 32, 24), scene(rng, 4)
        up = GradientBuffer(*(rng.normal(size=s) for s in [(4, 2), (4, 2), (4,), (4, 3)]))
        _, cg = deform_backward(net, gs, 0.4, up)
        np.testing.assert_array_equal(cg.d_log_scale, up.d_log_scale)
        np.testing.assert_array_equal(cg.d_theta, up.d_theta)


class TestVelocity:
    def test_constant_positions(self):
        np.testing.assert_array_equal(discrete_velocity(np.ones((5, 3, 2)), 0.25), 0.0)

    def test_linear_motion(self):
        w = np.array([1.5, -0.5])
        pos = np.arange(6)[:, None] * w
        np.testing.assert_allclose(discrete_velocity(pos, 0.2), np.tile(w / 0.2, (5, 1)))
        assert velocity_jitter(pos, 0.2) == pytest.approx(0.0, abs=1e-12)

    def test_jitter_formula(self):
        pos = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [3.0, 1.0]])
        v = np.diff(pos, axis=0)
        expect = max(np.linalg.norm(v[1] - v[0]), np.linalg.norm(v[2] - v[1]))
        assert velocity_jitter(pos) == pytest.approx(expect)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            discrete_velocity(np.zeros((1, 2)))
