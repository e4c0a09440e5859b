import math

import numpy as np
import pytest

from conftest import crandn
from shortcutfm import flow, oracle
from shortcutfm.errors import ConfigError, ContractError, TrainingError
from shortcutfm.flow import (FLOW_MATCHING, SELF_CONSISTENCY, StepQuery, TrainConfig, dyadic_levels, fm_loss,
                             interpolate, is_admissible, sample_step_queries, sc_loss, sc_residuals, sc_target,
                             train_step)
from shortcutfm.net import AdamState, VelocityNet
from shortcutfm.oracle import ConstantField


class TestInterpolate:
    def test_endpoints_and_midpoint(self):
        x0, x1 = np.array([2 + 2j]), np.array([0j])
        assert interpolate(x0, x1, 0.0).xt[0] == 0
        assert interpolate(x0, x1, 1.0).xt[0] == 2 + 2j
        p = interpolate(x0, x1, 0.5)
        assert p.xt[0] == 1 + 1j and p.v_target[0] == 2 + 2j

    def test_per_sample_times(self, rng):
        x0, x1 = crandn(rng, (3, 2, 2)), crandn(rng, (3, 2, 2))
        s = np.array([0.0, 0.25, 1.0])
        p = interpolate(x0, x1, s)
        for i in range(3):
            np.testing.assert_allclose(p.xt[i], (1 - s[i]) * x1[i] + s[i] * x0[i])
        np.testing.assert_array_equal(p.v_target, x0 - x1)

    def test_contracts(self):
        with pytest.raises(ContractError):
            interpolate(np.zeros(2), np.zeros(3), 0.5)
        with pytest.raises(ContractError):
            interpolate(np.zeros(2), np.zeros(2), 1.5)


class TestQuerySampler:
    def test_levels(self):
        np.testing.assert_array_equal(dyadic_levels(1 / 128, 0.5), np.arange(1, 8))
        with pytest.raises(ConfigError):
            dyadic_levels(0.01, 0.5)
        with pytest.raises(ConfigError):
            dyadic_levels(1 / 128, 1.0)

    def test_split_sizes(self, rng):
        q = sample_step_queries(16, 0.25, 0.1, 1 / 128, 0.5, rng)
        kinds = [x.target_kind for x in q]
        assert kinds == [SELF_CONSISTENCY] * 4 + [FLOW_MATCHING] * 12
        q = sample_step_queries(10, 0.25, 0.1, 1 / 128, 0.5, rng)
        assert sum(x.target_kind == SELF_CONSISTENCY for x in q) == 3

    def test_rho_one_forces_zero_start(self, rng):
        q = sample_step_queries(64, 1.0, 1.0, 1 / 128, 0.5, rng, strict=False)
        assert all(x.t == 0.0 for x in q)
        assert len({x.dt for x in q}) > 1

    def test_rho_bound(self, rng):
        with pytest.raises(ConfigError):
            sample_step_queries(4, 0.25, 0.5, 1 / 128, 0.5, rng)

    def test_admissible_examples(self):
        assert is_admissible(StepQuery(0.5, 0.25, SELF_CONSISTENCY), 1 / 128, 0.5)
        assert not is_admissible(StepQuery(0.25, 0.25, SELF_CONSISTENCY), 1 / 128, 0.5)
        assert not is_admissible(StepQuery(0.75, 0.25, SELF_CONSISTENCY), 1 / 128, 0.5)
        assert is_admissible(StepQuery(127 / 128, 1 / 128, FLOW_MATCHING), 1 / 128, 0.5)
        assert not is_admissible(StepQuery(0.5, 0.25, FLOW_MATCHING), 1 / 128, 0.5)

    def test_all_draws_admissible(self):
        rng = np.random.default_rng(0)
        n = 0
        levels = set()
        while n < 100_000:
            for q in sample_step_queries(1000, 0.5, 0.2, 1 / 128, 0.5, rng):
                assert is_admissible(q, 1 / 128, 0.5)
                if q.target_kind == SELF_CONSISTENCY:
                    levels.add(q.dt)
            n += 1000
        assert levels == {2.0 ** -k for k in range(1, 8)}

    def test_zero_fraction_tracks_rho(self):
        rng = np.random.default_rng(1)
        q = sample_step_queries(50_000, 1.0, 0.2, 1 / 128, 0.5, rng)
        # zero start arises from the remap (rho) or naturally (mean 1/2^(k-1) over k)
        natural = np.mean([2.0 ** -(k - 1) for k in range(1, 8)])
        expected = 0.2 + 0.8 * natural
        frac = np.mean([x.t == 0 for x in q])
        assert abs(frac - expected) < 5 * math.sqrt(expected * (1 - expected) / len(q))


class TestLosses:
    def test_fm_loss_zero_network(self):
        net = VelocityNet.create(1, seed=0, hidden=4, n_blocks=1, embed_dim=2, dtype="float64")
        v = np.full((1, 1, 1), 2 + 2j)
        # mean over the two real components of |0 - (2+2j)|^2
        assert fm_loss(net, np.zeros((1, 1, 1)), 0.5, v, np.zeros((1, 1, 1)), 1 / 128) == pytest.approx(4.0)

    def test_sc_loss_zero_for_constant_field(self, rng):
        field = ConstantField(crandn(rng, (3, 4)))
        for dt in (0.5, 0.25, 1 / 128):
            assert sc_loss(field, crandn(rng, (2, 3, 4)), 0.0, dt, crandn(rng, (2, 3, 4))) == 0.0

    def test_sc_residual_linear_field_example(self):
        # f(x) = x (no time dependence); two dt steps give (x + (x + dt x)) / 2
        class Identity:
            def forward(self, x, t, dt, y, record=False):
                return np.asarray(x, dtype=np.complex128)

        xt = np.ones((1, 1, 1), dtype=complex)
        r = sc_residuals(Identity(), xt, 0.0, 0.25, xt)
        assert r[0] == pytest.approx((0.125 ** 2) / 2)

    def test_matches_brute_force(self, small_net, rng):
        xt, y = crandn(rng, (6, 5, 3)), crandn(rng, (6, 5, 3))
        s = np.array([0.0, 0.0, 0.5, 0.25, 0.75, 0.5])
        dt = np.array([0.5, 1 / 128, 0.25, 1 / 8, 1 / 8, 1 / 4])
        main = sc_residuals(small_net, xt, s, dt, y)
        for i in range(6):
            assert abs(main[i] - oracle.brute_force_sc_residual(small_net, xt[i], s[i], dt[i], y[i])) < 1e-12
        assert sc_loss(small_net, xt, s, dt, y) == pytest.approx(np.mean(main), rel=1e-12)

    def test_inadmissible_sc_query(self, small_net, rng):
        with pytest.raises(ContractError):
            sc_target(small_net, crandn(rng, (5, 2)), 0.75, 0.25, crandn(rng, (5, 2)))

    def test_sc_gradient_treats_target_as_constant(self, small_net, rng):
        xt, y = crandn(rng, (2, 5, 3)), crandn(rng, (2, 5, 3))
        s, dt = np.array([0.0, 0.5]), np.array([0.25, 0.125])
        target = sc_target(small_net, xt, s, dt, y)
        small_net.zero_grad()
        sc_loss(small_net, xt, s, dt, y, backward=True)
        grad = small_net.grad.copy()

        def frozen_loss():
            pred = small_net.forward(xt, s, 2 * dt, y)
            return float(np.mean(np.abs(pred - target) ** 2) / 2)

        for i in rng.choice(small_net.n_params, 30, replace=False):
            num = oracle.central_difference(frozen_loss, small_net.params, int(i), 1e-5)
            assert abs(grad[i] - num) <= 1e-7 * max(1.0, abs(num))

    def test_fm_gradient(self, small_net, rng):
        xt, y, v = crandn(rng, (2, 5, 3)), crandn(rng, (2, 5, 3)), crandn(rng, (2, 5, 3))
        small_net.zero_grad()
        fm_loss(small_net, xt, 0.25, v, y, 1 / 128, backward=True)
        grad = small_net.grad.copy()
        f = lambda: fm_loss(small_net, xt, 0.25, v, y, 1 / 128)  # noqa: E731
        for i in rng.choice(small_net.n_params, 30, replace=False):
            num = oracle.central_difference(f, small_net.params, int(i), 1e-5)
            assert abs(grad[i] - num) <= 1e-7 * max(1.0, abs(num))


class TestTrainStep:
    def _data(self, rng, B=8):
        return crandn(rng, (B, 5, 3)), crandn(rng, (B, 5, 3)), crandn(rng, (B, 5, 3))

    def test_breakdown_combines(self, small_net, rng):
        x0, x1, y = self._data(rng)
        cfg = TrainConfig(lambda_sc=0.3, rate_sc=0.5)
        r = train_step(small_net, AdamState(), x0, x1, y, cfg, np.random.default_rng(0))
        assert r.total == pytest.approx(r.fm_loss + 0.3 * r.sc_loss)
        assert r.fm_loss >= 0 and r.sc_loss >= 0

    def test_gradient_equals_sum_of_parts(self, small_net, rng):
        """Total gradient = fm gradient on the FM rows + lambda * sc gradient on the SC rows."""
        x0, x1, y = self._data(rng)
        cfg = TrainConfig(lambda_sc=0.7, rate_sc=0.5)
        captured = {}
        orig_step = flow.adam_step
        flow.adam_step = lambda opt, net: captured.setdefault("g", net.grad.copy())
        try:
            train_step(small_net, AdamState(), x0, x1, y, cfg, np.random.default_rng(3))
        finally:
            flow.adam_step = orig_step
        q = sample_step_queries(8, 0.5, cfg.rho, cfg.dt_min, cfg.dt_max, np.random.default_rng(3))
        s = np.array([a.t for a in q])
        dt = np.array([a.dt for a in q])
        p = interpolate(x0, x1, s)
        small_net.zero_grad()
        fm_loss(small_net, p.xt[4:], s[4:], p.v_target[4:], y[4:], cfg.dt_min, backward=True)
        g_fm = small_net.grad.copy()
        small_net.zero_grad()
        sc_loss(small_net, p.xt[:4], s[:4], dt[:4], y[:4], backward=True)
        np.testing.assert_allclose(captured["g"], g_fm + 0.7 * small_net.grad, rtol=1e-9, atol=1e-12)

    def test_lambda_zero_is_plain_flow_matching_on_fm_rows(self, small_net, rng):
        x0, x1, y = self._data(rng)
        a, b = small_net.copy(), small_net.copy()
        train_step(a, AdamState(lr=1e-2), x0, x1, y, TrainConfig(lambda_sc=0.0, rate_sc=0.25),
                   np.random.default_rng(5))
        q = sample_step_queries(8, 0.25, 0.1, 1 / 128, 0.5, np.random.default_rng(5))
        s = np.array([x.t for x in q])
        p = interpolate(x0, x1, s)
        fm_loss(b, p.xt[2:], s[2:], p.v_target[2:], y[2:], 1 / 128, backward=True)
        from shortcutfm.net import adam_step
        adam_step(AdamState(lr=1e-2), b)
        np.testing.assert_allclose(a.params, b.params, rtol=1e-12, atol=1e-15)

    def test_deterministic(self, small_net, rng):
        x0, x1, y = self._data(rng)
        a, b = small_net.copy(), small_net.copy()
        for net in (a, b):
            opt = AdamState(lr=1e-2)
            g = np.random.default_rng(9)
            for _ in range(3):
                train_step(net, opt, x0, x1, y, TrainConfig(), g)
        assert a.params.tobytes() == b.params.tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self, small_net, rng):
        x0, x1, y = self._data(rng)
        x0[0, 0, 0] = np.inf
        with pytest.raises(TrainingError) as info:
            train_step(small_net, AdamState(), x0, x1, y, TrainConfig(rate_sc=0.0), rng, step_index=7)
        assert info.value.step == 7

    def test_toy_convergence(self):
        rng = np.random.default_rng(0)
        net = VelocityNet.create(2, seed=0, hidden=32, n_blocks=2, embed_dim=8, dtype="float64")
        opt = AdamState(lr=3e-3)
        cfg = TrainConfig(batch_size=32)
        mean = np.array([1.0 + 0.5j, -0.5 + 1j])[None, :, None]

        def batch():
            x0 = mean + 0.1 * crandn(rng, (32, 2, 1))
            return x0, np.zeros_like(x0) + 0.3 * crandn(rng, (32, 2, 1)), np.zeros_like(x0)

        first = np.mean([train_step(net.copy(), AdamState(lr=0), *batch(), cfg, rng).fm_loss for _ in range(10)])
        for _ in range(400):
            train_step(net, opt, *batch(), cfg, rng)
        recent = np.mean([train_step(net, opt, *batch(), cfg, rng).fm_loss for _ in range(20)])
        assert recent < 0.1 * first

    def test_config_validation(self):
        for bad in (dict(rate_sc=1.5), dict(rho=0.3), dict(lambda_sc=-1), dict(dt_min=0.3), dict(batch_size=0)):
            with pytest.raises(ConfigError):
                TrainConfig(**bad).validate()


def test_loss_csv(tmp_path):
    rows = [flow.LossBreakdown(0.5, 0.25, 0.525, 0.1, 0.25, 0.1, epoch=1, batch=2)]
    flow.write_loss_csv(tmp_path / "l.csv", rows)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "epoch,batch,fm_loss,sc_loss,total"
    assert lines[1] == "1,2,0.5,0.25,0.525"
