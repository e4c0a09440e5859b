import numpy as np
import pytest

from conftest import crandn
from shortcutfm.errors import ContractError, InferenceError
from shortcutfm.oracle import ConstantField
from shortcutfm.priors import PriorSpec
from shortcutfm.sampler import (NfeCounter, OdeSchedule, SdeCoeffs, enhance, euler_maruyama_step, integrate,
                                nfe_count, ou_coeffs, ou_marginal, reverse_sde)
from shortcutfm.spectro import StftConfig, Waveform, stft


class Recorder:
    """Field that records its (t, dt) queries; velocity = a constant."""

    def __init__(self, value, blow_up_at=None):
        self.value, self.calls, self.blow_up_at = value, [], blow_up_at

    def forward(self, x, t, dt, y, record=False):
        self.calls.append((float(np.asarray(t).ravel()[0]), float(np.asarray(dt).ravel()[0])))
        if self.blow_up_at is not None and len(self.calls) >= self.blow_up_at:
            return np.full(np.asarray(x).shape, np.inf + 0j)
        return np.full(np.asarray(x).shape, self.value, dtype=complex)


@pytest.mark.parametrize("K", [1, 2, 3, 4, 7, 8, 16, 128])
def test_schedule(K):
    sched = OdeSchedule(K)
    assert sched.d * K == 1.0
    assert sched.times[0] == 0.0 and len(sched.times) == K
    assert sched.times[-1] + sched.d == pytest.approx(1.0, abs=1e-15)


def test_bad_step_count():
    for K in (0, -1, 1.5):
        with pytest.raises(ContractError):
            OdeSchedule(K)


@pytest.mark.parametrize("K", [1, 2, 4, 8, 16])
def test_constant_field_telescopes(K):
    f = Recorder(1 + 2j)
    counter = NfeCounter()
    x = integrate(f, np.zeros((1, 2, 2), dtype=complex), np.zeros((1, 2, 2)), K, counter)
    np.testing.assert_allclose(x, 1 + 2j, rtol=0, atol=1e-14)
    assert nfe_count(counter) == K and len(f.calls) == K
    assert [c[1] for c in f.calls] == [1.0 / K] * K
    assert [c[0] for c in f.calls] == OdeSchedule(K).times


def test_enhance_with_frozen_prior_and_zero_field():
    y = crandn(np.random.default_rng(0), (4, 3))
    out = enhance(ConstantField(np.zeros((4, 3))), y, PriorSpec("F"), 4)
    np.testing.assert_array_equal(out, y)


def test_enhance_spectrogram_round_trip():
    spec = stft(Waveform(np.random.default_rng(1).standard_normal(1000)), StftConfig())
    out = enhance(ConstantField(np.zeros(spec.bins.shape)), spec, PriorSpec("F"), 2)
    assert out.length == spec.length and np.array_equal(out.bins, spec.bins)


def test_prior_randomness_is_reproducible():
    y = crandn(np.random.default_rng(2), (4, 3))
    f = ConstantField(np.zeros((4, 3)))
    a = enhance(f, y, PriorSpec("S"), 2, np.random.default_rng(7))
    b = enhance(f, y, PriorSpec("S"), 2, np.random.default_rng(7))
    assert np.array_equal(a, b) and not np.array_equal(a, y)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts_with_step():
    counter = NfeCounter()
    with pytest.raises(InferenceError) as info:
        integrate(Recorder(1.0, blow_up_at=3), np.zeros((1, 1, 1), dtype=complex), np.zeros((1, 1, 1)), 8, counter)
    assert info.value.step == 3 and info.value.nfe == 3


class TestEulerMaruyama:
    def test_zero_diffusion_is_deterministic_euler(self):
        coeffs = SdeCoeffs(drift=lambda x, t: np.sin(x) * t, diffusion=lambda t: 0.0, score=lambda x, t: x)
        rng = np.random.default_rng(0)
        state = rng.bit_generator.state
        x = np.linspace(-2, 2, 11)
        out = euler_maruyama_step(x, 0.7, 0.01, coeffs, rng)
        assert out.tobytes() == (x - 0.01 * (np.sin(x) * 0.7)).tobytes()
        assert rng.bit_generator.state == state

    def test_single_step_formula(self):
        coeffs = SdeCoeffs(drift=lambda x, t: 2 * x, diffusion=lambda t: 0.5, score=lambda x, t: -x)
        x = np.array([1.0, -1.0])
        z = np.random.default_rng(3).standard_normal(2)
        out = euler_maruyama_step(x, 1.0, 0.04, coeffs, np.random.default_rng(3))
        np.testing.assert_allclose(out, x - 0.04 * (2 * x + 0.25 * x) + 0.5 * 0.2 * z)

    def test_contracts(self):
        coeffs = SdeCoeffs(lambda x, t: x, lambda t: -1.0, lambda x, t: x)
        with pytest.raises(ContractError):
            euler_maruyama_step(np.zeros(1), 0.5, 0.1, coeffs, np.random.default_rng())
        with pytest.raises(ContractError):
            euler_maruyama_step(np.zeros(1), 0.05, 0.1, coeffs, np.random.default_rng())
        with pytest.raises(ContractError):
            euler_maruyama_step(np.zeros(1), 0.5, 0.0, coeffs, np.random.default_rng())

    def test_ou_marginal_closed_form(self):
        m, v = ou_marginal(1.0, np.sqrt(2.0), 3.0, 0.0, 50.0)
        assert abs(m) < 1e-12 and v == pytest.approx(1.0)
        assert ou_marginal(0.5, 1.0, 2.0, 0.3, 0.0) == (2.0, 0.3)

    def test_reverse_ou_recovers_initial_law(self):
        theta, sigma, m0, v0 = 1.0, 1.0, 2.0, 0.25
        n, steps = 20_000, 200
        rng = np.random.default_rng(4)
        m1, v1 = ou_marginal(theta, sigma, m0, v0, 1.0)
        x1 = m1 + np.sqrt(v1) * rng.standard_normal(n)
        x0 = reverse_sde(x1, ou_coeffs(theta, sigma, m0, v0), steps, rng)
        assert abs(x0.mean() - m0) < 0.05
        assert abs(x0.var() - v0) < 0.05
