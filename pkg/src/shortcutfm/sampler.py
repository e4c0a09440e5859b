"""K-step deterministic ODE inference and a reference Euler-Maruyama stepper."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import ContractError, InferenceError
from .net import as_batch
from .priors import PriorSpec, sample_prior


@dataclass(frozen=True)
class OdeSchedule:
    """Uniform grid s_k = k/K on the internal clock (s=0 at the prior)."""

    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ContractError(f"step count must be a positive integer, got {self.K}")

    @property
    def d(self) -> float:
        return 1.0 / self.K

    @property
    def times(self) -> list[float]:
        # exact rationals so K*d == 1 regardless of K
        return [float(Fraction(k, self.K)) for k in range(self.K)]


class NfeCounter:
    """Counts network evaluations of the enhance call it is passed to."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


def nfe_count(counter: NfeCounter) -> int:
    return counter.count


def integrate(net, x1, y, K: int, counter: NfeCounter | None = None) -> np.ndarray:
    """Euler integration of the learned field from s=0 to s=1 in K uniform steps."""
    sched = OdeSchedule(K)
    x = np.array(x1, dtype=np.complex128)
    d = sched.d
    if counter is not None:
        counter.reset()
    for k, s in enumerate(sched.times):
        v = net.forward(x, s, d, y)
        if counter is not None:
            counter.count += 1
        x = x + d * v.reshape(x.shape)
        if not np.all(np.isfinite(x)):
            raise InferenceError("non-finite state", step=k + 1, nfe=k + 1)
    return x


def enhance(net, y, prior: PriorSpec, K: int, rng: np.random.Generator | None = None,
            counter: NfeCounter | None = None, variance=None):
    """Draw x1 from the prior around ``y`` and integrate to the clean estimate.

    ``y`` may be a ComplexSpectrogram (the result is one too) or an array of
    shape (F, T) / (B, F, T). Exactly K network evaluations are made.
    """
    bins = getattr(y, "bins", None)
    arr = np.asarray(y if bins is None else bins)
    x1 = sample_prior(prior, arr, rng, variance=variance)
    yb = as_batch(arr)
    x0 = integrate(net, as_batch(x1), yb, K, counter).reshape(arr.shape)
    return y.with_bins(x0) if bins is not None else x0


# ---------------------------------------------------------------------------
# reverse-time SDE reference (analytic fields only)

@dataclass(frozen=True)
class SdeCoeffs:
    """Forward SDE dx = drift(x, t) dt + diffusion(t) dw and its score grad log p_t."""

    drift: Callable
    diffusion: Callable
    score: Callable


def euler_maruyama_step(x, t_k: float, dt: float, coeffs: SdeCoeffs, rng: np.random.Generator):
    """One reverse-time step from t_k to t_k - dt:

        x' = x - dt * [f(x, t_k) - g(t_k)^2 * score(x, t_k)] + g(t_k) * sqrt(dt) * z

    With g == 0 this is a plain Euler step of dx/dt = f taken backwards in
    time and consumes no randomness.
    """
    if not dt > 0:
        raise ContractError("step must be positive")
    if t_k - dt < -1e-12:
        raise ContractError(f"step of {dt} from t={t_k} leaves [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    g = float(coeffs.diffusion(t_k))
    if g < 0:
        raise ContractError("diffusion coefficient must be non-negative")
    drift = coeffs.drift(x, t_k)
    if g == 0.0:
        return x - dt * drift
    out = x - dt * (drift - g * g * coeffs.score(x, t_k))
    return out + g * np.sqrt(dt) * rng.standard_normal(x.shape)


def reverse_sde(x1, coeffs: SdeCoeffs, n_steps: int, rng: np.random.Generator, t_end: float = 1.0):
    """Integrate the reverse SDE from t_end down to 0 with uniform steps."""
    x = np.asarray(x1, dtype=np.float64)
    dt = t_end / n_steps
    for k in range(n_steps, 0, -1):
        x = euler_maruyama_step(x, k * dt, dt, coeffs, rng)
    return x


def ou_marginal(theta: float, sigma: float, mean0: float, var0: float, t: float) -> tuple[float, float]:
    """Mean and variance at time t of dx = -theta x dt + sigma dw started from N(mean0, var0)."""
    e = np.exp(-theta * t)
    return mean0 * e, var0 * e * e + sigma * sigma * (1.0 - e * e) / (2.0 * theta)


def ou_coeffs(theta: float, sigma: float, mean0: float, var0: float) -> SdeCoeffs:
    """Ornstein-Uhlenbeck coefficients with the closed-form Gaussian score."""
    def score(x, t):
        m, v = ou_marginal(theta, sigma, mean0, var0, t)
        return -(x - m) / v

    return SdeCoeffs(drift=lambda x, t: -theta * x, diffusion=lambda t: sigma, score=score)
