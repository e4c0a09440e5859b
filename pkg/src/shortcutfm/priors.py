"""Endpoint distributions the ODE starts from.

Complex Gaussian convention throughout: a "unit" complex normal has
variance 1 per complex coefficient, i.e. 1/2 per real and imaginary part.

=====  ==========================================================
G      x1 ~ CN(0, I), independent of y
S      x1 = y + sigma_end * eps
D      x1 = y + sqrt(alpha * var(y)) * eps, var pooled per utterance
F      x1 = y exactly (no randomness consumed)
=====  ==========================================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

KINDS = ("G", "S", "D", "F")


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "S"
    sigma_end: float = 0.389
    alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown prior {self.kind!r}; expected one of {KINDS}")
        if self.kind == "S" and not self.sigma_end > 0:
            raise ConfigError("sigma_end must be positive for prior S")
        if self.kind == "D" and not self.alpha > 0:
            raise ConfigError("alpha must be positive for prior D")

    @property
    def stochastic(self) -> bool:
        return self.kind != "F"


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) samples."""
    z = rng.standard_normal((2,) + tuple(shape))
    return (z[0] + 1j * z[1]) * np.sqrt(0.5)


def pooled_variance(y) -> float:
    """Unbiased variance of all real and imaginary parts pooled, per complex coefficient.

    For y ~ CN(m, v) with Re m == Im m (e.g. zero-mean spectra) this
    estimates v; differing real and imaginary means add to the estimate.
    """
    y = np.asarray(y)
    parts = np.concatenate([y.real.ravel(), y.imag.ravel()])
    if parts.size < 2:
        raise DomainError("need at least one complex coefficient to estimate a variance")
    return 2.0 * float(np.var(parts, ddof=1))


def sample_prior(spec: PriorSpec, y, rng: np.random.Generator | None = None,
                 variance: float | None = None) -> np.ndarray:
    """Draw x1 ~ p1(. | y) with the same shape as ``y``.

    ``y`` may be a single (F, T) spectrogram or a batch (B, F, T). For prior
    D the variance is estimated per leading-axis item of a batch unless
    ``variance`` (scalar or per-item array) is given, which lets callers
    that crop utterances keep the whole-utterance estimate.
    """
    y = np.asarray(getattr(y, "bins", y))
    if not np.all(np.isfinite(y)):
        raise DomainError("observation contains non-finite values")
    if spec.kind == "F":
        return y.astype(np.complex128, copy=True)
    if rng is None:
        raise ConfigError(f"prior {spec.kind} needs a random generator")
    eps = complex_normal(rng, y.shape)
    if spec.kind == "G":
        return eps
    if spec.kind == "S":
        return y + spec.sigma_end * eps
    if variance is None:
        variance = pooled_variance(y) if y.ndim < 3 else np.array([pooled_variance(item) for item in y])
    scale = np.sqrt(spec.alpha * np.asarray(variance, dtype=np.float64))
    if scale.ndim == 1:
        scale = scale.reshape((-1,) + (1,) * (y.ndim - 1))
    return y + scale * eps
