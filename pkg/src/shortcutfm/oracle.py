"""Independent references for checking the main code paths.

Nothing here imports from ``flow``: the self-consistency residual below is
recomputed element by element with plain Python arithmetic, so agreement
with ``flow.sc_residuals`` is evidence, not tautology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class GaussianPair:
    mean0: np.ndarray
    cov0: np.ndarray
    mean1: np.ndarray
    cov1: np.ndarray

    def __post_init__(self):
        for name in ("mean0", "cov0", "mean1", "cov1"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("cov0", "cov1"):
            c = np.atleast_2d(getattr(self, name))
            object.__setattr__(self, name, c)
            if not np.allclose(c, c.T):
                raise ContractError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError as exc:
                raise ContractError(f"{name} is not positive definite") from exc
        if not (self.mean0.shape == self.mean1.shape and self.cov0.shape == self.cov1.shape
                and self.cov0.shape == 2 * self.mean0.shape):
            raise ContractError("inconsistent dimensions in GaussianPair")


def exact_pair_velocity(x0, x1):
    """Velocity of the straight path from x1 (s=0) to x0 (s=1)."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ContractError("pair dimensions differ")
    return x0 - x1


def marginal_flow_moments(pair: GaussianPair, s: float):
    """Mean and covariance of (1-s) x1 + s x0 with x0, x1 drawn independently."""
    mean = (1.0 - s) * pair.mean1 + s * pair.mean0
    cov = (1.0 - s) ** 2 * pair.cov1 + s ** 2 * pair.cov0
    return mean, cov


class ConstantField:
    """State-independent velocity field; any such field is exactly self-consistent."""

    def __init__(self, value):
        self.value = np.asarray(value)

    def forward(self, x, t, dt, y, record=False):
        x = np.asarray(getattr(x, "bins", x))
        batch = x if x.ndim == 3 else x[None]
        return np.broadcast_to(self.value, batch.shape).astype(np.complex128)

    __call__ = forward


def pair_field(x0, x1) -> ConstantField:
    """Exact velocity field of the straight path joining one known pair."""
    return ConstantField(exact_pair_velocity(x0, x1))


def brute_force_sc_residual(net, xt, s: float, dt: float, y) -> float:
    """Squared deviation of f(x, s, 2dt) from the mean of two chained dt steps.

    Single sample: ``xt`` and ``y`` are (F, T). Mean over real and imaginary
    components, same normalization as the training loss.
    """
    if not (0 < dt <= 0.5 and s >= 0 and s + 2 * dt <= 1 + 1e-12):
        raise ContractError("inadmissible (s, dt)")
    xt = np.asarray(xt, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    n_f, n_t = xt.shape

    first = np.asarray(net.forward(xt[None], s, dt, y[None]))[0]
    mid = np.empty((n_f, n_t), dtype=np.complex128)
    for i in range(n_f):
        for j in range(n_t):
            mid[i, j] = complex(xt[i, j]) + dt * complex(first[i, j])
    second = np.asarray(net.forward(mid[None], s + dt, dt, y[None]))[0]
    big = np.asarray(net.forward(xt[None], s, dt + dt, y[None]))[0]

    total = 0.0
    for i in range(n_f):
        for j in range(n_t):
            target = 0.5 * complex(first[i, j]) + 0.5 * complex(second[i, j])
            diff = complex(big[i, j]) - target
            total += diff.real * diff.real + diff.imag * diff.imag
    return total / (2 * n_f * n_t)


def central_difference(loss, params: np.ndarray, index: int, h: float = 1e-4) -> float:
    """(L(p + h e_i) - L(p - h e_i)) / 2h, restoring ``params`` afterwards."""
    old = params[index]
    params[index] = old + h
    up = loss()
    params[index] = old - h
    down = loss()
    params[index] = old
    return (up - down) / (2 * h)
