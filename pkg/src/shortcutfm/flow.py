"""Straight-line probability path, flow-matching and self-consistency losses,
the dyadic (t, dt) sampler and the training loop.

Time convention: the internal clock ``s`` runs from 0 at the prior endpoint
``x1`` to 1 at the clean endpoint ``x0``::

    x_s = (1 - s) * x1 + s * x0,        v = x0 - x1

so integrating ``dx/ds = v`` forward from s=0 enhances. In the more common
notation where time 1 is the prior, ``s = 1 - t``.

All loss values are means over the batch and over real/imaginary
components (each complex entry counts as two).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, TrainingError
from .net import adam_step, as_batch

FLOW_MATCHING = "flow_matching"
SELF_CONSISTENCY = "self_consistency"


@dataclass(frozen=True)
class StepQuery:
    t: float
    dt: float
    target_kind: str


@dataclass(frozen=True)
class PathSample:
    x0: np.ndarray
    x1: np.ndarray
    xt: np.ndarray
    v_target: np.ndarray


@dataclass
class LossBreakdown:
    fm_loss: float
    sc_loss: float
    total: float
    lambda_sc: float
    rate_sc: float
    rho: float
    epoch: int = 0
    batch: int = 0


@dataclass
class TrainConfig:
    dt_min: float = 1.0 / 128
    dt_max: float = 0.5
    rate_sc: float = 0.25
    lambda_sc: float = 0.1
    rho: float = 0.1
    batch_size: int = 16
    crop_frames: int = 32

    def validate(self):
        dyadic_levels(self.dt_min, self.dt_max)
        if not 0.0 <= self.rate_sc <= 1.0:
            raise ConfigError("rate_sc must lie in [0, 1]")
        if not 0.0 <= self.rho <= 0.2:
            raise ConfigError("rho must lie in [0, 0.2]")
        if self.lambda_sc < 0:
            raise ConfigError("lambda_sc must be non-negative")
        if self.batch_size < 1 or self.crop_frames < 1:
            raise ConfigError("batch_size and crop_frames must be positive")
        return self


def interpolate(x0, x1, s: float) -> PathSample:
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ContractError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > 1):
        raise ContractError("s must lie in [0, 1]")
    if s_arr.ndim == 1:
        s_arr = s_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    xt = (1.0 - s_arr) * x1 + s_arr * x0
    return PathSample(x0, x1, xt, x0 - x1)


def dyadic_levels(dt_min: float, dt_max: float) -> np.ndarray:
    """Exponents k with dt = 2**-k spanning [dt_min, dt_max]."""
    k_lo, k_hi = -math.log2(dt_max), -math.log2(dt_min)
    if not (k_lo.is_integer() and k_hi.is_integer()):
        raise ConfigError(f"dt_min={dt_min} and dt_max={dt_max} must be powers of two")
    if not (1 <= k_lo <= k_hi):
        raise ConfigError(f"need dt_min <= dt_max <= 1/2, got [{dt_min}, {dt_max}]")
    return np.arange(int(k_lo), int(k_hi) + 1)


def sample_step_queries(batch_size: int, rate_sc: float, rho: float, dt_min: float, dt_max: float,
                        rng: np.random.Generator, strict: bool = True) -> list[StepQuery]:
    """Split a batch into self-consistency queries (first) and flow-matching queries.

    Self-consistency: dt = 2**-k uniform over the allowed exponents, t uniform
    over multiples of 2*dt with t + 2*dt <= 1; with probability ``rho`` the
    drawn t is replaced by 0. Flow matching: dt = dt_min, t uniform over
    multiples of dt_min below 1. ``strict=False`` lifts the rho <= 0.2 bound.
    """
    levels = dyadic_levels(dt_min, dt_max)
    if not 0.0 <= rate_sc <= 1.0:
        raise ConfigError("rate_sc must lie in [0, 1]")
    if not 0.0 <= rho <= (0.2 if strict else 1.0):
        raise ConfigError(f"rho={rho} outside its allowed range")
    n_sc = min(batch_size, math.ceil(round(rate_sc * batch_size, 9)))
    n_fm = batch_size - n_sc

    k = rng.choice(levels, size=n_sc)
    dt = np.ldexp(1.0, -k)
    slots = np.ldexp(1.0, k - 1).astype(np.int64)  # admissible starts per dt: 1 / (2 dt)
    t_sc = np.floor(rng.random(n_sc) * slots) * 2.0 * dt
    t_sc[rng.random(n_sc) < rho] = 0.0
    n_grid = int(round(1.0 / dt_min))
    t_fm = rng.integers(0, n_grid, size=n_fm) * dt_min

    queries = [StepQuery(float(a), float(b), SELF_CONSISTENCY) for a, b in zip(t_sc, dt)]
    queries += [StepQuery(float(a), float(dt_min), FLOW_MATCHING) for a in t_fm]
    return queries


def is_admissible(q: StepQuery, dt_min: float, dt_max: float) -> bool:
    k = -math.log2(q.dt)
    if not k.is_integer() or not (dt_min <= q.dt <= dt_max if q.target_kind == SELF_CONSISTENCY
                                  else q.dt == dt_min):
        return False
    span = 2.0 * q.dt if q.target_kind == SELF_CONSISTENCY else q.dt
    return (q.t / span).is_integer() and q.t >= 0 and q.t + span <= 1.0


def _sample_msq(err: np.ndarray) -> np.ndarray:
    """Per-sample mean square over real and imaginary components."""
    return np.mean(err.real ** 2 + err.imag ** 2, axis=(1, 2)) / 2.0


def fm_loss(net, xt, s, v_target, y, dt_min: float, backward: bool = False) -> float:
    """Velocity regression at the smallest step: mean ||f(xt, s, dt_min, y) - v||^2."""
    xt, y, v_target = as_batch(xt), as_batch(y), as_batch(v_target)
    pred = net.forward(xt, s, dt_min, y, record=backward)
    err = pred - v_target
    loss = float(np.mean(_sample_msq(err)))
    if backward:
        B, F, T = err.shape
        net.backward(err / (F * T * B))
    return loss


def _check_sc(s, dt):
    s, dt = np.asarray(s, dtype=np.float64), np.asarray(dt, dtype=np.float64)
    if np.any(dt <= 0) or np.any(dt > 0.5) or np.any(s < 0) or np.any(s + 2.0 * dt > 1.0 + 1e-12):
        raise ContractError("self-consistency query needs 0 < dt <= 1/2 and 0 <= s, s + 2*dt <= 1")
    return s, dt


def sc_target(net, xt, s, dt, y) -> np.ndarray:
    """Average velocity of two chained dt steps; evaluated without recording (frozen)."""
    xt, y = as_batch(xt), as_batch(y)
    s, dt = _check_sc(s, dt)
    dt_b = np.broadcast_to(dt, (xt.shape[0],)).reshape(-1, 1, 1)
    v1 = net.forward(xt, s, dt, y)
    v2 = net.forward(xt + dt_b * v1, s + dt, dt, y)
    return 0.5 * (v1 + v2)


def sc_residuals(net, xt, s, dt, y) -> np.ndarray:
    """Per-sample squared deviation of the 2*dt prediction from the chained target."""
    xt, y = as_batch(xt), as_batch(y)
    target = sc_target(net, xt, s, dt, y)
    pred = net.forward(xt, s, 2.0 * np.asarray(dt, dtype=np.float64), y)
    return _sample_msq(pred - target)


def sc_loss(net, xt, s, dt, y, backward: bool = False) -> float:
    """Self-consistency loss; gradients flow only through the 2*dt prediction."""
    xt, y = as_batch(xt), as_batch(y)
    target = sc_target(net, xt, s, dt, y)
    pred = net.forward(xt, s, 2.0 * np.asarray(dt, dtype=np.float64), y, record=backward)
    err = pred - target
    loss = float(np.mean(_sample_msq(err)))
    if backward:
        B, F, T = err.shape
        net.backward(err / (F * T * B))
    return loss


def train_step(net, opt, x0, x1, y, cfg: TrainConfig, rng: np.random.Generator,
               step_index: int = 0) -> LossBreakdown:
    """One optimizer update on total = fm_loss + lambda_sc * sc_loss.

    The first ceil(rate_sc * B) samples of the batch become self-consistency
    examples, the rest flow-matching examples. Both predictions share one
    recorded forward pass.
    """
    x0, x1, y = as_batch(x0), as_batch(x1), as_batch(y)
    B, F, T = x0.shape
    queries = sample_step_queries(B, cfg.rate_sc, cfg.rho, cfg.dt_min, cfg.dt_max, rng)
    s = np.array([q.t for q in queries])
    dt = np.array([q.dt for q in queries])
    is_sc = np.array([q.target_kind == SELF_CONSISTENCY for q in queries])
    n_sc = int(is_sc.sum())
    n_fm = B - n_sc

    path = interpolate(x0, x1, s)
    target = path.v_target.copy()
    if n_sc:
        target[is_sc] = sc_target(net, path.xt[is_sc], s[is_sc], dt[is_sc], y[is_sc])
    pred_dt = np.where(is_sc, 2.0 * dt, dt)
    pred = net.forward(path.xt, s, pred_dt, y, record=True)
    err = pred - target
    per = _sample_msq(err)
    fm = float(per[~is_sc].mean()) if n_fm else 0.0
    sc = float(per[is_sc].mean()) if n_sc else 0.0
    total = fm + cfg.lambda_sc * sc
    if not math.isfinite(total):
        net._tape = None
        raise TrainingError("non-finite loss", step=step_index)
    weight = np.where(is_sc, cfg.lambda_sc / max(n_sc, 1), 1.0 / max(n_fm, 1)) / (F * T)
    net.backward(err * weight[:, None, None])
    adam_step(opt, net)
    return LossBreakdown(fm, sc, total, cfg.lambda_sc, cfg.rate_sc, cfg.rho)


def _crop(a: np.ndarray, start: int, n: int) -> np.ndarray:
    out = a[:, start:start + n]
    if out.shape[1] < n:
        out = np.pad(out, ((0, 0), (0, n - out.shape[1])))
    return out


def train_epoch(net, opt, pairs, prior, cfg: TrainConfig, rng: np.random.Generator,
                epoch: int = 0) -> list[LossBreakdown]:
    """One pass over ``pairs`` in shuffled order.

    ``pairs`` is a sequence of objects with ``clean``, ``noisy`` (F, T)
    arrays and a ``variance`` attribute (whole-utterance pooled variance of
    ``noisy``). Each utterance contributes one random crop of
    ``cfg.crop_frames`` frames per epoch.
    """
    from .priors import sample_prior

    order = rng.permutation(len(pairs))
    history = []
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        x0, y, var = [], [], []
        for i in idx:
            p = pairs[i]
            T = p.clean.shape[1]
            off = int(rng.integers(0, T - cfg.crop_frames + 1)) if T > cfg.crop_frames else 0
            x0.append(_crop(p.clean, off, cfg.crop_frames))
            y.append(_crop(p.noisy, off, cfg.crop_frames))
            var.append(p.variance)
        x0, y = np.stack(x0), np.stack(y)
        x1 = sample_prior(prior, y, rng, variance=np.array(var))
        row = train_step(net, opt, x0, x1, y, cfg, rng, step_index=b)
        row.epoch, row.batch = epoch, b
        history.append(row)
    return history


LOSS_COLUMNS = ("epoch", "batch", "fm_loss", "sc_loss", "total")


def write_loss_csv(path, history: list[LossBreakdown]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in history:
            w.writerow([r.epoch, r.batch, repr(r.fm_loss), repr(r.sc_loss), repr(r.total)])
