"""Reference-based fidelity metrics, RTF timing and the evaluation report."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ContractError, DomainError
from .spectro import StftConfig, Waveform, stft

SENTINEL_DB = 100.0
SEG_SNR_RANGE = (-10.0, 35.0)
LSD_FLOOR = 1e-8


def _samples(w):
    return np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, both signals made zero-mean first.

    Clamped to [-100, 100] dB; a perfect (scaled) estimate returns +100.
    """
    ref, est = _samples(reference), _samples(estimate)
    if ref.shape != est.shape:
        raise ContractError(f"length mismatch: {ref.size} vs {est.size}")
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DomainError("reference is silent; SI-SDR undefined")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    resid = est - target
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    # residual at rounding level of the target counts as a perfect estimate
    if den <= num * 1e-20:
        return SENTINEL_DB
    if num == 0.0:
        return -SENTINEL_DB
    return float(np.clip(10.0 * math.log10(num / den), -SENTINEL_DB, SENTINEL_DB))


def seg_snr(reference, estimate, frame: int = 256) -> float:
    """Mean of per-frame SNRs over non-overlapping frames, each clamped to [-10, 35] dB.

    Frames where the reference is exactly silent are skipped; a trailing
    partial frame is ignored.
    """
    ref, est = _samples(reference), _samples(estimate)
    if ref.shape != est.shape:
        raise ContractError(f"length mismatch: {ref.size} vs {est.size}")
    if frame <= 0:
        raise ContractError("frame must be positive")
    n = ref.size // frame
    if n == 0:
        raise ContractError(f"signal shorter than one frame ({frame} samples)")
    r = ref[: n * frame].reshape(n, frame)
    e = (ref - est)[: n * frame].reshape(n, frame)
    sig = np.sum(r * r, axis=1)
    err = np.sum(e * e, axis=1)
    keep = sig > 0
    if not np.any(keep):
        raise DomainError("reference is silent in every frame")
    lo, hi = SEG_SNR_RANGE
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(sig[keep] / err[keep])
    return float(np.mean(np.clip(snr, lo, hi)))


def log_spectral_distance(reference, estimate, stft_config: StftConfig | None = None) -> float:
    """RMS over all bins and frames of ln|E| - ln|R|, magnitudes floored at 1e-8."""
    ref, est = _samples(reference), _samples(estimate)
    if ref.shape != est.shape:
        raise ContractError(f"length mismatch: {ref.size} vs {est.size}")
    c = stft_config or StftConfig()
    R = np.abs(stft(Waveform(ref), c).bins)
    E = np.abs(stft(Waveform(est), c).bins)
    d = np.log(np.maximum(E, LSD_FLOOR)) - np.log(np.maximum(R, LSD_FLOOR))
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True)
class RtfMeasurement:
    wall_time: float
    audio_duration: float
    samples: tuple = field(default=(), repr=False)

    @property
    def rtf(self) -> float:
        return self.wall_time / self.audio_duration


def measure_rtf(enhancer, y: Waveform, repetitions: int = 5, clock=time.perf_counter) -> RtfMeasurement:
    """Median wall time of ``enhancer(y)`` over ``repetitions`` runs after one warm-up.

    Timing assumes nothing else is competing for the CPU.
    """
    if repetitions < 3:
        raise ContractError("repetitions must be at least 3")
    duration = y.duration
    if not duration > 0:
        raise ContractError("audio duration must be positive")
    enhancer(y)
    times = []
    for _ in range(repetitions):
        t0 = clock()
        enhancer(y)
        times.append(clock() - t0)
    wall = statistics.median(times)
    return RtfMeasurement(max(wall, 1e-12), duration, tuple(times))


# ---------------------------------------------------------------------------
# report

REPORT_COLUMNS = ("utterance", "prior", "K", "nfe", "si_sdr_db", "seg_snr_db", "lsd", "rtf")
METRIC_COLUMNS = ("si_sdr_db", "seg_snr_db", "lsd", "rtf")


def mean_ci95(values) -> tuple[float, float]:
    """Mean and half-width of the two-sided 95% Student-t interval (nan for n < 2)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if v.size < 2:
        return mean, float("nan")
    half = float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))
    return mean, half


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        missing = set(REPORT_COLUMNS) - row.keys()
        if missing:
            raise ContractError(f"report row lacks {sorted(missing)}")
        self.rows.append({k: row[k] for k in REPORT_COLUMNS})

    def groups(self) -> list[tuple[str, int]]:
        seen = []
        for r in self.rows:
            key = (r["prior"], int(r["K"]))
            if key not in seen:
                seen.append(key)
        return seen

    def aggregates(self) -> list[dict]:
        out = []
        for prior, K in self.groups():
            sel = [r for r in self.rows if r["prior"] == prior and int(r["K"]) == K]
            agg = {"prior": prior, "K": K, "n": len(sel)}
            for col in METRIC_COLUMNS:
                agg[col], agg[col + "_ci95"] = mean_ci95([r[col] for r in sel])
            out.append(agg)
        return out

    def write_csv(self, path) -> None:
        """Per-row block, then one ``#agg`` line per (prior, K) for the mean and one for the CI half-width."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
            w.writerow(("#agg", "prior", "K", "n", "stat") + METRIC_COLUMNS)
            for a in self.aggregates():
                for stat, suffix in (("mean", ""), ("ci95", "_ci95")):
                    w.writerow(["#agg", a["prior"], a["K"], a["n"], stat]
                               + [_fmt(a[c + suffix]) for c in METRIC_COLUMNS])

    def write_long_csv(self, path) -> None:
        """One line per (utterance, prior, K, metric) for external plotting."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("utterance", "prior", "K", "nfe", "metric", "value"))
            for r in self.rows:
                for col in METRIC_COLUMNS:
                    w.writerow([r["utterance"], r["prior"], r["K"], r["nfe"], col, _fmt(r[col])])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        rep = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != REPORT_COLUMNS:
                raise ContractError(f"{path}: unexpected header {header}")
            for line in reader:
                if line and line[0] == "#agg":
                    break
                row = dict(zip(REPORT_COLUMNS, line))
                row["K"], row["nfe"] = int(row["K"]), int(row["nfe"])
                for c in METRIC_COLUMNS:
                    row[c] = float(row[c])
                rep.rows.append(row)
        return rep


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
