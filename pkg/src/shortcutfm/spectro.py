"""Signal synthesis, STFT/ISTFT, SNR-controlled mixing, chunking and file I/O.

Everything here is a pure function of its inputs; randomness enters only
through explicit seeds or ``numpy.random.Generator`` handles.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import ConfigError, ContractError, DomainError, FormatError

SAMPLE_RATE = 16000

SIGNAL_KINDS = ("harmonic", "vowel", "glide")
NOISE_KINDS = ("white", "pink", "harmonic-babble")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ContractError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise ContractError("waveform must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise DomainError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ContractError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters. Validated on construction."""

    fft_size: int = 256
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size <= 0 or not (0 < self.hop <= self.fft_size):
            raise ConfigError(f"need 0 < hop <= fft_size, got hop={self.hop}, fft_size={self.fft_size}")
        try:
            win = self.window_array()
        except ValueError as exc:
            raise ConfigError(f"unknown window {self.window!r}") from exc
        if not sps.check_COLA(win, self.fft_size, self.fft_size - self.hop):
            raise ConfigError(
                f"window {self.window!r} with fft_size={self.fft_size}, hop={self.hop} "
                "violates the constant-overlap-add condition")

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        # periodic (fftbins=True) variants are the COLA-friendly ones
        return sps.get_window(self.window, self.fft_size, fftbins=True).astype(np.float64)

    def to_dict(self) -> dict:
        return {"fft_size": self.fft_size, "hop": self.hop, "window": self.window}


@dataclass(frozen=True)
class ComplexSpectrogram:
    """F x T complex STFT grid plus what is needed to invert it."""

    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        bins = np.asarray(self.bins)
        if bins.ndim != 2 or bins.shape[0] != self.config.n_freq:
            raise ContractError(
                f"expected ({self.config.n_freq}, T) bins for fft_size={self.config.fft_size}, got {bins.shape}")
        if not np.all(np.isfinite(bins)):
            raise DomainError("spectrogram contains non-finite entries")
        object.__setattr__(self, "bins", bins.astype(np.complex128, copy=False))

    @property
    def shape(self):
        return self.bins.shape

    def with_bins(self, bins: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(bins, self.config, self.length, self.sample_rate)


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    noise_kind: str = "white"
    seed: int = 0


# ---------------------------------------------------------------------------
# synthesis

def _syllable_envelope(n, sr, rng):
    """Bursts of 120-320 ms separated by 40-140 ms gaps, raised-cosine edges."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.08) * sr)
    while pos < n:
        dur = int(rng.uniform(0.12, 0.32) * sr)
        ramp = max(1, min(dur // 4, int(0.03 * sr)))
        seg = np.ones(dur)
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        seg[:ramp] = edge
        seg[dur - ramp:] = edge[::-1]
        seg *= rng.uniform(0.5, 1.0)
        stop = min(n, pos + dur)
        env[pos:stop] = seg[: stop - pos]
        pos = stop + int(rng.uniform(0.04, 0.14) * sr)
    return env


def _harmonic_stack(n, sr, rng, f0, vibrato, glide, formants=None, tilt=1.0):
    t = np.arange(n) / sr
    rate = rng.uniform(3.5, 6.5)
    phi = rng.uniform(0, 2 * np.pi)
    f0_track = f0 * (1.0 + vibrato * np.sin(2 * np.pi * rate * t + phi)) * (1.0 + glide * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    top = f0_track.max()
    out = np.zeros(n)
    h = 1
    while h * top < 0.45 * sr and h <= 60:
        amp = h ** (-tilt)
        if formants is not None:
            fh = h * f0
            amp *= sum(g * np.exp(-0.5 * ((fh - fc) / bw) ** 2) for fc, bw, g in formants) + 0.05
        out += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        h += 1
    return out


def synth_clean(kind: str, duration: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Speech-like harmonic signal with syllabic amplitude and pitch modulation.

    ``kind`` is one of ``SIGNAL_KINDS``. Output is deterministic in
    (kind, duration, seed, sample_rate) and peak-normalized to at most 0.9.
    """
    if kind not in SIGNAL_KINDS:
        raise ConfigError(f"unknown signal kind {kind!r}; expected one of {SIGNAL_KINDS}")
    if not duration > 0:
        raise ContractError("duration must be positive")
    n = max(1, int(round(duration * sample_rate)))
    rng = np.random.default_rng([SIGNAL_KINDS.index(kind), int(seed)])
    f0 = rng.uniform(95.0, 230.0)
    if kind == "harmonic":
        x = _harmonic_stack(n, sample_rate, rng, f0, vibrato=0.03, glide=0.0, tilt=1.0)
    elif kind == "vowel":
        formants = [(rng.uniform(300, 900), 120.0, 1.0),
                    (rng.uniform(900, 2300), 180.0, 0.6),
                    (rng.uniform(2300, 3200), 250.0, 0.3)]
        x = _harmonic_stack(n, sample_rate, rng, f0, vibrato=0.02, glide=0.0, formants=formants, tilt=0.5)
    else:
        x = _harmonic_stack(n, sample_rate, rng, f0, vibrato=0.01, glide=rng.uniform(-0.3, 0.3), tilt=1.2)
    x *= _syllable_envelope(n, sample_rate, rng)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= rng.uniform(0.5, 0.9) / peak
    return Waveform(x, sample_rate)


def make_noise(kind: str, n: int, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / sample_rate)
        f[0] = f[1] if n > 2 else 1.0
        return np.fft.irfft(spec / np.sqrt(f), n)
    if kind == "harmonic-babble":
        out = np.zeros(n)
        for _ in range(int(rng.integers(5, 9))):
            f0 = rng.uniform(90.0, 260.0)
            voice = _harmonic_stack(n, sample_rate, rng, f0 * rng.uniform(0.97, 1.03), vibrato=0.04,
                                    glide=rng.uniform(-0.1, 0.1), tilt=1.0)
            out += voice * (0.3 + _syllable_envelope(n, sample_rate, rng))
        return out
    raise ConfigError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def mix(clean: Waveform, spec: MixSpec) -> tuple[Waveform, Waveform]:
    """Add noise at an exact RMS SNR.

    Returns ``(noisy, noise)`` where ``noise`` is already scaled, so
    ``noisy.samples == clean.samples + noise.samples``.
    """
    if not math.isfinite(spec.snr_db):
        raise DomainError("snr_db must be finite")
    level = rms(clean.samples)
    if level == 0.0:
        raise DomainError("clean signal is silent; SNR undefined")
    if spec.noise_kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {spec.noise_kind!r}; expected one of {NOISE_KINDS}")
    rng = np.random.default_rng([NOISE_KINDS.index(spec.noise_kind), int(spec.seed)])
    raw = make_noise(spec.noise_kind, len(clean), rng, clean.sample_rate)
    raw_level = rms(raw)
    if raw_level == 0.0:
        raise DomainError("generated noise is silent")
    gain = level / (raw_level * 10.0 ** (spec.snr_db / 20.0))
    noise = gain * raw
    return Waveform(clean.samples + noise, clean.sample_rate), Waveform(noise, clean.sample_rate)


def snr_db(clean, noise) -> float:
    return 20.0 * math.log10(rms(clean) / rms(noise))


# ---------------------------------------------------------------------------
# transforms

def stft(w: Waveform, c: StftConfig | None = None) -> ComplexSpectrogram:
    """Centered STFT: the signal is zero-padded by fft_size//2 on both ends."""
    c = c or StftConfig()
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    sr = w.sample_rate if isinstance(w, Waveform) else SAMPLE_RATE
    n, pad = x.size, c.fft_size // 2
    n_frames = 1 + -(-(n + 2 * pad - c.fft_size) // c.hop)
    total = (n_frames - 1) * c.hop + c.fft_size
    xp = np.zeros(total)
    xp[pad:pad + n] = x
    frames = np.lib.stride_tricks.sliding_window_view(xp, c.fft_size)[::c.hop]
    bins = np.fft.rfft(frames * c.window_array(), axis=-1).T
    return ComplexSpectrogram(np.ascontiguousarray(bins), c, n, sr)


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`."""
    c = s.config
    length = length if length is not None else s.length
    win = c.window_array()
    frames = np.fft.irfft(s.bins.T, n=c.fft_size, axis=-1) * win
    n_frames = frames.shape[0]
    total = (n_frames - 1) * c.hop + c.fft_size
    out = np.zeros(total)
    norm = np.zeros(total)
    for k in range(n_frames):
        out[k * c.hop:k * c.hop + c.fft_size] += frames[k]
        norm[k * c.hop:k * c.hop + c.fft_size] += win * win
    covered = norm > 1e-10 * norm.max()
    out[covered] /= norm[covered]
    pad = c.fft_size // 2
    if length is None:
        length = total - 2 * pad
    out = out[pad:pad + length]
    if out.size < length:
        out = np.concatenate([out, np.zeros(length - out.size)])
    return Waveform(out, s.sample_rate)


# ---------------------------------------------------------------------------
# chunking

def chunk(w, chunk_len: int) -> list[Waveform]:
    """Split into non-overlapping ``chunk_len`` pieces; the last one is zero-padded."""
    if chunk_len <= 0:
        raise ContractError("chunk_len must be positive")
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    sr = w.sample_rate if isinstance(w, Waveform) else SAMPLE_RATE
    if x.size == 0:
        raise ContractError("cannot chunk an empty waveform")
    out = []
    for start in range(0, x.size, chunk_len):
        piece = x[start:start + chunk_len]
        if piece.size < chunk_len:
            piece = np.concatenate([piece, np.zeros(chunk_len - piece.size)])
        out.append(Waveform(piece, sr))
    return out


def reassemble(chunks: list[Waveform], length: int) -> Waveform:
    if not chunks:
        raise ContractError("no chunks to reassemble")
    x = np.concatenate([c.samples for c in chunks])
    if length > x.size:
        raise ContractError(f"requested length {length} exceeds total chunk length {x.size}")
    return Waveform(x[:length], chunks[0].sample_rate)


# ---------------------------------------------------------------------------
# files

def read_wav(path) -> Waveform:
    try:
        sr, data = wavfile.read(os.fspath(path))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read WAV {path}: {exc}") from exc
    if sr != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {sr} Hz not supported (expected {SAMPLE_RATE} Hz mono)")
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype} (16-bit PCM or 32-bit float)")
    return Waveform(samples, sr)


def write_wav(path, w: Waveform, subtype: str = "float") -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise FormatError(f"refusing to write {w.sample_rate} Hz audio; only {SAMPLE_RATE} Hz is supported")
    if subtype == "float":
        data = w.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ConfigError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(os.fspath(path), w.sample_rate, data)


MANIFEST_FORMAT = "shortcutfm-manifest"


def write_manifest(path, rows: list[dict], split: str) -> None:
    """Rows carry at least clean_path, noise_kind, snr_db and seed; paths are relative to the manifest."""
    doc = {"format": MANIFEST_FORMAT, "version": 1, "split": split, "rows": rows}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid manifest ({exc})") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a {MANIFEST_FORMAT} file")
    for row in doc["rows"]:
        missing = {"clean_path", "noise_kind", "snr_db", "seed"} - row.keys()
        if missing:
            raise FormatError(f"{path}: row {row.get('id', '?')} lacks {sorted(missing)}")
    doc["root"] = path.parent
    return doc
