"""Synthetic corpus generation, loading and the per-utterance gain normalization.

Spectrograms fed to the network are divided by the RMS coefficient
magnitude of the noisy spectrogram, so every utterance enters at unit
scale; enhanced spectrograms are multiplied back before inversion.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .priors import pooled_variance
from .spectro import (NOISE_KINDS, SIGNAL_KINDS, MixSpec, StftConfig, Waveform, mix, read_manifest,
                      read_wav, stft, synth_clean, write_manifest, write_wav)

TRAIN_SNRS = (0.0, 5.0, 10.0, 15.0)
TEST_SNRS = (2.5, 7.5, 12.5, 17.5)
SPLITS = ("train", "valid", "test")


@dataclass
class SpectroPair:
    clean: np.ndarray
    noisy: np.ndarray
    scale: float
    variance: float
    uid: str = ""


def spectral_scale(bins: np.ndarray) -> float:
    level = float(np.sqrt(np.mean(np.abs(bins) ** 2)))
    return level if level > 0 else 1.0


def make_pair(clean: Waveform, noisy: Waveform, c: StftConfig, uid: str = "") -> SpectroPair:
    Y = stft(noisy, c).bins
    S = stft(clean, c).bins
    scale = spectral_scale(Y)
    y = Y / scale
    return SpectroPair(S / scale, y, scale, pooled_variance(y), uid)


def split_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def plan_split(split: str, n: int, seed: int, unseen_noise: bool = False) -> list[dict]:
    snrs = TEST_SNRS if split == "test" else TRAIN_SNRS
    if unseen_noise:
        kinds = ("harmonic-babble",) if split == "test" else ("white", "pink")
    else:
        kinds = NOISE_KINDS
    rows = []
    for i in range(n):
        rows.append({
            "id": f"{split}_{i:04d}",
            "signal_kind": SIGNAL_KINDS[i % len(SIGNAL_KINDS)],
            "noise_kind": kinds[(i // len(snrs)) % len(kinds)],
            "snr_db": snrs[i % len(snrs)],
            "seed": split_seed(seed, split, i),
        })
    return rows


def render_row(row: dict, duration: float) -> tuple[Waveform, Waveform]:
    clean = synth_clean(row.get("signal_kind", "harmonic"), duration, row["seed"])
    noisy, _ = mix(clean, MixSpec(row["snr_db"], row["noise_kind"], row["seed"]))
    return clean, noisy


def generate_dataset(out_dir, sizes: dict, duration: float, seed: int, unseen_noise: bool = False,
                     jobs: int = 1) -> dict:
    """Write WAVs and one manifest per split; returns {split: manifest path}."""
    out_dir = Path(out_dir)
    manifests = {}
    for split in SPLITS:
        n = int(sizes.get(split, 0))
        if n <= 0:
            continue
        sdir = out_dir / split
        sdir.mkdir(parents=True, exist_ok=True)
        rows = plan_split(split, n, seed, unseen_noise)

        def work(row, sdir=sdir, split=split):
            clean, noisy = render_row(row, duration)
            write_wav(sdir / f"{row['id']}_clean.wav", clean)
            write_wav(sdir / f"{row['id']}_noisy.wav", noisy)
            return dict(row, clean_path=f"{split}/{row['id']}_clean.wav",
                        noisy_path=f"{split}/{row['id']}_noisy.wav", duration=duration)

        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(jobs) as ex:
                rows = list(ex.map(work, rows))
        else:
            rows = [work(r) for r in rows]
        path = out_dir / f"{split}.json"
        write_manifest(path, rows, split)
        manifests[split] = path
    return manifests


def load_rows(manifest) -> list[tuple[dict, Waveform, Waveform]]:
    """Read (row, clean, noisy) triples; noisy audio is re-mixed when the manifest has no noisy_path."""
    doc = read_manifest(manifest)
    root = doc["root"]
    out = []
    for row in doc["rows"]:
        clean = read_wav(root / row["clean_path"])
        if row.get("noisy_path"):
            noisy = read_wav(root / row["noisy_path"])
        else:
            noisy, _ = mix(clean, MixSpec(float(row["snr_db"]), row["noise_kind"], int(row["seed"])))
        out.append((row, clean, noisy))
    if not out:
        raise ConfigError(f"manifest {manifest} lists no utterances")
    return out


def load_pairs(manifest, c: StftConfig) -> list[SpectroPair]:
    return [make_pair(clean, noisy, c, row.get("id", "")) for row, clean, noisy in load_rows(manifest)]
