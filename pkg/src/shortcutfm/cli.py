"""Command-line entry point: gen-data, train, enhance, sweep, bench, oracle.

Exit codes: 0 success, 1 usage/config, 2 I/O, 3 numerical failure,
4 oracle/tolerance breach.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import flow, metrics, oracle
from .data import generate_dataset, load_pairs, load_rows, spectral_scale
from .errors import ConfigError, FormatError, NumericalError, ShortcutError
from .net import AdamState, VelocityNet, load_checkpoint, save_checkpoint
from .priors import PriorSpec
from .sampler import NfeCounter, enhance
from .spectro import StftConfig, Waveform, chunk, istft, read_wav, reassemble, stft, synth_clean, write_wav

log = logging.getLogger("shortcutfm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_ORACLE = 0, 1, 2, 3, 4


class OracleBreach(ShortcutError):
    pass


def utterance_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream per (seed, utterance id, ...) so results do not depend on processing order."""
    return np.random.default_rng([int(seed)] + [zlib.crc32(str(k).encode()) for k in keys])


def enhance_waveform(net, wave: Waveform, prior: PriorSpec, K: int, rng, c: StftConfig, chunk_len: int,
                     counter: NfeCounter | None = None) -> Waveform:
    """Split into fixed-length chunks, enhance each at unit spectral scale, concatenate."""
    out = []
    nfe = 0
    for piece in chunk(wave, chunk_len):
        Y = stft(piece, c)
        scale = spectral_scale(Y.bins)
        x = enhance(net, Y.bins / scale, prior, K, rng, counter)
        if counter is not None:
            nfe += counter.count
        out.append(istft(Y.with_bins(x * scale)))
    if counter is not None:
        counter.count = nfe
    return reassemble(out, len(wave))


def checkpoint_meta(cfg) -> dict:
    return {"prior": cfg.prior, "sigma_end": cfg.sigma_end, "alpha": cfg.alpha,
            "stft": cfg.stft_config().to_dict()}


def load_model(path):
    net, _, _, meta = load_checkpoint(path)
    c = StftConfig(**meta["stft"]) if "stft" in meta else StftConfig()
    if net.arch.n_freq != c.n_freq:
        raise FormatError(f"{path}: network expects {net.arch.n_freq} bins but STFT gives {c.n_freq}")
    return net, c, meta


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg) -> dict:
    out = Path(cfg.out_dir or cfg.data_dir or "data")
    sizes = {"train": cfg.n_train, "valid": cfg.n_valid, "test": cfg.n_test}
    manifests = generate_dataset(out, sizes, cfg.duration, cfg.seed, cfg.unseen_noise, cfg.jobs)
    for split, path in manifests.items():
        log.info("%s: %d utterances -> %s", split, sizes[split], path)
    return manifests


def train_model(cfg, pairs, epochs=None, progress=None):
    """Train from scratch; returns (net, opt, rng, history)."""
    c = cfg.stft_config()
    net = VelocityNet.create(c.n_freq, seed=cfg.seed, **cfg.net_kwargs())
    opt = AdamState(lr=cfg.lr).bind(net)
    rng = np.random.default_rng(cfg.seed)
    tcfg = cfg.train_config().validate()
    prior = cfg.prior_spec()
    history = []
    for epoch in range(cfg.epochs if epochs is None else epochs):
        opt.lr = cfg.learning_rate(epoch)
        rows = flow.train_epoch(net, opt, pairs, prior, tcfg, rng, epoch)
        history.extend(rows)
        if progress:
            progress(epoch, rows)
    return net, opt, rng, history


def cmd_train(cfg) -> Path:
    manifest = cfg.manifest or (Path(cfg.data_dir or "data") / "train.json")
    pairs = load_pairs(manifest, cfg.stft_config())
    out = Path(cfg.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)

    def progress(epoch, rows):
        log.info("epoch %d fm=%.5f sc=%.6f total=%.5f", epoch, np.mean([r.fm_loss for r in rows]),
                 np.mean([r.sc_loss for r in rows]), np.mean([r.total for r in rows]))

    net, opt, rng, history = train_model(cfg, pairs, progress=progress)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    save_checkpoint(ckpt, net, opt, rng, checkpoint_meta(cfg))
    flow.write_loss_csv(out / "loss.csv", history)
    cfgmod.save(cfg, out / "config.yaml")
    log.info("wrote %s", ckpt)
    return ckpt


def inference_prior(cfg, meta: dict, kind: str | None = None) -> PriorSpec:
    """Explicit ``kind`` wins; otherwise the prior the checkpoint was trained with."""
    return PriorSpec(kind or meta.get("prior", cfg.prior), meta.get("sigma_end", cfg.sigma_end),
                     meta.get("alpha", cfg.alpha))


def _require_checkpoint(cfg):
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    return cfg.checkpoint


def cmd_enhance(cfg, input_path, output_path, prior_kind: str | None = None) -> Waveform:
    net, c, meta = load_model(_require_checkpoint(cfg))
    wave = read_wav(input_path)
    prior = inference_prior(cfg, meta, prior_kind)
    rng = utterance_rng(cfg.seed, Path(input_path).name, prior.kind, cfg.steps)
    counter = NfeCounter()
    out = enhance_waveform(net, wave, prior, cfg.steps, rng, c, cfg.chunk_len, counter)
    write_wav(output_path, out)
    log.info("enhanced %s with prior %s, K=%d (%d network evaluations)", input_path, prior.kind,
             cfg.steps, counter.count)
    return out


def _checkpoint_for(cfg, kind: str) -> Path:
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir or "run")
    if path.is_dir():
        for name in (f"model_{kind}.ckpt", "model.ckpt"):
            if (path / name).exists():
                return path / name
        raise FileNotFoundError(f"no checkpoint for prior {kind} in {path}")
    return path


def cmd_sweep(cfg, include_noisy: bool = False, save_audio: bool = False) -> metrics.EvalReport:
    manifest = cfg.manifest or (Path(cfg.data_dir or "data") / "test.json")
    items = load_rows(manifest)
    out = Path(cfg.out_dir or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    report = metrics.EvalReport()
    if include_noisy:
        for row, clean, noisy in items:
            report.add(utterance=row["id"], prior="noisy", K=0, nfe=0,
                       si_sdr_db=metrics.si_sdr(clean, noisy), seg_snr_db=metrics.seg_snr(clean, noisy),
                       lsd=metrics.log_spectral_distance(clean, noisy), rtf=0.0)
    for kind in cfg.priors:
        net, c, meta = load_model(_checkpoint_for(cfg, kind))
        prior = inference_prior(cfg, meta, kind)
        for K in cfg.k_list:
            for row, clean, noisy in items:
                rng = utterance_rng(cfg.seed, row["id"], kind, K)
                counter = NfeCounter()
                t0 = time.perf_counter()
                est = enhance_waveform(net, noisy, prior, K, rng, c, cfg.chunk_len, counter)
                wall = time.perf_counter() - t0
                n_chunks = -(-len(noisy) // cfg.chunk_len)
                report.add(utterance=row["id"], prior=kind, K=K, nfe=counter.count // n_chunks,
                           si_sdr_db=metrics.si_sdr(clean, est), seg_snr_db=metrics.seg_snr(clean, est),
                           lsd=metrics.log_spectral_distance(clean, est, c), rtf=wall / noisy.duration)
                if save_audio:
                    write_wav(out / f"{row['id']}_{kind}_K{K}.wav", est)
            log.info("prior %s K=%d done", kind, K)
    report.write_csv(out / "report.csv")
    report.write_long_csv(out / "long.csv")
    for a in report.aggregates():
        log.info("%-5s K=%-3d SI-SDR %.2f +/- %.2f dB", a["prior"], a["K"], a["si_sdr_db"], a["si_sdr_db_ci95"])
    return report


BENCH_COLUMNS = ("K", "nfe", "wall_time", "audio_duration", "rtf")


def cmd_bench(cfg, input_path=None, duration: float = 10.0, prior_kind: str | None = None) -> list[dict]:
    net, c, meta = load_model(_require_checkpoint(cfg))
    wave = read_wav(input_path) if input_path else synth_clean("harmonic", duration, cfg.seed)
    prior = inference_prior(cfg, meta, prior_kind)
    rows = []
    for K in cfg.k_list:
        counter = NfeCounter()

        def run(w, K=K, counter=counter):
            return enhance_waveform(net, w, prior, K, utterance_rng(cfg.seed, "bench", K), c, cfg.chunk_len,
                                    counter)

        m = metrics.measure_rtf(run, wave, cfg.repetitions)
        n_chunks = -(-len(wave) // cfg.chunk_len)
        rows.append({"K": K, "nfe": counter.count // n_chunks, "wall_time": m.wall_time,
                     "audio_duration": m.audio_duration, "rtf": m.rtf})
        log.info("K=%-3d NFE=%-3d RTF=%.5f", K, rows[-1]["nfe"], m.rtf)
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(cfg.out_dir) / "bench.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, BENCH_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# oracle suite

ORACLE_TOLERANCES = {
    "sc_loss_vs_brute_force": 1e-10,
    "v_target_vs_pair_velocity": 1e-10,
    "constant_field_sc_residual": 1e-10,
    "gradient_vs_central_difference": 1e-5,
}

GRAD_FLOOR = 1e-8


def gradient_relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|); components below GRAD_FLOOR are compared absolutely."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def random_small_net(rng, n_freq=3, **kw):
    kw = {"hidden": 8, "n_blocks": 2, "embed_dim": 4, "dtype": "float64", "zero_output": False, **kw}
    return VelocityNet.create(n_freq, seed=int(rng.integers(2**31)), **kw)


def _crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def oracle_sc_equivalence(n_instances: int, rng) -> float:
    worst = 0.0
    per_net = 20
    for start in range(0, n_instances, per_net):
        b = min(per_net, n_instances - start)
        net = random_small_net(rng)
        xt, y = _crandn(rng, (b, 3, 4)), _crandn(rng, (b, 3, 4))
        k = rng.integers(1, 8, size=b)
        dt = np.ldexp(1.0, -k)
        s = np.floor(rng.random(b) * np.ldexp(1.0, k - 1)) * 2 * dt
        main = flow.sc_residuals(net, xt, s, dt, y)
        for i in range(b):
            ref = oracle.brute_force_sc_residual(net, xt[i], float(s[i]), float(dt[i]), y[i])
            worst = max(worst, abs(main[i] - ref))
    return worst


def oracle_pair_velocity(n_instances: int, rng) -> float:
    worst = 0.0
    for _ in range(max(1, n_instances // 10)):
        x0, x1 = _crandn(rng, (3, 4)), _crandn(rng, (3, 4))
        ref = oracle.exact_pair_velocity(x0, x1)
        for s in np.linspace(0, 1, 10):
            worst = max(worst, float(np.max(np.abs(flow.interpolate(x0, x1, s).v_target - ref))))
    return worst


def oracle_constant_field(n_instances: int, rng) -> float:
    worst = 0.0
    for _ in range(max(1, n_instances // 100)):
        field = oracle.ConstantField(_crandn(rng, (3, 4)))
        xt, y = _crandn(rng, (1, 3, 4)), _crandn(rng, (1, 3, 4))
        worst = max(worst, float(flow.sc_residuals(field, xt, 0.0, 0.25, y)[0]))
    return worst


def oracle_gradient(n_probes: int, rng) -> float:
    """Random-init nets, random cotangent; probes every parameter group."""
    worst = 0.0
    net = random_small_net(rng, n_freq=5)
    x, y, cot = _crandn(rng, (2, 5, 4)), _crandn(rng, (2, 5, 4)), _crandn(rng, (2, 5, 4))
    t, dt = np.array([0.25, 0.5]), np.array([1 / 8, 1 / 2])

    def loss():
        o = net.forward(x, t, dt, y)
        return float(np.sum(o.real * cot.real + o.imag * cot.imag))

    net.zero_grad()
    net.forward(x, t, dt, y, record=True)
    net.backward(cot)
    grad = net.grad.copy()
    offset = 0
    for name, shape in net.arch.layout():
        size = int(np.prod(shape))
        for i in offset + rng.choice(size, size=min(n_probes, size), replace=False):
            num = oracle.central_difference(loss, net.params, int(i), 1e-4)
            worst = max(worst, gradient_relative_error(grad[i], num))
        offset += size
    return worst


def cmd_oracle(cfg, n_instances: int = 1000, out=None) -> dict:
    out = out or sys.stdout
    rng = np.random.default_rng(cfg.seed)
    results = {
        "sc_loss_vs_brute_force": oracle_sc_equivalence(n_instances, rng),
        "v_target_vs_pair_velocity": oracle_pair_velocity(n_instances, rng),
        "constant_field_sc_residual": oracle_constant_field(n_instances, rng),
        "gradient_vs_central_difference": oracle_gradient(20, rng),
    }
    failed = []
    for name, value in results.items():
        tol = ORACLE_TOLERANCES[name]
        ok = value < tol
        print(f"{name:34s} max={value:.3e} tol={tol:.0e} {'ok' if ok else 'FAIL'}", file=out)
        if not ok:
            failed.append(name)
    if failed:
        raise OracleBreach(f"tolerance exceeded: {', '.join(failed)}")
    return results


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--prior", choices=["G", "S", "D", "F"])
    common.add_argument("--steps", type=int, help="ODE steps K")
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--checkpoint")
    common.add_argument("--manifest")
    common.add_argument("--data", dest="data_dir", help="dataset directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="shortcutfm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="synthesize train/valid/test splits")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--duration", type=float)
    g.add_argument("--unseen-noise", action="store_const", const=True, default=None)
    g.add_argument("--jobs", type=int)

    t = sub.add_parser("train", parents=[common], help="train a step-conditioned model")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=["constant", "cosine"])

    e = sub.add_parser("enhance", parents=[common], help="enhance one WAV file")
    e.add_argument("input")
    e.add_argument("output")

    s = sub.add_parser("sweep", parents=[common], help="evaluate over priors x step counts")
    s.add_argument("--k-list")
    s.add_argument("--priors")
    s.add_argument("--include-noisy", action="store_true")
    s.add_argument("--save-audio", action="store_true")

    b = sub.add_parser("bench", parents=[common], help="RTF per step count")
    b.add_argument("--k-list")
    b.add_argument("--repetitions", type=int)
    b.add_argument("--input")
    b.add_argument("--duration-bench", type=float, default=10.0)

    o = sub.add_parser("oracle", parents=[common], help="oracle/main-path discrepancy report")
    o.add_argument("--instances", type=int, default=1000)
    return p


FLAG_KEYS = ("seed", "prior", "steps", "out_dir", "checkpoint", "manifest", "data_dir", "n_train", "n_test",
             "duration", "unseen_noise", "jobs", "epochs", "lr", "lr_schedule", "k_list", "priors", "repetitions")


def config_from_args(args, environ=None):
    flags = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k, None) is not None}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = value
    return cfgmod.resolve(args.config, flags, environ)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "enhance":
            cmd_enhance(cfg, args.input, args.output, args.prior)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.include_noisy, args.save_audio)
        elif args.command == "bench":
            cmd_bench(cfg, args.input, args.duration_bench, args.prior)
        elif args.command == "oracle":
            cmd_oracle(cfg, args.instances)
    except OracleBreach as exc:
        log.error("%s", exc)
        return EXIT_ORACLE
    except (OSError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ShortcutError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
