"""Command-line entry point: ``freqforce <subcommand> ...``.

Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import wavelet as wv
from .config import ConfigError, RunConfig, SamplerConfig, dumps, load, loads
from .data import dataset_synthesize, read_pnm, write_pnm

logger = logging.getLogger("freqforce")


class UsageError(Exception):
    pass


# -- config helpers -------------------------------------------------------------------


def _apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``section.key=value`` strings through the config parser."""
    if not pairs:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(dumps(cfg))
    for item in pairs:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if not parser.has_option(section, name):
            raise ConfigError(f"unknown config key {section}.{name}")
        parser[section][name] = value.strip()
    buf = io.StringIO()
    parser.write(buf)
    return loads(buf.getvalue())


def _load_config(args) -> RunConfig:
    cfg = load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = _apply_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(train={"steps": args.steps})
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (sectioned key = value)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config field; repeatable")
    p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    p.add_argument("--steps", type=int, help="training steps (overrides train.steps)")


# -- subcommands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .training import run_training

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dumps(cfg))
    trainer = None
    if args.resume:
        from .training import Trainer

        trainer = Trainer.load(args.resume)
    trainer, rows = run_training(cfg, out, trainer, log_every=args.log_every)
    last = rows[-1] if rows else {}
    print(f"trained {trainer.step_count} steps; final loss_total={last.get('loss_total')}; wrote {out}")
    return 0


def cmd_sample(args) -> int:
    from .checkpoint import load_model
    from .sampler import generate, write_trajectory

    model, ck = load_model(args.checkpoint)
    cfg = ck.config
    s = cfg.sampler
    scfg = SamplerConfig(
        steps=args.sampler_steps if args.sampler_steps is not None else s.steps,
        guidance=args.guidance if args.guidance is not None else s.guidance,
        t_clip=args.t_clip if args.t_clip is not None else s.t_clip,
        seed=args.seed if args.seed is not None else s.seed,
        n=args.n if args.n is not None else s.n,
        label=args.label if args.label is not None else s.label,
    )
    if scfg.label >= model.cfg.num_classes:
        raise UsageError(f"--label must be < {model.cfg.num_classes}")
    labels = (np.full(scfg.n, scfg.label) if scfg.label >= 0
              else np.arange(scfg.n) % model.cfg.num_classes)
    res = generate(model, labels, scfg, cfg.schedule(), keep_trajectory=bool(args.trajectory))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(res.images):
        ext = "ppm" if img.shape[0] == 3 else "pgm"
        write_pnm(out / f"sample_{i:03d}_class{labels[i]}.{ext}", np.clip(img, -1, 1))
    if args.trajectory:
        write_trajectory(args.trajectory, res)
    print(f"wrote {len(res.images)} samples to {out}")
    return 0


def cmd_wavelet_fit(args) -> int:
    from .training import parse_filter

    data = dataset_synthesize(args.dataset, args.n, args.seed, args.size, args.path)
    corpus = data.images
    bank = wv.FilterBank(parse_filter(args.init, args.K), a=args.a)
    thresholds = wv.Thresholds(args.L, args.gamma_init)
    weights = wv.WaveletRegWeights(args.lambda_sum, args.lambda_hp, args.lambda_ortho, args.lambda_sparse)
    res = wv.fit_wavelet(corpus, bank, thresholds, weights, args.fit_steps, args.batch_size, args.lr, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "filter.txt", res.h_lp, fmt="%.17g")
    with open(out / "wavelet_fit.csv", "w", newline="") as fh:
        cols = ["step", "total", "sum", "hp", "ortho", "sparse"]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in res.history:
            w.writerow([rec["step"]] + [repr(rec[c]) for c in cols[1:]])
    print("h_lp = " + " ".join(f"{v:.10f}" for v in res.h_lp))
    print(" ".join(f"L_{k}={v:.3e}" for k, v in res.regs.items()))
    haar = wv.mean_terminal_l1(corpus, parse_filter("haar", args.K), args.L)
    fitted = wv.mean_terminal_l1(corpus, res.h_lp, args.L)
    print(f"mean terminal L1: fitted {fitted:.6f}, haar {haar:.6f}")
    return 0


def band_energies(img: np.ndarray, h_lp, levels: int) -> tuple[list, list, float]:
    tree = wv.wpt_analyze_full(img, h_lp, levels)
    names = ["-".join(p) for p in tree.paths]
    energies = [float(np.sum(b.data**2)) for b in tree.subbands]
    return names, energies, float(np.sum(np.asarray(img) ** 2))


def _basis_filter(name: str) -> np.ndarray:
    from .training import parse_filter

    if name == "haar":
        return wv.HAAR
    if name == "db2":
        return wv.DB2
    taps = parse_filter(name, 64)
    return np.trim_zeros(taps, "b")


def cmd_spectrum(args) -> int:
    h = _basis_filter(args.basis)
    rows = []
    for path in args.inputs:
        if path.endswith(".fqtr"):
            from .sampler import read_trajectory

            header, states = read_trajectory(path)
            for i, st in enumerate(states):
                rows.append((f"{path}@{i}/{header['steps']}", st))
        else:
            rows.append((path, read_pnm(path)))
    w = csv.writer(sys.stdout, lineterminator="\n")
    header_written = False
    for name, img in rows:
        bands, energies, total = band_energies(img, h, args.levels)
        if not header_written:
            w.writerow(["source"] + bands + ["band_sum", "total"])
            header_written = True
        w.writerow([name] + [f"{e:.10g}" for e in energies] + [f"{sum(energies):.10g}", f"{total:.10g}"])
    return 0


def cmd_ablate(args) -> int:
    from .experiments import run_ablation, verdicts

    cfg = _load_config(args)
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    results = run_ablation(args.experiment, cfg, seeds, args.out, args.workers)
    print(f"{'arm':<14} {'seed':>4} {'eval_pix':>12} {'eval_fre':>12}")
    for r in results:
        fre = "" if r.eval_fre is None else f"{r.eval_fre:.6f}"
        print(f"{r.arm:<14} {r.seed:>4} {r.eval_pix:>12.6f} {fre:>12}")
    for v in verdicts(args.experiment, results):
        print(v)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run

    return 0 if run() else 1


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqforce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run multi-stream training")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory for metrics.csv and checkpoint.fqfc")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=0, help="log every N steps (0 = quiet)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="directory for PGM/PPM samples")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--label", type=int, help="class label (default: cycle through classes)")
    p.add_argument("--sampler-steps", type=int, help="Euler steps N on the pixel clock")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    p.add_argument("--t-clip", type=float, help="velocity denominator floor")
    p.add_argument("--seed", type=int, help="noise seed")
    p.add_argument("--trajectory", help="write the pixel trajectory dump (.fqtr) here")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("wavelet-fit", help="fit the low-pass filter on a synthetic corpus")
    p.add_argument("--dataset", default="piecewise-smooth",
                   help="piecewise-smooth, blocks-and-edges, checkerboard or folder")
    p.add_argument("--path", help="image folder for --dataset folder")
    p.add_argument("--n", type=int, default=1000, help="corpus size")
    p.add_argument("--size", type=int, default=32, help="image size")
    p.add_argument("--seed", type=int, default=0, help="corpus and batch seed")
    p.add_argument("--K", type=int, default=4, help="filter length")
    p.add_argument("--L", type=int, default=2, help="packet depth")
    p.add_argument("--a", type=float, default=10.0, help="gate sharpness")
    p.add_argument("--init", default="haar", help="initial filter: haar, db2, random:SEED, taps or file")
    p.add_argument("--gamma-init", type=float, default=1e-3, help="initial threshold")
    p.add_argument("--fit-steps", type=int, default=300, help="optimizer steps")
    p.add_argument("--batch-size", type=int, default=16, help="images per step")
    p.add_argument("--lr", type=float, default=3e-3, help="Adam learning rate")
    p.add_argument("--lambda-sum", type=float, default=1.0, help="weight of L_sum")
    p.add_argument("--lambda-hp", type=float, default=1.0, help="weight of L_hp")
    p.add_argument("--lambda-ortho", type=float, default=1.0, help="weight of L_ortho")
    p.add_argument("--lambda-sparse", type=float, default=0.01, help="weight of L_sparse")
    p.add_argument("--out", required=True, help="directory for filter.txt and wavelet_fit.csv")
    p.set_defaults(func=cmd_wavelet_fit)

    p = sub.add_parser("spectrum", help="per-band energies of images or trajectory dumps")
    p.add_argument("inputs", nargs="+", help="PGM/PPM images or .fqtr dumps")
    p.add_argument("--basis", default="haar", help="haar, db2, taps or a filter file")
    p.add_argument("--levels", type=int, default=2, help="packet depth")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("ablate", help="run an ablation matrix across seeds")
    p.add_argument("experiment", choices=["ordered-vs-sync", "random-aux", "basis"],
                   help="ordered vs synchronous clocks, true vs random auxiliary latent, or basis comparison")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.add_argument("--first-seed", type=int, default=0, help="first seed")
    p.add_argument("--workers", type=int, help="parallel arms (capped by FQFC_THREADS)")
    p.add_argument("--out", help="directory for per-arm runs and summary.csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"freqforce {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"freqforce {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
