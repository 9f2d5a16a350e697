"""Command-line front end: ``paseg generate | preprocess | train | evaluate | experiment | report``.

Every command reads an optional flat ``key = value`` config (see
:mod:`paseg.config`), applies ``--set key=value`` and dedicated flag
overrides, and writes the fully resolved config next to its outputs.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
The BLAS thread count defaults to ``$PASEG_THREADS`` (1 if unset).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .core import (ConfigurationError, DatasetSplit, FormatError, LoadError, PasegError, TissueClass,
                   load_samples, read_tensor_file, split_by_volunteer, subsample_split, write_tensor_file)
from .evalreport import (COMBINATIONS, ExperimentReport, evaluate_model, plot_scores, render_labels,
                         run_feasibility, run_robustness, select_cases, write_summary, format_table,
                         default_configs, QueryError)
from .models import UnsupportedCombinationError, load_model
from .phantom import generate_dataset
from .preprocess import CropSpec, FrameSequence, preprocess_sequence
from .trainer import train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "PASEG_THREADS"
RESOLVED_NAME = "config.resolved.txt"


class UsageError(Exception):
    pass


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be positive")
    return n


def resolve_config(args) -> cfgmod.RunConfig:
    """Config file, then ``--set`` pairs, then ``--seed``."""
    cfg = cfgmod.load_run_config(args.config, overrides=args.set or ())
    if getattr(args, "seed", None) is not None:
        cfg.reseed(args.seed)
    return cfg


def write_resolved(cfg: cfgmod.RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfgmod.dump_run_config(cfg), encoding="utf-8")
    return path


def _load_dataset(data_dir):
    manifest = Path(data_dir) / "manifest.txt"
    if not manifest.is_file():
        raise LoadError(f"no manifest.txt in {data_dir}")
    samples = load_samples(manifest)
    return {s.id: s for s in samples}


def make_split(samples: dict, cfg: cfgmod.RunConfig) -> DatasetSplit:
    volunteers = sorted({s.meta.volunteer_id for s in samples.values()})
    sp = cfg.split
    test_v = set(sp.test_volunteers) if sp.test_volunteers is not None else set(volunteers[-2:])
    train_v = [v for v in volunteers if v not in test_v]
    ordered = [samples[k] for k in sorted(samples)]
    split = split_by_volunteer(ordered, train_v, test_v, sp.n_val, seed=cfg.seed)
    if sp.n_train or sp.n_test:
        split = subsample_split(split, sp.n_train or len(split.train), sp.n_test or len(split.test),
                                seed=cfg.seed)
    return split


def _train_config(cfg: cfgmod.RunConfig, arch: str, mode: str, args=None):
    tc = replace(getattr(cfg, arch), architecture=arch, input_mode=mode)
    if args is not None:
        for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                          ("batches_per_epoch", "batches_per_epoch")):
            if getattr(args, flag, None) is not None:
                tc = replace(tc, **{key: getattr(args, flag)})
    return tc


def _progress(quiet: bool):
    if quiet:
        return None

    def report(*a):
        *head, epoch, row = a
        loss, metric = row[1], row[2]
        tag = " ".join(f"{h[0]}/{h[1]}" for h in head) if head else ""
        m = "NA" if metric is None else f"{metric:.4f}"
        print(f"{tag} epoch {epoch + 1}: loss {loss:.4f} val {m}".strip(), file=sys.stderr, flush=True)

    return report


# --- commands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    samples, manifest = generate_dataset(cfg.phantom, cfg.grid, seed=cfg.seed, out_dir=out)
    write_resolved(cfg, out / RESOLVED_NAME)
    print(f"wrote {len(samples)} samples, manifest {manifest}")
    return EXIT_OK


def _read_energies(path) -> list[float]:
    vals = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals.append(float(line))
        except ValueError:
            raise ConfigurationError(f"{path}:{lineno}: not a number: {line!r}") from None
    return vals


def cmd_preprocess(args) -> int:
    frames = read_tensor_file(args.frames)
    if frames.ndim not in (3, 4):
        raise FormatError(f"{args.frames}: expected (N, H, W) or (N, C, H, W) frames, got {frames.shape}")
    energies = _read_energies(args.energies)
    crop = None
    if args.crop:
        try:
            crop = CropSpec(*(int(v) for v in args.crop.split(",")))
        except (TypeError, ValueError):
            raise UsageError("--crop expects top,left,height,width") from None
    cube = preprocess_sequence(FrameSequence(list(frames), energies), crop, args.sections)
    write_tensor_file(args.out, cube.values)
    print(f"wrote {args.out} with shape {cube.values.shape}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    arch, mode = args.arch, args.input.upper()
    tc = _train_config(cfg, arch, mode, args)
    setattr(cfg, arch, tc)
    samples = _load_dataset(args.data)
    split = make_split(samples, cfg)
    progress = _progress(args.quiet)
    res = train(samples, split, tc, progress=(lambda e, row: progress(e, row)) if progress else None)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    stem = ckpt.with_suffix("")
    res.save(ckpt, args.log or f"{stem}_log.csv", args.batch_log or f"{stem}_batches.csv")
    write_resolved(cfg, f"{stem}_{RESOLVED_NAME}")
    best = "NA" if res.best_metric is None else f"{res.best_metric:.4f}"
    print(f"wrote {ckpt} (epoch {res.best_epoch + 1}, validation {best})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    samples = _load_dataset(args.data)
    model, header = load_model(args.checkpoint)
    mode = header["input_mode"]
    if args.subset == "test":
        ids = make_split(samples, cfg).test
    else:
        ids = tuple(sorted(samples))
    report = evaluate_model(model, [samples[i] for i in ids], mode).sorted()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    write_resolved(cfg, out.with_name(f"{out.stem}_{RESOLVED_NAME}"))
    print(format_table(report))
    return EXIT_OK


def write_experiment(result, out: Path, samples: dict) -> None:
    """report.csv, summary tables, plots, checkpoints, logs and best/median/worst renders."""
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    (out / "renders").mkdir(exist_ok=True)
    result.report.write_csv(out / "report.csv")
    for metric in ("dice", "tpr"):
        write_summary(result.report, out / f"summary_{metric}.csv", metric)
        write_summary(result.report, out / f"summary_{metric}_pooled.csv", metric, pooled=True)
    for (arch, mode), run in result.runs.items():
        tag = f"{arch}_{mode.lower()}"
        run.save(out / "checkpoints" / f"{tag}.ckpt", out / "logs" / f"{tag}_train.csv",
                 out / "logs" / f"{tag}_batches.csv")
    split_lines = [f"{name} {' '.join(ids)}" for name, ids in
                   (("train", result.split.train), ("validation", result.split.validation),
                    ("test", result.split.test))]
    (out / "split.txt").write_text("\n".join(split_lines) + "\n", encoding="utf-8")
    for combo in COMBINATIONS:
        arch, mode = combo
        tag = f"{arch}_{mode.lower()}"
        for stat in ("best", "median", "worst"):
            try:
                sid = select_cases(result.report, TissueClass.BLOOD, stat, arch, mode)
            except QueryError:
                continue  # no defined blood score in this run
            render_labels(result.predictions[combo][sid], out / "renders" / f"{tag}_{stat}_{sid}_pred.png")
            render_labels(samples[sid].labels, out / "renders" / f"{tag}_{stat}_{sid}_ref.png")
    plot_scores(result.report, out / "scores_all.png")
    plot_scores(result.report, out / "scores_blood.png", cls=TissueClass.BLOOD)


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    samples = _load_dataset(args.data)
    split = make_split(samples, cfg)
    configs = default_configs({"unet": cfg.unet, "fcnn": cfg.fcnn})
    runner = run_feasibility if args.kind == "feasibility" else run_robustness
    result = runner(samples, split, configs, progress=_progress(args.quiet))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / RESOLVED_NAME)
    write_experiment(result, out, samples)
    print(format_table(result.report))
    return EXIT_OK


def cmd_report(args) -> int:
    report = ExperimentReport.read_csv(args.report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # report.csv carries no confusion counts, so pooled tables need the experiment itself
    for metric in ("dice", "tpr"):
        write_summary(report, out / f"summary_{metric}.csv", metric)
    plot_scores(report, out / "scores_all.png")
    plot_scores(report, out / "scores_blood.png", cls=TissueClass.BLOOD)
    print(format_table(report))
    print()
    print(format_table(report, "tpr"))
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paseg", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS threads (default ${THREADS_ENV} or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (overrides the config)")

    g = sub.add_parser("generate", help="generate a synthetic phantom dataset")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", help="energy-correct, pick the sharpest section and crop")
    pp.add_argument("--frames", required=True, help="PATC tensor of frames, (N, H, W) or (N, C, H, W)")
    pp.add_argument("--energies", required=True, help="text file with one pulse energy per frame")
    pp.add_argument("--crop", help="top,left,height,width")
    pp.add_argument("--sections", type=int, default=4, help="temporal sections to compare (default 4)")
    pp.add_argument("--out", required=True, help="output PATC cube")
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train one architecture/input combination")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory with manifest.txt")
    t.add_argument("--arch", required=True, choices=("unet", "fcnn"))
    t.add_argument("--input", required=True, type=str.lower, choices=("pa", "us", "paus"))
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default <out>_log.csv)")
    t.add_argument("--batch-log", help="batch audit log (default <out>_batches.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--batches-per-epoch", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--subset", choices=("test", "all"), default="test")
    e.add_argument("--out", required=True, help="report CSV path")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="run all five combinations and write reports")
    common(x)
    x.add_argument("kind", choices=("feasibility", "robustness"))
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--quiet", action="store_true")
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="summary tables and plots from a report.csv")
    r.add_argument("--report", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        threads = args.threads if args.threads is not None else _default_threads()
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigurationError, UnsupportedCombinationError) as exc:
        print(f"paseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PasegError, OSError, ValueError) as exc:
        print(f"paseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
