"""Command line surface.

One executable with five subcommands covering the whole pipeline: synthetic
dataset generation, staged training, evaluation (optionally comparing two
checkpoints), single-volume prediction, and chart emission from saved
reports.

Exit codes: 0 success, 1 usage error, 2 environment or I/O failure, 3 data
or contract violation.  All relative paths are anchored at ``--workdir``.
Configuration comes from one YAML file; ``--set section.field=value``
assignments override the file, and dedicated flags override both.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_run_config,
    phantom_spec,
    train_config,
    validate_run_config,
)
from .metrics import (
    read_aggregate_table,
    write_aggregate_table,
    write_case_table,
    write_compare_table,
)
from .phantom import generate_dataset, load_manifest
from .training import (
    bundle_from_checkpoint,
    evaluate_manifest,
    load_checkpoint,
    read_train_log,
    run_stages,
)
from .voldata import load_volume, save_labels


class UsageError(ValueError):
    """Bad flag combination or value; maps to exit code 1."""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="focusnet",
        description="Imbalanced organ segmentation on synthetic phantoms.",
    )
    p.add_argument("--workdir", default=".", help="anchor for relative paths")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="config override, e.g. train.roi_factor=2 (repeatable)",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantoms", help="generate a phantom dataset")
    g.add_argument("--out", default="data", help="output directory")
    g.add_argument("--count", type=int, help="number of samples")
    g.add_argument("--seed", type=int, help="base seed")

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--data", default="data/manifest.json")
    t.add_argument("--out", default="checkpoints")
    t.add_argument("--stage", choices=["1", "2", "3", "4", "all"], default="all")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    e.add_argument("--data", default="data/manifest.json")
    e.add_argument("--ckpt", help="checkpoint to evaluate")
    e.add_argument(
        "--compare",
        nargs=2,
        metavar=("CKPT_A", "CKPT_B"),
        help="evaluate two checkpoints and emit a per-organ DSC delta table",
    )
    e.add_argument("--split", choices=["train", "val", "all"], default="all")
    e.add_argument("--report", default="report", help="output directory")

    pr = sub.add_parser("predict", help="segment one volume")
    pr.add_argument("--data", default="data/manifest.json")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--input", required=True, help="volume to segment")
    pr.add_argument("--out", required=True, help="label map to write")

    r = sub.add_parser("report", help="plot charts from saved tables")
    r.add_argument("--report", default="report", help="directory with tables")
    r.add_argument("--plots", default="plots", help="output directory")
    r.add_argument("--log", help="training log (JSONL) for loss curves")
    return p


def _anchor(workdir: Path, path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else workdir / path


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = load_run_config(_anchor(args.workdir, args.config))
    else:
        cfg = RunConfig()
    cfg = apply_overrides(cfg, args.overrides)
    validate_run_config(cfg)
    return cfg


def _split_ids(manifest, split: str, val_fraction: float):
    if split == "all":
        return None
    n = len(manifest.samples)
    n_val = min(int(round(n * val_fraction)), n - 1)
    ids = [s.sample_id for s in manifest.samples]
    return ids[: n - n_val] if split == "train" else ids[n - n_val :]


def cmd_gen_phantoms(cfg: RunConfig, args) -> int:
    count = cfg.phantom.count if args.count is None else args.count
    if count < 1:
        raise UsageError("--count must be a positive integer")
    spec = phantom_spec(cfg)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = _anchor(args.workdir, args.out)
    manifest = generate_dataset(spec, count, out, cfg.phantom.small_threshold)
    print(f"wrote {count} samples; manifest at {manifest.root / 'manifest.json'}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = load_manifest(_anchor(args.workdir, args.data))
    tc = train_config(cfg)
    stages = (1, 2, 3, 4) if args.stage == "all" else (int(args.stage),)
    resume = None
    if args.resume:
        resume = load_checkpoint(_anchor(args.workdir, args.resume))
    out = _anchor(args.workdir, args.out)
    produced = run_stages(tc, manifest, out, stages, resume=resume)
    for stage in sorted(produced):
        print(f"stage {stage} checkpoint: {out / f'stage{stage}.pt'}")
    return 0


def _evaluate_one(cfg, args, manifest, tc, ckpt_path, sample_ids):
    bundle = bundle_from_checkpoint(
        load_checkpoint(_anchor(args.workdir, ckpt_path)), tc, manifest
    )
    return evaluate_manifest(bundle, manifest, sample_ids)


def _with_suffix(name: str, tag: str) -> str:
    path = Path(name)
    return str(path.with_name(f"{path.stem}_{tag}{path.suffix}"))


def _print_aggregates(label, aggs):
    print(label)
    for agg in aggs:
        d = "NA" if agg.dsc_mean is None else f"{agg.dsc_mean:.4f}"
        h = "NA" if agg.hd95_mean is None else f"{agg.hd95_mean:.3f}"
        print(f"  organ {agg.organ_id}: dsc {d}  hd95 {h}  (n={agg.n_cases})")


def cmd_evaluate(cfg: RunConfig, args) -> int:
    if args.compare and args.ckpt:
        raise UsageError("--ckpt and --compare are mutually exclusive")
    if not args.compare and not args.ckpt:
        raise UsageError("evaluate needs --ckpt or --compare")
    manifest = load_manifest(_anchor(args.workdir, args.data))
    tc = train_config(cfg)
    sample_ids = _split_ids(manifest, args.split, tc.val_fraction)
    report_dir = _anchor(args.workdir, args.report)
    names = cfg.metrics

    if args.ckpt:
        ids, cases, aggs = _evaluate_one(cfg, args, manifest, tc, args.ckpt, sample_ids)
        write_case_table(report_dir / names.case_table, cases, ids)
        write_aggregate_table(report_dir / names.aggregate_table, aggs)
        _print_aggregates(f"{args.ckpt} on split '{args.split}':", aggs)
        return 0

    ckpt_a, ckpt_b = args.compare
    results = {}
    for tag, ckpt_path in (("a", ckpt_a), ("b", ckpt_b)):
        ids, cases, aggs = _evaluate_one(cfg, args, manifest, tc, ckpt_path, sample_ids)
        write_case_table(report_dir / _with_suffix(names.case_table, tag), cases, ids)
        write_aggregate_table(
            report_dir / _with_suffix(names.aggregate_table, tag), aggs
        )
        results[tag] = aggs
        _print_aggregates(f"[{tag}] {ckpt_path} on split '{args.split}':", aggs)
    write_compare_table(report_dir / names.compare_table, results["a"], results["b"])
    print(f"comparison table: {report_dir / names.compare_table}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    from .training import predict_labelmap

    manifest = load_manifest(_anchor(args.workdir, args.data))
    tc = train_config(cfg)
    bundle = bundle_from_checkpoint(
        load_checkpoint(_anchor(args.workdir, args.ckpt)), tc, manifest
    )
    volume = load_volume(_anchor(args.workdir, args.input))
    labels = predict_labelmap(bundle, volume)
    out = _anchor(args.workdir, args.out)
    save_labels(labels, out)
    print(f"wrote label map {out}")
    return 0


def _plot_bars(aggs, attr, std_attr, title, ylabel, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ids = [str(a.organ_id) for a in aggs]
    means = [getattr(a, attr) or 0.0 for a in aggs]
    stds = [getattr(a, std_attr) or 0.0 for a in aggs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(ids, means, yerr=stds, capsize=3, color="#4878a8")
    for i, a in enumerate(aggs):
        if getattr(a, attr) is None:
            ax.text(i, 0.01, "NA", ha="center", fontsize=8)
    ax.set_xlabel("organ")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_loss_curves(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_stage: dict[int, list[dict]] = {}
    for row in rows:
        by_stage.setdefault(int(row["stage"]), []).append(row)
    fig, ax = plt.subplots(figsize=(7, 4))
    for stage in sorted(by_stage):
        stage_rows = sorted(by_stage[stage], key=lambda r: r["epoch"])
        epochs = [r["epoch"] for r in stage_rows]
        ax.plot(epochs, [r["train_loss"] for r in stage_rows], label=f"stage {stage} train")
        if any(r.get("val_loss") is not None for r in stage_rows):
            pairs = [(r["epoch"], r["val_loss"]) for r in stage_rows if r.get("val_loss") is not None]
            ax.plot([e for e, _ in pairs], [v for _, v in pairs], "--", label=f"stage {stage} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss by stage")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_report(cfg: RunConfig, args) -> int:
    report_dir = _anchor(args.workdir, args.report)
    table = report_dir / cfg.metrics.aggregate_table
    aggs = read_aggregate_table(table)
    if not aggs:
        raise ValueError(f"aggregate table {table} has no organ rows")
    plots_dir = _anchor(args.workdir, args.plots)
    plots_dir.mkdir(parents=True, exist_ok=True)
    written = []
    _plot_bars(
        aggs, "dsc_mean", "dsc_std", "DSC by organ", "DSC",
        plots_dir / "dsc_bars.png",
    )
    written.append(plots_dir / "dsc_bars.png")
    _plot_bars(
        aggs, "hd95_mean", "hd95_std", "95th percentile Hausdorff by organ",
        "95HD (mm)", plots_dir / "hd95_bars.png",
    )
    written.append(plots_dir / "hd95_bars.png")
    log_path = (
        _anchor(args.workdir, args.log)
        if args.log
        else _anchor(args.workdir, "checkpoints/train_log.jsonl")
    )
    if log_path.exists():
        rows = read_train_log(log_path)
        if rows:
            _plot_loss_curves(rows, plots_dir / "loss_curves.png")
            written.append(plots_dir / "loss_curves.png")
    elif args.log:
        raise FileNotFoundError(f"training log not found: {log_path}")
    for path in written:
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def main(argv=None) -> int:
    torch.set_num_threads(1)  # keep numerics single-threaded and reproducible
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    args.workdir = Path(args.workdir)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
