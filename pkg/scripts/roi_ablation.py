#!/usr/bin/env python3
"""ROI scale ablation: retrain the refinement stages at several factors.

The backbone and localizer (stages 1 and 2) are trained once and shared;
stages 3 and 4 are rerun per ROI factor, since the crop size each binary
head sees depends on it.  Every factor's pipeline is then scored on the
same held-out set, and a comparison table of small-organ DSC per factor is
written alongside the per-factor aggregate reports.

Importable: ``run_ablation(workdir)`` returns the summary dict.
"""

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
if str(REPO / "src") not in sys.path:
    sys.path.insert(0, str(REPO / "src"))

import numpy as np
import torch

from focusnet.config import RunConfig, phantom_spec, save_run_config, train_config
from focusnet.metrics import write_aggregate_table
from focusnet.training import (
    TrainLogger,
    bundle_from_checkpoint,
    checkpoint_path,
    evaluate_manifest,
    load_checkpoint,
    run_stages,
    save_checkpoint,
    train_stage3_sos,
    train_stage4_finetune,
)

from run_pipeline import ensure_dataset, experiment_config, _organ_mean

DEFAULT_FACTORS = (2.0, 3.0, 5.0)


def run_ablation(
    workdir,
    factors=DEFAULT_FACTORS,
    cfg: RunConfig = None,
    train_count: int = 50,
    eval_count: int = 20,
    train_seed: int = 0,
    eval_seed: int = 1000,
) -> dict:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or experiment_config()
    save_run_config(cfg, workdir / "run.yaml")
    spec = phantom_spec(cfg)
    tc = train_config(cfg)

    train_man = ensure_dataset(
        replace(spec, seed=train_seed),
        train_count,
        workdir / "train_data",
        cfg.phantom.small_threshold,
    )
    eval_man = ensure_dataset(
        replace(spec, seed=eval_seed),
        eval_count,
        workdir / "eval_data",
        cfg.phantom.small_threshold,
    )

    shared_dir = workdir / "checkpoints" / "shared"
    stage2_path = checkpoint_path(shared_dir, 2)
    if stage2_path.exists():
        ckpt2 = load_checkpoint(stage2_path)
    else:
        ckpt2 = run_stages(tc, train_man, shared_dir, stages=(1, 2))[2]

    small_ids = [o.id for o in eval_man.small_organs()]
    results: dict[str, dict] = {}
    for factor in factors:
        t0 = time.monotonic()
        tcf = replace(tc, roi_factor=float(factor))
        fdir = workdir / "checkpoints" / f"factor_{factor:g}"
        final_path = checkpoint_path(fdir, 4)
        if final_path.exists():
            ckpt4 = load_checkpoint(final_path)
        else:
            logger = TrainLogger(fdir / "train_log.jsonl")
            ckpt3 = train_stage3_sos(tcf, ckpt2, train_man, logger=logger)
            save_checkpoint(ckpt3, checkpoint_path(fdir, 3))
            ckpt4 = train_stage4_finetune(tcf, ckpt3, train_man, logger=logger)
            save_checkpoint(ckpt4, final_path)
        bundle = bundle_from_checkpoint(ckpt4, tcf, eval_man)
        ids, cases, aggs = evaluate_manifest(bundle, eval_man)
        write_aggregate_table(
            workdir / "report" / f"aggregate_factor_{factor:g}.csv", aggs
        )
        per_organ = {
            a.organ_id: a.dsc_mean for a in aggs if a.organ_id in small_ids
        }
        results[f"{factor:g}"] = {
            "factor": float(factor),
            "small_dsc_mean": _organ_mean(aggs, set(small_ids)),
            "per_organ_dsc": per_organ,
            "seconds": time.monotonic() - t0,
        }
        print(
            f"factor {factor:g}: small-organ dsc "
            f"{results[f'{factor:g}']['small_dsc_mean']:.4f} "
            f"({results[f'{factor:g}']['seconds']:.1f} s)",
            flush=True,
        )

    table_path = workdir / "report" / "roi_ablation.csv"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["factor", "small_dsc_mean"] + [f"dsc_organ_{i}" for i in small_ids]
        )
        for key in sorted(results, key=lambda k: results[k]["factor"]):
            row = results[key]
            writer.writerow(
                [f"{row['factor']:g}", f"{row['small_dsc_mean']:.6f}"]
                + [
                    "NA"
                    if row["per_organ_dsc"].get(i) is None
                    else f"{row['per_organ_dsc'][i]:.6f}"
                    for i in small_ids
                ]
            )

    summary = {"factors": results, "table": str(table_path)}
    with open(workdir / "ablation_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(f"comparison table: {table_path}")
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="roi_ablation")
    parser.add_argument("--train-count", type=int, default=50)
    parser.add_argument("--eval-count", type=int, default=20)
    parser.add_argument(
        "--factors", default="2,3,5", help="comma-separated ROI scale factors"
    )
    parser.add_argument("--config", help="YAML config overriding the built-in layout")
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    cfg = None
    if args.config:
        from focusnet.config import load_run_config

        cfg = load_run_config(args.config)
    factors = tuple(float(f) for f in args.factors.split(","))
    run_ablation(
        args.workdir,
        factors=factors,
        cfg=cfg,
        train_count=args.train_count,
        eval_count=args.eval_count,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
