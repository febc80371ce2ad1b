"""Command-line entry point: synth, audit, augment, train, eval, report.

Every subcommand is seeded and file-driven, so the whole pipeline
(synth -> augment -> train -> eval -> report) reproduces byte-identically
for a fixed seed. Set TSGROUND_LOG=debug|info|warning to adjust verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .biasaudit import BiasRegion, audit_summary, density_grid, grid_to_csv, p_gap
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, load_config
from .corpus import SPLITS, concat_test_sets, load_dataset, write_dataset
from .ddebias import debias_dataset
from .errors import ConfigError, TsgroundError
from .evalmetrics import evaluate, report_from_dict
from .experiments import MATRIX_VARIANTS, debias_matrix, matrix_summary
from .synthgen import SynthSpec, generate_benchmark, spec_from_dict, spec_to_dict
from .training import train

log = logging.getLogger("tsground")

SPEC_ECHO = "synth_spec.json"


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_benchmark(data_dir: Path, train_manifest: Path | None = None) -> dict:
    data = {}
    for split in ("train", "val", "test_iid", "test_ood"):
        manifest = data_dir / f"{split}.jsonl"
        if split == "train" and train_manifest is not None:
            manifest = train_manifest
        if manifest.exists():
            data[split] = load_dataset(manifest, split=split)
    if not data:
        raise ConfigError(f"no split manifests found under {data_dir}")
    return data


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec_dict = spec_to_dict(SynthSpec())
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec_dict.update(json.load(fh))
    for item in args.set:
        key, _, raw = item.partition("=")
        if not _ or key not in spec_dict:
            raise ConfigError(f"unknown synth override {item!r}")
        if key in ("n_v_range", "bias_region"):
            spec_dict[key] = [float(x) for x in raw.split(",")]
            if key == "n_v_range":
                spec_dict[key] = [int(x) for x in spec_dict[key]]
        elif isinstance(spec_dict[key], bool):
            spec_dict[key] = raw.lower() in ("1", "true")
        elif isinstance(spec_dict[key], int):
            spec_dict[key] = int(raw)
        elif isinstance(spec_dict[key], float):
            spec_dict[key] = float(raw)
        else:
            spec_dict[key] = raw
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = spec_from_dict(spec_dict)
    out_dir = Path(args.out)
    benchmark = generate_benchmark(spec)
    for split, dataset in benchmark.items():
        write_dataset(dataset, out_dir)
        log.info("wrote %s with %d samples", split, len(dataset))
    _dump_json(spec_to_dict(spec), out_dir / SPEC_ECHO)
    return 0


def _default_region(manifest: Path) -> BiasRegion | None:
    echo = manifest.parent / SPEC_ECHO
    if echo.exists():
        with open(echo, "r", encoding="utf-8") as fh:
            return BiasRegion((tuple(json.load(fh)["bias_region"]),))
    return None


def cmd_audit(args) -> int:
    manifest = Path(args.data)
    dataset = load_dataset(manifest, split=args.split)
    if args.region:
        region = BiasRegion(tuple(tuple(r) for r in args.region))
    else:
        region = _default_region(manifest)
        if region is None:
            raise ConfigError(
                "no --region given and no synth_spec.json next to the manifest"
            )
    summary = audit_summary(dataset, region, bins=args.bins)
    summary["region"] = [list(r) for r in region.rectangles]
    summary["bins"] = args.bins
    grid = density_grid(dataset, args.bins)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(prefix.with_suffix(".grid.csv"), "w", encoding="utf-8") as fh:
        fh.write(grid_to_csv(grid))
    _dump_json(summary, prefix.with_suffix(".summary.json"))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_augment(args) -> int:
    data_dir = Path(args.data)
    train_set = load_dataset(data_dir / "train.jsonl", split="train")
    augmented = debias_dataset(
        train_set, n_clip=args.n_clip, max_new_per_sample=args.max_new, seed=args.seed
    )
    out_dir = Path(args.out)
    write_dataset(augmented, out_dir)
    echo = data_dir / SPEC_ECHO
    if echo.exists():
        (out_dir / SPEC_ECHO).write_bytes(echo.read_bytes())
    log.info("augmented %d -> %d samples", len(train_set), len(augmented))
    print(json.dumps({"original": len(train_set), "augmented": len(augmented)}))
    return 0


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _build_config(args)
    data_dir = Path(args.data)
    cfg.data_dir = str(data_dir)
    cfg.out_dir = str(args.out)
    train_manifest = Path(args.train_manifest) if args.train_manifest else None
    data = _load_benchmark(data_dir, train_manifest)
    if "train" not in data:
        raise ConfigError(f"no train.jsonl under {data_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(rec: dict) -> None:
        log.info(
            "epoch %d: L_vq=%s L_q=%s L_v=%s val_mIoU=%s",
            rec["epoch"],
            *(None if rec[k] is None else f"{rec[k]:.4f}" for k in ("L_vq", "L_q", "L_v", "val_mIoU")),
        )

    result = train(cfg, data, log=progress)
    history_path = out_dir / "history.jsonl"
    with open(history_path, "w", encoding="utf-8") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    digest = {
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_mIoU": result.best_val_miou,
    }
    save_checkpoint(result.store, out_dir / "checkpoint.bin", history_digest=digest)
    log.info("saved checkpoint to %s", out_dir / "checkpoint.bin")
    print(json.dumps(digest, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    store, cfg, _ = load_checkpoint(args.ckpt)
    data = _load_benchmark(Path(args.data))
    if "test_iid" in data and "test_ood" in data:
        data["test_all"] = concat_test_sets(data["test_iid"], data["test_ood"])
    wanted = args.splits or [s for s in SPLITS if s in data and s != "train"]
    out = {"splits": {}}
    for split in wanted:
        if split not in data:
            raise ConfigError(f"split {split!r} not available under {args.data}")
        report = evaluate(store, data[split], mode=cfg.mode)
        out["splits"][split] = report.to_dict()
    if "test_iid" in out["splits"] and "test_ood" in out["splits"]:
        iid, ood = out["splits"]["test_iid"], out["splits"]["test_ood"]
        out["p_gap"] = {
            "mIoU": p_gap(iid["mIoU"], ood["mIoU"]),
            "dR@1,0.5": p_gap(iid["dR@1"]["0.5"], ood["dR@1"]["0.5"]),
            "dR@1,0.7": p_gap(iid["dR@1"]["0.7"], ood["dR@1"]["0.7"]),
        }
    path = Path(args.out)
    _dump_json(out, path)
    with open(path.with_suffix(".csv"), "w", encoding="utf-8") as fh:
        fh.write(_reports_csv({"model": out["splits"]}))
    print(json.dumps(out, sort_keys=True))
    return 0


_CSV_HEADER = (
    "split,method,R@1 IoU=0.3,R@1 IoU=0.5,R@1 IoU=0.7,"
    "dR@1 IoU=0.3,dR@1 IoU=0.5,dR@1 IoU=0.7,mIoU,p_gap mIoU\n"
)


def _reports_csv(methods: dict[str, dict]) -> str:
    """Table rows: iid / ood / all sections, one row per method."""
    rows = [_CSV_HEADER]
    for split in ("test_iid", "test_ood", "test_all", "val"):
        for method, splits in methods.items():
            if split not in splits:
                continue
            rep = splits[split]
            gap = ""
            if "test_iid" in splits and "test_ood" in splits:
                gap = f"{p_gap(splits['test_iid']['mIoU'], splits['test_ood']['mIoU']):.2f}"
            rows.append(
                f"{split},{method},"
                + ",".join(f"{rep['R@1'][m]:.2f}" for m in ("0.3", "0.5", "0.7"))
                + ","
                + ",".join(f"{rep['dR@1'][m]:.2f}" for m in ("0.3", "0.5", "0.7"))
                + f",{rep['mIoU']:.2f},{gap}\n"
            )
    return "".join(rows)


def cmd_report(args) -> int:
    if args.matrix:
        return _cmd_report_matrix(args)
    if not args.evals:
        raise ConfigError("report needs --evals name=path pairs (or --matrix)")
    methods: dict[str, dict] = {}
    for item in args.evals:
        name, _, path = item.partition("=")
        if not _:
            raise ConfigError(f"--evals entries look like name=path, got {item!r}")
        with open(path, "r", encoding="utf-8") as fh:
            methods[name] = json.load(fh)["splits"]
    table = {"methods": methods, "p_gap": {}}
    for name, splits in methods.items():
        if "test_iid" in splits and "test_ood" in splits:
            iid, ood = splits["test_iid"], splits["test_ood"]
            table["p_gap"][name] = {
                "mIoU": p_gap(iid["mIoU"], ood["mIoU"]),
                "dR@1,0.5": p_gap(iid["dR@1"]["0.5"], ood["dR@1"]["0.5"]),
                "dR@1,0.7": p_gap(iid["dR@1"]["0.7"], ood["dR@1"]["0.7"]),
            }
    prefix = Path(args.out)
    _dump_json(table, prefix.with_suffix(".json"))
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(prefix.with_suffix(".csv"), "w", encoding="utf-8") as fh:
        fh.write(_reports_csv(methods))
    print(json.dumps(table["p_gap"], sort_keys=True))
    return 0


def _cmd_report_matrix(args) -> int:
    data = _load_benchmark(Path(args.data))
    overrides: dict = {}
    if args.set:
        probe = apply_overrides(RunConfig(), args.set)
        defaults = RunConfig()
        overrides = {
            k: v for k, v in probe.to_dict().items() if getattr(defaults, k) != v
        }
    seeds = tuple(range(args.seeds))
    matrix = debias_matrix(data, seeds=seeds, **overrides)
    summary = matrix_summary(matrix)
    out_dir = Path(args.out)
    _dump_json(matrix, out_dir / "matrix.json")
    _dump_json(summary, out_dir / "matrix_summary.json")
    methods = {}
    for name, rows in matrix.items():
        mid = rows[len(rows) // 2]
        methods[name] = mid["reports"]
    with open(out_dir / "matrix_table.csv", "w", encoding="utf-8") as fh:
        fh.write(_reports_csv(methods))
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsground",
        description="Synthetic grounding benchmarks, debiasing, training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with generator settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("audit", help="density grid and bias summary for a split")
    p.add_argument("--data", required=True, help="manifest (.jsonl) to audit")
    p.add_argument("--split", default=None)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--region", type=float, nargs=4, action="append", metavar="X")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("augment", help="write the truncation-oversampled train set")
    p.add_argument("--data", required=True, help="benchmark directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clip", type=int, default=5)
    p.add_argument("--max-new", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON RunConfig file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-manifest", help="override the train manifest path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="assemble comparison tables")
    p.add_argument("--evals", nargs="*", default=[], metavar="NAME=PATH")
    p.add_argument("--out", required=True)
    p.add_argument("--matrix", action="store_true", help="run the full strategy matrix")
    p.add_argument("--data", help="benchmark directory (with --matrix)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("TSGROUND_LOG", "info").upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TsgroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
