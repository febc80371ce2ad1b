"""Experiment drivers: single runs, the unimodal bias probe, the debiasing
matrix, and a constant-span baseline for calibrating positional models."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .biasaudit import p_gap
from .config import RunConfig
from .corpus import Dataset, concat_test_sets, moment_to_indices
from .evalmetrics import MetricReport, Prediction, compute_report, evaluate, truths_of
from .synthgen import SynthSpec, generate_benchmark
from .training import TrainResult, train

#: Strategy variants in presentation order, as config overrides.
MATRIX_VARIANTS: dict[str, dict] = {
    "vq": {"dd": False, "md": "off"},
    "+DD": {"dd": True, "md": "off"},
    "+MD": {"dd": False, "md": "full"},
    "+DD+MD": {"dd": True, "md": "full"},
}


@dataclass
class RunOutcome:
    config: RunConfig
    result: TrainResult
    reports: dict[str, MetricReport]


def run_grounding(config: RunConfig, benchmark: dict[str, Dataset]) -> RunOutcome:
    """Train one configuration and evaluate every test split."""
    result = train(config, benchmark)
    store = result.store
    reports: dict[str, MetricReport] = {}
    for split in ("val", "test_iid", "test_ood"):
        if split in benchmark:
            reports[split] = evaluate(store, benchmark[split], mode=config.mode)
    if "test_iid" in benchmark and "test_ood" in benchmark:
        both = concat_test_sets(benchmark["test_iid"], benchmark["test_ood"])
        reports["test_all"] = evaluate(store, both, mode=config.mode)
    return RunOutcome(config=config, result=result, reports=reports)


# ---------------------------------------------------------------------------
# Constant-span baseline
# ---------------------------------------------------------------------------

def best_constant_span(
    train_set: Dataset, grid_step: float = 0.05, max_samples: int = 500
) -> tuple[float, float]:
    """Normalized span with the highest mean IoU against the train moments."""
    samples = train_set.samples[:max_samples]
    n_v = np.array([s.n_v for s in samples], dtype=np.float64)
    gt_s = np.array([s.i_s for s in samples], dtype=np.float64)
    gt_e = np.array([s.i_e for s in samples], dtype=np.float64)
    steps = int(round(1.0 / grid_step)) + 1
    grid = np.linspace(0.0, 1.0, steps)
    best, best_score = (0.0, 1.0), -1.0
    for s in grid:
        for e in grid:
            if s > e:
                continue
            c_s = np.minimum(n_v - 1, np.floor(s * n_v))
            c_e = np.maximum(c_s, np.minimum(n_v - 1, np.ceil(e * n_v) - 1))
            inter = np.minimum(c_e, gt_e) - np.maximum(c_s, gt_s) + 1
            inter = np.maximum(inter, 0.0)
            union = (c_e - c_s + 1) + (gt_e - gt_s + 1) - inter
            score = float(np.mean(inter / union))
            if score > best_score:
                best_score, best = score, (float(s), float(e))
    return best


def constant_span_report(span: tuple[float, float], dataset: Dataset) -> MetricReport:
    """Score the fixed normalized span against a dataset."""
    s, e = span
    preds = []
    for sample in dataset.samples:
        i_s, i_e = moment_to_indices(s, e, 1.0, sample.n_v)
        preds.append(Prediction(sample.id, i_s, i_e))
    return compute_report(dataset.split, preds, truths_of(dataset))


# ---------------------------------------------------------------------------
# Unimodal bias probe (separately trained video-only / query-only models)
# ---------------------------------------------------------------------------

def unimodal_bias_runs(
    benchmark: dict[str, Dataset],
    modes: tuple[str, ...] = ("q_only", "v_only"),
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    **config_overrides,
) -> dict[str, list[dict]]:
    """Train each unimodal mode across seeds; report iid/ood mean IoU."""
    out: dict[str, list[dict]] = {m: [] for m in modes}
    for mode in modes:
        for seed in seeds:
            cfg = RunConfig(mode=mode, seed=seed, **config_overrides)
            outcome = run_grounding(cfg, benchmark)
            iid = outcome.reports["test_iid"].miou
            ood = outcome.reports["test_ood"].miou
            out[mode].append(
                {
                    "seed": seed,
                    "iid_mIoU": iid,
                    "ood_mIoU": ood,
                    "gap_points": iid - ood,
                }
            )
    return out


# ---------------------------------------------------------------------------
# Debiasing matrix
# ---------------------------------------------------------------------------

def debias_matrix(
    benchmark: dict[str, Dataset],
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    variants: dict[str, dict] | None = None,
    **config_overrides,
) -> dict[str, list[dict]]:
    """Run every strategy variant across seeds on one benchmark."""
    variants = variants or MATRIX_VARIANTS
    matrix: dict[str, list[dict]] = {}
    for name, overrides in variants.items():
        rows = []
        for seed in seeds:
            cfg = RunConfig(mode="vq", seed=seed, **{**config_overrides, **overrides})
            outcome = run_grounding(cfg, benchmark)
            iid, ood = outcome.reports["test_iid"], outcome.reports["test_ood"]
            rows.append(
                {
                    "seed": seed,
                    "reports": {k: r.to_dict() for k, r in outcome.reports.items()},
                    "p_gap_mIoU": p_gap(iid.miou, ood.miou),
                    "p_gap_dR1_05": p_gap(iid.dr1[0.5], ood.dr1[0.5]),
                    "ood_dR1_05": ood.dr1[0.5],
                    "best_epoch": outcome.result.best_epoch,
                }
            )
        matrix[name] = rows
    return matrix


def matrix_summary(matrix: dict[str, list[dict]]) -> dict[str, dict]:
    """Median (and mean/sd) of the headline numbers per variant."""
    summary = {}
    for name, rows in matrix.items():
        def stats(key: str) -> dict:
            vals = [r[key] for r in rows]
            return {
                "median": float(np.median(vals)),
                "mean": float(np.mean(vals)),
                "sd": float(np.std(vals)),
            }

        summary[name] = {
            "p_gap_mIoU": stats("p_gap_mIoU"),
            "p_gap_dR1_05": stats("p_gap_dR1_05"),
            "ood_dR1_05": stats("ood_dR1_05"),
        }
    return summary
