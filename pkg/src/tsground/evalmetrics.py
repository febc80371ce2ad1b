"""Span extraction and the grounding metric suite.

Reports recall at 1 for IoU thresholds {0.3, 0.5, 0.7}, the discounted
variant that down-weights predictions whose boundaries sit far from the
ground truth, and mean IoU. The IoU threshold uses the >= convention, which
only matters for exact boundary ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .corpus import Dataset, Sample
from .errors import DomainError, EvaluationError
from .nnet import ForwardCtx, ParamStore, build_batch, forward_batch
from .training import np_softmax

MUS = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    i_s_hat: int
    i_e_hat: int
    score: float = 0.0

    def __post_init__(self):
        if self.i_s_hat > self.i_e_hat:
            raise EvaluationError(
                f"prediction {self.sample_id}: start {self.i_s_hat} after end {self.i_e_hat}"
            )


@dataclass(frozen=True)
class SpanTruth:
    sample_id: str
    i_s: int
    i_e: int
    n_v: int


@dataclass(frozen=True)
class MetricReport:
    split: str
    r1: dict[float, float]
    dr1: dict[float, float]
    miou: float
    n: int

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n": self.n,
            "R@1": {f"{mu:.1f}": self.r1[mu] for mu in MUS},
            "dR@1": {f"{mu:.1f}": self.dr1[mu] for mu in MUS},
            "mIoU": self.miou,
        }


def report_from_dict(d: dict) -> MetricReport:
    return MetricReport(
        split=d["split"],
        r1={mu: d["R@1"][f"{mu:.1f}"] for mu in MUS},
        dr1={mu: d["dR@1"][f"{mu:.1f}"] for mu in MUS},
        miou=d["mIoU"],
        n=d["n"],
    )


def extract_span(a_s: np.ndarray, a_e: np.ndarray) -> tuple[int, int]:
    """Best ordered pair by joint boundary probability.

    Ties break toward the smaller start, then the smaller end.
    """
    a_s = np.asarray(a_s, dtype=np.float64)
    a_e = np.asarray(a_e, dtype=np.float64)
    n = a_s.shape[0]
    scores = np.outer(a_s, a_e)
    if n > 1:
        scores[np.tril_indices(n, k=-1)] = -1.0
    flat = int(np.argmax(scores))
    return flat // n, flat % n


def iou_span(pred: tuple[int, int], gt: tuple[int, int]) -> float:
    """IoU of two inclusive index spans."""
    inter = min(pred[1], gt[1]) - max(pred[0], gt[0]) + 1
    if inter <= 0:
        return 0.0
    union = (pred[1] - pred[0] + 1) + (gt[1] - gt[0] + 1) - inter
    return inter / union


def _align(
    predictions: Sequence[Prediction], truths: Sequence[SpanTruth]
) -> list[tuple[Prediction, SpanTruth]]:
    by_id = {t.sample_id: t for t in truths}
    if len(by_id) != len(truths):
        raise EvaluationError("duplicate sample ids among ground truths")
    if len(predictions) != len(truths):
        raise EvaluationError(
            f"{len(predictions)} predictions for {len(truths)} ground truths"
        )
    pairs = []
    for p in predictions:
        if p.sample_id not in by_id:
            raise EvaluationError(f"prediction for unknown sample {p.sample_id!r}")
        pairs.append((p, by_id[p.sample_id]))
    return pairs


def recall_at1(predictions, truths, mu: float) -> float:
    pairs = _align(predictions, truths)
    if not pairs:
        raise DomainError("cannot evaluate an empty set")
    hits = sum(
        1 for p, t in pairs if iou_span((p.i_s_hat, p.i_e_hat), (t.i_s, t.i_e)) >= mu
    )
    return 100.0 * hits / len(pairs)


def discounted_recall_at1(predictions, truths, mu: float) -> float:
    """Recall gated at IoU >= mu, scaled by boundary-offset discounts
    (1 - |offset| / n_v per side) so over-long predictions score less."""
    pairs = _align(predictions, truths)
    if not pairs:
        raise DomainError("cannot evaluate an empty set")
    total = 0.0
    for p, t in pairs:
        if iou_span((p.i_s_hat, p.i_e_hat), (t.i_s, t.i_e)) >= mu:
            alpha_s = 1.0 - abs(p.i_s_hat - t.i_s) / t.n_v
            alpha_e = 1.0 - abs(p.i_e_hat - t.i_e) / t.n_v
            total += alpha_s * alpha_e
    return 100.0 * total / len(pairs)


def mean_iou(predictions, truths) -> float:
    pairs = _align(predictions, truths)
    if not pairs:
        raise DomainError("cannot evaluate an empty set")
    return 100.0 * sum(
        iou_span((p.i_s_hat, p.i_e_hat), (t.i_s, t.i_e)) for p, t in pairs
    ) / len(pairs)


def compute_report(split: str, predictions, truths) -> MetricReport:
    return MetricReport(
        split=split,
        r1={mu: recall_at1(predictions, truths, mu) for mu in MUS},
        dr1={mu: discounted_recall_at1(predictions, truths, mu) for mu in MUS},
        miou=mean_iou(predictions, truths),
        n=len(truths),
    )


def truths_of(dataset: Dataset) -> list[SpanTruth]:
    return [SpanTruth(s.id, s.i_s, s.i_e, s.n_v) for s in dataset.samples]


_EVAL_KEY = {"vq": "vq", "v_only": "v", "q_only": "q"}


def predict_dataset(
    store: ParamStore, dataset: Dataset, mode: str = "vq", batch_size: int = 128
) -> list[Prediction]:
    """Greedy span decoding for every sample, in dataset order.

    Cross-modal models always decode from the raw cross-modal logits; the
    branch logits and their fusion are training-time devices only.
    """
    key = _EVAL_KEY[mode]
    preds: list[Prediction] = []
    samples = dataset.samples
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            batch = build_batch(chunk)
            logits = forward_batch(store, batch, mode, ForwardCtx())
            z_s, z_e = logits[key][0].values, logits[key][1].values
            for i, sample in enumerate(chunk):
                n_v = sample.n_v
                a_s = np_softmax(z_s[i, :n_v])
                a_e = np_softmax(z_e[i, :n_v])
                i_s_hat, i_e_hat = extract_span(a_s, a_e)
                preds.append(
                    Prediction(sample.id, i_s_hat, i_e_hat, float(a_s[i_s_hat] * a_e[i_e_hat]))
                )
    return preds


def evaluate(
    store: ParamStore, dataset: Dataset, mode: str = "vq", batch_size: int = 128
) -> MetricReport:
    preds = predict_dataset(store, dataset, mode, batch_size)
    return compute_report(dataset.split, preds, truths_of(dataset))
