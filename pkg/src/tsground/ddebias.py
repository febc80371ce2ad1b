"""Data debiasing: oversample by truncating background clips from both ends.

A video is cut into near-equal contiguous clips; clips overlapping the
ground-truth moment are merged into a single protected foreground range.
Every combination of leading/trailing background drops (except dropping
nothing) yields a new sample whose features are a contiguous row slice of
the original, so the moment content is untouched while its normalized
boundaries spread out over the distribution plot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, Sample, make_dataset
from .errors import LogicError, UsageError


@dataclass(frozen=True)
class ClipPartition:
    sample_id: str
    clips: tuple[tuple[int, int], ...]  # inclusive [lo, hi], contiguous, disjoint
    foreground: tuple[int, int]         # merged range containing the ground truth
    left_bg: int
    right_bg: int


@dataclass(frozen=True)
class TruncationPlan:
    drop_left: int
    drop_right: int


def partition_clips(sample: Sample, n_clip: int) -> ClipPartition:
    """Split [0, n_v-1] into n_clip near-equal clips and merge the foreground.

    Clip sizes differ by at most one, longer clips first. When the video has
    fewer rows than n_clip, every row becomes its own clip.
    """
    if n_clip < 1:
        raise LogicError(f"n_clip must be >= 1, got {n_clip}")
    n_v = sample.n_v
    n_clip = min(n_clip, n_v)
    base, extra = divmod(n_v, n_clip)
    bounds = []
    lo = 0
    for k in range(n_clip):
        size = base + (1 if k < extra else 0)
        bounds.append((lo, lo + size - 1))
        lo += size
    overlapping = [
        k for k, (c_lo, c_hi) in enumerate(bounds) if c_lo <= sample.i_e and c_hi >= sample.i_s
    ]
    first, last = overlapping[0], overlapping[-1]
    foreground = (bounds[first][0], bounds[last][1])
    clips = tuple(bounds[:first]) + (foreground,) + tuple(bounds[last + 1:])
    return ClipPartition(
        sample_id=sample.id,
        clips=clips,
        foreground=foreground,
        left_bg=first,
        right_bg=n_clip - 1 - last,
    )


def enumerate_truncations(partition: ClipPartition) -> list[TruncationPlan]:
    """All (drop_left, drop_right) pairs except (0, 0), in lexicographic order."""
    plans = [
        TruncationPlan(dl, dr)
        for dl in range(partition.left_bg + 1)
        for dr in range(partition.right_bg + 1)
    ]
    return [p for p in plans if (p.drop_left, p.drop_right) != (0, 0)]


def apply_truncation(sample: Sample, partition: ClipPartition, plan: TruncationPlan) -> Sample:
    """Slice off the dropped clips; times and indices shift consistently.

    With (0, 0) the sample is returned unchanged. Query tokens never change:
    the truncation only removes background, so the query still describes the
    same moment.
    """
    if not (0 <= plan.drop_left <= partition.left_bg):
        raise LogicError(f"drop_left {plan.drop_left} out of range [0, {partition.left_bg}]")
    if not (0 <= plan.drop_right <= partition.right_bg):
        raise LogicError(f"drop_right {plan.drop_right} out of range [0, {partition.right_bg}]")
    if plan.drop_left == 0 and plan.drop_right == 0:
        return sample
    clips = partition.clips
    new_lo = clips[plan.drop_left][0]
    new_hi = clips[len(clips) - 1 - plan.drop_right][1]
    dt = sample.duration / sample.n_v
    new_n_v = new_hi - new_lo + 1
    new_duration = new_n_v * dt
    t_s = min(max(sample.t_s - new_lo * dt, 0.0), new_duration)
    t_e = min(max(sample.t_e - new_lo * dt, t_s), new_duration)
    return Sample(
        id=f"{sample.id}#dl{plan.drop_left}dr{plan.drop_right}",
        duration=new_duration,
        features=sample.features[new_lo : new_hi + 1],
        tokens=sample.tokens,
        t_s=t_s,
        t_e=t_e,
        i_s=sample.i_s - new_lo,
        i_e=sample.i_e - new_lo,
    )


def debias_dataset(
    dataset: Dataset,
    n_clip: int = 5,
    max_new_per_sample: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Augment a train set with every truncated variant of every sample.

    When max_new_per_sample is given, a seeded random subset of that size is
    kept per sample instead of the full enumeration. Originals always stay.
    """
    if dataset.split != "train":
        raise UsageError(
            f"data debiasing is train-only; refusing to augment split {dataset.split!r}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    out: list[Sample] = []
    for sample in dataset.samples:
        out.append(sample)
        partition = partition_clips(sample, n_clip)
        plans = enumerate_truncations(partition)
        if max_new_per_sample is not None and len(plans) > max_new_per_sample:
            keep = rng.choice(len(plans), size=max_new_per_sample, replace=False)
            plans = [plans[i] for i in sorted(keep)]
        for plan in plans:
            out.append(apply_truncation(sample, partition, plan))
    return make_dataset("train", out, vocab_size=dataset.vocab_size)
