"""Distribution-bias audits over normalized (start, end) annotations.

The 2D density grid mirrors the familiar upper-triangle annotation plots;
biased_proportion and kl_to_uniform quantify how concentrated a split is,
and p_gap measures how much a model's score drops from iid to ood data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, normalize_moment
from .errors import DomainError, ValidationError


@dataclass(frozen=True, eq=False)
class DensityGrid:
    bins: int
    counts: np.ndarray  # (bins, bins) int64; row = start bin, col = end bin
    total: int


@dataclass(frozen=True)
class BiasRegion:
    rectangles: tuple[tuple[float, float, float, float], ...]  # (s_lo, s_hi, e_lo, e_hi)

    def __post_init__(self):
        for rect in self.rectangles:
            s_lo, s_hi, e_lo, e_hi = rect
            if not (0.0 <= s_lo <= s_hi <= 1.0 and 0.0 <= e_lo <= e_hi <= 1.0):
                raise ValidationError(f"rectangle {rect} outside [0,1]^2")

    def contains(self, s_norm: float, e_norm: float) -> bool:
        return any(
            s_lo <= s_norm <= s_hi and e_lo <= e_norm <= e_hi
            for s_lo, s_hi, e_lo, e_hi in self.rectangles
        )


def density_grid(dataset: Dataset, bins: int) -> DensityGrid:
    """Histogram of normalized moments; floor binning clamped to the last bin."""
    if bins < 1:
        raise DomainError(f"bins must be >= 1, got {bins}")
    counts = np.zeros((bins, bins), dtype=np.int64)
    for sample in dataset.samples:
        nm = normalize_moment(sample)
        i = min(bins - 1, int(math.floor(nm.s_norm * bins)))
        j = min(bins - 1, int(math.floor(nm.e_norm * bins)))
        counts[i, j] += 1
    return DensityGrid(bins=bins, counts=counts, total=len(dataset.samples))


def biased_proportion(dataset: Dataset, region: BiasRegion) -> float:
    """Fraction of samples whose normalized moment falls inside the region."""
    if not dataset.samples:
        return 0.0
    hits = sum(
        1
        for sample in dataset.samples
        if region.contains(*_norm_pair(sample))
    )
    return hits / len(dataset.samples)


def _norm_pair(sample) -> tuple[float, float]:
    nm = normalize_moment(sample)
    return nm.s_norm, nm.e_norm


def kl_to_uniform(grid: DensityGrid) -> float:
    """KL(empirical || uniform over upper-triangle cells), 0 log 0 := 0."""
    if grid.total <= 0:
        raise DomainError("cannot compute KL of an empty grid")
    bins = grid.bins
    n_cells = bins * (bins + 1) // 2
    kl = 0.0
    for i in range(bins):
        for j in range(i, bins):
            c = grid.counts[i, j]
            if c > 0:
                p = c / grid.total
                kl += p * math.log(p * n_cells)
    return kl


def p_gap(s_iid: float, s_ood: float) -> float:
    """Relative iid/ood performance gap in percent; smaller is more robust."""
    if s_iid <= 0:
        raise DomainError(f"iid score must be positive, got {s_iid}")
    return abs(s_ood - s_iid) / s_iid * 100.0


def audit_summary(dataset: Dataset, region: BiasRegion, bins: int = 40) -> dict:
    grid = density_grid(dataset, bins)
    return {
        "total": grid.total,
        "biased_proportion": biased_proportion(dataset, region),
        "kl_to_uniform": kl_to_uniform(grid) if grid.total > 0 else None,
    }


def grid_to_csv(grid: DensityGrid) -> str:
    lines = [",".join(str(int(v)) for v in row) for row in grid.counts]
    return "\n".join(lines) + "\n"
