"""Synthetic grounding benchmarks with controllable annotation bias.

Each video is a noise matrix carrying a handful of concept-coded segments:
the queried segment plus decoy segments of other concepts. The query names
its concept through dedicated keyword tokens mixed with distractors, so
recovering the span requires matching query to features; neither modality
alone identifies it. Train/val/iid moments are drawn from a biased mixture
concentrated in a rectangle of normalized (start, end) space, ood moments
from the complement, mimicking an iid/ood split design.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .corpus import Dataset, Sample, make_dataset, moment_to_indices
from .errors import SpecError

_PAD_ID = 0
_TOKENS_PER_CONCEPT = 2


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the generator. Defaults train in minutes on a CPU."""

    n_train: int = 2000
    n_val: int = 300
    n_test_iid: int = 300
    n_test_ood: int = 600
    n_v_range: tuple[int, int] = (16, 32)
    d_v: int = 16
    vocab_size: int = 50
    n_concepts: int = 8
    bias_region: tuple[float, float, float, float] = (0.2, 0.4, 0.2, 0.4)  # s_lo, s_hi, e_lo, e_hi
    bias_strength: float = 0.8
    noise_sigma: float = 0.3
    seed: int = 0
    n_decoys: int = 2       # decoy concept segments per video, space permitting
    signal_gain: float = 1.0

    def validate(self) -> None:
        s_lo, s_hi, e_lo, e_hi = self.bias_region
        if not (0.0 <= s_lo <= s_hi <= 1.0 and 0.0 <= e_lo <= e_hi <= 1.0):
            raise SpecError(f"bias_region {self.bias_region} outside [0,1]^2")
        if not (0.0 <= self.bias_strength <= 1.0):
            raise SpecError(f"bias_strength {self.bias_strength} outside [0,1]")
        area = region_triangle_area(self.bias_region)
        if area <= 0.0 and self.bias_strength > 0.0:
            raise SpecError("bias_region has zero area inside the start<=end triangle")
        if 0.5 - area <= 1e-12:
            raise SpecError("bias_region covers the whole start<=end triangle; no ood complement")
        if self.n_concepts > self.d_v:
            raise SpecError(
                f"cannot build {self.n_concepts} separated concepts in {self.d_v} dims"
            )
        if self.n_v_range[0] < 1 or self.n_v_range[0] > self.n_v_range[1]:
            raise SpecError(f"bad n_v_range {self.n_v_range}")
        needed = _TOKENS_PER_CONCEPT * self.n_concepts + 2
        if self.vocab_size < needed:
            raise SpecError(f"vocab_size {self.vocab_size} < {needed} required")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")


def region_triangle_area(region: tuple[float, float, float, float]) -> float:
    """Area of rectangle ∩ {0 <= s <= e <= 1}, exact piecewise integral over s."""
    s_lo, s_hi, e_lo, e_hi = region
    if s_hi <= s_lo or e_hi <= e_lo:
        return 0.0
    a, b = max(s_lo, 0.0), min(s_hi, 1.0)
    e_hi = min(e_hi, 1.0)
    if b <= a:
        return 0.0
    area = 0.0
    # For fixed s the e-extent inside the triangle is max(0, e_hi - max(e_lo, s)).
    lo, hi = a, min(b, e_lo)
    if hi > lo:  # s <= e_lo: constant height
        area += (hi - lo) * (e_hi - e_lo)
    lo, hi = max(a, e_lo), min(b, e_hi)
    if hi > lo:  # e_lo < s < e_hi: height e_hi - s
        area += e_hi * (hi - lo) - 0.5 * (hi * hi - lo * lo)
    return area


def concept_signal(concept: int, d_v: int, seed: int) -> np.ndarray:
    """Unit-norm code for one concept; distinct concepts are orthogonal.

    Built with modified Gram-Schmidt over seeded Gaussian draws, so the code
    for concept c is a pure function of (concept, d_v, seed).
    """
    if concept >= d_v:
        raise SpecError(f"concept {concept} needs more than {d_v} dims to stay separated")
    return _codebook(concept + 1, d_v, seed)[concept]


def _codebook(n: int, d_v: int, seed: int) -> np.ndarray:
    codes = np.empty((n, d_v), dtype=np.float64)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101, i]))
        v = rng.standard_normal(d_v)
        for j in range(i):
            v -= np.dot(v, codes[j]) * codes[j]
        norm = np.linalg.norm(v)
        draw = 0
        while norm < 1e-8:  # essentially impossible, but stay deterministic
            draw += 1
            v = rng.standard_normal(d_v)
            for j in range(i):
                v -= np.dot(v, codes[j]) * codes[j]
            norm = np.linalg.norm(v)
        codes[i] = v / norm
    return codes


def _inside(s: float, e: float, region: tuple[float, float, float, float]) -> bool:
    s_lo, s_hi, e_lo, e_hi = region
    return s_lo <= s <= s_hi and e_lo <= e <= e_hi


def _triangle_uniform(rng: np.random.Generator) -> tuple[float, float]:
    u, v = rng.random(2)
    return (u, v) if u <= v else (v, u)


def _region_uniform(rng: np.random.Generator, region) -> tuple[float, float]:
    s_lo, s_hi, e_lo, e_hi = region
    while True:
        s = rng.uniform(s_lo, s_hi)
        e = rng.uniform(e_lo, e_hi)
        if s <= e:
            return s, e


def _draw_moment(rng: np.random.Generator, spec: SynthSpec, ood: bool) -> tuple[float, float]:
    if ood:
        while True:
            s, e = _triangle_uniform(rng)
            if not _inside(s, e, spec.bias_region):
                return s, e
    if rng.random() < spec.bias_strength:
        return _region_uniform(rng, spec.bias_region)
    return _triangle_uniform(rng)


def _place_decoys(
    rng: np.random.Generator, n_v: int, i_s: int, i_e: int, length: int, count: int
) -> list[tuple[int, int]]:
    """Non-overlapping decoy index spans, kept one row clear of the moment."""
    taken = [(max(0, i_s - 1), min(n_v - 1, i_e + 1))]
    spans: list[tuple[int, int]] = []
    for _ in range(count):
        free = []
        cursor = 0
        for lo, hi in sorted(taken):
            if lo - cursor >= length:
                free.append((cursor, lo - 1))
            cursor = max(cursor, hi + 2)
        if n_v - cursor >= length:
            free.append((cursor, n_v - 1))
        free = [(lo, hi) for lo, hi in free if hi - lo + 1 >= length]
        if not free:
            break
        lo, hi = free[int(rng.integers(len(free)))]
        start = int(rng.integers(lo, hi - length + 2))
        spans.append((start, start + length - 1))
        taken.append((start, start + length - 1))
    return spans


def _build_sample(spec: SynthSpec, split: str, idx: int, codes: np.ndarray) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SPLIT_CODE[split], idx]))
    concept = int(rng.integers(spec.n_concepts))
    n_v = int(rng.integers(spec.n_v_range[0], spec.n_v_range[1] + 1))
    seconds_per_unit = rng.uniform(0.3, 1.0)
    duration = n_v * seconds_per_unit
    s_norm, e_norm = _draw_moment(rng, spec, ood=(split == "test_ood"))
    t_s, t_e = s_norm * duration, e_norm * duration
    i_s, i_e = moment_to_indices(t_s, t_e, duration, n_v)

    feats = rng.normal(0.0, spec.noise_sigma, size=(n_v, spec.d_v))
    feats[i_s : i_e + 1] += spec.signal_gain * codes[concept]
    span_len = i_e - i_s + 1
    decoy_len = max(1, span_len + int(rng.integers(-1, 2)))
    others = [c for c in range(spec.n_concepts) if c != concept]
    n_decoys = min(spec.n_decoys, len(others))
    decoy_concepts = rng.choice(others, size=n_decoys, replace=False) if n_decoys else []
    for c, (lo, hi) in zip(
        decoy_concepts, _place_decoys(rng, n_v, i_s, i_e, decoy_len, n_decoys)
    ):
        feats[lo : hi + 1] += spec.signal_gain * codes[int(c)]

    keywords = [1 + _TOKENS_PER_CONCEPT * concept + k for k in range(_TOKENS_PER_CONCEPT)]
    distractor_lo = 1 + _TOKENS_PER_CONCEPT * spec.n_concepts
    n_distractors = int(rng.integers(3, 7))
    distractors = rng.integers(distractor_lo, spec.vocab_size, size=n_distractors)
    tokens = np.array(keywords + [int(t) for t in distractors], dtype=np.int64)
    rng.shuffle(tokens)

    return Sample(
        id=f"{split}-{idx:05d}",
        duration=duration,
        features=feats.astype("<f4"),
        tokens=tuple(int(t) for t in tokens),
        t_s=t_s,
        t_e=t_e,
        i_s=i_s,
        i_e=i_e,
    )


_SPLIT_CODE = {"train": 1, "val": 2, "test_iid": 3, "test_ood": 4}


def generate_benchmark(spec: SynthSpec) -> dict[str, Dataset]:
    """Generate {train, val, test_iid, test_ood}; a pure function of spec."""
    spec.validate()
    codes = _codebook(spec.n_concepts, spec.d_v, spec.seed)
    sizes = {
        "train": spec.n_train,
        "val": spec.n_val,
        "test_iid": spec.n_test_iid,
        "test_ood": spec.n_test_ood,
    }
    out: dict[str, Dataset] = {}
    for split, n in sizes.items():
        samples = [_build_sample(spec, split, i, codes) for i in range(n)]
        out[split] = make_dataset(split, samples, vocab_size=spec.vocab_size)
    return out


def spec_to_dict(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["n_v_range"] = list(spec.n_v_range)
    d["bias_region"] = list(spec.bias_region)
    return d


def spec_from_dict(d: dict) -> SynthSpec:
    kwargs = dict(d)
    if "n_v_range" in kwargs:
        kwargs["n_v_range"] = tuple(kwargs["n_v_range"])
    if "bias_region" in kwargs:
        kwargs["bias_region"] = tuple(kwargs["bias_region"])
    return SynthSpec(**kwargs)
