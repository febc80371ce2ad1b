"""Data model and file formats for video/query/moment corpora.

A sample pairs a feature sequence (one row per video unit) with a tokenized
query and a ground-truth moment given both in seconds and as an inclusive
index span over the feature rows.

File formats:
  * manifest: JSONL, one record per annotation with keys
    {"id", "duration", "feature_file", "tokens", "t_s", "t_e"} and optional
    precomputed {"i_s", "i_e"}; feature_file is resolved relative to the
    manifest's directory.
  * feature file: little-endian binary, magic b"FEAT", u32 n_v, u32 d_v,
    then n_v * d_v float32 values row-major.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, FormatError, ManifestError, ValidationError

SPLITS = ("train", "val", "test_iid", "test_ood", "test_all")

#: Feature sequences longer than this are uniformly downsampled on load.
MAX_VISUAL_LEN = 128

FEATURE_MAGIC = b"FEAT"
_FEATURE_HEADER = struct.Struct("<4sII")


def time_to_index(t: float, duration: float, n_v: int) -> int:
    """Map a time point to a feature-row index: min(n_v - 1, floor(t / duration * n_v)).

    Monotone non-decreasing in t; the right endpoint clamps to n_v - 1.
    """
    if duration <= 0:
        raise DomainError(f"duration must be positive, got {duration}")
    if n_v < 1:
        raise DomainError(f"n_v must be >= 1, got {n_v}")
    return min(n_v - 1, int(math.floor(t / duration * n_v)))


def moment_to_indices(t_s: float, t_e: float, duration: float, n_v: int) -> tuple[int, int]:
    """Derive the inclusive index span [i_s, i_e] covered by a moment [t_s, t_e].

    The start uses time_to_index. The end time is exclusive in seconds, so the
    last covered row is ceil(t_e / duration * n_v) - 1, clamped into
    [i_s, n_v - 1] so the span is always non-empty.
    """
    i_s = time_to_index(t_s, duration, n_v)
    i_e = int(math.ceil(t_e / duration * n_v)) - 1
    i_e = max(i_s, min(n_v - 1, i_e))
    return i_s, i_e


@dataclass(frozen=True, eq=False)
class Sample:
    """One video-query-moment instance."""

    id: str
    duration: float
    features: np.ndarray  # (n_v, d_v) float32
    tokens: tuple[int, ...]
    t_s: float
    t_e: float
    i_s: int
    i_e: int

    def __post_init__(self):
        if self.duration <= 0:
            raise ValidationError(f"sample {self.id}: duration must be > 0")
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValidationError(f"sample {self.id}: features must be a non-empty 2-D matrix")
        if len(self.tokens) < 1:
            raise ValidationError(f"sample {self.id}: query must contain at least one token")
        if not (0 <= self.t_s <= self.t_e <= self.duration):
            raise ValidationError(
                f"sample {self.id}: need 0 <= t_s <= t_e <= duration, "
                f"got t_s={self.t_s}, t_e={self.t_e}, duration={self.duration}"
            )
        n_v = self.features.shape[0]
        if not (0 <= self.i_s <= self.i_e <= n_v - 1):
            raise ValidationError(
                f"sample {self.id}: need 0 <= i_s <= i_e <= n_v-1, "
                f"got i_s={self.i_s}, i_e={self.i_e}, n_v={n_v}"
            )

    @property
    def n_v(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]

    @property
    def n_q(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class NormalizedMoment:
    s_norm: float
    e_norm: float

    def __post_init__(self):
        if not (0.0 <= self.s_norm <= self.e_norm <= 1.0):
            raise ValidationError(
                f"normalized moment out of range: ({self.s_norm}, {self.e_norm})"
            )


def normalize_moment(sample: Sample) -> NormalizedMoment:
    """Moment boundaries as fractions of the video duration."""
    return NormalizedMoment(sample.t_s / sample.duration, sample.t_e / sample.duration)


@dataclass(frozen=True, eq=False)
class Dataset:
    split: str
    samples: tuple[Sample, ...]
    vocab_size: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}, expected one of {SPLITS}")
        widths = {s.d_v for s in self.samples}
        if len(widths) > 1:
            raise ValidationError(f"samples disagree on feature width: {sorted(widths)}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def d_v(self) -> int:
        if not self.samples:
            raise ValidationError("empty dataset has no feature width")
        return self.samples[0].d_v


def make_dataset(split: str, samples: Sequence[Sample], vocab_size: int | None = None) -> Dataset:
    """Build a Dataset, inferring vocab_size from the samples when not given."""
    if vocab_size is None:
        vocab_size = 1 + max((max(s.tokens) for s in samples), default=-1)
    return Dataset(split=split, samples=tuple(samples), vocab_size=vocab_size)


def concat_test_sets(test_iid: Dataset, test_ood: Dataset) -> Dataset:
    """The combined test set is iid samples followed by ood samples."""
    return make_dataset(
        "test_all",
        test_iid.samples + test_ood.samples,
        max(test_iid.vocab_size, test_ood.vocab_size),
    )


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def write_features(path: Path | str, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype="<f4")
    n_v, d_v = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, n_v, d_v))
        fh.write(feats.tobytes())


def read_features(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated feature file")
    magic, n_v, d_v = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    payload = raw[_FEATURE_HEADER.size:]
    expected = n_v * d_v * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n_v, d_v)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = ("id", "duration", "feature_file", "tokens", "t_s", "t_e")


def _downsample(features: np.ndarray, max_len: int) -> np.ndarray:
    """Uniform row selection down to max_len rows."""
    n_v = features.shape[0]
    rows = (np.arange(max_len, dtype=np.int64) * n_v) // max_len
    return features[rows]


def load_dataset(
    manifest_path: Path | str,
    split: str | None = None,
    max_visual_len: int = MAX_VISUAL_LEN,
) -> Dataset:
    """Load a manifest and its feature files into a Dataset.

    Index spans are recomputed from the time span whenever a record does not
    carry them. Sequences longer than max_visual_len are uniformly
    downsampled with indices rederived from the times.
    """
    manifest_path = Path(manifest_path)
    if split is None:
        if manifest_path.stem not in SPLITS:
            raise ManifestError(
                f"cannot infer split from {manifest_path.name!r}; pass split= explicitly"
            )
        split = manifest_path.stem
    base = manifest_path.parent
    samples: list[Sample] = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{manifest_path}:{lineno}: invalid JSON ({exc})") from exc
            missing = [k for k in _REQUIRED_KEYS if k not in rec]
            if missing:
                raise ManifestError(
                    f"{manifest_path}:{lineno}: missing keys {missing}"
                )
            features = read_features(base / rec["feature_file"])
            duration = float(rec["duration"])
            t_s, t_e = float(rec["t_s"]), float(rec["t_e"])
            if features.shape[0] > max_visual_len:
                features = _downsample(features, max_visual_len)
                i_s, i_e = moment_to_indices(t_s, t_e, duration, features.shape[0])
            elif "i_s" in rec and "i_e" in rec:
                i_s, i_e = int(rec["i_s"]), int(rec["i_e"])
            else:
                i_s, i_e = moment_to_indices(t_s, t_e, duration, features.shape[0])
            samples.append(
                Sample(
                    id=str(rec["id"]),
                    duration=duration,
                    features=features,
                    tokens=tuple(int(t) for t in rec["tokens"]),
                    t_s=t_s,
                    t_e=t_e,
                    i_s=i_s,
                    i_e=i_e,
                )
            )
    return make_dataset(split, samples)


def write_dataset(dataset: Dataset, out_dir: Path | str, features_subdir: str = "features") -> Path:
    """Write <out_dir>/<split>.jsonl plus one feature file per sample.

    Returns the manifest path. Records carry explicit i_s/i_e so a reload
    reproduces the in-memory dataset exactly.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / features_subdir
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / f"{dataset.split}.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fname = f"{features_subdir}/{s.id}.bin"
            write_features(out_dir / fname, s.features)
            rec = {
                "id": s.id,
                "duration": s.duration,
                "feature_file": fname,
                "tokens": list(s.tokens),
                "t_s": s.t_s,
                "t_e": s.t_e,
                "i_s": s.i_s,
                "i_e": s.i_e,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest
