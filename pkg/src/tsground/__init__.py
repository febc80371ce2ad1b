"""Temporal sentence grounding with data and model debiasing.

Library layout:
  corpus       data model, manifests and feature files
  synthgen     synthetic biased benchmarks with iid/ood test splits
  ddebias      oversampling by two-sided background-clip truncation
  biasaudit    density grids, biased proportion, KL to uniform, p_gap
  autodiff     reverse-mode differentiation over float64 numpy arrays
  nnet         span model plus video-only and query-only branches
  training     losses, fusion, gradient routing, Adam, training loop
  evalmetrics  span decoding and the R@1 / dR@1 / mIoU suite
  checkpoint   exact binary serialization of parameters
  experiments  bias probes and the debiasing strategy matrix
  cli          the `tsground` command
"""

__version__ = "0.1.0"

from .biasaudit import BiasRegion, DensityGrid, biased_proportion, density_grid, kl_to_uniform, p_gap
from .config import RunConfig
from .corpus import (
    Dataset,
    NormalizedMoment,
    Sample,
    load_dataset,
    normalize_moment,
    time_to_index,
    write_dataset,
)
from .ddebias import (
    ClipPartition,
    TruncationPlan,
    apply_truncation,
    debias_dataset,
    enumerate_truncations,
    partition_clips,
)
from .evalmetrics import MetricReport, Prediction, evaluate, extract_span, iou_span, mean_iou
from .nnet import BranchLogits, ParamStore, forward
from .synthgen import SynthSpec, concept_signal, generate_benchmark
from .training import RoutingPolicy, adam_step, fuse, span_loss, total_loss, train
