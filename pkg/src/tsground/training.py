"""Losses, branch fusion, gradient routing, Adam, and the training loop.

The joint objective adds plain span losses for the two unimodal branches to
the span loss of the fused cross-modal logits. Fusion multiplies the
cross-modal logits by the sigmoid of each branch's logits, which shrinks the
loss (and hence the gradients reaching the cross-modal parameters) on samples
the positional branches already get right, and amplifies it on samples they
get wrong. Routing gates keep the branch losses away from the shared
encoders so the bias stays captured inside the branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .corpus import Dataset
from .ddebias import debias_dataset
from .errors import ConfigError, LogicError
from .nnet import (
    MASK_FILL,
    OWNERS,
    Batch,
    BranchLogits,
    ForwardCtx,
    ParamStore,
    build_batch,
    forward_batch,
)

LOG_FLOOR = math.log(1e-30)


# ---------------------------------------------------------------------------
# Losses and fusion
# ---------------------------------------------------------------------------

def span_loss(a_s: np.ndarray, a_e: np.ndarray, i_s: int, i_e: int) -> float:
    """Mean cross-entropy of the two boundary distributions against one-hot
    labels, each log term clamped at ln(1e-30)."""
    a_s = np.asarray(a_s, dtype=np.float64)
    a_e = np.asarray(a_e, dtype=np.float64)
    if not (0 <= i_s < a_s.shape[-1] and 0 <= i_e < a_e.shape[-1]):
        raise LogicError(f"label ({i_s}, {i_e}) out of range for {a_s.shape[-1]} positions")
    ls = math.log(max(float(a_s[i_s]), 1e-30))
    le = math.log(max(float(a_e[i_e]), 1e-30))
    return -0.5 * (ls + le)


def _np_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def np_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def fuse(z_vq, z_q=None, z_v=None, mask: np.ndarray | None = None):
    """Squash the cross-modal logits by the branch confidences, elementwise.

    Each of z_vq / z_q / z_v is a (start, end) pair of logit vectors; absent
    branches are skipped. Masked positions are reset to the mask fill so they
    stay out of any later softmax.
    """
    fused = []
    for side in (0, 1):
        z = np.array(z_vq[side], dtype=np.float64)
        if z_q is not None:
            z = z * _np_sigmoid(z_q[side])
        if z_v is not None:
            z = z * _np_sigmoid(z_v[side])
        if mask is not None:
            z = np.where(np.asarray(mask, dtype=bool), z, MASK_FILL)
        fused.append(z)
    return fused[0], fused[1]


def fuse_tensors(
    logits: dict[str, tuple[Tensor, Tensor]],
    vmask: np.ndarray,
    branches: tuple[str, ...] = ("v", "q"),
) -> tuple[Tensor, Tensor]:
    """Graph version of fuse() over batched logits; same multiplication order."""
    valid = vmask > 0
    out = []
    for side in (0, 1):
        z = logits["vq"][side]
        if "q" in branches:
            z = z * ad.sigmoid(logits["q"][side])
        if "v" in branches:
            z = z * ad.sigmoid(logits["v"][side])
        out.append(ad.masked_fill(z, valid, MASK_FILL))
    return out[0], out[1]


def total_loss(
    branch: BranchLogits, labels: tuple[int, int], md: bool
) -> tuple[float, dict[str, float]]:
    """Joint objective for one sample, with the per-branch pieces broken out.

    In md mode the cross-modal term is computed on the fused logits; the
    branch terms use their own raw logits.
    """
    i_s, i_e = labels
    components: dict[str, float] = {}
    if md:
        if branch.z_fused is None:
            raise ConfigError("md loss requested but fused logits are absent")
        z = branch.z_fused
    else:
        if branch.z_vq is None:
            raise ConfigError("cross-modal logits are absent")
        z = branch.z_vq
    components["vq"] = span_loss(np_softmax(z[0]), np_softmax(z[1]), i_s, i_e)
    if md and branch.z_q is not None:
        components["q"] = span_loss(np_softmax(branch.z_q[0]), np_softmax(branch.z_q[1]), i_s, i_e)
    if md and branch.z_v is not None:
        components["v"] = span_loss(np_softmax(branch.z_v[0]), np_softmax(branch.z_v[1]), i_s, i_e)
    l_all = components["vq"] + components.get("q", 0.0) + components.get("v", 0.0)
    return l_all, components


def _xe_tensor(pair: tuple[Tensor, Tensor], starts: np.ndarray, ends: np.ndarray) -> Tensor:
    """Batch-mean span loss of a (start, end) logit pair."""
    p_s = ad.softmax(pair[0], axis=-1)
    p_e = ad.softmax(pair[1], axis=-1)
    lp_s = ad.maximum_const(ad.log(ad.gather_index(p_s, starts)), LOG_FLOOR)
    lp_e = ad.maximum_const(ad.log(ad.gather_index(p_e, ends)), LOG_FLOOR)
    return ad.mean_((lp_s + lp_e) * (-0.5))


def batch_losses(
    store: ParamStore, batch: Batch, config: RunConfig, ctx: ForwardCtx
) -> dict[str, Tensor]:
    """Loss components for one mini-batch, keyed 'vq' / 'v' / 'q'."""
    if config.md == "off":
        logits = forward_batch(store, batch, config.mode, ctx)
        key = {"vq": "vq", "v_only": "v", "q_only": "q"}[config.mode]
        return {key: _xe_tensor(logits[key], batch.starts, batch.ends)}
    branches = md_branches(config.md)
    logits = forward_batch(store, batch, "md", ctx, branches)
    fused = fuse_tensors(logits, batch.vmask, branches)
    losses = {"vq": _xe_tensor(fused, batch.starts, batch.ends)}
    for b in branches:
        losses[b] = _xe_tensor(logits[b], batch.starts, batch.ends)
    return losses


def md_branches(md: str) -> tuple[str, ...]:
    return {"full": ("v", "q"), "v_only": ("v",), "q_only": ("q",)}[md]


# ---------------------------------------------------------------------------
# Gradient routing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoutingPolicy:
    """Per-(loss, owner) gradient gates; a closed gate contributes nothing."""

    open_owners: dict[str, frozenset[str]]

    def is_open(self, loss_key: str, owner: str) -> bool:
        return owner in self.open_owners.get(loss_key, frozenset())

    @classmethod
    def joint(cls) -> "RoutingPolicy":
        # Branch losses never touch the shared encoders or the embedding;
        # the cross-modal loss reaches everything except the placeholder
        # sequence (it still flows through the fusion sigmoids).
        return cls(
            {
                "vq": frozenset(OWNERS) - {"V_l"},
                "v": frozenset({"g_v"}),
                "q": frozenset({"m_q", "g_q", "V_l"}),
            }
        )

    @classmethod
    def standalone(cls, mode: str) -> "RoutingPolicy":
        if mode == "vq":
            return cls({"vq": frozenset({"embed", "e_v", "e_q", "m_vq", "g_vq"})})
        if mode == "v_only":
            return cls({"v": frozenset({"e_v", "g_v"})})
        if mode == "q_only":
            return cls({"q": frozenset({"embed", "e_q", "m_q", "g_q", "V_l"})})
        raise ConfigError(f"unknown mode {mode!r}")

    @classmethod
    def for_run(cls, mode: str, md: str) -> "RoutingPolicy":
        return cls.joint() if md != "off" else cls.standalone(mode)


def backward_and_route(
    losses: dict[str, Tensor],
    store: ParamStore,
    policy: RoutingPolicy,
    weights: dict[str, float] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate per-parameter gradients over the loss components whose
    routing gate is open; closed gates contribute exact zeros."""
    weights = weights or {}
    tensors = store.tensors()
    total = {n: np.zeros_like(t.values) for n, t in store.params.items()}
    for key, loss in losses.items():
        grads = ad.backward(loss, tensors)
        w = weights.get(key, 1.0)
        for name, tensor in store.params.items():
            if policy.is_open(key, ParamStore.owner_of(name)):
                g = grads[tensor]
                total[name] += g if w == 1.0 else w * g
    return total


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, lr: float, **kwargs) -> "OptimState":
        state = cls(lr=lr, **kwargs)
        for name, t in store.params.items():
            state.m[name] = np.zeros_like(t.values)
            state.v[name] = np.zeros_like(t.values)
        return state


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One bias-corrected Adam update; zero gradients leave values unchanged."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise LogicError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, tensor in store.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    store: ParamStore
    history: list[dict]
    best_epoch: int
    best_val_miou: float | None


def infer_vocab(datasets: dict[str, Dataset]) -> int:
    return max(ds.vocab_size for ds in datasets.values())


def train(config: RunConfig, data: dict[str, Dataset], log=None) -> TrainResult:
    """Train per the config; returns the best-on-validation parameters.

    Early stopping watches validation mean IoU with the configured patience.
    With dd set, the train split is augmented (in memory) before training.
    """
    from .evalmetrics import evaluate  # local import: evalmetrics also uses nnet

    config.validate()
    train_set = data["train"]
    val_set = data.get("val")
    if config.dd:
        train_set = debias_dataset(
            train_set, config.n_clip, config.max_new_per_sample, seed=config.seed
        )
    vocab = config.vocab_size or infer_vocab(data)
    store = ParamStore.initialize(config, vocab, train_set.d_v, config.seed)
    policy = RoutingPolicy.for_run(config.mode, config.md)
    optim = OptimState.for_store(store, lr=config.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 606]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 707]))
    ctx = ForwardCtx(rng=dropout_rng, rate=config.dropout)
    weights = {"v": config.loss_weight_v, "q": config.loss_weight_q}
    infer_mode = config.mode

    history: list[dict] = []
    best_snap = store.snapshot()
    best_miou: float | None = None
    best_epoch = 0
    stale = 0
    n = len(train_set.samples)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = {"vq": 0.0, "v": 0.0, "q": 0.0}
        seen = {"vq": 0, "v": 0, "q": 0}
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = build_batch([train_set.samples[i] for i in idx])
            losses = batch_losses(store, batch, config, ctx)
            grads = backward_and_route(losses, store, policy, weights)
            clip_gradients(grads, config.grad_clip)
            adam_step(store, grads, optim)
            for key, loss in losses.items():
                sums[key] += loss.item() * len(idx)
                seen[key] += len(idx)
        record = {
            "epoch": epoch,
            "L_vq": sums["vq"] / seen["vq"] if seen["vq"] else None,
            "L_q": sums["q"] / seen["q"] if seen["q"] else None,
            "L_v": sums["v"] / seen["v"] if seen["v"] else None,
            "val_mIoU": None,
        }
        if val_set is not None and len(val_set.samples) > 0:
            miou = evaluate(store, val_set, mode=infer_mode).miou
            record["val_mIoU"] = miou
            if best_miou is None or miou > best_miou:
                best_miou = miou
                best_epoch = epoch
                best_snap = store.snapshot()
                stale = 0
            else:
                stale += 1
        history.append(record)
        if log is not None:
            log(record)
        if val_set is not None and stale >= config.patience:
            break
    if val_set is not None and config.epochs > 0:
        store.restore(best_snap)
    return TrainResult(store=store, history=history, best_epoch=best_epoch, best_val_miou=best_miou)
