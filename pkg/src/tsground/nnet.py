"""Span-based grounding model with video-only and query-only branches.

The cross-modal path encodes both modalities (projection, learned positions,
depthwise convolution, transformer block), fuses them with context-query
attention and predicts start/end logits with stacked transformer blocks. The
video-only branch reuses the encoded video directly; the query-only branch
swaps the encoded video for a learnable placeholder sequence so it can only
express positional regularities. Branch predictors share the architecture of
the main one but never share parameters.

Parameter owners: embed, e_v, e_q, m_vq, g_vq, g_v, m_q, g_q, V_l.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .corpus import Sample
from .errors import ConfigError, InputError

OWNERS = ("embed", "e_v", "e_q", "m_vq", "g_vq", "g_v", "m_q", "g_q", "V_l")

MASK_FILL = -1e9

_BASE_VQ = ("embed", "e_v", "e_q", "m_vq", "g_vq")
_V_BRANCH = ("g_v",)
_Q_BRANCH = ("m_q", "g_q", "V_l")


def owners_for_run(mode: str, md: str) -> tuple[str, ...]:
    """Parameter owners a run allocates, by mode and debiasing variant."""
    if mode == "v_only":
        return ("e_v",) + _V_BRANCH
    if mode == "q_only":
        return ("embed", "e_q") + _Q_BRANCH
    owners = _BASE_VQ
    if md in ("full", "v_only"):
        owners = owners + _V_BRANCH
    if md in ("full", "q_only"):
        owners = owners + _Q_BRANCH
    return owners


@dataclass
class ForwardCtx:
    """Dropout stream for training; the default is deterministic evaluation."""

    rng: np.random.Generator | None = None
    rate: float = 0.0

    def drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.rate, self.rng)


EVAL_CTX = ForwardCtx()


@dataclass
class BranchLogits:
    """Per-sample start/end logit pairs; absent branches stay None."""

    z_vq: tuple[np.ndarray, np.ndarray] | None
    z_v: tuple[np.ndarray, np.ndarray] | None
    z_q: tuple[np.ndarray, np.ndarray] | None
    z_fused: tuple[np.ndarray, np.ndarray] | None
    mask: np.ndarray


class ParamStore:
    """Named parameter tensors, grouped by owner prefix of the name."""

    def __init__(self, params: dict[str, Tensor], config: RunConfig, vocab_size: int, d_v: int):
        self.params = params
        self.config = config
        self.vocab_size = vocab_size
        self.d_v = d_v

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    @staticmethod
    def owner_of(name: str) -> str:
        return name.split(".", 1)[0]

    @property
    def owners(self) -> set[str]:
        return {self.owner_of(n) for n in self.params}

    def owner_params(self, owner: str) -> list[Tensor]:
        return [t for n, t in self.params.items() if self.owner_of(n) == owner]

    def require(self, owners: Iterable[str]) -> None:
        missing = [o for o in owners if o not in self.owners]
        if missing:
            raise ConfigError(f"parameters for {missing} were never allocated")

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            t.values[...] = snap[n]

    def zero_owners(self, owners: Iterable[str]) -> None:
        targets = set(owners)
        for n, t in self.params.items():
            if self.owner_of(n) in targets:
                t.values[...] = 0.0

    def n_params(self) -> int:
        return sum(t.values.size for t in self.params.values())

    @classmethod
    def initialize(
        cls,
        config: RunConfig,
        vocab_size: int,
        d_v: int,
        seed: int,
        owners: Sequence[str] | None = None,
    ) -> "ParamStore":
        if owners is None:
            owners = owners_for_run(config.mode, config.md)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 505]))
        d, d_q, K = config.d, config.d_q, config.kernel
        params: dict[str, Tensor] = {}

        def make(name: str, values: np.ndarray) -> None:
            params[name] = ad.parameter(values, name)

        def xavier(fan_in: int, fan_out: int, shape) -> np.ndarray:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)

        def linear(prefix: str, fan_in: int, fan_out: int) -> None:
            make(f"{prefix}.W", xavier(fan_in, fan_out, (fan_in, fan_out)))
            make(f"{prefix}.b", np.zeros(fan_out))

        def block(prefix: str) -> None:
            for part in ("q", "k", "v", "o"):
                linear(f"{prefix}.{part}", d, d)
            make(f"{prefix}.ln1.g", np.ones(d))
            make(f"{prefix}.ln1.b", np.zeros(d))
            linear(f"{prefix}.ff1", d, d)
            linear(f"{prefix}.ff2", d, d)
            make(f"{prefix}.ln2.g", np.ones(d))
            make(f"{prefix}.ln2.b", np.zeros(d))

        def encoder(owner: str, in_dim: int, n_max: int) -> None:
            linear(f"{owner}.proj", in_dim, d)
            make(f"{owner}.pe", rng.uniform(-0.1, 0.1, size=(n_max, d)))
            make(f"{owner}.conv.W", xavier(K, K, (K, d)))
            make(f"{owner}.conv.b", np.zeros(d))
            for i in range(config.encoder_blocks):
                block(f"{owner}.block{i}")

        def attender(owner: str) -> None:
            make(f"{owner}.w_v", xavier(d, 1, (d,)))
            make(f"{owner}.w_q", xavier(d, 1, (d,)))
            make(f"{owner}.w_x", xavier(d, 1, (d,)))
            make(f"{owner}.s_b", np.zeros(()))
            linear(f"{owner}.out", 4 * d, d)

        def predictor(owner: str) -> None:
            for i in range(config.predictor_blocks):
                block(f"{owner}.block{i}")
            make(f"{owner}.start.W", xavier(d, 1, (d,)))
            make(f"{owner}.start.b", np.zeros(()))
            make(f"{owner}.end.W", xavier(d, 1, (d,)))
            make(f"{owner}.end.b", np.zeros(()))

        # Creation order is fixed so seeded initialization is reproducible.
        for owner in OWNERS:
            if owner not in owners:
                continue
            if owner == "embed":
                make("embed.table", rng.uniform(-0.1, 0.1, size=(vocab_size, d_q)))
            elif owner == "e_v":
                encoder("e_v", d_v, config.n_v_max)
            elif owner == "e_q":
                encoder("e_q", d_q, config.n_q_max)
            elif owner in ("m_vq", "m_q"):
                attender(owner)
            elif owner in ("g_vq", "g_v", "g_q"):
                predictor(owner)
            elif owner == "V_l":
                make("V_l.seq", rng.uniform(-0.1, 0.1, size=(config.n_v_max, d)))
        return cls(params, config, vocab_size, d_v)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    feats: np.ndarray   # (B, Tv, d_v) float64
    vmask: np.ndarray   # (B, Tv) float64 0/1
    tokens: np.ndarray  # (B, Tq) int64, 0-padded
    qmask: np.ndarray   # (B, Tq) float64 0/1
    starts: np.ndarray  # (B,) int64
    ends: np.ndarray    # (B,) int64
    n_v: np.ndarray     # (B,) int64
    ids: list


def build_batch(samples: Sequence[Sample]) -> Batch:
    B = len(samples)
    Tv = max(s.n_v for s in samples)
    Tq = max(s.n_q for s in samples)
    d_v = samples[0].d_v
    feats = np.zeros((B, Tv, d_v), dtype=np.float64)
    vmask = np.zeros((B, Tv), dtype=np.float64)
    tokens = np.zeros((B, Tq), dtype=np.int64)
    qmask = np.zeros((B, Tq), dtype=np.float64)
    starts = np.zeros(B, dtype=np.int64)
    ends = np.zeros(B, dtype=np.int64)
    n_v = np.zeros(B, dtype=np.int64)
    for i, s in enumerate(samples):
        feats[i, : s.n_v] = s.features.astype(np.float64)
        vmask[i, : s.n_v] = 1.0
        tokens[i, : s.n_q] = s.tokens
        qmask[i, : s.n_q] = 1.0
        starts[i], ends[i], n_v[i] = s.i_s, s.i_e, s.n_v
    return Batch(feats, vmask, tokens, qmask, starts, ends, n_v, [s.id for s in samples])


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def _transformer_block(store: ParamStore, prefix: str, x: Tensor, key_mask: np.ndarray, ctx: ForwardCtx) -> Tensor:
    P = store.params
    heads = store.config.heads
    B, T, d = x.shape
    dh = d // heads
    q = ad.linear(x, P[f"{prefix}.q.W"], P[f"{prefix}.q.b"])
    k = ad.linear(x, P[f"{prefix}.k.W"], P[f"{prefix}.k.b"])
    v = ad.linear(x, P[f"{prefix}.v.W"], P[f"{prefix}.v.b"])

    def split(t: Tensor) -> Tensor:
        return ad.moveaxes(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = (q @ ad.transpose_last2(k)) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1, mask=key_mask[:, None, None, :] > 0)
    mixed = att @ v
    mixed = ad.reshape(ad.moveaxes(mixed, (0, 2, 1, 3)), (B, T, d))
    o = ad.linear(mixed, P[f"{prefix}.o.W"], P[f"{prefix}.o.b"])
    x = ad.layer_norm(x + ctx.drop(o), P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    f = ad.relu(ad.linear(x, P[f"{prefix}.ff1.W"], P[f"{prefix}.ff1.b"]))
    f = ad.linear(f, P[f"{prefix}.ff2.W"], P[f"{prefix}.ff2.b"])
    return ad.layer_norm(x + ctx.drop(f), P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])


def _encode(store: ParamStore, owner: str, x: Tensor, mask: np.ndarray, ctx: ForwardCtx) -> Tensor:
    P = store.params
    T = x.shape[1]
    x = ad.linear(x, P[f"{owner}.proj.W"], P[f"{owner}.proj.b"])
    x = x + ad.slice_tensor(P[f"{owner}.pe"], (slice(0, T),))
    x = x * mask[:, :, None]
    x = ctx.drop(x)
    x = ad.depthwise_conv1d(x, P[f"{owner}.conv.W"], P[f"{owner}.conv.b"])
    for i in range(store.config.encoder_blocks):
        x = _transformer_block(store, f"{owner}.block{i}", x, mask, ctx)
    return x


def encode_video_batch(store: ParamStore, feats: np.ndarray, vmask: np.ndarray, ctx: ForwardCtx) -> Tensor:
    if feats.shape[1] > store.config.n_v_max:
        raise InputError(
            f"video length {feats.shape[1]} exceeds n_v_max {store.config.n_v_max}"
        )
    return _encode(store, "e_v", ad.as_tensor(feats), vmask, ctx)


def encode_query_batch(store: ParamStore, tokens: np.ndarray, qmask: np.ndarray, ctx: ForwardCtx) -> Tensor:
    table = store.params["embed.table"]
    if tokens.max(initial=0) >= table.shape[0]:
        raise InputError(
            f"token id {int(tokens.max())} outside vocabulary of {table.shape[0]}"
        )
    if tokens.shape[1] > store.config.n_q_max:
        raise InputError(
            f"query length {tokens.shape[1]} exceeds n_q_max {store.config.n_q_max}"
        )
    emb = ad.embedding_lookup(table, tokens)
    return _encode(store, "e_q", emb, qmask, ctx)


def cross_attend_batch(
    store: ParamStore,
    owner: str,
    video: Tensor,
    query: Tensor,
    vmask: np.ndarray,
    qmask: np.ndarray,
    ctx: ForwardCtx,
) -> Tensor:
    """Context-query attention: similarity from a trilinear score, then the
    usual context-to-query and query-to-context summaries."""
    P = store.params
    B, Tv, d = video.shape
    Tq = query.shape[1]
    sv = ad.reshape(ad.dot_last(video, P[f"{owner}.w_v"]), (B, Tv, 1))
    sq = ad.reshape(ad.dot_last(query, P[f"{owner}.w_q"]), (B, 1, Tq))
    sx = (video * P[f"{owner}.w_x"]) @ ad.transpose_last2(query)
    sim = sx + sv + sq + P[f"{owner}.s_b"]
    row = ad.softmax(sim, axis=-1, mask=qmask[:, None, :] > 0)
    col = ad.softmax(sim, axis=1, mask=vmask[:, :, None] > 0)
    a = row @ query
    b = row @ (ad.transpose_last2(col) @ video)
    cat = ad.concat_last([video, a, video * a, video * b])
    out = ad.linear(cat, P[f"{owner}.out.W"], P[f"{owner}.out.b"])
    return ctx.drop(out)


def predict_spans_batch(
    store: ParamStore, owner: str, hidden: Tensor, vmask: np.ndarray, ctx: ForwardCtx
) -> tuple[Tensor, Tensor]:
    P = store.params
    x = hidden
    for i in range(store.config.predictor_blocks):
        x = _transformer_block(store, f"{owner}.block{i}", x, vmask, ctx)
    valid = vmask > 0
    z_s = ad.masked_fill(ad.dot_last(x, P[f"{owner}.start.W"]) + P[f"{owner}.start.b"], valid, MASK_FILL)
    z_e = ad.masked_fill(ad.dot_last(x, P[f"{owner}.end.W"]) + P[f"{owner}.end.b"], valid, MASK_FILL)
    return z_s, z_e


def forward_batch(
    store: ParamStore,
    batch: Batch,
    mode: str,
    ctx: ForwardCtx = EVAL_CTX,
    md_branches: tuple[str, ...] = ("v", "q"),
) -> dict[str, tuple[Tensor, Tensor]]:
    """Logit pairs for the requested mode, keyed 'vq' / 'v' / 'q'.

    Fusion of the branches happens in the training module; this function only
    produces the raw branch logits.
    """
    out: dict[str, tuple[Tensor, Tensor]] = {}
    need_video = mode in ("vq", "v_only", "md")
    need_query = mode in ("vq", "q_only", "md")
    video = query = None
    if need_video:
        store.require(["e_v"])
        video = encode_video_batch(store, batch.feats, batch.vmask, ctx)
    if need_query:
        store.require(["embed", "e_q"])
        query = encode_query_batch(store, batch.tokens, batch.qmask, ctx)

    if mode in ("vq", "md"):
        store.require(["m_vq", "g_vq"])
        h = cross_attend_batch(store, "m_vq", video, query, batch.vmask, batch.qmask, ctx)
        out["vq"] = predict_spans_batch(store, "g_vq", h, batch.vmask, ctx)
    if mode == "v_only" or (mode == "md" and "v" in md_branches):
        store.require(["g_v"])
        out["v"] = predict_spans_batch(store, "g_v", video, batch.vmask, ctx)
    if mode == "q_only" or (mode == "md" and "q" in md_branches):
        store.require(["m_q", "g_q", "V_l"])
        Tv = batch.feats.shape[1]
        placeholder = ad.broadcast_to_shape(
            ad.slice_tensor(store.params["V_l.seq"], (slice(0, Tv),)),
            (batch.feats.shape[0], Tv, store.config.d),
        )
        hq = cross_attend_batch(store, "m_q", placeholder, query, batch.vmask, batch.qmask, ctx)
        out["q"] = predict_spans_batch(store, "g_q", hq, batch.vmask, ctx)
    return out


# ---------------------------------------------------------------------------
# Per-sample wrappers
# ---------------------------------------------------------------------------

def encode_video(store: ParamStore, features: np.ndarray) -> np.ndarray:
    """(n_v, d_v) -> (n_v, d) encoded video for one sample."""
    feats = np.asarray(features, dtype=np.float64)[None]
    mask = np.ones((1, feats.shape[1]))
    return encode_video_batch(store, feats, mask, EVAL_CTX).values[0]


def encode_query(store: ParamStore, tokens: Sequence[int]) -> np.ndarray:
    """Token ids -> (n_q, d) encoded query for one sample."""
    ids = np.asarray(tokens, dtype=np.int64)[None]
    mask = np.ones((1, ids.shape[1]))
    return encode_query_batch(store, ids, mask, EVAL_CTX).values[0]


def cross_modal_attend(store: ParamStore, owner: str, video: np.ndarray, query: np.ndarray) -> np.ndarray:
    v = ad.as_tensor(np.asarray(video, dtype=np.float64)[None])
    q = ad.as_tensor(np.asarray(query, dtype=np.float64)[None])
    vmask = np.ones((1, v.shape[1]))
    qmask = np.ones((1, q.shape[1]))
    return cross_attend_batch(store, owner, v, q, vmask, qmask, EVAL_CTX).values[0]


def predict_spans(store: ParamStore, owner: str, hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = ad.as_tensor(np.asarray(hidden, dtype=np.float64)[None])
    mask = np.ones((1, h.shape[1]))
    z_s, z_e = predict_spans_batch(store, owner, h, mask, EVAL_CTX)
    return z_s.values[0], z_e.values[0]


def forward(
    store: ParamStore,
    sample: Sample,
    mode: str = "vq",
    md_branches: tuple[str, ...] = ("v", "q"),
) -> BranchLogits:
    """Evaluate one sample; in 'md' mode the fused logits are included."""
    batch = build_batch([sample])
    logits = forward_batch(store, batch, mode, EVAL_CTX, md_branches)
    pair = lambda key: (
        (logits[key][0].values[0].copy(), logits[key][1].values[0].copy())
        if key in logits
        else None
    )
    fused = None
    if mode == "md":
        from .training import fuse_tensors  # fusion lives with the losses

        fz = fuse_tensors(logits, batch.vmask, md_branches)
        fused = (fz[0].values[0].copy(), fz[1].values[0].copy())
    return BranchLogits(
        z_vq=pair("vq"),
        z_v=pair("v"),
        z_q=pair("q"),
        z_fused=fused,
        mask=batch.vmask[0] > 0,
    )
