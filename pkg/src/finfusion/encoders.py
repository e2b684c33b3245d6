"""Per-modality encoders: price windows, token sequences, macro vectors, and
financial graphs, each mapped to a fixed-width embedding.

All encoders are pure functions of (input, params). Params live in a flat
dict of named leaf tensors so training stages can select subsets by prefix.
The transformer building blocks here are shared by the fusion layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    ImputationRequiredError,
    VocabularyError,
)

MACRO_GROUPS = ("growth", "inflation", "credit", "market_stress")


# ---------------------------------------------------------------------------
# domain types

@dataclass
class PriceWindow:
    """OHLCV history plus derived indicator columns for one asset."""

    timestamps: np.ndarray  # (T,) ordinal day indices
    ohlcv: np.ndarray       # (T, 5) open, high, low, close, volume
    indicators: np.ndarray  # (T, J)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps)
        self.ohlcv = np.asarray(self.ohlcv, dtype=np.float64)
        self.indicators = np.asarray(self.indicators, dtype=np.float64)
        t = self.ohlcv.shape[0]
        if t < 1:
            raise DegenerateInputError("price window has no rows")
        if self.ohlcv.ndim != 2 or self.ohlcv.shape[1] != 5:
            raise DimensionError(f"ohlcv must be (T, 5), got {self.ohlcv.shape}")
        if self.indicators.shape[0] != t or self.timestamps.shape[0] != t:
            raise DimensionError("timestamps, ohlcv, indicators disagree on T")
        o, h, l, c, v = (self.ohlcv[:, i] for i in range(5))
        if np.any(h < np.maximum(o, c)) or np.any(l > np.minimum(o, c)):
            raise ContractError("high/low must bracket open and close")
        if np.any(v < 0):
            raise ContractError("volume must be nonnegative")

    @property
    def length(self) -> int:
        return self.ohlcv.shape[0]

    def features(self) -> np.ndarray:
        return np.concatenate([self.ohlcv, self.indicators], axis=1)


@dataclass
class TokenSequence:
    """Integer event tokens drawn from a fixed vocabulary."""

    token_ids: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.ndim != 1 or self.token_ids.size == 0:
            raise DegenerateInputError("token sequence must be a nonempty 1-d list")
        if np.any(self.token_ids < 0):
            raise VocabularyError("negative token id")

    @property
    def length(self) -> int:
        return self.token_ids.size


@dataclass
class MacroVector:
    """One snapshot of macro indicators with named slots."""

    values: np.ndarray
    slot_names: tuple
    frequency: str = "monthly"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.slot_names = tuple(self.slot_names)
        if self.values.ndim != 1 or self.values.size != len(self.slot_names):
            raise DimensionError("macro values and slot names disagree")
        if self.frequency not in ("monthly", "quarterly"):
            raise ContractError(f"frequency must be monthly|quarterly, got {self.frequency!r}")


@dataclass
class FinancialGraph:
    """Institution graph: node features plus nonnegative adjacency."""

    node_features: np.ndarray  # (N, F)
    adjacency: np.ndarray      # (N, N)

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        n = self.node_features.shape[0]
        if self.adjacency.shape != (n, n):
            raise DimensionError(
                f"adjacency {self.adjacency.shape} does not match {n} nodes")
        if np.any(self.adjacency < 0):
            raise ContractError("adjacency weights must be nonnegative")

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


@dataclass
class ModalityEmbedding:
    """Width-d_model vector tagged with the modality that produced it."""

    vector: Tensor
    kind: str

    def __post_init__(self):
        if self.kind not in ("price", "text", "macro", "graph"):
            raise ContractError(f"unknown modality kind {self.kind!r}")


# ---------------------------------------------------------------------------
# parameter initialization

def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    size = shape if shape is not None else (fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=size), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_transformer_layer(params: dict, prefix: str, d: int, d_ff: int,
                           rng: np.random.Generator) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = xavier(rng, d, d)
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = _zeros(d)
    params[f"{prefix}.ln1.g"] = _ones(d)
    params[f"{prefix}.ln1.b"] = _zeros(d)
    params[f"{prefix}.ln2.g"] = _ones(d)
    params[f"{prefix}.ln2.b"] = _zeros(d)
    params[f"{prefix}.ff.w1"] = xavier(rng, d, d_ff)
    params[f"{prefix}.ff.b1"] = _zeros(d_ff)
    params[f"{prefix}.ff.w2"] = xavier(rng, d_ff, d)
    params[f"{prefix}.ff.b2"] = _zeros(d)


def init_price_params(cfg, rng: np.random.Generator) -> dict:
    p: dict = {}
    p["price.in.w"] = xavier(rng, cfg.price_features, cfg.d_model)
    p["price.in.b"] = _zeros(cfg.d_model)
    for i in range(cfg.n_layers):
        init_transformer_layer(p, f"price.layer{i}", cfg.d_model, cfg.d_ff, rng)
    return p


def init_text_params(cfg, rng: np.random.Generator) -> dict:
    p: dict = {}
    p["text.embed"] = Tensor(
        rng.normal(scale=0.02, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True)
    for i in range(cfg.n_layers):
        init_transformer_layer(p, f"text.layer{i}", cfg.d_model, cfg.d_ff, rng)
    return p


def init_macro_params(cfg, rng: np.random.Generator) -> dict:
    p: dict = {}
    m = len(cfg.macro_slots)
    g = len(MACRO_GROUPS)
    p["macro.gate.w"] = xavier(rng, m, g)
    p["macro.gate.b"] = _zeros(g)
    for gi, group in enumerate(MACRO_GROUPS):
        width = len(cfg.macro_groups[group])
        p[f"macro.group{gi}.w"] = xavier(rng, width, cfg.macro_group_dim)
        p[f"macro.group{gi}.b"] = _zeros(cfg.macro_group_dim)
    flat = g * cfg.macro_group_dim
    p["macro.mlp.w1"] = xavier(rng, flat, cfg.macro_hidden)
    p["macro.mlp.b1"] = _zeros(cfg.macro_hidden)
    p["macro.mlp.w2"] = xavier(rng, cfg.macro_hidden, cfg.d_model)
    p["macro.mlp.b2"] = _zeros(cfg.d_model)
    return p


def init_graph_params(cfg, rng: np.random.Generator) -> dict:
    p: dict = {}
    dims = [cfg.graph_features] + [cfg.d_model] * cfg.graph_layers
    for i in range(cfg.graph_layers):
        p[f"graph.layer{i}.w"] = xavier(rng, dims[i], dims[i + 1])
        p[f"graph.layer{i}.a_src"] = xavier(rng, dims[i + 1], 1, shape=(dims[i + 1],))
        p[f"graph.layer{i}.a_dst"] = xavier(rng, dims[i + 1], 1, shape=(dims[i + 1],))
    return p


# ---------------------------------------------------------------------------
# transformer building blocks

def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    """Classic sin/cos position table, shape (t, d)."""
    pos = np.arange(t)[:, None]
    half = (d + 1) // 2
    freq = np.exp(-np.log(10000.0) * (2 * np.arange(half)) / d)
    angles = pos * freq[None, :]
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)[:, : d // 2]
    return pe


def multi_head_attention(x: Tensor, params: dict, prefix: str, n_heads: int,
                         key_mask: np.ndarray | None = None,
                         record: dict | None = None) -> Tensor:
    """Self-attention over axis -2 of x: (B, T, d) -> (B, T, d).

    ``key_mask`` (B, T) marks positions allowed to be attended to; masked
    logits are pushed low enough that their softmax weight underflows to 0.
    """
    b, t, d = x.shape
    if d % n_heads != 0:
        raise DimensionError(f"d_model {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def proj(name):
        w, bias = params[f"{prefix}.w{name}"], params[f"{prefix}.b{name}"]
        out = ad.matmul(x, w) + bias
        out = ad.reshape(out, (b, t, n_heads, dh))
        return ad.transpose(out, (0, 2, 1, 3))  # (B, H, T, dh)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if key_mask is not None:
        keep = np.asarray(key_mask, dtype=bool).reshape(b, 1, 1, t)
        scores = ad.masked_fill_logits(scores, np.broadcast_to(keep, scores.shape))
    attn = ad.softmax(scores, axis=-1)
    if record is not None:
        record["attn"] = attn.data.copy()
    out = ad.matmul(attn, v)  # (B, H, T, dh)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(out, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def transformer_layer(x: Tensor, params: dict, prefix: str, n_heads: int,
                      key_mask: np.ndarray | None = None,
                      record: dict | None = None) -> Tensor:
    """Pre-norm block: attention then position-wise feed-forward, residual both."""
    normed = ad.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + multi_head_attention(normed, params, prefix, n_heads, key_mask, record)
    normed = ad.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = ad.relu(ad.matmul(normed, params[f"{prefix}.ff.w1"]) + params[f"{prefix}.ff.b1"])
    return x + ad.matmul(h, params[f"{prefix}.ff.w2"]) + params[f"{prefix}.ff.b2"]


def masked_mean_pool(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over axis -2 restricted to mask-true rows."""
    if mask is None:
        return ad.reduce_mean(x, axis=-2)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    total = ad.reduce_sum(x * Tensor(m), axis=-2)
    counts = m.sum(axis=-2)
    if np.any(counts == 0):
        raise DegenerateInputError("pooling mask keeps no rows")
    return total * Tensor(1.0 / counts)


# ---------------------------------------------------------------------------
# batched encoder cores (used by training); single-sample API wraps these

def encode_price_batch(features: np.ndarray, params: dict, cfg,
                       record: dict | None = None) -> Tensor:
    """(B, T, F) price+indicator windows -> (B, d_model)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise DimensionError(f"expected (B, T, F), got {feats.shape}")
    b, t, f = feats.shape
    if t < 1:
        raise DegenerateInputError("empty price window")
    if f != cfg.price_features:
        raise DimensionError(f"price feature width {f} != configured {cfg.price_features}")
    x = ad.matmul(Tensor(feats), params["price.in.w"]) + params["price.in.b"]
    x = x + Tensor(sinusoidal_positions(t, cfg.d_model)[None])
    for i in range(cfg.n_layers):
        rec = {} if record is not None else None
        x = transformer_layer(x, params, f"price.layer{i}", cfg.n_heads, record=rec)
        if record is not None:
            record[f"layer{i}.attn"] = rec["attn"]
    return masked_mean_pool(x, None)


def encode_text_batch(token_ids: np.ndarray, lengths: np.ndarray, params: dict, cfg,
                      record: dict | None = None) -> Tensor:
    """(B, L) right-padded token ids with (B,) true lengths -> (B, d_model)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    lens = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionError(f"expected (B, L) ids, got {ids.shape}")
    if np.any(lens < 1):
        raise DegenerateInputError("empty token sequence in batch")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise VocabularyError("token id outside vocabulary")
    b, l = ids.shape
    mask = np.arange(l)[None, :] < lens[:, None]
    x = ad.take_rows(params["text.embed"], ids)
    x = x + Tensor(sinusoidal_positions(l, cfg.d_model)[None])
    for i in range(cfg.n_layers):
        rec = {} if record is not None else None
        x = transformer_layer(x, params, f"text.layer{i}", cfg.n_heads,
                              key_mask=mask, record=rec)
        if record is not None:
            record[f"layer{i}.attn"] = rec["attn"]
    if record is not None:
        record["hidden"] = x.data.copy()
    return masked_mean_pool(x, mask)


def encode_macro_batch(values: np.ndarray, params: dict, cfg,
                       record: dict | None = None) -> Tensor:
    """(B, M) macro snapshots -> (B, d_model) via a softmax gate over groups."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2 or vals.shape[1] != len(cfg.macro_slots):
        raise DimensionError(f"expected (B, {len(cfg.macro_slots)}) macro values")
    if np.any(np.isnan(vals)):
        raise ImputationRequiredError("macro vector contains missing values")
    x = Tensor(vals)
    gate_logits = ad.matmul(x, params["macro.gate.w"]) + params["macro.gate.b"]
    weights = ad.softmax(gate_logits, axis=-1)  # (B, G)
    if record is not None:
        record["group_weights"] = weights.data.copy()
    pieces = []
    for gi, group in enumerate(MACRO_GROUPS):
        idx = np.asarray(cfg.macro_groups[group], dtype=np.int64)
        sub = Tensor(vals[:, idx])
        emb = ad.matmul(sub, params[f"macro.group{gi}.w"]) + params[f"macro.group{gi}.b"]
        w = ad.slice_axis(weights, 1, gi, gi + 1)  # (B, 1)
        pieces.append(emb * w)
    h = ad.concat(pieces, axis=-1)
    pre = ad.matmul(h, params["macro.mlp.w1"]) + params["macro.mlp.b1"]
    if record is not None:
        record["hidden_preact"] = pre.data.copy()
    return ad.matmul(ad.tanh(pre), params["macro.mlp.w2"]) + params["macro.mlp.b2"]


def encode_graph_batch(features: np.ndarray, adjacency: np.ndarray, params: dict, cfg,
                       record: dict | None = None) -> tuple[Tensor, Tensor]:
    """(B, N, F) node features and (B, N, N) adjacency -> node and pooled embeddings.

    Each layer scores edges additively (leaky-ReLU of source + destination
    projections), normalizes per node over self plus in-neighbors, aggregates,
    then applies an ELU. Self-loops are always added.
    """
    feats = np.asarray(features, dtype=np.float64)
    adj = np.asarray(adjacency, dtype=np.float64)
    if feats.ndim != 3:
        raise DimensionError(f"expected (B, N, F) features, got {feats.shape}")
    b, n, f = feats.shape
    if adj.shape != (b, n, n):
        raise DimensionError(f"adjacency {adj.shape} does not match features {feats.shape}")
    if f != cfg.graph_features:
        raise DimensionError(f"graph feature width {f} != configured {cfg.graph_features}")
    keep = (adj > 0) | np.eye(n, dtype=bool)[None]
    x = Tensor(feats)
    for i in range(cfg.graph_layers):
        h = ad.matmul(x, params[f"graph.layer{i}.w"])  # (B, N, d)
        src = ad.matmul(h, params[f"graph.layer{i}.a_src"])  # (B, N)
        dst = ad.matmul(h, params[f"graph.layer{i}.a_dst"])
        scores = ad.leaky_relu(
            ad.reshape(src, (b, n, 1)) + ad.reshape(dst, (b, 1, n)), alpha=0.2)
        scores = ad.masked_fill_logits(scores, keep)
        alpha = ad.softmax(scores, axis=-1)  # (B, N, N), rows sum to 1
        if record is not None:
            record[f"layer{i}.coeffs"] = alpha.data.copy()
        x = ad.elu(ad.matmul(alpha, h))
    pooled = ad.reduce_mean(x, axis=-2)
    return x, pooled


# ---------------------------------------------------------------------------
# single-sample typed API

def encode_price(w: PriceWindow, params: dict, cfg,
                 details: dict | None = None) -> ModalityEmbedding:
    out = encode_price_batch(w.features()[None], params, cfg, record=details)
    return ModalityEmbedding(ad.reshape(out, (cfg.d_model,)), "price")


def encode_text(s: TokenSequence, params: dict, cfg,
                details: dict | None = None) -> ModalityEmbedding:
    ids = s.token_ids[None, :]
    out = encode_text_batch(ids, np.array([s.length]), params, cfg, record=details)
    return ModalityEmbedding(ad.reshape(out, (cfg.d_model,)), "text")


def encode_macro(m: MacroVector, params: dict, cfg,
                 details: dict | None = None) -> ModalityEmbedding:
    if tuple(m.slot_names) != tuple(cfg.macro_slots):
        raise ContractError("macro slot names do not match configuration")
    out = encode_macro_batch(m.values[None], params, cfg, record=details)
    return ModalityEmbedding(ad.reshape(out, (cfg.d_model,)), "macro")


def encode_graph(g: FinancialGraph, params: dict, cfg,
                 details: dict | None = None) -> tuple[Tensor, ModalityEmbedding]:
    nodes, pooled = encode_graph_batch(
        g.node_features[None], g.adjacency[None], params, cfg, record=details)
    nodes = ad.reshape(nodes, (g.n_nodes, cfg.d_model))
    return nodes, ModalityEmbedding(ad.reshape(pooled, (cfg.d_model,)), "graph")
