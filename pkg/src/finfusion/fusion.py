"""Cross-modal fusion backbone and the contrastive alignment loss.

Modality embeddings become a 4-token sequence with learned type embeddings,
one full-attention transformer layer mixes them, and a learned query pools
the present tokens into the unified representation z. Absent modalities are
masked with a logit penalty large enough that their softmax weight underflows
to exactly zero, so masking and physical removal agree to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, DimensionError

MODALITIES = ("price", "text", "macro", "graph")


@dataclass
class ModalBundle:
    """One aligned step of inputs; any subset of modalities may be present."""

    price: enc.PriceWindow | None = None
    text: enc.TokenSequence | None = None
    macro: enc.MacroVector | None = None
    graph: enc.FinancialGraph | None = None

    def __post_init__(self):
        if not any(self.get(kind) is not None for kind in MODALITIES):
            raise DegenerateInputError("bundle has no modalities")

    def get(self, kind: str):
        return getattr(self, kind)

    @property
    def presence(self) -> np.ndarray:
        return np.array([self.get(k) is not None for k in MODALITIES])


@dataclass
class FusedRepresentation:
    """Unified vector z plus the fusion attention weights that produced it."""

    z: Tensor
    weights: np.ndarray  # (4,) aligned to MODALITIES; zero where absent

    def __post_init__(self):
        present = self.weights > 0
        if present.any() and abs(self.weights[present].sum() - 1.0) > 1e-6:
            raise ContractError("fusion weights over present modalities must sum to 1")


@dataclass
class AlignConfig:
    """Contrastive alignment settings."""

    temperature: float = 0.1
    pairs: tuple = (("price", "text"),)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        for a, b in self.pairs:
            if a not in MODALITIES or b not in MODALITIES:
                raise ContractError(f"unknown modality pair ({a}, {b})")


def init_fusion_params(cfg, rng: np.random.Generator) -> dict:
    p: dict = {}
    p["fusion.type"] = Tensor(
        rng.normal(scale=0.02, size=(4, cfg.d_model)), requires_grad=True)
    enc.init_transformer_layer(p, "fusion.layer0", cfg.d_model, cfg.d_ff, rng)
    p["fusion.pool.q"] = enc.xavier(rng, cfg.d_model, 1, shape=(cfg.d_model,))
    return p


def fuse_batch(embeddings: dict, presence: np.ndarray, params: dict, cfg,
               record: dict | None = None) -> tuple[Tensor, np.ndarray]:
    """Mix per-modality embeddings into z.

    ``embeddings`` maps modality name to a (B, d_model) tensor; entries may be
    omitted when that modality is absent for the whole batch. ``presence`` is
    (B, 4) over the fixed modality order. Returns z (B, d_model) and the
    pooling weights (B, 4) with exact zeros at absent slots.
    """
    presence = np.asarray(presence, dtype=bool)
    b = presence.shape[0]
    if presence.shape != (b, 4):
        raise DimensionError(f"presence must be (B, 4), got {presence.shape}")
    if not presence.any(axis=1).all():
        raise DegenerateInputError("a batch row has no modalities")
    zero = Tensor(np.zeros((b, cfg.d_model)))
    tokens = []
    for ki, kind in enumerate(MODALITIES):
        embedded = embeddings.get(kind)
        if embedded is None:
            if presence[:, ki].any():
                raise ContractError(f"{kind} marked present but no embedding given")
            embedded = zero
        tokens.append(embedded)
    x = ad.stack(tokens, axis=1)  # (B, 4, d)
    x = x + ad.reshape(params["fusion.type"], (1, 4, cfg.d_model))
    x = enc.transformer_layer(x, params, "fusion.layer0", cfg.n_heads,
                              key_mask=presence, record=record)
    # learned-query attention pooling over present tokens
    scores = ad.matmul(x, params["fusion.pool.q"]) * (1.0 / np.sqrt(cfg.d_model))
    scores = ad.masked_fill_logits(scores, presence)
    weights = ad.softmax(scores, axis=-1)  # (B, 4)
    z = ad.matmul(ad.reshape(weights, (b, 1, 4)), x)  # (B, 1, d)
    z = ad.reshape(z, (b, cfg.d_model))
    return z, weights.data.copy()


def fuse(bundle: ModalBundle, params: dict, cfg,
         details: dict | None = None) -> FusedRepresentation:
    """Encode each present modality and pool them into one representation."""
    embeddings: dict = {}
    if bundle.price is not None:
        embeddings["price"] = ad.reshape(
            enc.encode_price(bundle.price, params, cfg).vector, (1, cfg.d_model))
    if bundle.text is not None:
        embeddings["text"] = ad.reshape(
            enc.encode_text(bundle.text, params, cfg).vector, (1, cfg.d_model))
    if bundle.macro is not None:
        embeddings["macro"] = ad.reshape(
            enc.encode_macro(bundle.macro, params, cfg).vector, (1, cfg.d_model))
    if bundle.graph is not None:
        _, pooled = enc.encode_graph(bundle.graph, params, cfg)
        embeddings["graph"] = ad.reshape(pooled.vector, (1, cfg.d_model))
    z, weights = fuse_batch(embeddings, bundle.presence[None], params, cfg,
                            record=details)
    return FusedRepresentation(ad.reshape(z, (cfg.d_model,)), weights[0])


def similarity(a, b) -> float:
    """Cosine similarity of two vectors; rejects zero vectors."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.dot(av.ravel(), bv.ravel()) / (na * nb))


def _unit_rows(x: Tensor) -> Tensor:
    if not np.all(np.linalg.norm(x.data, axis=-1) > 0):
        raise DegenerateInputError("zero row in embedding batch")
    sq = ad.reduce_sum(x * x, axis=-1, keepdims=True)
    return x * ad.pow_const(sq, -0.5)


def align_loss(z_a: Tensor, z_b: Tensor, cfg: AlignConfig) -> Tensor:
    """Symmetric InfoNCE over a batch of paired embeddings.

    Row i of each side is a positive pair; all other rows are negatives.
    Cosine similarities are scaled by 1/temperature. Averaged over both
    matching directions; zero when the batch has a single pair.
    """
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise DimensionError(f"paired batches must match: {z_a.shape} vs {z_b.shape}")
    n = z_a.shape[0]
    if n == 0:
        raise DegenerateInputError("empty alignment batch")
    za = _unit_rows(z_a)
    zb = _unit_rows(z_b)
    sims = ad.matmul(za, ad.transpose(zb)) * (1.0 / cfg.temperature)  # (N, N)
    labels = np.arange(n)
    forward = ad.cross_entropy(sims, labels)
    backward_ce = ad.cross_entropy(ad.transpose(sims), labels)
    return (forward + backward_ce) * 0.5
