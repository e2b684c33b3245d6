"""Model-wide configuration, parameter initialization, and the joint forward
pass used by training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from . import fusion as fus
from . import heads
from .autodiff import Tensor
from .errors import ConfigError

DEFAULT_MACRO_SLOTS = (
    "gdp_growth", "cpi_inflation", "m2_growth", "ppi_inflation",
    "credit_spread", "interbank_rate", "vix_proxy", "fx_volatility",
)

DEFAULT_MACRO_GROUPS = {
    "growth": (0, 2),
    "inflation": (1, 3),
    "credit": (4, 5),
    "market_stress": (6, 7),
}


@dataclass
class ModelConfig:
    """Dimensions and knobs shared by every module."""

    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 0  # 0 means 4 * d_model
    vocab_size: int = 512
    price_features: int = 12
    macro_slots: tuple = DEFAULT_MACRO_SLOTS
    macro_groups: dict = field(default_factory=lambda: dict(DEFAULT_MACRO_GROUPS))
    macro_group_dim: int = 16
    macro_hidden: int = 64
    graph_features: int = 6
    graph_layers: int = 2
    mdn_components: int = 3
    micro_layers: int = 1
    flat_band: float = 5e-4
    risk_gat_layers: int = 2
    warning_threshold: float = 0.5
    n_actions: int = 3

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        self.macro_slots = tuple(self.macro_slots)
        self.macro_groups = {k: tuple(v) for k, v in self.macro_groups.items()}
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for the position table")
        if not 0 < self.vocab_size <= 512:
            raise ConfigError("vocab_size must be in (0, 512]")
        if set(self.macro_groups) != set(enc.MACRO_GROUPS):
            raise ConfigError(f"macro_groups must name exactly {enc.MACRO_GROUPS}")
        covered = sorted(i for idx in self.macro_groups.values() for i in idx)
        if covered != list(range(len(self.macro_slots))):
            raise ConfigError("macro groups must partition the macro slots")
        if self.mdn_components < 1:
            raise ConfigError("mdn_components must be >= 1")
        if not 0 < self.warning_threshold < 1:
            raise ConfigError("warning_threshold must be in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macro_slots"] = list(self.macro_slots)
        d["macro_groups"] = {k: list(v) for k, v in self.macro_groups.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """All learnable leaves in one flat dict, keyed by dotted names.

    Prefixes (price., text., macro., graph., fusion., micro., risk., policy.)
    let training stages select parameter subsets.
    """
    params: dict = {}
    params.update(enc.init_price_params(cfg, rng))
    params.update(enc.init_text_params(cfg, rng))
    params.update(enc.init_macro_params(cfg, rng))
    params.update(enc.init_graph_params(cfg, rng))
    params.update(fus.init_fusion_params(cfg, rng))
    params.update(heads.init_micro_params(cfg, rng))
    params.update(heads.init_risk_params(cfg, rng))
    params["policy.w"] = enc.xavier(rng, cfg.d_model, cfg.n_actions)
    params["policy.b"] = Tensor(np.zeros(cfg.n_actions), requires_grad=True)
    return params


def param_subset(params: dict, prefixes) -> dict:
    """Filter the flat parameter dict by dotted-name prefix."""
    chosen = {}
    for name, tensor in params.items():
        if any(name.startswith(p) for p in prefixes):
            chosen[name] = tensor
    return chosen


def n_parameters(params: dict) -> int:
    return sum(t.size for t in params.values())


def forward_batch(batch: dict, params: dict, cfg: ModelConfig,
                  record: dict | None = None) -> dict:
    """Run encoders, fusion, and both task heads on one fully aligned batch.

    ``batch`` carries numpy arrays: price (B, T, F), tokens (B, L) with
    tok_len (B,), macro (B, M), graph node features (B, N, Fg) and adjacency
    (B, N, N). Returns tensors keyed by stage for the loss functions.
    """
    b = batch["price"].shape[0]
    emb_price = enc.encode_price_batch(batch["price"], params, cfg)
    emb_text = enc.encode_text_batch(batch["tokens"], batch["tok_len"], params, cfg)
    emb_macro = enc.encode_macro_batch(batch["macro"], params, cfg)
    _, emb_graph = enc.encode_graph_batch(
        batch["graph_feats"], batch["graph_adj"], params, cfg)
    presence = np.ones((b, 4), dtype=bool)
    z, fuse_weights = fus.fuse_batch(
        {"price": emb_price, "text": emb_text, "macro": emb_macro, "graph": emb_graph},
        presence, params, cfg, record=record)
    weights, means, sigmas = heads.micro_head_batch(
        ad.reshape(z, (b, 1, cfg.d_model)), params, cfg)
    risk_score, contributions = heads.macro_risk_batch(
        z, batch["graph_feats"], batch["graph_adj"], params, cfg)
    return {
        "z": z,
        "emb_price": emb_price,
        "emb_text": emb_text,
        "emb_macro": emb_macro,
        "emb_graph": emb_graph,
        "fuse_weights": fuse_weights,
        "mdn_weights": weights,
        "mdn_means": means,
        "mdn_sigmas": sigmas,
        "risk_score": risk_score,
        "contributions": contributions,
    }
