"""Task heads over the fused representation: mixture-density return
forecasting, graph-conditioned systemic-risk scoring, and templated
plain-text bulletins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from . import encoders as enc
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, DimensionError

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# domain types

@dataclass
class MicroForecast:
    """Distributional return forecast k steps ahead."""

    horizon: int
    point: float
    direction_probs: np.ndarray  # (3,) down, flat, up
    weights: np.ndarray          # (K,)
    means: np.ndarray            # (K,)
    sigmas: np.ndarray           # (K,)

    def __post_init__(self):
        self.direction_probs = np.asarray(self.direction_probs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        if abs(self.direction_probs.sum() - 1.0) > 1e-6:
            raise ContractError("direction probabilities must sum to 1")
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ContractError("mixture weights must sum to 1")
        if np.any(self.sigmas <= 0):
            raise ContractError("mixture stdevs must be positive")


@dataclass
class SystemicRiskOutput:
    """Market-wide risk score plus per-node contributions."""

    score: float
    warning: bool
    contributions: np.ndarray

    def __post_init__(self):
        self.contributions = np.asarray(self.contributions, dtype=np.float64)
        if not 0.0 <= self.score <= 1.0:
            raise ContractError("risk score must lie in [0, 1]")


@dataclass
class PolicyBulletin:
    """Deterministic templated report; ``text`` is the rendered artifact."""

    text: str
    band: str
    score: float
    top_nodes: tuple
    n_up: int
    n_down: int


# ---------------------------------------------------------------------------
# parameters

def init_micro_params(cfg, rng: np.random.Generator) -> dict:
    p: dict = {}
    d, k = cfg.d_model, cfg.mdn_components
    for i in range(cfg.micro_layers):
        enc.init_transformer_layer(p, f"micro.layer{i}", d, cfg.d_ff, rng)
    for name in ("w", "mu", "sig"):
        p[f"micro.out_{name}.w"] = enc.xavier(rng, d, k)
        p[f"micro.out_{name}.b"] = Tensor(np.zeros(k), requires_grad=True)
    # feeds a predicted return back in as a pseudo-representation for rolling
    p["micro.feedback.w"] = enc.xavier(rng, 1, d)
    p["micro.feedback.b"] = Tensor(np.zeros(d), requires_grad=True)
    return p


def init_risk_params(cfg, rng: np.random.Generator) -> dict:
    p: dict = {}
    d = cfg.d_model
    p["risk.in.w"] = enc.xavier(rng, cfg.graph_features, d)
    p["risk.in.b"] = Tensor(np.zeros(d), requires_grad=True)
    for i in range(cfg.risk_gat_layers):
        p[f"risk.gat{i}.w"] = enc.xavier(rng, d, d)
        p[f"risk.gat{i}.a_src"] = enc.xavier(rng, d, 1, shape=(d,))
        p[f"risk.gat{i}.a_dst"] = enc.xavier(rng, d, 1, shape=(d,))
    p["risk.node.w"] = enc.xavier(rng, d, 1, shape=(d,))
    p["risk.node.b"] = Tensor(np.zeros(1), requires_grad=True)
    p["risk.cal.slope_raw"] = Tensor(np.zeros(1), requires_grad=True)
    p["risk.cal.bias"] = Tensor(np.zeros(1), requires_grad=True)
    return p


# ---------------------------------------------------------------------------
# micro forecasting head

def _causal_keep(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def micro_head_batch(z_seq: Tensor, params: dict, cfg) -> tuple[Tensor, Tensor, Tensor]:
    """(B, T, d) fused history -> mixture (weights, means, sigmas), each (B, K).

    A causally masked decoder layer runs over the history; the last position
    parameterizes the mixture for the next step.
    """
    if z_seq.ndim != 3:
        raise DimensionError(f"expected (B, T, d) history, got {z_seq.shape}")
    b, t, d = z_seq.shape
    if t < 1:
        raise DegenerateInputError("empty fused history")
    x = z_seq
    keep = _causal_keep(t)[None, None]  # (1, 1, T, T)
    for i in range(cfg.micro_layers):
        x = _causal_transformer_layer(x, params, f"micro.layer{i}", cfg.n_heads, keep)
    last = ad.reshape(ad.slice_axis(x, 1, t - 1, t), (b, d))
    logit_w = ad.matmul(last, params["micro.out_w.w"]) + params["micro.out_w.b"]
    weights = ad.softmax(logit_w, axis=-1)
    means = ad.matmul(last, params["micro.out_mu.w"]) + params["micro.out_mu.b"]
    raw = ad.matmul(last, params["micro.out_sig.w"]) + params["micro.out_sig.b"]
    sigmas = ad.exp(raw)  # positivity by construction
    return weights, means, sigmas


def _causal_transformer_layer(x: Tensor, params: dict, prefix: str, n_heads: int,
                              keep: np.ndarray) -> Tensor:
    """Pre-norm transformer layer with an explicit (query, key) keep mask."""
    b, t, d = x.shape
    dh = d // n_heads
    normed = ad.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])

    def proj(name):
        w, bias = params[f"{prefix}.w{name}"], params[f"{prefix}.b{name}"]
        out = ad.matmul(normed, w) + bias
        return ad.transpose(ad.reshape(out, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    scores = ad.masked_fill_logits(scores, np.broadcast_to(keep, scores.shape))
    attn = ad.softmax(scores, axis=-1)
    out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    x = x + ad.matmul(out, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]
    normed = ad.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = ad.relu(ad.matmul(normed, params[f"{prefix}.ff.w1"]) + params[f"{prefix}.ff.b1"])
    return x + ad.matmul(h, params[f"{prefix}.ff.w2"]) + params[f"{prefix}.ff.b2"]


def mixture_direction_probs(weights: np.ndarray, means: np.ndarray,
                            sigmas: np.ndarray, flat_band: float) -> np.ndarray:
    """(down, flat, up) from the mixture CDF at the +-flat_band boundaries."""
    lo = mixture_cdf_value(-flat_band, weights, means, sigmas)
    hi = mixture_cdf_value(flat_band, weights, means, sigmas)
    return np.array([lo, hi - lo, 1.0 - hi])


def mixture_cdf_value(x, weights, means, sigmas) -> float:
    return float(np.sum(np.asarray(weights) * ndtr((x - np.asarray(means)) / np.asarray(sigmas))))


def micro_forecast(z_history, k: int, params: dict, cfg) -> MicroForecast:
    """Roll the decoder forward k steps, feeding each point forecast back in.

    ``z_history`` is a sequence of FusedRepresentation (or a (T, d) tensor).
    Steps 1..k-1 append a learned embedding of the predicted return to the
    history; the final step's mixture is returned.
    """
    if k < 1:
        raise ContractError("horizon k must be >= 1")
    if isinstance(z_history, Tensor):
        hist = z_history
    else:
        reps = list(z_history)
        if not reps:
            raise DegenerateInputError("empty fused history")
        hist = ad.stack([r.z for r in reps], axis=0)
    if hist.ndim != 2:
        raise DimensionError(f"history must be (T, d), got {hist.shape}")
    seq = ad.reshape(hist, (1,) + hist.shape)
    for _ in range(k):
        weights, means, sigmas = micro_head_batch(seq, params, cfg)
        point = ad.reduce_sum(weights * means, axis=-1)  # (1,)
        nxt = ad.matmul(ad.reshape(point, (1, 1)), params["micro.feedback.w"])
        nxt = ad.reshape(nxt + params["micro.feedback.b"], (1, 1, cfg.d_model))
        seq = ad.concat([seq, nxt], axis=1)
    w, m, s = weights.data[0], means.data[0], sigmas.data[0]
    return MicroForecast(
        horizon=k,
        point=float(np.sum(w * m)),
        direction_probs=mixture_direction_probs(w, m, s, cfg.flat_band),
        weights=w.copy(), means=m.copy(), sigmas=s.copy(),
    )


# ---------------------------------------------------------------------------
# mixture-density negative log likelihood

def mdn_nll(f: MicroForecast, y: float) -> float:
    """-log sum_k w_k Normal(y; mu_k, sigma_k)."""
    return mdn_nll_values(f.weights, f.means, f.sigmas, y)


def mdn_nll_values(weights, means, sigmas, y) -> float:
    w = np.asarray(weights, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    if np.any(s <= 0):
        raise ContractError("mixture stdevs must be positive")
    z = (float(y) - m) / s
    log_comp = np.log(w) - np.log(s) - 0.5 * z * z - 0.5 * _LOG_2PI
    top = log_comp.max()
    return float(-(top + np.log(np.exp(log_comp - top).sum())))


def mdn_nll_batch(weights: Tensor, means: Tensor, sigmas: Tensor, y: np.ndarray) -> Tensor:
    """Differentiable mean NLL over a batch: all mixture tensors (B, K)."""
    if np.any(sigmas.data <= 0):
        raise ContractError("mixture stdevs must be positive")
    yv = Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    z = (yv - means) * ad.pow_const(sigmas, -1.0)
    log_comp = ad.log(weights) - ad.log(sigmas) - z * z * 0.5 - 0.5 * _LOG_2PI
    return ad.reduce_mean(ad.logsumexp(log_comp, axis=-1)) * -1.0


# ---------------------------------------------------------------------------
# mixture quantiles (bisection forward, implicit-function backward)

def _mixture_cdf_arrays(q, w, m, s):
    # q (B, 1) against components (B, K)
    return np.sum(w * ndtr((q - m) / s), axis=-1)


def mixture_quantile(weights: Tensor, means: Tensor, sigmas: Tensor,
                     tau: float, tol: float = 1e-8) -> Tensor:
    """Per-row tau-quantile of a Gaussian mixture, differentiable in all
    mixture parameters.

    Forward solves F(q) = tau by bisection to ``tol``; backward applies the
    implicit-function theorem, dq/dtheta = -(dF/dtheta) / pdf(q).
    """
    if not 0.0 < tau < 1.0:
        raise ContractError("tau must lie strictly inside (0, 1)")
    w, m, s = weights.data, means.data, sigmas.data
    if np.any(s <= 0):
        raise ContractError("mixture stdevs must be positive")
    lo = np.min(m - 12.0 * s, axis=-1)
    hi = np.max(m + 12.0 * s, axis=-1)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = _mixture_cdf_arrays(mid[:, None], w, m, s) < tau
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo < tol):
            break
    q = 0.5 * (lo + hi)

    def bwd(g):
        qc = q[:, None]
        u = (qc - m) / s
        phi = np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
        pdf = np.sum(w * phi / s, axis=-1, keepdims=True)  # (B, 1) > 0
        gq = g[:, None]
        gw = gq * -ndtr(u) / pdf
        gm = gq * (w * phi / s) / pdf
        gs = gq * (w * phi * u / s) / pdf
        return gw, gm, gs

    return ad.custom_op(q, (weights, means, sigmas), bwd)


# ---------------------------------------------------------------------------
# systemic risk head

def macro_risk_batch(z: Tensor, node_features: np.ndarray, adjacency: np.ndarray,
                     params: dict, cfg) -> tuple[Tensor, Tensor]:
    """Score systemic stress from the fused state and the institution graph.

    Returns (score (B,), contributions (B, N)). Node features conditioned on
    z pass through graph-attention layers; per-node sigmoids are averaged and
    recalibrated with a positive slope so the score is monotone in every
    contribution.
    """
    feats = np.asarray(node_features, dtype=np.float64)
    adj = np.asarray(adjacency, dtype=np.float64)
    if feats.ndim != 3:
        raise DimensionError(f"expected (B, N, F) node features, got {feats.shape}")
    b, n, f = feats.shape
    if n < 1:
        raise ContractError("empty graph")
    if adj.shape != (b, n, n):
        raise DimensionError("adjacency does not match node features")
    if z.shape != (b, cfg.d_model):
        raise DimensionError(f"fused state must be (B, d_model), got {z.shape}")
    h = ad.matmul(Tensor(feats), params["risk.in.w"]) + params["risk.in.b"]
    h = h + ad.reshape(z, (b, 1, cfg.d_model))
    keep = (adj > 0) | np.eye(n, dtype=bool)[None]
    for i in range(cfg.risk_gat_layers):
        hw = ad.matmul(h, params[f"risk.gat{i}.w"])
        src = ad.matmul(hw, params[f"risk.gat{i}.a_src"])
        dst = ad.matmul(hw, params[f"risk.gat{i}.a_dst"])
        scores = ad.leaky_relu(
            ad.reshape(src, (b, n, 1)) + ad.reshape(dst, (b, 1, n)), alpha=0.2)
        scores = ad.masked_fill_logits(scores, keep)
        alpha = ad.softmax(scores, axis=-1)
        h = ad.elu(ad.matmul(alpha, hw))
    node_logits = ad.matmul(h, params["risk.node.w"]) + params["risk.node.b"]
    contributions = ad.sigmoid(node_logits)  # (B, N)
    pooled = ad.reduce_mean(contributions, axis=-1)  # (B,)
    slope = ad.exp(params["risk.cal.slope_raw"])  # > 0 keeps monotonicity
    score = ad.sigmoid(pooled * slope + params["risk.cal.bias"])
    return score, contributions


def macro_risk(z, g: enc.FinancialGraph, params: dict, cfg) -> SystemicRiskOutput:
    zt = z.z if hasattr(z, "z") else z
    zb = ad.reshape(zt, (1, cfg.d_model))
    score, contributions = macro_risk_batch(
        zb, g.node_features[None], g.adjacency[None], params, cfg)
    s = float(score.data[0])
    return SystemicRiskOutput(
        score=s,
        warning=bool(s >= cfg.warning_threshold),
        contributions=contributions.data[0].copy(),
    )


# ---------------------------------------------------------------------------
# bulletin generation

RISK_BANDS = ("LOW", "ELEVATED", "HIGH")


def risk_band(score: float) -> str:
    if score < 1.0 / 3.0:
        return RISK_BANDS[0]
    if score < 2.0 / 3.0:
        return RISK_BANDS[1]
    return RISK_BANDS[2]


def generate_bulletin(risk: SystemicRiskOutput, forecasts, node_names) -> PolicyBulletin:
    """Render the fixed-template early-warning bulletin.

    Every number in the text is formatted from the model outputs with no
    rounding beyond the printed precision, so claims can be checked against
    the sources exactly.
    """
    names = list(node_names)
    if not names:
        raise ContractError("node name list is empty")
    if len(names) != risk.contributions.size:
        raise DimensionError("node names do not match contribution vector")
    band = risk_band(risk.score)
    order = sorted(range(len(names)),
                   key=lambda i: (-risk.contributions[i], names[i]))
    top = tuple((names[i], float(risk.contributions[i])) for i in order[:3])
    dirs = [int(np.argmax(f.direction_probs)) for f in forecasts]
    n_up = sum(1 for d in dirs if d == 2)
    n_down = sum(1 for d in dirs if d == 0)
    lines = [
        f"SYSTEMIC RISK BULLETIN - {band}",
        f"risk score: {risk.score:.6f} (warning={'yes' if risk.warning else 'no'})",
        "top contributing institutions:",
    ]
    for rank, (name, c) in enumerate(top, start=1):
        lines.append(f"  {rank}. {name}: {c:.6f}")
    lines.append(f"micro outlook: {n_up} up / {n_down} down of {len(dirs)} assets")
    if forecasts:
        mean_point = float(np.mean([f.point for f in forecasts]))
        lines.append(f"mean expected return: {mean_point:.6f}")
    return PolicyBulletin(
        text="\n".join(lines) + "\n",
        band=band,
        score=risk.score,
        top_nodes=top,
        n_up=n_up,
        n_down=n_down,
    )
