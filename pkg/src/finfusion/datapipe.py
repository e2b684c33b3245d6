"""Synthetic multimodal market data with a planted cross-modal signal, plus
the preprocessing pipeline: multi-frequency alignment, rolling Kalman
imputation, technical indicators, leak-free normalization, and tail-risk
label oracles.

The synthetic world: a two-regime (calm/stress) Markov chain drives a market
factor, per-asset returns, macro indicator levels, and stress propagation on
a random interbank graph. Event tokens reveal the next step's return
direction with configurable probability; at strength zero they carry no
information, which is the ablation the evaluation leans on.

Trading calendar: 21 days per month, 63 per quarter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    InsufficientTailDataError,
    SchemaError,
)

MONTH_DAYS = 21
QUARTER_DAYS = 63
FREQ_SPACING = {"daily": 1, "monthly": MONTH_DAYS, "quarterly": QUARTER_DAYS}

SCHEMA_VERSION = 1

INDICATOR_NAMES = ("sma10", "sma20", "rsi14", "macd", "macd_signal",
                   "ret_std20", "turnover")
INDICATOR_WARMUP = 33  # last indicator to stabilize: 9-EMA over the 26-EMA diff

MACRO_SLOTS = (
    "gdp_growth", "cpi_inflation", "m2_growth", "ppi_inflation",
    "credit_spread", "interbank_rate", "vix_proxy", "fx_volatility",
)

# per slot: (frequency, base level, stress coefficient, AR(1) innovation sd)
_MACRO_SPEC = {
    "gdp_growth": ("quarterly", 0.025, -0.060, 0.004),
    "cpi_inflation": ("monthly", 0.020, 0.010, 0.003),
    "m2_growth": ("monthly", 0.060, 0.020, 0.005),
    "ppi_inflation": ("monthly", 0.015, 0.015, 0.004),
    "credit_spread": ("monthly", 0.010, 0.040, 0.002),
    "interbank_rate": ("monthly", 0.020, 0.030, 0.002),
    "vix_proxy": ("monthly", 0.150, 0.450, 0.020),
    "fx_volatility": ("monthly", 0.080, 0.120, 0.010),
}

GRAPH_FEATURE_NAMES = ("stress", "equity_return", "in_strength",
                       "out_strength", "in_degree", "out_degree")

# regime-dependent return process
_MU = (0.0004, -0.0020)       # market drift calm/stress
_SIGMA_MKT = (0.008, 0.025)   # market vol
_SIGMA_IDIO = (0.010, 0.020)  # per-asset idiosyncratic vol

NODE_DISTRESS_THRESHOLD = 0.6
FLAT_BAND = 5e-4  # |return| below this counts as flat for direction labels


def build_vocab(n_assets: int = 16) -> list[str]:
    """Fixed event vocabulary; token ids are positions in this list."""
    vocab = ["<pad>"]
    vocab += ["EARN_BEAT", "GUIDE_UP", "UPGRADE"]          # bullish class
    vocab += ["EARN_MISS", "GUIDE_DOWN", "DOWNGRADE"]      # bearish class
    vocab += ["POLICY_HOLD", "SECTOR_NOTE", "MKT_SUMMARY", "FLOW_REPORT"]
    vocab += [f"ASSET_{i}" for i in range(max(16, n_assets))]
    vocab += [f"MAG_{i}" for i in range(5)]
    vocab += [f"NOISE_{i}" for i in range(100)]
    return vocab


BULL_IDS = (1, 2, 3)
BEAR_IDS = (4, 5, 6)
_ASSET_ID0 = 11
_MAG_ID0 = 11 + 16
_NOISE_ID0 = _MAG_ID0 + 5
_MAG_EDGES = (0.002, 0.005, 0.010, 0.020)  # |return| bucket boundaries


@dataclass
class RawSeries:
    """A named time series on the integer day grid, possibly with gaps
    (missing timestamps)."""

    name: str
    frequency: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.frequency not in FREQ_SPACING:
            raise ContractError(f"unknown frequency {self.frequency!r}")
        if self.timestamps.shape != self.values.shape or self.timestamps.ndim != 1:
            raise ContractError("timestamps and values must be equal-length 1-d")
        if self.timestamps.size == 0:
            raise ContractError(f"series {self.name!r} is empty")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ContractError(f"series {self.name!r} timestamps not strictly increasing")
        base = FREQ_SPACING[self.frequency]
        if np.any(np.diff(self.timestamps) % base != 0):
            raise ContractError(
                f"series {self.name!r} spacing inconsistent with {self.frequency}")


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic world. Everything is derived from the seed."""

    n_assets: int = 4
    n_steps: int = 1500
    crisis_rate: float = 0.15
    stress_persistence: float = 0.94
    signal_strength: float = 0.8
    n_institutions: int = 8
    edge_density: float = 0.3
    macro_gap_rate: float = 0.05
    window: int = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("crisis_rate", "stress_persistence", "signal_strength",
                     "edge_density", "macro_gap_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        for name in ("n_assets", "n_steps", "n_institutions", "window"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not 0.0 < self.crisis_rate < 1.0:
            raise ContractError("crisis_rate must be strictly inside (0, 1)")
        if self.n_assets > 16:
            raise ContractError("at most 16 assets (fixed vocabulary)")

    def to_dict(self) -> dict:
        return asdict(self)


def _regime_chain(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Two-state Markov chain started at stationarity.

    Stationary stress probability equals crisis_rate: with exit probability
    p10 = 1 - persistence, the entry probability is solved from the
    stationarity condition pi = p01 / (p01 + p10).
    """
    pi = cfg.crisis_rate
    p10 = 1.0 - cfg.stress_persistence
    p01 = pi * p10 / (1.0 - pi)
    if p01 > 1.0:
        raise ContractError("crisis_rate incompatible with stress_persistence")
    g = np.zeros(cfg.n_steps, dtype=np.int64)
    g[0] = int(rng.uniform() < pi)
    u = rng.uniform(size=cfg.n_steps - 1)
    for t in range(1, cfg.n_steps):
        if g[t - 1] == 0:
            g[t] = int(u[t - 1] < p01)
        else:
            g[t] = int(u[t - 1] >= p10)
    return g


def generate_synthetic(cfg: SyntheticConfig) -> tuple[dict, dict]:
    """Draw the whole synthetic world from the config seed.

    Returns (series, raw): ``series`` maps macro slot names to RawSeries
    (with gaps); ``raw`` holds the dense arrays — regime, per-asset OHLCV and
    tokens, graph structure and stress paths — consumed by build_dataset.
    """
    root = np.random.SeedSequence(cfg.seed)
    keys = ("regime", "market", "assets", "tokens", "macro", "graph")
    streams = dict(zip(keys, (np.random.default_rng(s) for s in root.spawn(len(keys)))))

    t_all = cfg.n_steps
    regime = _regime_chain(cfg, streams["regime"])

    # market factor and per-asset returns
    rng_m = streams["market"]
    mu = np.take(_MU, regime)
    sig_m = np.take(_SIGMA_MKT, regime)
    market_ret = mu + sig_m * rng_m.standard_normal(t_all)
    market_ret[0] = 0.0

    rng_a = streams["assets"]
    a = cfg.n_assets
    beta = rng_a.uniform(0.7, 1.3, size=a)
    sig_i = np.take(_SIGMA_IDIO, regime)
    idio = sig_i[None, :] * rng_a.standard_normal((a, t_all))
    returns = beta[:, None] * market_ret[None, :] + idio
    returns[:, 0] = 0.0

    close0 = 100.0 * np.exp(rng_a.uniform(-0.1, 0.1, size=a))
    log_close = np.log(close0)[:, None] + np.cumsum(returns, axis=1)
    close = np.exp(log_close)
    gap = 0.2 * sig_m[None, :] * rng_a.standard_normal((a, t_all))
    open_ = np.empty_like(close)
    open_[:, 0] = close[:, 0]
    open_[:, 1:] = close[:, :-1] * np.exp(gap[:, 1:])
    hi_span = np.abs(rng_a.standard_normal((a, t_all))) * 0.3 * sig_m[None, :]
    lo_span = np.abs(rng_a.standard_normal((a, t_all))) * 0.3 * sig_m[None, :]
    high = np.maximum(open_, close) * np.exp(hi_span)
    low = np.minimum(open_, close) * np.exp(-lo_span)
    base_vol = np.exp(rng_a.normal(12.0, 0.3, size=a))
    volume = base_vol[:, None] * np.exp(
        0.5 * regime[None, :] + 0.3 * rng_a.standard_normal((a, t_all)))
    ohlcv = np.stack([open_, high, low, close, volume], axis=-1)  # (A, T, 5)

    # event tokens revealing next-step direction with probability = strength
    rng_t = streams["tokens"]
    seq_len = 5
    tokens = np.zeros((a, t_all, seq_len), dtype=np.int64)
    tok_len = np.full((a, t_all), seq_len, dtype=np.int64)
    reveal = rng_t.uniform(size=(a, t_all)) < cfg.signal_strength
    coin = rng_t.integers(0, 2, size=(a, t_all))
    event_pick = rng_t.integers(0, 3, size=(a, t_all))
    noise_pick = rng_t.integers(0, 100, size=(a, t_all, 2))
    next_up = np.zeros((a, t_all), dtype=bool)
    next_up[:, :-1] = returns[:, 1:] > 0
    direction = np.where(reveal, next_up, coin.astype(bool))
    event_ids = np.where(direction,
                         np.take(BULL_IDS, event_pick),
                         np.take(BEAR_IDS, event_pick))
    mag_bucket = np.digitize(np.abs(returns), _MAG_EDGES)
    tokens[:, :, 0] = _ASSET_ID0 + np.arange(a)[:, None]
    tokens[:, :, 1] = event_ids
    tokens[:, :, 2] = _MAG_ID0 + mag_bucket
    tokens[:, :, 3] = _NOISE_ID0 + noise_pick[:, :, 0]
    tokens[:, :, 4] = _NOISE_ID0 + noise_pick[:, :, 1]

    # macro series at monthly/quarterly frequency, gap-poked
    rng_mac = streams["macro"]
    series: dict = {}
    n_months = t_all // MONTH_DAYS
    n_quarters = t_all // QUARTER_DAYS
    for slot in MACRO_SLOTS:
        freq, base, coeff, inn_sd = _MACRO_SPEC[slot]
        span = MONTH_DAYS if freq == "monthly" else QUARTER_DAYS
        n_obs = n_months if freq == "monthly" else n_quarters
        if n_obs < 1:
            raise ContractError("n_steps too short for macro observations")
        stamps = span * (np.arange(n_obs) + 1) - 1
        frac = np.array([regime[k * span:(k + 1) * span].mean() for k in range(n_obs)])
        ar = np.zeros(n_obs)
        innov = rng_mac.normal(scale=inn_sd, size=n_obs)
        for k in range(1, n_obs):
            ar[k] = 0.7 * ar[k - 1] + innov[k]
        vals = base + coeff * frac + ar
        keep = np.ones(n_obs, dtype=bool)
        if freq == "monthly" and cfg.macro_gap_rate > 0:
            keep = rng_mac.uniform(size=n_obs) >= cfg.macro_gap_rate
            keep[0] = True  # anchor so imputation never extrapolates backward
        series[slot] = RawSeries(slot, freq, stamps[keep], vals[keep])

    # interbank graph with stress propagation
    rng_g = streams["graph"]
    n = cfg.n_institutions
    adj = (rng_g.uniform(size=(n, n)) < cfg.edge_density).astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    adj *= np.exp(rng_g.normal(0.0, 0.5, size=(n, n)))
    row = adj.sum(axis=1, keepdims=True)
    norm_adj = np.divide(adj, row, out=np.zeros_like(adj), where=row > 0)
    stress = np.zeros((t_all, n))
    stress[0] = cfg.crisis_rate
    shocks = rng_g.uniform(size=(t_all, n))
    for t in range(1, t_all):
        propagated = 0.55 * (norm_adj @ stress[t - 1])
        stress[t] = np.clip(propagated + 0.35 * regime[t] + 0.10 * shocks[t], 0.0, 1.0)
    node_ret = -0.04 * (stress - 0.2) + 0.01 * rng_g.standard_normal((t_all, n))

    raw = {
        "regime": regime,
        "market_return": market_ret,
        "returns": returns,
        "ohlcv": ohlcv,
        "tokens": tokens,
        "tok_len": tok_len,
        "adjacency": adj,
        "stress": stress,
        "node_returns": node_ret,
    }
    return series, raw


# ---------------------------------------------------------------------------
# temporal alignment

def align_temporal(series: dict, n_steps: int) -> tuple[np.ndarray, np.ndarray, list]:
    """Forward-fill a set of RawSeries onto the daily grid.

    Returns (values (n_steps, S), present (n_steps, S), names). A day carries
    the latest observation at or before it; days before a series' first
    observation are flagged missing, never backfilled.
    """
    names = list(series)
    if not names:
        raise ContractError("empty series set")
    out = np.full((n_steps, len(names)), np.nan)
    present = np.zeros((n_steps, len(names)), dtype=bool)
    for j, name in enumerate(names):
        s = series[name]
        idx = np.searchsorted(s.timestamps, np.arange(n_steps), side="right") - 1
        valid = idx >= 0
        out[valid, j] = s.values[idx[valid]]
        present[:, j] = valid
    return out, present, names


# ---------------------------------------------------------------------------
# Kalman imputation

def kalman_impute(series, window: int = 60):
    """Fill gaps with a rolling local-level (plus drift) Kalman filter.

    Accepts either a RawSeries with missing timestamps (returns a gap-free
    RawSeries on its regular grid) or a 1-d array with NaN gaps (returns a
    filled array). Drift and the process/observation variances are
    re-estimated at every step by method-of-moments on first differences of
    observed adjacent pairs inside the trailing window. Gaps take the
    one-step prediction; observed values are never modified. Only data at or
    before each step is consulted.
    """
    if isinstance(series, RawSeries):
        span = FREQ_SPACING[series.frequency]
        t0, t1 = series.timestamps[0], series.timestamps[-1]
        grid = np.arange(t0, t1 + 1, span)
        vals = np.full(grid.size, np.nan)
        pos = (series.timestamps - t0) // span
        vals[pos] = series.values
        return RawSeries(series.name, series.frequency, grid,
                         _kalman_fill(vals, window))
    return _kalman_fill(np.asarray(series, dtype=np.float64), window)


def _kalman_fill(values: np.ndarray, window: int) -> np.ndarray:
    y = values.copy()
    n = y.size
    obs = ~np.isnan(y)
    if obs.sum() < 2:
        raise ContractError("need at least 2 observed points")
    if not obs[0]:
        raise DegenerateInputError("leading gap: no observation to filter from")
    out = y.copy()
    level = y[0]
    var = 0.0
    for t in range(1, n):
        lo = max(0, t - window)
        d, q, r = _window_moments(out[lo:t], obs[lo:t])
        pred = level + d
        pred_var = var + q
        if obs[t]:
            gain = pred_var / (pred_var + r) if pred_var + r > 0 else 1.0
            level = pred + gain * (y[t] - pred)
            var = (1.0 - gain) * pred_var
        else:
            level = pred
            var = pred_var
            out[t] = level
    return out


def _window_moments(seg: np.ndarray, seg_obs: np.ndarray) -> tuple[float, float, float]:
    """Drift and variance components from adjacent observed pairs."""
    pair = seg_obs[:-1] & seg_obs[1:] if seg.size > 1 else np.zeros(0, dtype=bool)
    diffs = (seg[1:] - seg[:-1])[pair] if seg.size > 1 else np.zeros(0)
    if diffs.size == 0:
        return 0.0, 1e-12, 1e-12
    d = float(diffs.mean())
    v = float(diffs.var())
    if diffs.size >= 3:
        centered = diffs - d
        cov1 = float(np.mean(centered[:-1] * centered[1:]))
    else:
        cov1 = 0.0
    floor = max(1e-12, 1e-6 * v)
    r = max(-cov1, floor)
    q = max(v - 2.0 * r, floor)
    return d, q, r


# ---------------------------------------------------------------------------
# technical indicators

def _ema(x: np.ndarray, span: int) -> np.ndarray:
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


def _rolling_mean(x: np.ndarray, w: int) -> np.ndarray:
    out = np.full(x.size, np.nan)
    if x.size >= w:
        c = np.cumsum(np.insert(x, 0, 0.0))
        out[w - 1:] = (c[w:] - c[:-w]) / w
    return out


def compute_indicators(ohlcv) -> tuple[np.ndarray, np.ndarray]:
    """Derive the indicator matrix from OHLCV rows.

    Accepts a (T, 5) array or anything with an ``ohlcv`` attribute. Returns
    (indicators (T, 7), valid (T,)): sma10, sma20, rsi14 (Wilder), macd,
    macd signal, rolling 20-step return stdev, turnover vs 20-day volume.
    Warmup rows hold NaN and are flagged invalid rather than failing.
    """
    arr = np.asarray(getattr(ohlcv, "ohlcv", ohlcv), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ContractError(f"expected (T, 5) OHLCV, got {arr.shape}")
    t = arr.shape[0]
    close = arr[:, 3]
    vol = arr[:, 4]
    ind = np.full((t, len(INDICATOR_NAMES)), np.nan)

    ind[:, 0] = _rolling_mean(close, 10)
    ind[:, 1] = _rolling_mean(close, 20)

    # Wilder RSI-14: SMA seed, then exponential (a=1/14) smoothing
    period = 14
    if t > period:
        delta = np.diff(close)
        gains = np.maximum(delta, 0.0)
        losses = np.maximum(-delta, 0.0)
        avg_g = gains[:period].mean()
        avg_l = losses[:period].mean()
        ind[period, 2] = _rsi_from_avgs(avg_g, avg_l)
        for i in range(period, delta.size):
            avg_g = (avg_g * (period - 1) + gains[i]) / period
            avg_l = (avg_l * (period - 1) + losses[i]) / period
            ind[i + 1, 2] = _rsi_from_avgs(avg_g, avg_l)

    ema12 = _ema(close, 12)
    ema26 = _ema(close, 26)
    macd = ema12 - ema26
    signal = _ema(macd, 9)
    if t > 25:
        ind[25:, 3] = macd[25:]
    if t > INDICATOR_WARMUP:
        ind[INDICATOR_WARMUP:, 4] = signal[INDICATOR_WARMUP:]

    if t > 20:
        rets = np.diff(close) / close[:-1]
        for i in range(20, rets.size + 1):
            ind[i, 5] = rets[i - 20:i].std()

    volma = _rolling_mean(vol, 20)
    with np.errstate(invalid="ignore"):
        ind[:, 6] = vol / volma

    valid = ~np.isnan(ind).any(axis=1)
    return ind, valid


def _rsi_from_avgs(avg_gain: float, avg_loss: float) -> float:
    if avg_loss == 0.0 and avg_gain == 0.0:
        return 50.0
    if avg_loss == 0.0:
        return 100.0
    rs = avg_gain / avg_loss
    return 100.0 - 100.0 / (1.0 + rs)


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    """Per-column affine statistics fitted on the training range only."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "constant": self.constant.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64),
                   np.asarray(d["constant"], dtype=bool))


def normalize_fit(columns: np.ndarray, fit_rows) -> NormStats:
    """Population mean/std per column over ``fit_rows``; zero-variance
    columns are flagged constant and given unit std so they map to 0."""
    x = np.asarray(columns, dtype=np.float64)
    fit = x[fit_rows]
    if fit.size == 0:
        raise ContractError("empty fit range")
    mean = fit.mean(axis=0)
    std = fit.std(axis=0)
    constant = std == 0.0
    std = np.where(constant, 1.0, std)
    return NormStats(mean=mean, std=std, constant=constant)


def normalize(columns: np.ndarray, fit_rows) -> tuple[np.ndarray, NormStats]:
    stats = normalize_fit(columns, fit_rows)
    return stats.apply(np.asarray(columns, dtype=np.float64)), stats


# ---------------------------------------------------------------------------
# tail-risk oracles

def _quantile(x: np.ndarray, q: float) -> float:
    """Inverted-CDF sample quantile: smallest value with F(v) >= q."""
    xs = np.sort(np.asarray(x, dtype=np.float64))
    n = xs.size
    k = int(np.ceil(q * n)) - 1
    return float(xs[max(k, 0)])


def empirical_covar(system: np.ndarray, institution: np.ndarray, q: float) -> float:
    """CoVaR: q-quantile of system returns on days the institution sits at or
    below its own q-quantile."""
    sys_r = np.asarray(system, dtype=np.float64)
    inst_r = np.asarray(institution, dtype=np.float64)
    if sys_r.shape != inst_r.shape or sys_r.ndim != 1:
        raise ContractError("system and institution series must match 1-d")
    if not 0.0 < q < 1.0:
        raise ContractError("q must lie in (0, 1)")
    if sys_r.size < int(np.ceil(1.0 / q)):
        raise ContractError(f"need at least {int(np.ceil(1.0 / q))} samples for q={q}")
    var_inst = _quantile(inst_r, q)
    tail = sys_r[inst_r <= var_inst]
    if tail.size == 0:
        raise InsufficientTailDataError("no observations in the institution tail")
    return _quantile(tail, q)


def systemic_expected_shortfall(system: np.ndarray, crisis_mask: np.ndarray) -> float:
    """Mean system return over crisis-flagged steps."""
    sys_r = np.asarray(system, dtype=np.float64)
    mask = np.asarray(crisis_mask, dtype=bool)
    if sys_r.shape != mask.shape:
        raise ContractError("mask must match the return series")
    if not mask.any():
        raise ContractError("crisis mask flags no steps")
    return float(sys_r[mask].mean())


# ---------------------------------------------------------------------------
# aligned dataset

@dataclass
class AlignedDataset:
    """Everything the model consumes, on one shared daily axis.

    Arrays span the full timeline; ``usable`` marks steps where indicator
    warmup has passed, macro history exists, a full window fits, and the
    one-step-ahead label is defined. Splits index into the usable dates.
    """

    config: SyntheticConfig
    vocab: list
    ohlcv: np.ndarray           # (A, T, 5)
    indicators: np.ndarray      # (A, T, J)
    tokens: np.ndarray          # (A, T, L)
    tok_len: np.ndarray         # (A, T)
    macro: np.ndarray           # (T, M) aligned + imputed
    macro_present: np.ndarray   # (T, M) pre-imputation availability
    adjacency: np.ndarray       # (N, N)
    node_stress: np.ndarray     # (T, N)
    node_returns: np.ndarray    # (T, N)
    market_return: np.ndarray   # (T,)
    regime: np.ndarray          # (T,)
    returns: np.ndarray         # (A, T) realized log returns
    usable: np.ndarray          # (T,) bool
    splits: dict = field(default_factory=dict)
    norm: dict = field(default_factory=dict)

    @property
    def n_assets(self) -> int:
        return self.ohlcv.shape[0]

    @property
    def n_steps(self) -> int:
        return self.ohlcv.shape[1]

    @property
    def n_institutions(self) -> int:
        return self.adjacency.shape[0]

    # labels -----------------------------------------------------------
    def y_next(self, asset: int, t: int) -> float:
        return float(self.returns[asset, t + 1])

    def crisis_next(self, t: int) -> int:
        return int(self.regime[t + 1])

    def stress_next(self, t: int) -> float:
        return float(self.node_stress[t + 1].mean())

    def node_distress_next(self, t: int) -> np.ndarray:
        return self.node_stress[t + 1] > NODE_DISTRESS_THRESHOLD

    # features -----------------------------------------------------------
    def price_feature_matrix(self, asset: int) -> np.ndarray:
        """(T, 12) transformed price columns before z-scoring: log OHLC,
        log volume, log SMAs, RSI/100, MACD pair, return stdev, turnover."""
        o = self.ohlcv[asset]
        ind = self.indicators[asset]
        with np.errstate(invalid="ignore"):
            cols = np.column_stack([
                np.log(o[:, 0]), np.log(o[:, 1]), np.log(o[:, 2]), np.log(o[:, 3]),
                np.log(o[:, 4]),
                np.log(ind[:, 0]), np.log(ind[:, 1]),
                ind[:, 2] / 100.0,
                ind[:, 3], ind[:, 4], ind[:, 5], ind[:, 6],
            ])
        return cols

    def graph_feature_matrix(self) -> np.ndarray:
        """(T, N, 6) per-institution columns (see GRAPH_FEATURE_NAMES)."""
        t, n = self.node_stress.shape
        in_s = self.adjacency.sum(axis=0)
        out_s = self.adjacency.sum(axis=1)
        in_d = (self.adjacency > 0).sum(axis=0).astype(np.float64)
        out_d = (self.adjacency > 0).sum(axis=1).astype(np.float64)
        static = np.broadcast_to(
            np.stack([in_s, out_s, in_d, out_d], axis=-1), (t, n, 4))
        return np.concatenate(
            [self.node_stress[..., None], self.node_returns[..., None], static], axis=-1)

    def finalize(self, train_frac: float = 0.7, val_frac: float = 0.15) -> None:
        """Carve time-ordered splits over usable dates and fit normalization
        statistics on the training range only."""
        dates = np.flatnonzero(self.usable)
        n = dates.size
        if n < 10:
            raise ContractError(f"only {n} usable steps; increase n_steps")
        n_train = int(round(n * train_frac))
        n_val = int(round(n * val_frac))
        self.splits = {
            "train": dates[:n_train].tolist(),
            "val": dates[n_train:n_train + n_val].tolist(),
            "test": dates[n_train + n_val:].tolist(),
        }
        train_dates = np.asarray(self.splits["train"])
        # price stats pool all assets over train dates
        price_cols = np.concatenate(
            [self.price_feature_matrix(a)[train_dates] for a in range(self.n_assets)])
        price_stats = normalize_fit(price_cols, slice(None))
        macro_stats = normalize_fit(self.macro, train_dates)
        gf = self.graph_feature_matrix()[train_dates].reshape(-1, len(GRAPH_FEATURE_NAMES))
        graph_stats = normalize_fit(gf, slice(None))
        y_pool = np.concatenate(
            [self.returns[a, train_dates + 1] for a in range(self.n_assets)])
        y_mean = float(y_pool.mean())
        y_std = float(y_pool.std())
        if y_std == 0.0:
            raise DegenerateInputError("constant training returns")
        self.norm = {
            "price": price_stats,
            "macro": macro_stats,
            "graph": graph_stats,
            "y_mean": y_mean,
            "y_std": y_std,
        }

    # model-ready sampling ----------------------------------------------
    def sample_pairs(self, split: str) -> list:
        dates = self.splits[split]
        return [(a, t) for t in dates for a in range(self.n_assets)]

    def batch_arrays(self, pairs) -> dict:
        """Assemble normalized model inputs and labels for (asset, date) pairs."""
        if not self.norm:
            raise ContractError("finalize() must run before batching")
        w = self.config.window
        pstats: NormStats = self.norm["price"]
        mstats: NormStats = self.norm["macro"]
        gstats: NormStats = self.norm["graph"]
        price = np.empty((len(pairs), w, 12))
        feats = self.graph_feature_matrix()
        tok = []
        tlen = np.empty(len(pairs), dtype=np.int64)
        macro = np.empty((len(pairs), self.macro.shape[1]))
        gf = np.empty((len(pairs), self.n_institutions, len(GRAPH_FEATURE_NAMES)))
        y = np.empty(len(pairs))
        y_raw = np.empty(len(pairs))
        direction = np.empty(len(pairs), dtype=np.int64)
        crisis = np.empty(len(pairs), dtype=np.int64)
        stress = np.empty(len(pairs))
        node_distress = np.empty((len(pairs), self.n_institutions), dtype=np.int64)
        cache = {a: self.price_feature_matrix(a) for a in {a for a, _ in pairs}}
        flat_band = FLAT_BAND
        for i, (a, t) in enumerate(pairs):
            price[i] = pstats.apply(cache[a][t - w + 1:t + 1])
            tok.append(self.tokens[a, t])
            tlen[i] = self.tok_len[a, t]
            macro[i] = mstats.apply(self.macro[t])
            gf[i] = gstats.apply(feats[t])
            raw = self.y_next(a, t)
            y_raw[i] = raw
            y[i] = (raw - self.norm["y_mean"]) / self.norm["y_std"]
            direction[i] = 0 if raw < -flat_band else (2 if raw > flat_band else 1)
            crisis[i] = self.crisis_next(t)
            stress[i] = self.stress_next(t)
            node_distress[i] = self.node_distress_next(t)
        adj = np.broadcast_to(self.adjacency,
                              (len(pairs),) + self.adjacency.shape).copy()
        return {
            "price": price,
            "tokens": np.asarray(tok, dtype=np.int64),
            "tok_len": tlen,
            "macro": macro,
            "graph_feats": gf,
            "graph_adj": adj,
            "y": y,
            "y_raw": y_raw,
            "direction": direction,
            "crisis_next": crisis,
            "stress_next": stress,
            "node_distress": node_distress,
            "pairs": list(pairs),
        }


def build_dataset(cfg: SyntheticConfig) -> AlignedDataset:
    """Generate, impute observation gaps, align to daily, derive indicators,
    and fit normalization."""
    series, raw = generate_synthetic(cfg)
    return build_dataset_from_raw(cfg, series, raw)


def build_dataset_from_raw(cfg: SyntheticConfig, series: dict, raw: dict) -> AlignedDataset:
    """Processing stage alone; series/raw normally come from generate_synthetic."""
    t_all = cfg.n_steps
    gap_free = {name: kalman_impute(s, window=24) for name, s in series.items()}
    macro, present, names = align_temporal(gap_free, t_all)
    # availability of the original (gappy) observations, for provenance
    _, raw_present, _ = align_temporal(series, t_all)
    if names != list(MACRO_SLOTS):
        raise ContractError("macro series out of order")

    a = cfg.n_assets
    indicators = np.empty((a, t_all, len(INDICATOR_NAMES)))
    valid = np.empty((a, t_all), dtype=bool)
    for i in range(a):
        indicators[i], valid[i] = compute_indicators(raw["ohlcv"][i])

    macro_ready = present.all(axis=1)
    usable = np.zeros(t_all, dtype=bool)
    w = cfg.window
    for t in range(t_all - 1):  # t+1 label must exist
        if t - w + 1 < 0:
            continue
        if not valid[:, t - w + 1:t + 1].all():
            continue
        if not macro_ready[t]:
            continue
        usable[t] = True

    ds = AlignedDataset(
        config=cfg,
        vocab=build_vocab(cfg.n_assets),
        ohlcv=raw["ohlcv"],
        indicators=indicators,
        tokens=raw["tokens"],
        tok_len=raw["tok_len"],
        macro=macro,
        macro_present=raw_present,
        adjacency=raw["adjacency"],
        node_stress=raw["stress"],
        node_returns=raw["node_returns"],
        market_return=raw["market_return"],
        regime=raw["regime"],
        returns=raw["returns"],
        usable=usable,
    )
    ds.finalize()
    return ds


# ---------------------------------------------------------------------------
# JSON-lines serialization

def save_dataset(ds: AlignedDataset, path: str) -> None:
    """One meta record, then per-date graph and per-(date, asset) step rows."""
    with open(path, "w", encoding="utf-8") as fh:
        meta = {
            "type": "meta",
            "schema_version": SCHEMA_VERSION,
            "config": ds.config.to_dict(),
            "vocab": ds.vocab,
            "seq_len": int(ds.tokens.shape[2]),
            "macro_slots": list(MACRO_SLOTS),
            "splits": ds.splits,
            "usable": np.flatnonzero(ds.usable).tolist(),
            "norm": {
                "price": ds.norm["price"].to_dict(),
                "macro": ds.norm["macro"].to_dict(),
                "graph": ds.norm["graph"].to_dict(),
                "y_mean": ds.norm["y_mean"],
                "y_std": ds.norm["y_std"],
            },
            "adjacency": ds.adjacency.tolist(),
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        idx = ds.adjacency.nonzero()
        edges = [[int(i), int(j), ds.adjacency[i, j]] for i, j in zip(*idx)]
        for t in range(ds.n_steps):
            grec = {
                "type": "graph",
                "date": t,
                "edges": edges,
                "node_stress": ds.node_stress[t].tolist(),
                "node_returns": ds.node_returns[t].tolist(),
                "market_return": float(ds.market_return[t]),
                "regime": int(ds.regime[t]),
            }
            fh.write(json.dumps(grec, sort_keys=True) + "\n")
            for a in range(ds.n_assets):
                rec = {
                    "type": "step",
                    "date": t,
                    "asset": a,
                    "ohlcv": ds.ohlcv[a, t].tolist(),
                    "indicators": _nan_to_none(ds.indicators[a, t]),
                    "tokens": ds.tokens[a, t, : ds.tok_len[a, t]].tolist(),
                    "return": float(ds.returns[a, t]),
                    "macro": _nan_to_none(ds.macro[t]),
                    "macro_present": ds.macro_present[t].astype(int).tolist(),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _nan_to_none(row: np.ndarray) -> list:
    return [None if np.isnan(v) else float(v) for v in row]


def load_dataset(path: str) -> AlignedDataset:
    with open(path, "r", encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        if meta.get("type") != "meta":
            raise SchemaError("first record must be the meta header")
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(
                f"schema_version {meta.get('schema_version')} != {SCHEMA_VERSION}")
        cfg = SyntheticConfig(**meta["config"])
        t_all, a = cfg.n_steps, cfg.n_assets
        n = cfg.n_institutions
        j = len(INDICATOR_NAMES)
        m = len(MACRO_SLOTS)
        seq_len = int(meta["seq_len"])
        ds = AlignedDataset(
            config=cfg,
            vocab=meta["vocab"],
            ohlcv=np.empty((a, t_all, 5)),
            indicators=np.full((a, t_all, j), np.nan),
            tokens=np.zeros((a, t_all, seq_len), dtype=np.int64),
            tok_len=np.zeros((a, t_all), dtype=np.int64),
            macro=np.empty((t_all, m)),
            macro_present=np.zeros((t_all, m), dtype=bool),
            adjacency=np.asarray(meta["adjacency"], dtype=np.float64),
            node_stress=np.empty((t_all, n)),
            node_returns=np.empty((t_all, n)),
            market_return=np.empty(t_all),
            regime=np.empty(t_all, dtype=np.int64),
            returns=np.empty((a, t_all)),
            usable=np.zeros(t_all, dtype=bool),
        )
        ds.usable[np.asarray(meta["usable"], dtype=np.int64)] = True
        ds.splits = {k: list(v) for k, v in meta["splits"].items()}
        ds.norm = {
            "price": NormStats.from_dict(meta["norm"]["price"]),
            "macro": NormStats.from_dict(meta["norm"]["macro"]),
            "graph": NormStats.from_dict(meta["norm"]["graph"]),
            "y_mean": float(meta["norm"]["y_mean"]),
            "y_std": float(meta["norm"]["y_std"]),
        }
        for line in fh:
            rec = json.loads(line)
            t = rec["date"]
            if rec["type"] == "graph":
                ds.node_stress[t] = rec["node_stress"]
                ds.node_returns[t] = rec["node_returns"]
                ds.market_return[t] = rec["market_return"]
                ds.regime[t] = rec["regime"]
            elif rec["type"] == "step":
                a_i = rec["asset"]
                ds.ohlcv[a_i, t] = rec["ohlcv"]
                ds.indicators[a_i, t] = [
                    np.nan if v is None else v for v in rec["indicators"]]
                toks = rec["tokens"]
                ds.tokens[a_i, t, : len(toks)] = toks
                ds.tok_len[a_i, t] = len(toks)
                ds.returns[a_i, t] = rec["return"]
                ds.macro[t] = [np.nan if v is None else v for v in rec["macro"]]
                ds.macro_present[t] = np.asarray(rec["macro_present"], dtype=bool)
            else:
                raise SchemaError(f"unknown record type {rec['type']!r}")
    return ds
