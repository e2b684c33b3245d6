"""Loss composition, AdamW, the warmup-cosine schedule, staged training,
and bit-exact checkpoints.

The training procedure runs four stages in a fixed order: single-modality
pretraining, contrastive alignment, joint multitask training, and RL
fine-tuning of the policy head. Each stage gets a fresh optimizer and its
own RNG stream so a seeded run is reproducible bit for bit.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from . import fusion as fus
from . import heads
from . import model as model_mod
from . import rl as rl_mod
from .autodiff import Tensor
from .errors import (ContractError, DimensionError, NumericalError,
                     ScheduleError, SchemaError)

STAGES = ("unimodal-pretrain", "multimodal-align", "joint-multitask", "rl-finetune")

# loss terms each stage optimizes
DEFAULT_ACTIVE = {
    "unimodal-pretrain": ("forecast", "risk"),
    "multimodal-align": ("align",),
    "joint-multitask": ("forecast", "risk", "align"),
    "rl-finetune": ("rl",),
}

# split of the headline 80 epochs across the stages
DEFAULT_STAGE_EPOCHS = {
    "unimodal-pretrain": 20,
    "multimodal-align": 10,
    "joint-multitask": 40,
    "rl-finetune": 10,
}

_KIND_PREFIX = {"price": "price.", "text": "text.", "macro": "macro.", "graph": "graph."}
_ADAM_BETA1, _ADAM_BETA2, _ADAM_EPS = 0.9, 0.999, 1e-8
_BCE_EPS = 1e-12


@dataclass
class LossWeights:
    """Multipliers for the four loss terms: forecast, risk, align, RL."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    lambda4: float = 0.1

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3, self.lambda4)
        if any(v < 0 for v in vals):
            raise ContractError("loss weights must be nonnegative")
        if all(v == 0 for v in vals):
            raise ContractError("at least one loss weight must be positive")


@dataclass
class ForecastLossConfig:
    quantile_levels: tuple = (0.1, 0.5, 0.9)
    mse_weight: float = 1.0

    def __post_init__(self):
        self.quantile_levels = tuple(float(t) for t in self.quantile_levels)
        if any(not 0.0 < t < 1.0 for t in self.quantile_levels):
            raise ContractError("quantile levels must lie strictly inside (0, 1)")
        if self.mse_weight < 0:
            raise ContractError("mse_weight must be >= 0")


@dataclass
class TrainingConfig:
    epochs: int = 80
    micro_batch_size: int = 32
    macro_batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 20
    weight_decay: float = 0.01
    seeds: tuple = (0, 1, 2, 3, 4)
    rl_lr: float = 0.05
    episodes_per_epoch: int = 8
    # False runs RL as the final stage only; True also folds policy updates
    # (scaled by lambda4) into the joint stage
    rl_in_joint: bool = False

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.micro_batch_size < 1 or self.macro_batch_size < 1:
            raise ContractError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.peak_lr <= 0:
            raise ContractError("peak_lr must be positive")
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be >= 0")
        if not self.seeds:
            raise ContractError("seed list must be nonempty")


@dataclass
class StageSchedule:
    epochs: dict = field(default_factory=lambda: dict(DEFAULT_STAGE_EPOCHS))
    active: dict = field(default_factory=lambda: dict(DEFAULT_ACTIVE))

    def __post_init__(self):
        if set(self.epochs) != set(STAGES) or set(self.active) != set(STAGES):
            raise ContractError(f"schedule must cover exactly the stages {STAGES}")
        for s in STAGES:
            if int(self.epochs[s]) < 0:
                raise ContractError("stage epoch counts must be >= 0")
            self.epochs[s] = int(self.epochs[s])
            self.active[s] = tuple(self.active[s])
            if not self.active[s]:
                raise ContractError(f"stage {s} must activate at least one loss term")


@dataclass
class StageReport:
    stage: str
    epochs: int
    losses: dict  # term -> per-epoch mean, always includes "total"
    n_steps: int = 0


# ---------------------------------------------------------------------------
# losses

def quantile_loss(y: float, yhat: float, tau: float) -> float:
    """Pinball loss: tau * e for overshoot, (tau - 1) * e for undershoot."""
    if not 0.0 < tau < 1.0:
        raise ContractError("tau must lie strictly inside (0, 1)")
    e = y - yhat
    return tau * e if e >= 0 else (tau - 1.0) * e


def _pinball_mean(y: Tensor, q: Tensor, tau: float) -> Tensor:
    e = y - q
    return ad.reduce_mean(ad.relu(e) * tau + ad.relu(e * -1.0) * (1.0 - tau))


def forecast_loss(y, weights: Tensor, means: Tensor, sigmas: Tensor,
                  cfg: ForecastLossConfig) -> Tensor:
    """MSE of the mixture mean plus summed pinball losses of the mixture
    quantiles at the configured levels."""
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    if yv.size == 0:
        raise ContractError("forecast_loss needs a nonempty batch")
    if weights.shape[0] != yv.size:
        raise DimensionError(f"{yv.size} targets for {weights.shape[0]} forecasts")
    yt = Tensor(yv)
    point = ad.reduce_sum(weights * means, axis=-1)
    diff = point - yt
    loss = ad.reduce_mean(diff * diff) * cfg.mse_weight
    for tau in cfg.quantile_levels:
        q = heads.mixture_quantile(weights, means, sigmas, tau)
        loss = loss + _pinball_mean(yt, q, tau)
    return loss


def _clamp_low(x: Tensor, floor: float) -> Tensor:
    return ad.relu(x - floor) + floor


def risk_loss(scores, crisis_flags, stress_targets) -> Tensor:
    """Binary cross-entropy of the risk score against the crisis flag plus
    MSE against the continuous stress target, summed.

    The same score serves both labels: it is read as a crisis probability
    and as a stress estimate.
    """
    s = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    flags = np.asarray(crisis_flags, dtype=np.float64).reshape(-1)
    stress = np.asarray(stress_targets, dtype=np.float64).reshape(-1)
    if s.shape != flags.shape or s.shape != stress.shape:
        raise DimensionError("scores, flags, and stress targets must share a length")
    if flags.size == 0:
        raise ContractError("risk_loss needs a nonempty batch")
    if not np.all((flags == 0.0) | (flags == 1.0)):
        raise ContractError("crisis flags must be binary")
    if np.any(s.data < 0) or np.any(s.data > 1):
        raise ContractError("scores must lie in [0, 1]")
    f = Tensor(flags)
    bce_terms = f * ad.log(_clamp_low(s, _BCE_EPS)) \
        + Tensor(1.0 - flags) * ad.log(_clamp_low(s * -1.0 + 1.0, _BCE_EPS))
    bce = ad.reduce_mean(bce_terms) * -1.0
    err = s - Tensor(stress)
    return bce + ad.reduce_mean(err * err)


def total_loss(components, w: LossWeights):
    """lambda1 * forecast + lambda2 * risk + lambda3 * align + lambda4 * rl.

    ``components`` is a mapping from term name to scalar (tensor or float);
    missing terms contribute nothing.
    """
    if not isinstance(components, dict):
        components = dict(zip(("forecast", "risk", "align", "rl"), components))
    unknown = set(components) - {"forecast", "risk", "align", "rl"}
    if unknown:
        raise ContractError(f"unknown loss terms {sorted(unknown)}")
    for name, c in components.items():
        v = c.data if isinstance(c, Tensor) else np.asarray(c)
        if not np.all(np.isfinite(v)):
            raise ContractError(f"loss component {name} is not finite")
    lams = {"forecast": w.lambda1, "risk": w.lambda2,
            "align": w.lambda3, "rl": w.lambda4}
    out = 0.0
    for name, lam in lams.items():
        if name in components:
            out = components[name] * lam + out
    return out


# ---------------------------------------------------------------------------
# optimizer and schedule

def lr_schedule(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> peak over the warmup, then cosine decay to peak/100."""
    if step < 0:
        raise ContractError("step must be >= 0")
    if not 0 <= warmup_steps < total_steps:
        raise ContractError("need 0 <= warmup_steps < total_steps")
    floor = peak / 100.0
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    if step >= total_steps:
        return floor
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    """First/second moments and per-parameter step counts, keyed by name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place.

    Only parameters named in ``grads`` move; weight decay is applied to
    exactly those, keeping untouched pathways untouched.
    """
    for name in sorted(grads):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != {p.shape}")
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = _ADAM_BETA1 * m + (1.0 - _ADAM_BETA1) * g
        v = _ADAM_BETA2 * v + (1.0 - _ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1.0 - _ADAM_BETA1 ** t)
        vhat = v / (1.0 - _ADAM_BETA2 ** t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + _ADAM_EPS) + weight_decay * p.data)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"FFCP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: dict, meta: dict | None = None,
                    extras: dict | None = None) -> None:
    """Versioned header plus a flat float64 little-endian blob; byte-exact."""
    extras = extras or {}
    entries = [("param", n, params[n].data) for n in sorted(params)]
    entries += [("extra", n, np.asarray(extras[n], dtype=np.float64))
                for n in sorted(extras)]
    header = {
        "arrays": [{"kind": k, "name": n, "shape": list(a.shape)}
                   for k, n, a in entries],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Returns (params dict of gradient-carrying tensors, meta, extras)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise SchemaError("not a checkpoint file (bad magic)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", blob[8:16])[0]
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    params, extras = {}, {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arr = arr.reshape(shape).astype(np.float64)
        offset += count * 8
        if entry["kind"] == "param":
            params[entry["name"]] = Tensor(arr, requires_grad=True)
        else:
            extras[entry["name"]] = arr
    return params, header["meta"], extras


def save_optimizer(state: AdamWState) -> tuple:
    """(extras dict, meta fragment) for embedding optimizer state in a
    checkpoint."""
    extras = {}
    for n, a in state.m.items():
        extras[f"adamw.m.{n}"] = a
    for n, a in state.v.items():
        extras[f"adamw.v.{n}"] = a
    return extras, {"adamw_t": dict(state.t)}


def load_optimizer(extras: dict, meta: dict) -> AdamWState:
    state = AdamWState()
    for key, arr in extras.items():
        if key.startswith("adamw.m."):
            state.m[key[len("adamw.m."):]] = arr.copy()
        elif key.startswith("adamw.v."):
            state.v[key[len("adamw.v."):]] = arr.copy()
    state.t = {k: int(v) for k, v in meta.get("adamw_t", {}).items()}
    return state


# ---------------------------------------------------------------------------
# staged training

def _chunks(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def embed_batch(batch: dict, params: dict, cfg, kinds) -> dict:
    """Run the encoders named in ``kinds`` over one assembled batch."""
    embs = {}
    if "price" in kinds:
        embs["price"] = enc.encode_price_batch(batch["price"], params, cfg)
    if "text" in kinds:
        embs["text"] = enc.encode_text_batch(batch["tokens"], batch["tok_len"],
                                             params, cfg)
    if "macro" in kinds:
        embs["macro"] = enc.encode_macro_batch(batch["macro"], params, cfg)
    if "graph" in kinds:
        _, embs["graph"] = enc.encode_graph_batch(
            batch["graph_feats"], batch["graph_adj"], params, cfg)
    return embs


def fuse_embeddings(embs: dict, n_rows: int, params: dict, cfg):
    """Fuse whichever modalities ``embs`` carries, marking the rest absent."""
    presence = np.zeros((n_rows, len(fus.MODALITIES)), dtype=bool)
    for ki, kind in enumerate(fus.MODALITIES):
        presence[:, ki] = kind in embs
    return fus.fuse_batch(embs, presence, params, cfg)


class TrainingRun:
    """One seeded end-to-end training: owns the parameters, the stage
    bookkeeping, and the per-stage RNG streams."""

    def __init__(self, dataset, model_cfg, cfg: TrainingConfig,
                 schedule: StageSchedule | None = None,
                 loss_weights: LossWeights | None = None,
                 forecast_cfg: ForecastLossConfig | None = None,
                 align_cfg: fus.AlignConfig | None = None,
                 rl_cfg: rl_mod.RLConfig | None = None,
                 seed: int = 0, modalities=None):
        self.dataset = dataset
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.schedule = schedule or StageSchedule()
        self.weights = loss_weights or LossWeights()
        self.forecast_cfg = forecast_cfg or ForecastLossConfig()
        self.align_cfg = align_cfg or fus.AlignConfig(
            pairs=(("price", "text"), ("price", "macro"), ("price", "graph")))
        self.rl_cfg = rl_cfg or rl_mod.RLConfig(r_sys_source="model")
        # restricting the modality set turns the run into an ablation
        self.modalities = tuple(modalities) if modalities else tuple(fus.MODALITIES)
        bad = set(self.modalities) - set(fus.MODALITIES)
        if bad:
            raise ContractError(f"unknown modalities {sorted(bad)}")
        self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed)
        children = ss.spawn(len(STAGES) + 1)
        self.params = model_mod.init_model_params(
            model_cfg, np.random.default_rng(children[0]))
        self._stage_seed = dict(zip(STAGES, children[1:]))
        self.completed: list = []
        self.reports: list = []

    # ------------------------------------------------------------------
    # single optimization steps

    def _subset(self, kinds, extra):
        prefixes = tuple(_KIND_PREFIX[k] for k in kinds) + tuple(extra)
        return model_mod.param_subset(self.params, prefixes)

    def _embed(self, batch, kinds):
        return embed_batch(batch, self.params, self.model_cfg, kinds)

    def _fuse(self, embs, n_rows):
        return fuse_embeddings(embs, n_rows, self.params, self.model_cfg)

    def _check_finite(self, comps):
        for name, c in comps.items():
            v = c.data if isinstance(c, Tensor) else np.asarray(c)
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"{name} loss is not finite")

    def _align_term(self, embs):
        terms = []
        for a, b in self.align_cfg.pairs:
            if a in embs and b in embs:
                terms.append(fus.align_loss(embs[a], embs[b], self.align_cfg))
        if not terms:
            return None
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc * (1.0 / len(terms))

    def _backward_and_step(self, loss, subset, opt, lr):
        tape = self._tape
        for p in subset.values():
            p.zero_grad()
        ad.backward(loss, tape)
        grads = {n: t.grad.copy() for n, t in subset.items()}
        adamw_step(self.params, grads, opt, lr, self.cfg.weight_decay)

    def _forecast_step(self, pair_batch, kinds, with_align, opt, lr):
        batch = self.dataset.batch_arrays(pair_batch)
        subset = self._subset(kinds, ("fusion.", "micro."))
        n = len(pair_batch)
        with ad.Tape() as tape:
            self._tape = tape
            embs = self._embed(batch, kinds)
            z, _ = self._fuse(embs, n)
            w, m, s = heads.micro_head_batch(
                ad.reshape(z, (n, 1, self.model_cfg.d_model)), self.params,
                self.model_cfg)
            comps = {"forecast": forecast_loss(batch["y"], w, m, s, self.forecast_cfg)}
            if with_align:
                at = self._align_term(embs)
                if at is not None:
                    comps["align"] = at
            self._check_finite(comps)
            loss = total_loss(comps, self.weights)
            self._backward_and_step(loss, subset, opt, lr)
        return {k: float(v.data) for k, v in comps.items()} | {"total": float(loss.data)}

    def _risk_step(self, pair_batch, kinds, opt, lr):
        batch = self.dataset.batch_arrays(pair_batch)
        subset = self._subset(kinds, ("fusion.", "risk."))
        n = len(pair_batch)
        with ad.Tape() as tape:
            self._tape = tape
            embs = self._embed(batch, kinds)
            z, _ = self._fuse(embs, n)
            score, _ = heads.macro_risk_batch(
                z, batch["graph_feats"], batch["graph_adj"], self.params,
                self.model_cfg)
            comps = {"risk": risk_loss(score, batch["crisis_next"],
                                       batch["stress_next"])}
            self._check_finite(comps)
            loss = total_loss(comps, self.weights)
            self._backward_and_step(loss, subset, opt, lr)
        return {"risk": float(comps["risk"].data), "total": float(loss.data)}

    def _align_step(self, pair_batch, kinds, opt, lr):
        batch = self.dataset.batch_arrays(pair_batch)
        subset = self._subset(kinds, ())
        with ad.Tape() as tape:
            self._tape = tape
            embs = self._embed(batch, kinds)
            at = self._align_term(embs)
            if at is None:
                raise ContractError("alignment stage has no usable modality pairs")
            self._check_finite({"align": at})
            loss = total_loss({"align": at}, self.weights)
            self._backward_and_step(loss, subset, opt, lr)
        return {"align": float(at.data), "total": float(loss.data)}

    def _rl_epoch(self, rng, lr_scale=1.0):
        env = rl_mod.DatasetEnv(self.dataset, self.params, self.model_cfg,
                                self.rl_cfg, split="train")
        horizon = len(env.dates) - 1
        trajs = []
        for _ in range(self.cfg.episodes_per_epoch):
            span = max(1, horizon - self.rl_cfg.episode_length)
            start = int(rng.integers(0, span))
            trajs.append(rl_mod.rollout(env, self.params, self.rl_cfg, rng,
                                        start=start))
        rl_mod.reinforce_update(trajs, self.params, self.rl_cfg,
                                self.cfg.rl_lr * lr_scale)
        mean_return = float(np.mean(
            [rl_mod.discounted_return(t, self.rl_cfg.gamma) for t in trajs]))
        return mean_return

    # ------------------------------------------------------------------
    # stages

    def _stage_steps(self, stage, rng):
        """Deterministic per-epoch step list: (task, kinds, with_align, batch)."""
        micro_pairs = self.dataset.sample_pairs("train")
        macro_pairs = [(0, t) for t in self.dataset.splits["train"]]
        order_m = rng.permutation(len(micro_pairs))
        order_g = rng.permutation(len(macro_pairs))
        micro = _chunks([micro_pairs[i] for i in order_m], self.cfg.micro_batch_size)
        macro = _chunks([macro_pairs[i] for i in order_g], self.cfg.macro_batch_size)
        allowed = self.modalities
        steps = []
        if stage == "unimodal-pretrain":
            uni_micro = tuple(k for k in ("price", "text") if k in allowed)
            uni_macro = tuple(k for k in ("macro", "graph") if k in allowed)
            if uni_micro:
                for i, b in enumerate(micro):
                    steps.append(("forecast", (uni_micro[i % len(uni_micro)],),
                                  False, b))
            if uni_macro:
                for i, b in enumerate(macro):
                    steps.append(("risk", (uni_macro[i % len(uni_macro)],),
                                  False, b))
        elif stage == "multimodal-align":
            usable = [p for p in self.align_cfg.pairs
                      if p[0] in allowed and p[1] in allowed]
            kinds = tuple(sorted({k for p in usable for k in p}))
            if usable:
                for b in micro:
                    steps.append(("align", kinds, False, b))
        elif stage == "joint-multitask":
            for b in micro:
                steps.append(("forecast", allowed, True, b))
            for b in macro:
                steps.append(("risk", allowed, False, b))
        else:
            raise ScheduleError(f"no gradient steps defined for stage {stage}")
        order = rng.permutation(len(steps))
        return [steps[i] for i in order]

    def run_stage(self, stage: str) -> StageReport:
        if stage not in STAGES:
            raise ScheduleError(f"unknown stage {stage!r}")
        idx = STAGES.index(stage)
        if self.completed != list(STAGES[:idx]):
            raise ScheduleError(
                f"stage {stage!r} requires completed {STAGES[:idx]}, "
                f"have {tuple(self.completed)}")
        n_epochs = self.schedule.epochs[stage]
        rng = np.random.default_rng(self._stage_seed[stage])
        losses: dict = {}
        n_steps = 0

        if n_epochs == 0:
            report = StageReport(stage, 0, {"total": []})
        elif stage == "rl-finetune":
            totals, returns = [], []
            for _ in range(n_epochs):
                mean_return = self._rl_epoch(rng)
                returns.append(mean_return)
                totals.append(-self.weights.lambda4 * mean_return)
                n_steps += 1
            report = StageReport(stage, n_epochs,
                                 {"total": totals, "return": returns}, n_steps)
        else:
            probe = self._stage_steps(stage, np.random.default_rng(0))
            steps_per_epoch = len(probe)
            if self.cfg.rl_in_joint and stage == "joint-multitask":
                steps_per_epoch += 1
            if steps_per_epoch == 0:
                raise ScheduleError(
                    f"stage {stage} has no steps for modalities {self.modalities}")
            total_steps = n_epochs * steps_per_epoch
            if self.cfg.warmup_steps >= total_steps:
                raise ContractError(
                    f"warmup_steps {self.cfg.warmup_steps} must be below the "
                    f"stage's {total_steps} total steps")
            opt = AdamWState()
            step = 0
            for _ in range(n_epochs):
                epoch_terms: dict = {}
                for task, kinds, with_align, batch in self._stage_steps(stage, rng):
                    lr = lr_schedule(step, self.cfg.peak_lr,
                                     self.cfg.warmup_steps, total_steps)
                    try:
                        if task == "forecast":
                            terms = self._forecast_step(batch, kinds, with_align,
                                                        opt, lr)
                        elif task == "risk":
                            terms = self._risk_step(batch, kinds, opt, lr)
                        else:
                            terms = self._align_step(batch, kinds, opt, lr)
                    except (NumericalError, ContractError) as e:
                        # inputs were validated up front, so a mid-step
                        # violation means the numbers blew up
                        raise NumericalError(
                            f"training diverged at stage {stage}, step {step}: {e}"
                        ) from e
                    for k, v in terms.items():
                        epoch_terms.setdefault(k, []).append(v)
                    step += 1
                if self.cfg.rl_in_joint and stage == "joint-multitask":
                    mean_return = self._rl_epoch(rng, lr_scale=self.weights.lambda4)
                    epoch_terms.setdefault("return", []).append(mean_return)
                    step += 1
                for k, vals in epoch_terms.items():
                    losses.setdefault(k, []).append(float(np.mean(vals)))
            n_steps = step
            report = StageReport(stage, n_epochs, losses, n_steps)

        self.completed.append(stage)
        self.reports.append(report)
        return report

    def run_all(self) -> list:
        return [self.run_stage(s) for s in STAGES]

    # ------------------------------------------------------------------

    def save(self, path: str) -> None:
        meta = {
            "model_config": self.model_cfg.to_dict(),
            "seed": self.seed,
            "completed": list(self.completed),
            "stage_epochs": dict(self.schedule.epochs),
            "modalities": list(self.modalities),
        }
        save_checkpoint(path, self.params, meta=meta)

    def resume_from(self, path: str) -> None:
        """Adopt a checkpoint saved by an identically configured run.

        Stage optimizers and RNG streams are fresh per stage, so resuming at
        a stage boundary reproduces the uninterrupted run bit for bit.
        """
        params, meta, _ = load_checkpoint(path)
        if meta.get("seed") != self.seed:
            raise ContractError(
                f"checkpoint seed {meta.get('seed')} != run seed {self.seed}")
        if meta.get("model_config") != self.model_cfg.to_dict():
            raise SchemaError("checkpoint model config does not match the run")
        if meta.get("stage_epochs") != dict(self.schedule.epochs):
            raise SchemaError("checkpoint stage schedule does not match the run")
        if list(meta.get("modalities", [])) != list(self.modalities):
            raise SchemaError("checkpoint modality set does not match the run")
        completed = list(meta.get("completed", []))
        if completed != list(STAGES[:len(completed)]):
            raise ScheduleError(f"checkpoint stage history {completed} is invalid")
        if set(params) != set(self.params):
            raise SchemaError("checkpoint parameter names do not match the model")
        for n, t in params.items():
            if t.shape != self.params[n].shape:
                raise SchemaError(f"checkpoint shape mismatch at {n}")
            self.params[n].data[...] = t.data
        self.completed = completed


def load_params(path: str):
    """Checkpoint -> (params, ModelConfig, meta)."""
    params, meta, _ = load_checkpoint(path)
    mcfg = model_mod.ModelConfig.from_dict(meta["model_config"])
    return params, mcfg, meta
