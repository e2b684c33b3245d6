"""Risk-aware reinforcement learning: softmax policy over positions, reward
shaping that charges systemic-stress exposure against profit, and REINFORCE
with a mean-return baseline.

The policy gradient here is deliberately the simplest estimator whose
correctness can be verified by exact enumeration on a toy MDP.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .autodiff import Tensor
from .errors import ContractError, DimensionError

DEFAULT_ACTIONS = (-1.0, 0.0, 1.0)


@dataclass
class RLConfig:
    """Reward and rollout knobs.

    r_sys_source picks where the stress penalty comes from: "truth" reads
    the environment's ground-truth stress variable, "model" reads the
    trained risk head (the closed feedback loop).
    """

    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.99
    episode_length: int = 64
    actions: tuple = DEFAULT_ACTIONS
    r_sys_source: str = "truth"

    def __post_init__(self):
        self.actions = tuple(float(a) for a in self.actions)
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        if not self.actions:
            raise ContractError("action set must be nonempty")
        if self.episode_length < 1:
            raise ContractError("episode_length must be >= 1")
        if self.r_sys_source not in ("truth", "model"):
            raise ContractError("r_sys_source must be 'truth' or 'model'")


@dataclass(frozen=True)
class Action:
    position: float

    def require_in(self, cfg: RLConfig):
        if self.position not in cfg.actions:
            raise ContractError(f"position {self.position} not in action set {cfg.actions}")
        return self


@dataclass
class PolicyParams:
    w: Tensor  # (d, n_actions)
    b: Tensor  # (n_actions,)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.w.data)) and np.all(np.isfinite(self.b.data))):
            raise ContractError("policy parameters must be finite")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise DimensionError("policy weight/bias shapes disagree")

    @classmethod
    def from_param_dict(cls, params: dict) -> "PolicyParams":
        return cls(params["policy.w"], params["policy.b"])


@dataclass
class Trajectory:
    """One episode: states are the policy inputs, actions are indices into
    the configured action set. profits and r_sys are kept alongside the
    shaped rewards so risk exposure stays inspectable after the fact."""

    states: np.ndarray   # (T, d)
    actions: np.ndarray  # (T,) int
    rewards: np.ndarray  # (T,)
    profits: np.ndarray | None = None
    r_sys: np.ndarray | None = None
    terminal: bool = True

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        t = self.rewards.size
        if self.states.ndim != 2 or self.states.shape[0] != t or self.actions.shape != (t,):
            raise DimensionError("trajectory fields disagree on length")
        if t < 1:
            raise ContractError("trajectory must contain at least one step")
        if not np.all(np.isfinite(self.rewards)):
            raise ContractError("rewards must be finite")

    def __len__(self) -> int:
        return int(self.rewards.size)


def policy(z, params) -> np.ndarray:
    """Action distribution softmax(W_a z + b) as a plain probability vector."""
    if isinstance(params, PolicyParams):
        w, b = params.w.data, params.b.data
    else:
        w, b = params["policy.w"].data, params["policy.b"].data
    zv = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    zv = zv.reshape(-1)
    if zv.shape[0] != w.shape[0]:
        raise DimensionError(f"state dim {zv.shape[0]} vs policy dim {w.shape[0]}")
    logits = zv @ w + b
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def reward(profit: float, r_sys: float, cfg: RLConfig) -> float:
    """alpha * profit - beta * r_sys, exactly."""
    if not (math.isfinite(profit) and math.isfinite(r_sys)):
        raise ContractError("reward inputs must be finite")
    return cfg.alpha * profit - cfg.beta * r_sys


def discounted_return(traj: Trajectory, gamma: float) -> float:
    """Sum of gamma^t r_t over the episode."""
    t = np.arange(len(traj))
    return float(np.sum(traj.rewards * gamma ** t))


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1}, computed backwards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


# ---------------------------------------------------------------------------
# environments

class MarketEnv:
    """Single-asset synthetic market for policy rollouts.

    The state exposed to the policy is a small feature vector
    [current return, current mean stress]; profit for an action is
    position times the realized next-step return; r_sys is the next
    step's mean interbank stress scaled by position exposure, so a flat
    book carries no systemic charge.
    """

    STATE_DIM = 2

    def __init__(self, cfg: RLConfig, seed: int, n_steps: int = 512,
                 synthetic_cfg=None):
        from . import datapipe as dp

        self.cfg = cfg
        scfg = synthetic_cfg or dp.SyntheticConfig(
            n_assets=1, n_steps=n_steps, n_institutions=4, seed=seed)
        _, raw = dp.generate_synthetic(scfg)
        self.returns = raw["returns"][0]
        self.stress = raw["stress"].mean(axis=1)
        self.t = 0

    def _state(self) -> np.ndarray:
        return np.array([self.returns[self.t], self.stress[self.t]])

    @property
    def remaining(self) -> int:
        return self.returns.size - 1 - self.t

    def reset(self, start: int = 0) -> np.ndarray:
        if not 0 <= start < self.returns.size - 1:
            raise ContractError("episode start out of range")
        self.t = start
        return self._state()

    def env_step(self, action: Action):
        action.require_in(self.cfg)
        if self.remaining < 1:
            raise ContractError("episode ran past the simulated horizon")
        nxt = self.t + 1
        profit = action.position * self.returns[nxt]
        r_sys = abs(action.position) * self.stress[nxt]
        self.t = nxt
        return self._state(), profit, r_sys


class DatasetEnv:
    """Rollout environment over an aligned dataset through a trained model.

    States are the fused representations the backbone produces for each
    (asset, date); profit uses the raw next-step return. Stress comes from
    the dataset (truth mode) or from the risk head's current assessment
    (model mode), always scaled by position exposure.
    """

    def __init__(self, dataset, params: dict, model_cfg, rl_cfg: RLConfig,
                 split: str = "train", asset: int = 0):
        self.ds = dataset
        self.params = params
        self.model_cfg = model_cfg
        self.cfg = rl_cfg
        self.asset = asset
        self.dates = list(dataset.splits[split])
        if len(self.dates) < 2:
            raise ContractError(f"split '{split}' too short for an episode")
        self._cache: dict = {}
        self.i = 0

    @property
    def state_dim(self) -> int:
        return self.model_cfg.d_model

    @property
    def remaining(self) -> int:
        return len(self.dates) - 1 - self.i

    def _forward(self, date: int):
        hit = self._cache.get(date)
        if hit is None:
            batch = self.ds.batch_arrays([(self.asset, date)])
            out = model_mod.forward_batch(batch, self.params, self.model_cfg)
            hit = (out["z"].data[0].copy(), float(out["risk_score"].data[0]))
            self._cache[date] = hit
        return hit

    def reset(self, start: int = 0) -> np.ndarray:
        if not 0 <= start < len(self.dates) - 1:
            raise ContractError("episode start out of range")
        self.i = start
        z, _ = self._forward(self.dates[self.i])
        return z

    def env_step(self, action: Action):
        action.require_in(self.cfg)
        if self.remaining < 1:
            raise ContractError("episode ran past the end of the split")
        date = self.dates[self.i]
        z, risk_now = self._forward(date)
        profit = action.position * self.ds.y_next(self.asset, date)
        if self.cfg.r_sys_source == "model":
            stress = risk_now
        else:
            stress = self.ds.stress_next(date)
        r_sys = abs(action.position) * stress
        self.i += 1
        z_next, _ = self._forward(self.dates[self.i])
        return z_next, profit, r_sys


def rollout(env, params: dict, cfg: RLConfig, rng: np.random.Generator,
            start: int = 0) -> Trajectory:
    """Sample one episode from the policy; length is capped by both the
    configured episode length and the environment horizon."""
    state = env.reset(start)
    states, actions, rewards, profits, stresses = [], [], [], [], []
    steps = min(cfg.episode_length, env.remaining)
    if steps < 1:
        raise ContractError("no room left for a single step")
    for _ in range(steps):
        probs = policy(state, params)
        a_idx = int(rng.choice(len(cfg.actions), p=probs))
        act = Action(cfg.actions[a_idx])
        next_state, profit, r_sys = env.env_step(act)
        states.append(state)
        actions.append(a_idx)
        rewards.append(reward(profit, r_sys, cfg))
        profits.append(profit)
        stresses.append(r_sys)
        state = next_state
    return Trajectory(
        states=np.asarray(states), actions=np.asarray(actions),
        rewards=np.asarray(rewards), profits=np.asarray(profits),
        r_sys=np.asarray(stresses))


# ---------------------------------------------------------------------------
# policy gradient

def reinforce_gradient(trajectories, params: dict, cfg: RLConfig,
                       use_baseline: bool = True) -> dict:
    """Ascent gradient of the REINFORCE objective for the policy leaves.

    Per trajectory: sum_t grad log pi(a_t | z_t) * (G_t - b), averaged over
    the batch. b is the mean of every G_t in the batch; disabling it gives
    the plain estimator whose expectation an enumeration oracle can match.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ContractError("at least one trajectory required")
    all_g = [returns_to_go(tr.rewards, cfg.gamma) for tr in trajectories]
    baseline = float(np.mean(np.concatenate(all_g))) if use_baseline else 0.0

    w, b = params["policy.w"], params["policy.b"]
    states = np.concatenate([tr.states for tr in trajectories], axis=0)
    acts = np.concatenate([tr.actions for tr in trajectories])
    adv = np.concatenate(all_g) - baseline
    one_hot = np.zeros((acts.size, w.shape[1]))
    one_hot[np.arange(acts.size), acts] = 1.0

    with ad.Tape() as tape:
        logits = ad.matmul(Tensor(states), w) + b
        log_probs = logits - ad.reshape(ad.logsumexp(logits, axis=-1), (acts.size, 1))
        picked = ad.reduce_sum(log_probs * Tensor(one_hot), axis=-1)
        # negative sign: backward computes a descent direction on the
        # surrogate, so the ascent gradient is the stored negation
        surrogate = ad.reduce_sum(picked * Tensor(adv)) * (-1.0 / len(trajectories))
        w.zero_grad()
        b.zero_grad()
        ad.backward(surrogate, tape)
    return {"policy.w": -w.grad.copy(), "policy.b": -b.grad.copy()}


def reinforce_update(trajectories, params: dict, cfg: RLConfig,
                     lr: float, use_baseline: bool = True) -> dict:
    """One ascent step on the policy leaves, in place. Returns the gradient
    actually applied (useful for monitoring)."""
    grad = reinforce_gradient(trajectories, params, cfg, use_baseline)
    for name, g in grad.items():
        params[name].data += lr * g
    return grad


# ---------------------------------------------------------------------------
# trace export

def export_traces(trajectories, path: str, cfg: RLConfig) -> None:
    """One JSON record per episode, steps spelled out for inspection."""
    with open(path, "w") as fh:
        for i, tr in enumerate(trajectories):
            rec = {
                "episode": i,
                "length": len(tr),
                "return": discounted_return(tr, cfg.gamma),
                "terminal": bool(tr.terminal),
                "steps": [
                    {
                        "t": t,
                        "position": cfg.actions[tr.actions[t]],
                        "reward": float(tr.rewards[t]),
                        "profit": None if tr.profits is None else float(tr.profits[t]),
                        "r_sys": None if tr.r_sys is None else float(tr.r_sys[t]),
                    }
                    for t in range(len(tr))
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
