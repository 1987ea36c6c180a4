"""Policy learning on top of a frozen representation model.

The policy sees only the state part of the latent (the viewpoint part is
unrepresentable in its input by construction). The reward is binary: 1 when
the cosine between the agent's current state representation and the expert
demonstration's representation at the same episode timestep clears a
threshold. The demonstration is encoded by the egocentric encoder for
first-person imitation or the fixed-camera encoder for third-person
imitation; the agent's own frames always go through the egocentric encoder.

Optimization is clipped-surrogate policy gradient with generalized advantage
estimation, a separate value head, and an entropy bonus.
"""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import gridworld as gw
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericalError, ShapeError
from .model import FPV, TPV, DualAE
from .optim import AdamState, adam_step
from .trajectory import Trajectory

log = logging.getLogger("egoworld.imitation")


@dataclass(frozen=True)
class RewardConfig:
    threshold: float = 0.8      # cosine threshold for the binary reward
    demo_branch: str = TPV      # which encoder reads the demonstration
    continuous: bool = False    # optional variant: negative L2 distance instead

    def validate(self) -> "RewardConfig":
        if not -1.0 < self.threshold < 1.0:
            raise ConfigError(f"reward threshold {self.threshold} outside (-1, 1)")
        if self.demo_branch not in (FPV, TPV):
            raise ConfigError(f"unknown demo branch {self.demo_branch!r}")
        return self


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-4
    rollout: int = 512
    epochs: int = 4
    minibatch: int = 64
    total_steps: int = 50_000

    def validate(self) -> "PPOConfig":
        if not 0.0 < self.clip < 1.0:
            raise ConfigError("clip ratio must be in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ConfigError("gamma and lambda must be in (0, 1]")
        if self.rollout < 2 or self.minibatch < 1 or self.epochs < 1:
            raise ConfigError("bad rollout/minibatch/epoch sizes")
        return self


class PolicyNet:
    """Action head: two tanh hidden layers of the input width mapping the
    state representation to log-likelihoods over the six actions, plus a
    value head of the same trunk shape."""

    def __init__(self, dim_h: int, n_actions: int = gw.N_ACTIONS, seed: int = 0):
        self.dim_h = dim_h
        self.n_actions = n_actions
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x901]))
        for head, out in (("pi", n_actions), ("vf", 1)):
            sizes = [dim_h, dim_h, dim_h, out]
            for i in range(3):
                std = np.sqrt(1.0 / sizes[i])
                scale = 0.01 if i == 2 else 1.0  # near-uniform initial policy
                self.params[f"{head}.w{i}"] = Tensor(
                    rng.standard_normal((sizes[i], sizes[i + 1])) * std * scale,
                    requires_grad=True)
                self.params[f"{head}.b{i}"] = Tensor(np.zeros(sizes[i + 1]),
                                                     requires_grad=True)

    def _mlp(self, h: Tensor, head: str) -> Tensor:
        x = h
        for i in range(3):
            x = ad.add(ad.matmul(x, self.params[f"{head}.w{i}"]), self.params[f"{head}.b{i}"])
            if i < 2:
                x = ad.tanh(x)
        return x

    def logits(self, h: Tensor) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.dim_h:
            raise ShapeError(f"policy input must be (N, {self.dim_h}), got {h.shape}")
        return self._mlp(h, "pi")

    def log_probs(self, h: Tensor) -> Tensor:
        """Row-wise log softmax; the max shift is a constant, which leaves the
        exact gradient unchanged."""
        logits = self.logits(h)
        shift = ad.sub(logits, Tensor(logits.data.max(axis=1, keepdims=True)))
        norm = ad.log(ad.tsum(ad.exp(shift), axis=1, keepdims=True))
        return ad.sub(shift, norm)

    def value(self, h: Tensor) -> Tensor:
        return ad.reshape(self._mlp(h, "vf"), (h.shape[0],))

    # -- rollout-side helpers (no tape) --------------------------------------

    def distribution(self, h_row: np.ndarray) -> np.ndarray:
        logp = self.log_probs(Tensor(h_row[None])).data[0]
        return np.exp(logp)

    def act(self, h_row: np.ndarray, rng: np.random.Generator) -> Tuple[int, float, float]:
        logp_all = self.log_probs(Tensor(h_row[None])).data[0]
        probs = np.exp(logp_all)
        probs = probs / probs.sum()
        action = int(np.searchsorted(np.cumsum(probs), rng.random()))
        action = min(action, self.n_actions - 1)
        return action, float(logp_all[action]), self.value_of(h_row)

    def value_of(self, h_row: np.ndarray) -> float:
        return float(self.value(Tensor(h_row[None])).data[0])

    def act_greedy(self, h_row: np.ndarray) -> int:
        return int(np.argmax(self.logits(Tensor(h_row[None])).data[0]))

    def state_copy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state(self, state) -> None:
        for name, p in self.params.items():
            p.data[...] = state[name]

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {"policy": {"dim_h": self.dim_h, "n_actions": self.n_actions}}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.params, meta=meta)

    @classmethod
    def load(cls, path) -> Tuple["PolicyNet", dict]:
        state, meta = load_checkpoint(path)
        if "policy" not in meta:
            raise ConfigError(f"{path}: checkpoint has no policy configuration")
        net = cls(dim_h=int(meta["policy"]["dim_h"]),
                  n_actions=int(meta["policy"]["n_actions"]))
        net.load_state(state)
        return net, meta


class UniformRandomPolicy:
    """Baseline that ignores the representation entirely."""

    def __init__(self, n_actions: int = gw.N_ACTIONS):
        self.n_actions = n_actions

    def act(self, h_row, rng) -> Tuple[int, float, float]:
        return int(rng.integers(self.n_actions)), -float(np.log(self.n_actions)), 0.0

    def act_greedy(self, h_row) -> int:  # greedy evaluation still randomizes
        raise ConfigError("the random baseline has no greedy mode; evaluate with greedy=False")


# ---------------------------------------------------------------------------
# environment wrapper for policy episodes
# ---------------------------------------------------------------------------

def manhattan(a: Tuple[int, int], b: Tuple[int, int]) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


class ImitationEnv:
    """Episodes against the demonstration's task: the target cell is fixed to
    the demo's and the agent starts near the grid center with its position
    jittered by up to one cell per episode, so 100-episode success rates are
    informative. Success means standing on or next to the target."""

    def __init__(self, config: gw.EnvConfig, target: Tuple[int, int],
                 rng: np.random.Generator, start_jitter: int = 1):
        self.config = config.validate()
        self.target = (int(target[0]), int(target[1]))
        self.rng = rng
        self.start_jitter = start_jitter
        self.state: Optional[gw.WorldState] = None

    def reset(self) -> gw.WorldState:
        c = self.config.grid_size // 2
        j = self.start_jitter
        if j:
            start = (c + int(self.rng.integers(-j, j + 1)),
                     c + int(self.rng.integers(-j, j + 1)))
        else:
            start = (c, c)
        self.state = gw.WorldState(grid_size=self.config.grid_size, agent_pos=start,
                                   agent_heading=gw.NORTH, target_pos=self.target,
                                   step_count=0, horizon=self.config.horizon)
        return self.state

    def step(self, action: int) -> gw.WorldState:
        self.state = gw.step(self.state, action)
        return self.state

    def observe(self) -> np.ndarray:
        return gw.render_fpv(self.state, self.config.resolution)

    def success(self) -> bool:
        return manhattan(self.state.agent_pos, self.target) <= 1

    def done(self) -> bool:
        return self.success() or self.state.step_count >= self.config.horizon


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

_warned_zero_norm = False


def encode_demo(model: DualAE, demo: Trajectory, branch: str, view: int = 0) -> np.ndarray:
    """State representations of the demonstration, (L, dim_h)."""
    frames = demo.fpv if branch == FPV else demo.tpv[view]
    return model.encode(frames.astype(np.float64), branch).h.data


def imitation_reward(agent_h: np.ndarray, demo_h: np.ndarray, t: int,
                     config: RewardConfig) -> float:
    """1 when cos(agent state, demo state at the same timestep) clears the
    threshold, else 0; 0 past the demo's end. A zero-norm representation is a
    collapse signal: reward 0 with a logged warning, never an epsilon."""
    global _warned_zero_norm
    if t >= demo_h.shape[0]:
        return 0.0
    na = float(np.linalg.norm(agent_h))
    nd = float(np.linalg.norm(demo_h[t]))
    if na == 0.0 or nd == 0.0:
        if not _warned_zero_norm:
            log.warning("zero-norm state representation in reward; returning 0")
            _warned_zero_norm = True
        return 0.0
    if config.continuous:
        return -float(np.linalg.norm(agent_h - demo_h[t]))
    cos = float(agent_h @ demo_h[t] / (na * nd))
    return 1.0 if cos >= config.threshold else 0.0


# ---------------------------------------------------------------------------
# rollouts and generalized advantage estimation
# ---------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    h: np.ndarray          # (T, dim_h) policy inputs
    actions: np.ndarray    # (T,)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray    # (T,)
    values: np.ndarray     # (T,)
    dones: np.ndarray      # (T,) episode ended after this transition
    next_value: float      # bootstrap for the truncated tail
    episodes: List[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return self.h.shape[0]


def collect_rollout(env: ImitationEnv, policy, model: DualAE, demo_h: np.ndarray,
                    reward_config: RewardConfig, length: int,
                    rng: np.random.Generator) -> RolloutBuffer:
    """Step the environment for `length` transitions, resetting on episode
    end. The policy consumes only the state part of the latent."""
    h_rows, actions, logps, rewards, values, dones = [], [], [], [], [], []
    episodes: List[dict] = []
    state = env.reset()
    ep = {"reward": 0.0, "steps": 0, "d0": manhattan(state.agent_pos, env.target),
          "dmin": manhattan(state.agent_pos, env.target)}
    h = model.encode(env.observe(), FPV).h.data[0]
    for _ in range(length):
        action, logp, value = policy.act(h, rng)
        state = env.step(action)
        t_ep = state.step_count
        h_next = model.encode(env.observe(), FPV).h.data[0]
        r = imitation_reward(h_next, demo_h, t_ep, reward_config)
        done = env.done()
        h_rows.append(h)
        actions.append(action)
        logps.append(logp)
        rewards.append(r)
        values.append(value)
        dones.append(done)
        ep["reward"] += r
        ep["steps"] += 1
        ep["dmin"] = min(ep["dmin"], manhattan(state.agent_pos, env.target))
        if done:
            ep["success"] = env.success()
            episodes.append(ep)
            state = env.reset()
            ep = {"reward": 0.0, "steps": 0, "d0": manhattan(state.agent_pos, env.target),
                  "dmin": manhattan(state.agent_pos, env.target)}
            h = model.encode(env.observe(), FPV).h.data[0]
        else:
            h = h_next
    if dones[-1]:
        next_value = 0.0
    else:
        next_value = policy.value_of(h) if hasattr(policy, "value_of") else 0.0
    return RolloutBuffer(h=np.asarray(h_rows), actions=np.asarray(actions, dtype=np.int64),
                         log_probs=np.asarray(logps), rewards=np.asarray(rewards),
                         values=np.asarray(values), dones=np.asarray(dones, dtype=bool),
                         next_value=float(next_value), episodes=episodes)


def gae_advantages(buffer: RolloutBuffer, gamma: float, lam: float
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Standard exponentially weighted advantage recursion with episode
    boundaries; returns (advantages, value targets)."""
    n = len(buffer)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if buffer.dones[t] else 1.0
        v_next = buffer.next_value if t == n - 1 else buffer.values[t + 1]
        delta = buffer.rewards[t] + gamma * v_next * nonterminal - buffer.values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + buffer.values


# ---------------------------------------------------------------------------
# the clipped-surrogate update
# ---------------------------------------------------------------------------

def ppo_loss(policy: PolicyNet, h: np.ndarray, actions: np.ndarray,
             logp_old: np.ndarray, advantages: np.ndarray, returns: np.ndarray,
             config: PPOConfig) -> Tuple[Tensor, dict]:
    """Clipped surrogate + value MSE + entropy bonus on one minibatch."""
    n = h.shape[0]
    onehot = np.zeros((n, policy.n_actions))
    onehot[np.arange(n), actions] = 1.0
    logp_all = policy.log_probs(Tensor(h))
    logp = ad.tsum(ad.mul(logp_all, Tensor(onehot)), axis=1)
    ratio = ad.exp(ad.sub(logp, Tensor(logp_old)))
    adv = Tensor(advantages)
    clipped = ad.minimum(ad.maximum(ratio, Tensor(np.full(n, 1.0 - config.clip))),
                         Tensor(np.full(n, 1.0 + config.clip)))
    surrogate = ad.mul(ad.tmean(ad.minimum(ad.mul(ratio, adv), ad.mul(clipped, adv))), -1.0)
    value = policy.value(Tensor(h))
    value_loss = ad.tmean(ad.square(ad.sub(value, Tensor(returns))))
    entropy = ad.mul(ad.tmean(ad.tsum(ad.mul(ad.exp(logp_all), logp_all), axis=1)), -1.0)
    total = ad.sub(ad.add(surrogate, ad.mul(value_loss, config.value_coef)),
                   ad.mul(entropy, config.entropy_coef))
    stats = {
        "surrogate": surrogate.item(), "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": float(np.mean(logp_old - logp.data)),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > config.clip)),
    }
    return total, stats


def ppo_update(policy: PolicyNet, buffer: RolloutBuffer, config: PPOConfig,
               state: AdamState, rng: np.random.Generator) -> dict:
    """Minibatched epochs over one rollout. Advantages are normalized to zero
    mean and unit variance per update. A NaN loss aborts with diagnostics."""
    config.validate()
    adv, returns = gae_advantages(buffer, config.gamma, config.lam)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(buffer)
    stats_acc: List[dict] = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = order[start:start + config.minibatch]
            try:
                with ad.Tape():
                    loss, stats = ppo_loss(policy, buffer.h[idx], buffer.actions[idx],
                                           buffer.log_probs[idx], adv[idx], returns[idx],
                                           config)
                    ad.backward(loss)
            except NumericalError as e:
                raise NumericalError(
                    f"policy update aborted: {e}; minibatch reward mean "
                    f"{buffer.rewards[idx].mean():.4f}, adv range "
                    f"[{adv[idx].min():.3g}, {adv[idx].max():.3g}]") from e
            adam_step(policy.params, state)
            ad.zero_gradients(policy.params.values())
            stats_acc.append(stats)
    keys = ("surrogate", "value_loss", "entropy", "approx_kl", "clip_frac")
    return {k: float(np.mean([s[k] for s in stats_acc])) for k in keys}


@dataclass
class PolicyResult:
    policy: PolicyNet
    stats_rows: List[dict]
    best_update: int
    best_mean_reward: float


def train_policy(model: DualAE, demo: Trajectory, reward_config: RewardConfig,
                 ppo_config: PPOConfig, env_config: gw.EnvConfig, seed: int = 0,
                 demo_view: int = 0, out_dir=None,
                 progress: Optional[Callable[[int, dict], None]] = None,
                 start_jitter: int = 1) -> PolicyResult:
    """Optimize a policy against the demo-derived reward; the representation
    model is frozen throughout. Keeps the update with the best mean episode
    reward seen in its own rollout."""
    reward_config.validate()
    ppo_config.validate()
    demo_h = encode_demo(model, demo, reward_config.demo_branch, view=demo_view)
    target = (int(demo.states[0][3]), int(demo.states[0][4]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xb01]))
    env = ImitationEnv(env_config, target, rng, start_jitter=start_jitter)
    policy = PolicyNet(model.config.dim_h, seed=seed)
    opt = AdamState.for_params(policy.params, lr=ppo_config.lr)
    n_updates = max(1, ppo_config.total_steps // ppo_config.rollout)
    best = (-np.inf, 0, policy.state_copy())
    rows: List[dict] = []
    for update in range(1, n_updates + 1):
        buffer = collect_rollout(env, policy, model, demo_h, reward_config,
                                 ppo_config.rollout, rng)
        stats = ppo_update(policy, buffer, ppo_config, opt, rng)
        ep_rewards = [e["reward"] for e in buffer.episodes] or [0.0]
        ep_succ = [e.get("success", False) for e in buffer.episodes] or [False]
        row = {"update": update, "mean_reward": float(np.mean(ep_rewards)),
               "success_rate": float(np.mean(ep_succ)), **stats}
        rows.append(row)
        if progress is not None:
            progress(update, row)
        if row["mean_reward"] > best[0]:
            best = (row["mean_reward"], update, policy.state_copy())
    policy.load_state(best[2])
    result = PolicyResult(policy=policy, stats_rows=rows, best_update=best[1],
                          best_mean_reward=best[0])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        policy.save(out_dir / "policy.egw",
                    extra_meta={"train": {"seed": seed, "best_update": best[1]}})
        with open(out_dir / "policy_log.csv", "w", newline="") as f:
            cols = ["update", "mean_reward", "success_rate", "approx_kl",
                    "clip_frac", "entropy", "surrogate", "value_loss"]
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for row in rows:
                w.writerow({k: row[k] for k in cols})
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    success_rate: float
    reward_mean: float
    reward_std: float
    rows: List[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["episode", "success", "normalized_reward"])
            w.writeheader()
            for row in self.rows:
                w.writerow(row)


def run_episodes(env: ImitationEnv, act: Callable[[np.ndarray, gw.WorldState], int],
                 model: DualAE, episodes: int) -> EvalReport:
    """Roll `episodes` full episodes with a fixed action rule. The normalized
    reward is the fraction of the initial target distance closed."""
    rows = []
    for ep_i in range(episodes):
        state = env.reset()
        d0 = manhattan(state.agent_pos, env.target)
        dmin = d0
        while not env.done():
            h = model.encode(env.observe(), FPV).h.data[0]
            state = env.step(act(h, state))
            dmin = min(dmin, manhattan(state.agent_pos, env.target))
        rows.append({"episode": ep_i, "success": int(env.success()),
                     "normalized_reward": (d0 - dmin) / d0 if d0 else 1.0})
    succ = float(np.mean([r["success"] for r in rows]))
    rewards = np.array([r["normalized_reward"] for r in rows])
    return EvalReport(success_rate=succ, reward_mean=float(rewards.mean()),
                      reward_std=float(rewards.std()), rows=rows)


def eval_policy(env: ImitationEnv, policy, model: DualAE, episodes: int = 100,
                greedy: bool = True,
                rng: Optional[np.random.Generator] = None) -> EvalReport:
    """Greedy-action evaluation over `episodes` episodes (sampled actions for
    baselines without a greedy mode)."""
    if greedy:
        return run_episodes(env, lambda h, s: policy.act_greedy(h), model, episodes)
    if rng is None:
        raise ConfigError("sampled evaluation needs an rng")
    return run_episodes(env, lambda h, s: policy.act(h, rng)[0], model, episodes)
