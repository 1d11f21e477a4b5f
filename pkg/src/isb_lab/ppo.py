"""On-policy trainer: vectorized rollout collection, generalized advantage
estimation, and clipped-surrogate policy updates on the dense-network stack.

The policy is a diagonal Gaussian with a state-independent learned log-std.
Update phases can record the value network's predictions on a caller-chosen
observation set after every gradient step; the contrastive buffer consumes
those snapshots to rank states by value improvement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import Env, EnvState
from .nn import (
    AdamState,
    MlpParams,
    VectorAdam,
    adam_init,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must lie in [0, 1]")


@dataclass
class PpoConfig:
    gae: GaeConfig = field(default_factory=GaeConfig)
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    ent_coef: float = 0.0
    hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self) -> None:
        if not (0.0 < self.clip_ratio < 1.0):
            raise ValueError("clip_ratio must lie in (0, 1)")
        if self.epochs < 1 or self.minibatches < 1:
            raise ValueError("epochs and minibatches must be positive")


@dataclass
class GaussianPolicy:
    net: MlpParams
    log_std: np.ndarray

    @property
    def action_dim(self) -> int:
        return self.net.output_dim


def make_policy(
    obs_dim: int,
    act_dim: int,
    hidden: tuple[int, ...],
    rng: np.random.Generator,
    init_log_std: float = math.log(0.5),
) -> GaussianPolicy:
    net = init_mlp([obs_dim, *hidden, act_dim], rng)
    return GaussianPolicy(net, np.full(act_dim, init_log_std))


def make_value_net(obs_dim: int, hidden: tuple[int, ...], rng: np.random.Generator) -> MlpParams:
    return init_mlp([obs_dim, *hidden, 1], rng)


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Row-wise log density of a diagonal Gaussian."""
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * LOG_2PI * actions.shape[-1]


def policy_entropy(log_std: np.ndarray) -> float:
    return float(log_std.sum() + 0.5 * log_std.shape[0] * (1.0 + LOG_2PI))


@dataclass
class RolloutBatch:
    """T x num_envs trajectory arrays plus a restorable snapshot per step.

    ``init_provenance`` tags every step with how its episode was started
    (``nominal-start`` or ``isb-start``); ``final_obs`` is the observation
    after the last step per lane, used to bootstrap value targets.
    """

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    snapshots: list[list[EnvState]]
    episode_steps: np.ndarray
    accumulated_rewards: np.ndarray
    init_provenance: np.ndarray
    final_obs: np.ndarray
    tag: int = 0

    @property
    def T(self) -> int:
        return self.obs.shape[0]

    @property
    def num_envs(self) -> int:
        return self.obs.shape[1]


def init_lanes(envs: list[Env], reset_sampler) -> list[str]:
    """Reset every lane through the sampler; returns per-lane provenance tags."""
    provenance = []
    for e, env in enumerate(envs):
        state, prov = reset_sampler(e)
        env.reset(state)
        provenance.append(prov)
    return provenance


def collect_rollout(
    policy: GaussianPolicy,
    value_net: MlpParams,
    envs: list[Env],
    T: int,
    reset_sampler,
    lane_provenance: list[str],
    action_rng: np.random.Generator,
    tag: int = 0,
) -> RolloutBatch:
    """Step every lane exactly T times, re-initializing finished episodes.

    ``reset_sampler(lane) -> (EnvState, provenance)`` decides each new
    episode's start.  ``lane_provenance`` carries the tag of each lane's
    current episode across phases and is updated in place.
    """
    E = len(envs)
    obs_dim, act_dim = envs[0].observation_dim, envs[0].action_dim
    obs = np.empty((T, E, obs_dim))
    actions = np.empty((T, E, act_dim))
    log_probs = np.empty((T, E))
    rewards = np.empty((T, E))
    dones = np.zeros((T, E), dtype=bool)
    values = np.empty((T, E))
    episode_steps = np.empty((T, E), dtype=int)
    accumulated = np.empty((T, E))
    provenance = np.empty((T, E), dtype=object)
    snapshots: list[list[EnvState]] = []

    current = np.stack([env.observe(env.snapshot()) for env in envs])
    std = np.exp(policy.log_std)
    for t in range(T):
        snaps = [env.snapshot() for env in envs]
        snapshots.append(snaps)
        obs[t] = current
        values[t] = mlp_forward(value_net, current).ravel()
        mean = mlp_forward(policy.net, current)
        acts = mean + std * action_rng.standard_normal((E, act_dim))
        actions[t] = acts
        log_probs[t] = gaussian_log_prob(acts, mean, policy.log_std)
        for e, env in enumerate(envs):
            episode_steps[t, e] = snaps[e].episode_step
            accumulated[t, e] = snaps[e].accumulated_reward
            provenance[t, e] = lane_provenance[e]
            res = env.step(acts[e])
            rewards[t, e] = res.reward
            dones[t, e] = res.done
            if res.done:
                state, prov = reset_sampler(e)
                current[e] = env.reset(state)
                lane_provenance[e] = prov
            else:
                current[e] = res.observation
    return RolloutBatch(
        obs, actions, log_probs, rewards, dones, values, snapshots,
        episode_steps, accumulated, provenance, current.copy(), tag,
    )


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value,
    cfg: GaeConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard GAE(gamma, lam) over (T,) or (T, E) arrays.

    ``bootstrap_value`` is the value prediction for the state after the last
    step; episode boundaries (done flags) cut both the bootstrap and the
    recursion.  Returns (advantages, returns) with returns = adv + values.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=bool)
    squeeze = r.ndim == 1
    if squeeze:
        r, v, d = r[:, None], v[:, None], d[:, None]
    boot = np.atleast_1d(np.asarray(bootstrap_value, dtype=float))
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v)) and np.all(np.isfinite(boot))):
        raise FloatingPointError("non-finite inputs to compute_gae")
    if r.shape != v.shape or r.shape != d.shape or boot.shape[0] != r.shape[1]:
        raise ValueError("rewards, values, dones and bootstrap shapes do not match")

    T = r.shape[0]
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1])
    for t in range(T - 1, -1, -1):
        next_v = boot if t == T - 1 else v[t + 1]
        nonterminal = 1.0 - d[t]
        delta = r[t] + cfg.gamma * next_v * nonterminal - v[t]
        last = delta + cfg.gamma * cfg.lam * nonterminal * last
        adv[t] = last
    ret = adv + v
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero-mean unit-std (population) normalization over the whole batch."""
    mean = adv.mean()
    std = adv.std()
    if std < 1e-12:
        return adv - mean
    return (adv - mean) / std


@dataclass
class UpdateLog:
    """Per-gradient-step diagnostics of one update phase."""

    policy_losses: list[float] = field(default_factory=list)
    value_losses: list[float] = field(default_factory=list)
    entropies: list[float] = field(default_factory=list)
    clip_fractions: list[float] = field(default_factory=list)
    value_snapshots: np.ndarray | None = None  # (steps, len(tracked_obs))

    @property
    def gradient_steps(self) -> int:
        return len(self.policy_losses)


class PpoTrainer:
    """Owns the policy/value parameters and their Adam states."""

    def __init__(self, policy: GaussianPolicy, value_net: MlpParams, cfg: PpoConfig):
        self.policy = policy
        self.value_net = value_net
        self.cfg = cfg
        self.policy_opt = adam_init(policy.net, cfg.policy_lr)
        self.log_std_opt = VectorAdam.create(policy.log_std.shape, cfg.policy_lr)
        self.value_opt = adam_init(value_net, cfg.value_lr)

    def update(
        self,
        batch: RolloutBatch,
        advantages: np.ndarray,
        returns: np.ndarray,
        shuffle_rng: np.random.Generator,
        tracked_obs: np.ndarray | None = None,
    ) -> UpdateLog:
        """Clipped-surrogate PPO epochs over shuffled minibatches.

        ``advantages`` must already be normalized.  When ``tracked_obs`` is
        given, the value net's predictions on it are recorded after every
        gradient step.
        """
        cfg = self.cfg
        obs = batch.obs.reshape(-1, batch.obs.shape[-1])
        acts = batch.actions.reshape(-1, batch.actions.shape[-1])
        old_logp = batch.log_probs.ravel()
        adv = np.asarray(advantages, dtype=float).ravel()
        ret = np.asarray(returns, dtype=float).ravel()
        n = obs.shape[0]
        log = UpdateLog()
        snapshots: list[np.ndarray] = []

        for epoch in range(cfg.epochs):
            perm = shuffle_rng.permutation(n)
            bounds = np.linspace(0, n, cfg.minibatches + 1).astype(int)
            for m in range(cfg.minibatches):
                idx = perm[bounds[m]: bounds[m + 1]]
                if idx.size == 0:
                    continue
                pol_loss, v_loss, clip_frac = self._gradient_step(
                    obs[idx], acts[idx], old_logp[idx], adv[idx], ret[idx]
                )
                if not (math.isfinite(pol_loss) and math.isfinite(v_loss)):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} minibatch {m}: "
                        f"policy={pol_loss} value={v_loss}"
                    )
                log.policy_losses.append(pol_loss)
                log.value_losses.append(v_loss)
                log.entropies.append(policy_entropy(self.policy.log_std))
                log.clip_fractions.append(clip_frac)
                if tracked_obs is not None and len(tracked_obs):
                    snapshots.append(mlp_forward(self.value_net, tracked_obs).ravel())
        if tracked_obs is not None:
            log.value_snapshots = (
                np.stack(snapshots) if snapshots else np.zeros((0, len(tracked_obs)))
            )
        return log

    def _gradient_step(self, o, a, old_logp, adv, ret) -> tuple[float, float, float]:
        cfg = self.cfg
        b = o.shape[0]
        mean = mlp_forward(self.policy.net, o)
        std = np.exp(self.policy.log_std)
        var = std * std
        logp = gaussian_log_prob(a, mean, self.policy.log_std)
        ratio = np.exp(logp - old_logp)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv
        pol_loss = -float(np.minimum(unclipped, clipped).mean())

        # gradient flows through the ratio only where the unclipped branch
        # attains the min; the clipped branch is constant in the parameters
        use_unclipped = unclipped <= clipped
        dlogp = np.where(use_unclipped, -unclipped / b, 0.0)
        mean_grad = dlogp[:, None] * (a - mean) / var
        net_grads, _ = mlp_backward(self.policy.net, o, mean_grad)
        log_std_grad = (dlogp[:, None] * ((a - mean) ** 2 / var - 1.0)).sum(axis=0)
        log_std_grad -= cfg.ent_coef
        self.policy.net, self.policy_opt = adam_step(self.policy.net, net_grads, self.policy_opt)
        self.policy.log_std = self.log_std_opt.step(self.policy.log_std, log_std_grad)

        vpred = mlp_forward(self.value_net, o).ravel()
        v_err = vpred - ret
        v_loss = 0.5 * float((v_err * v_err).mean())
        v_grads, _ = mlp_backward(self.value_net, o, (v_err / b)[:, None])
        self.value_net, self.value_opt = adam_step(self.value_net, v_grads, self.value_opt)

        clip_frac = float((np.abs(ratio - 1.0) > cfg.clip_ratio).mean())
        return pol_loss, v_loss, clip_frac


def evaluate_loss(
    policy: GaussianPolicy,
    value_net: MlpParams,
    batch: RolloutBatch,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
) -> float:
    """Combined clipped-surrogate + value loss on the full batch."""
    obs = batch.obs.reshape(-1, batch.obs.shape[-1])
    acts = batch.actions.reshape(-1, batch.actions.shape[-1])
    old_logp = batch.log_probs.ravel()
    adv = np.asarray(advantages, dtype=float).ravel()
    ret = np.asarray(returns, dtype=float).ravel()
    mean = mlp_forward(policy.net, obs)
    logp = gaussian_log_prob(acts, mean, policy.log_std)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv
    pol = -float(np.minimum(ratio * adv, clipped).mean())
    vpred = mlp_forward(value_net, obs).ravel()
    val = 0.5 * float(((vpred - ret) ** 2).mean())
    return pol + val - cfg.ent_coef * policy_entropy(policy.log_std)


@dataclass
class EvalResult:
    per_init: list[float]
    mean: float
    causes: list[str]

    @property
    def successes(self) -> list[bool]:
        return [c == "goal" for c in self.causes]


def evaluate_policy(
    policy: GaussianPolicy, env: Env, init_states: list[EnvState], episodes: int = 1
) -> EvalResult:
    """Deterministic (mean-action) evaluation from each given start state."""
    per_init, causes = [], []
    for init in init_states:
        total = 0.0
        cause = "none"
        for _ in range(episodes):
            obs = env.reset(init)
            ep = 0.0
            while True:
                action = mlp_forward(policy.net, obs)
                res = env.step(action)
                ep += res.reward
                obs = res.observation
                if res.done:
                    cause = res.termination_cause
                    break
            total += ep
        per_init.append(total / episodes)
        causes.append(cause)
    return EvalResult(per_init, float(np.mean(per_init)), causes)
