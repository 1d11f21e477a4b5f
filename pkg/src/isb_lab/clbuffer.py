"""Contrastive selection of reset states.

A fixed set of states from the visited-states buffer is tracked through the
gradient steps of one update phase.  Each state's value improvement is
estimated from its trajectory tail: the discounted sum of TD residuals
recomputed with the post-step value network (the lambda-weighted advantage
at the state itself).  The best and worst improvers become positive and
negative sets for a soft-nearest-neighbor loss that trains a projection
network; reset candidates are then chosen by spherical k-means in the
learned embedding space, which groups states by learning experience rather
than by raw observation similarity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .isb import StateRecord, VisitedStatesBuffer, cluster_nearest_select
from .nn import AdamState, MlpGrads, MlpParams, adam_step, init_mlp, mlp_backward, mlp_forward
from .ppo import GaeConfig, RolloutBatch


@dataclass
class ContrastiveConfig:
    top_k: int = 16
    temperature: float = 0.1
    embedding_dim: int = 32
    train_steps_per_update: int = 8
    tracked_count: int = 128
    hidden: tuple[int, ...] = (64, 64, 64)
    learning_rate: float = 1e-3
    aggregate: str = "mean"  # how per-gradient-step estimates combine: mean|last|sum

    def __post_init__(self) -> None:
        if self.top_k < 1 or self.tracked_count < 1:
            raise ValueError("top_k and tracked_count must be positive")
        if 2 * self.top_k > self.tracked_count:
            raise ValueError("top_k must not exceed tracked_count / 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.embedding_dim < 1 or self.train_steps_per_update < 0:
            raise ValueError("bad embedding_dim or train_steps_per_update")
        if self.aggregate not in ("mean", "last", "sum"):
            raise ValueError(f"unknown aggregate mode {self.aggregate!r}")


def make_embedding_net(obs_dim: int, cfg: ContrastiveConfig, rng: np.random.Generator) -> MlpParams:
    return init_mlp([obs_dim, *cfg.hidden, cfg.embedding_dim], rng)


@dataclass
class TrackedState:
    """A buffer record plus its trajectory tail inside the current batch."""

    record: StateRecord
    lane: int
    start: int
    stop: int  # inclusive; tail ends at the first done flag or the batch horizon
    delta_v: float = 0.0
    degenerate: bool = False


def track_states(
    buf: VisitedStatesBuffer,
    batch: RolloutBatch,
    count: int,
    rng: np.random.Generator,
) -> list[TrackedState]:
    """Uniformly pick buffer records that occur in this batch, with tails."""
    candidates = [
        r for r in buf.records if r.batch_tag == batch.tag and r.batch_lane is not None
    ]
    if len(candidates) > count:
        idx = rng.choice(len(candidates), size=count, replace=False)
        candidates = [candidates[i] for i in idx]
    tracked = []
    for rec in candidates:
        lane, t0 = rec.batch_lane, rec.batch_t
        stop = batch.T - 1
        for t in range(t0, batch.T):
            if batch.dones[t, lane]:
                stop = t
                break
        tracked.append(TrackedState(rec, lane, t0, stop))
    return tracked


def estimate_delta_v(
    tracked: TrackedState,
    value_net_after: MlpParams,
    batch: RolloutBatch,
    cfg: GaeConfig,
) -> float:
    """Value-improvement estimate from one trajectory tail.

    TD residuals along the tail are recomputed with ``value_net_after`` and
    combined as the lambda-weighted advantage at the tracked state: the sum
    of (gamma*lam)^t * delta_t, bootstrapping past the tail end unless the
    episode terminated there.
    """
    lane, t0, t1 = tracked.lane, tracked.start, tracked.stop
    if t1 < t0:
        tracked.degenerate = True
        return 0.0
    obs = batch.obs[t0: t1 + 1, lane]
    rewards = batch.rewards[t0: t1 + 1, lane]
    v = mlp_forward(value_net_after, obs).ravel()
    if batch.dones[t1, lane]:
        boot = 0.0
    elif t1 + 1 < batch.T:
        boot = float(mlp_forward(value_net_after, batch.obs[t1 + 1, lane])[0])
    else:
        boot = float(mlp_forward(value_net_after, batch.final_obs[lane])[0])
    v_next = np.append(v[1:], boot)
    deltas = rewards + cfg.gamma * v_next - v
    weights = (cfg.gamma * cfg.lam) ** np.arange(deltas.shape[0])
    return float(weights @ deltas)


@dataclass
class TailSlice:
    offset: int
    length: int
    has_bootstrap: bool


def build_tail_matrix(
    tracked: list[TrackedState], batch: RolloutBatch
) -> tuple[np.ndarray, list[TailSlice]]:
    """Stack all tail observations (plus bootstrap rows) into one matrix.

    Passing this matrix as the tracked set of an update phase yields value
    snapshots from which per-gradient-step improvement estimates can be
    computed without keeping network copies.
    """
    rows: list[np.ndarray] = []
    infos: list[TailSlice] = []
    for ts in tracked:
        lane, t0, t1 = ts.lane, ts.start, ts.stop
        off = len(rows)
        rows.extend(batch.obs[t0: t1 + 1, lane])
        has_boot = not bool(batch.dones[t1, lane])
        if has_boot:
            rows.append(batch.obs[t1 + 1, lane] if t1 + 1 < batch.T else batch.final_obs[lane])
        infos.append(TailSlice(off, t1 - t0 + 1, has_boot))
    obs_dim = batch.obs.shape[-1]
    matrix = np.stack(rows) if rows else np.zeros((0, obs_dim))
    return matrix, infos


def delta_v_from_values(
    tracked: TrackedState,
    info: TailSlice,
    values_row: np.ndarray,
    batch: RolloutBatch,
    cfg: GaeConfig,
) -> float:
    """Same estimate as ``estimate_delta_v`` but from precomputed values."""
    v = values_row[info.offset: info.offset + info.length]
    boot = values_row[info.offset + info.length] if info.has_bootstrap else 0.0
    rewards = batch.rewards[tracked.start: tracked.stop + 1, tracked.lane]
    v_next = np.append(v[1:], boot)
    deltas = rewards + cfg.gamma * v_next - v
    weights = (cfg.gamma * cfg.lam) ** np.arange(deltas.shape[0])
    return float(weights @ deltas)


def assign_delta_v(
    tracked: list[TrackedState],
    infos: list[TailSlice],
    value_snapshots: np.ndarray,
    batch: RolloutBatch,
    cfg: GaeConfig,
    aggregate: str = "mean",
) -> None:
    """Set each tracked state's delta_v from per-gradient-step snapshots."""
    steps = value_snapshots.shape[0]
    for ts, info in zip(tracked, infos):
        if steps == 0:
            ts.delta_v = 0.0
            ts.degenerate = True
            continue
        estimates = np.array(
            [delta_v_from_values(ts, info, value_snapshots[g], batch, cfg) for g in range(steps)]
        )
        if aggregate == "mean":
            ts.delta_v = float(estimates.mean())
        elif aggregate == "last":
            ts.delta_v = float(estimates[-1])
        else:
            ts.delta_v = float(estimates.sum())


def build_pos_neg(
    tracked: list[TrackedState], top_k: int
) -> tuple[list[TrackedState], list[TrackedState]]:
    """Highest-improvement states as positives, lowest as negatives.

    Ties break by recency.  When fewer than 2*top_k states are available the
    effective k shrinks with a warning; the sets never overlap.
    """
    k = min(top_k, len(tracked) // 2)
    if k < top_k:
        warnings.warn(
            f"only {len(tracked)} tracked states; reducing top_k from {top_k} to {k}",
            stacklevel=2,
        )
    if k == 0:
        return [], []
    order = sorted(tracked, key=lambda t: (t.delta_v, t.record.seq), reverse=True)
    return order[:k], order[-k:]


def soft_nn_from_distances(
    pos_d: np.ndarray, neg_d: np.ndarray, temperature: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Soft-nearest-neighbor loss over precomputed anchor distances.

    Returns the loss and its gradient with respect to each positive and
    negative distance.  Numerically shift-invariant via log-sum-exp.
    """
    e_pos = -pos_d / temperature
    e_neg = -neg_d / temperature
    shift = max(e_pos.max(), e_neg.max()) if len(e_neg) else e_pos.max()
    w_pos = np.exp(e_pos - shift)
    w_neg = np.exp(e_neg - shift) if len(e_neg) else np.zeros(0)
    num = w_pos.sum()
    den = num + w_neg.sum()
    loss = float(np.log(den) - np.log(num))
    # dL/de = softmax(den) - softmax(num); de/dd = -1/temperature
    d_pos = (w_pos / num - w_pos / den) / temperature
    d_neg = (-w_neg / den) / temperature if len(w_neg) else np.zeros(0)
    return loss, d_pos, d_neg


def contrastive_loss(
    net: MlpParams,
    anchor_index: int,
    pos_obs: np.ndarray,
    neg_obs: np.ndarray,
    temperature: float,
) -> tuple[float, MlpGrads, dict]:
    """Soft-nearest-neighbor loss of one anchor against its P/N sets.

    ``pos_obs`` contains the anchor at ``anchor_index``; the anchor is
    excluded from both the numerator and the denominator self-term.  The
    pairwise measure is cosine distance (1 - cosine similarity) between
    projected embeddings; gradients flow through the projection for every
    involved observation.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    pos_obs = np.atleast_2d(np.asarray(pos_obs, dtype=float))
    neg_obs = (
        np.atleast_2d(np.asarray(neg_obs, dtype=float))
        if len(neg_obs)
        else np.zeros((0, pos_obs.shape[1]))
    )
    kp, kn = pos_obs.shape[0], neg_obs.shape[0]
    if not (0 <= anchor_index < kp):
        raise ValueError("anchor_index outside the positive set")
    if kp < 2:
        raise ValueError("positive set needs at least one non-anchor member")

    stack = np.vstack([pos_obs, neg_obs])
    X = mlp_forward(net, stack)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms < 1e-12):
        raise FloatingPointError("zero-norm embedding in contrastive loss")

    xa = X[anchor_index]
    na = norms[anchor_index]
    pos_idx = np.array([i for i in range(kp) if i != anchor_index])
    neg_idx = np.arange(kp, kp + kn)
    cos = (X @ xa) / (norms * na)
    dist = 1.0 - cos
    loss, d_pos, d_neg = soft_nn_from_distances(dist[pos_idx], dist[neg_idx], temperature)

    embed_grad = np.zeros_like(X)
    others = np.concatenate([pos_idx, neg_idx])
    d_all = np.concatenate([d_pos, d_neg])
    for j, dldg in zip(others, d_all):
        xj, nj = X[j], norms[j]
        # g = 1 - cos  =>  dg/dx = -dcos/dx
        embed_grad[j] += dldg * -(xa / (na * nj) - cos[j] * xj / (nj * nj))
        embed_grad[anchor_index] += dldg * -(xj / (na * nj) - cos[j] * xa / (na * na))

    grads, _ = mlp_backward(net, stack, embed_grad)
    info = {
        "numerator_terms": kp - 1,
        "mean_pos_distance": float(dist[pos_idx].mean()),
        "mean_neg_distance": float(dist[neg_idx].mean()) if kn else 0.0,
    }
    return loss, grads, info


def train_embedding(
    net: MlpParams,
    tracked: list[TrackedState],
    cfg: ContrastiveConfig,
    opt: AdamState,
    rng: np.random.Generator,
) -> tuple[MlpParams, AdamState, dict]:
    """Run the configured number of contrastive steps, fresh anchor each."""
    pos, neg = build_pos_neg(tracked, cfg.top_k)
    info: dict = {"losses": [], "pos_delta_range": None, "neg_delta_range": None}
    if len(pos) < 2:
        return net, opt, info
    info["pos_delta_range"] = (min(t.delta_v for t in pos), max(t.delta_v for t in pos))
    info["neg_delta_range"] = (min(t.delta_v for t in neg), max(t.delta_v for t in neg))
    pos_obs = np.stack([t.record.observation for t in pos])
    neg_obs = np.stack([t.record.observation for t in neg])
    for _ in range(cfg.train_steps_per_update):
        anchor = int(rng.integers(len(pos)))
        loss, grads, _ = contrastive_loss(net, anchor, pos_obs, neg_obs, cfg.temperature)
        net, opt = adam_step(net, grads, opt)
        info["losses"].append(loss)
    return net, opt, info


def select_cl(
    buf: VisitedStatesBuffer,
    n: int,
    k: int,
    net: MlpParams,
    rng: np.random.Generator,
) -> list[StateRecord]:
    """Per-cluster nearest states, clustered in the learned embedding space."""
    records = list(buf.records)
    if not records:
        return []
    embeddings = mlp_forward(net, np.stack([r.observation for r in records]))
    return cluster_nearest_select(records, embeddings, n, k, rng)
