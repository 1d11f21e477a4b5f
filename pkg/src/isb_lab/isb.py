"""Reset-state buffers.

A rolling FIFO of visited states feeds a bounded buffer of candidate episode
starts.  Admission filters drop states too close to their episode start,
states from badly performing episodes, and (for racing) states from episodes
that were themselves started from the buffer.  Selection strategies range
from uniform sampling to spherical k-means over observations or learned
embeddings.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvState, state_from_dict, state_to_dict
from .nn import MlpParams, mlp_forward

NOMINAL_START = "nominal-start"
ISB_START = "isb-start"


@dataclass
class StateRecord:
    """One visited state: restorable snapshot plus selection metadata.

    ``steps_to_episode_end`` is known only for states whose episode finished
    inside the same rollout batch; ``batch_tag``/``batch_lane``/``batch_t``
    locate the state in that batch.  ``seq`` is the buffer's insertion
    counter and breaks ties by recency everywhere.
    """

    env_state: EnvState
    observation: np.ndarray
    episode_step: int
    accumulated_reward: float
    init_provenance: str
    is_terminal: bool
    steps_to_episode_end: int | None = None
    batch_tag: int | None = None
    batch_lane: int | None = None
    batch_t: int | None = None
    seq: int = -1


@dataclass
class FilterConfig:
    min_episode_step: int = 15
    require_nonneg_reward: bool = False
    require_nominal_start_trajectory: bool = False

    def __post_init__(self) -> None:
        if self.min_episode_step < 0:
            raise ValueError("min_episode_step must be non-negative")


def passes_filters(rec: StateRecord, filt: FilterConfig) -> bool:
    if rec.episode_step < filt.min_episode_step:
        return False
    if filt.require_nonneg_reward and rec.accumulated_reward < 0.0:
        return False
    if filt.require_nominal_start_trajectory and rec.init_provenance != NOMINAL_START:
        return False
    return True


class _FifoBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.records: deque[StateRecord] = deque()

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: StateRecord) -> None:
        self.records.append(rec)
        while len(self.records) > self.capacity:
            self.records.popleft()


class VisitedStatesBuffer(_FifoBuffer):
    """Rolling pool of candidate states, FIFO-evicted at capacity."""

    instances_created = 0  # instrumentation: baseline runs must never construct one

    def __init__(self, capacity: int):
        super().__init__(capacity)
        VisitedStatesBuffer.instances_created += 1
        self._seq = 0

    def push(self, rec: StateRecord, filt: FilterConfig) -> bool:
        """Append the record iff it passes every enabled filter."""
        if not passes_filters(rec, filt):
            return False
        rec.seq = self._seq
        self._seq += 1
        self._append(rec)
        return True


class InitialStateBuffer(_FifoBuffer):
    """Bounded FIFO of reset candidates refreshed once per rollout phase."""

    instances_created = 0

    def __init__(self, capacity: int):
        super().__init__(capacity)
        InitialStateBuffer.instances_created += 1

    @property
    def entries(self) -> deque[StateRecord]:
        return self.records


def push_visited(buf: VisitedStatesBuffer, rec: StateRecord, filt: FilterConfig) -> bool:
    return buf.push(rec, filt)


def refresh_isb(isb: InitialStateBuffer, selected: list[StateRecord]) -> None:
    for rec in selected:
        isb._append(rec)


def sample_initial(
    isb: InitialStateBuffer | None,
    p: float,
    nominal_reset,
    rng: np.random.Generator,
) -> tuple[EnvState, str]:
    """Mix buffer restarts (probability p) with nominal starts.

    Always draws the mixture coin so stream consumption does not depend on
    buffer occupancy; an empty buffer falls back to the nominal start.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    coin = rng.random()
    if isb is not None and len(isb) > 0 and coin < p:
        rec = isb.records[int(rng.integers(len(isb)))]
        return rec.env_state.copy(), ISB_START
    return nominal_reset(), NOMINAL_START


def records_from_batch(batch) -> list[StateRecord]:
    """Turn every step of a rollout batch into a candidate StateRecord.

    ``steps_to_episode_end`` is filled for states whose episode finishes
    inside the batch and left None otherwise.  Records are ordered
    chronologically (step-major), which defines buffer recency.
    """
    T, E = batch.rewards.shape
    steps_to_end = np.full((T, E), -1)
    for e in range(E):
        nxt = -1
        for t in range(T - 1, -1, -1):
            if batch.dones[t, e]:
                nxt = t
            steps_to_end[t, e] = -1 if nxt < 0 else nxt - t
    records = []
    for t in range(T):
        for e in range(E):
            records.append(
                StateRecord(
                    env_state=batch.snapshots[t][e],
                    observation=batch.obs[t, e].copy(),
                    episode_step=int(batch.episode_steps[t, e]),
                    accumulated_reward=float(batch.accumulated_rewards[t, e]),
                    init_provenance=str(batch.init_provenance[t, e]),
                    is_terminal=bool(batch.dones[t, e]),
                    steps_to_episode_end=None if steps_to_end[t, e] < 0 else int(steps_to_end[t, e]),
                    batch_tag=batch.tag,
                    batch_lane=e,
                    batch_t=t,
                )
            )
    return records


# -- selection strategies -----------------------------------------------------


def select_random(
    buf: VisitedStatesBuffer, n: int, rng: np.random.Generator
) -> list[StateRecord]:
    """Uniform sample without replacement; everything when n >= |buf|."""
    records = list(buf.records)
    if not records:
        return []
    if n >= len(records):
        return records
    idx = rng.choice(len(records), size=n, replace=False)
    return [records[i] for i in idx]


def kmeans_cosine(
    vectors: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 25,
    objective_trace: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Spherical k-means: unit-normalized points, cosine-similarity assignment.

    Seeds greedily (random first center, then farthest point); repairs empty
    clusters by re-seeding at the worst-assigned vector; stops at an
    assignment fixpoint or after ``max_iters``.  The effective k shrinks to
    the number of vectors.  Returns (unit centers, assignments).
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need a non-empty (n, d) vector array")
    if k < 1:
        raise ValueError("k must be positive")
    norms = np.linalg.norm(X, axis=1)
    bad = np.where(norms < 1e-12)[0]
    if bad.size:
        raise ValueError(f"zero-norm vector at index {bad[0]}")
    X = X / norms[:, None]
    n = X.shape[0]
    k = min(k, n)

    # greedy farthest-point seeding
    first = int(rng.integers(n))
    centers = [X[first]]
    best_sim = X @ centers[0]
    while len(centers) < k:
        nxt = int(np.argmin(best_sim))
        centers.append(X[nxt])
        best_sim = np.maximum(best_sim, X @ centers[-1])
    C = np.stack(centers)

    assign = np.full(n, -1)
    for _ in range(max_iters):
        sims = X @ C.T
        new_assign = np.argmax(sims, axis=1)
        if objective_trace is not None:
            objective_trace.append(float(sims[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        own_sim = sims[np.arange(n), assign].copy()
        for c in range(k):
            members = np.where(assign == c)[0]
            if members.size == 0:
                # re-seed at the vector farthest from its current center
                worst = int(np.argmin(own_sim))
                C[c] = X[worst]
                own_sim[worst] = 1.0  # next empty cluster picks a different vector
                continue
            mean = X[members].sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                C[c] = mean / norm
    return C, assign


def cosine_objective(vectors: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    X = np.asarray(vectors, dtype=float)
    X = X / np.linalg.norm(X, axis=1)[:, None]
    return float((X * centers[assign]).sum())


def cluster_nearest_select(
    records: list[StateRecord],
    vectors: np.ndarray,
    n: int,
    k: int,
    rng: np.random.Generator,
) -> list[StateRecord]:
    """Cluster the vectors and pick each cluster's most central members.

    Every cluster contributes floor(n/k) members closest to its center (by
    cosine similarity); the n mod k leftover slots go to the largest
    clusters, one extra each.  Never returns more than its quota from one
    cluster, so the result can be shorter than n when clusters are small.
    """
    if not records:
        return []
    centers, assign = kmeans_cosine(vectors, k, rng)
    k_eff = centers.shape[0]
    X = np.asarray(vectors, dtype=float)
    X = X / np.linalg.norm(X, axis=1)[:, None]
    own_sim = (X * centers[assign]).sum(axis=1)

    base, rem = divmod(n, k_eff)
    sizes = np.bincount(assign, minlength=k_eff)
    order = sorted(range(k_eff), key=lambda c: (-sizes[c], c))
    selected: list[StateRecord] = []
    for rank, c in enumerate(order):
        quota = base + (1 if rank < rem else 0)
        members = np.where(assign == c)[0]
        members = sorted(members, key=lambda i: (-own_sim[i], -records[i].seq))
        selected.extend(records[i] for i in members[:quota])
    return selected


def select_obs(
    buf: VisitedStatesBuffer, n: int, k: int, rng: np.random.Generator
) -> list[StateRecord]:
    """Cluster observation vectors, return per-cluster nearest states."""
    records = list(buf.records)
    if not records:
        return []
    vectors = np.stack([r.observation for r in records])
    return cluster_nearest_select(records, vectors, n, k, rng)


def select_terminal(
    buf: VisitedStatesBuffer, n: int, rng: np.random.Generator, window: int = 5
) -> list[StateRecord]:
    """Uniform sample among states within ``window`` steps of an episode end."""
    eligible = [
        r
        for r in buf.records
        if r.steps_to_episode_end is not None and r.steps_to_episode_end <= window
    ]
    if not eligible:
        return []
    if n >= len(eligible):
        return eligible
    idx = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in idx]


def select_value(
    buf: VisitedStatesBuffer, n: int, value_net: MlpParams
) -> list[StateRecord]:
    """The n records with the highest value prediction, newest first on ties."""
    records = list(buf.records)
    if not records:
        return []
    values = mlp_forward(value_net, np.stack([r.observation for r in records])).ravel()
    order = sorted(range(len(records)), key=lambda i: (-values[i], -records[i].seq))
    return [records[i] for i in order[:n]]


# -- serialization --------------------------------------------------------------


def record_to_dict(rec: StateRecord) -> dict:
    return {
        "env_state": state_to_dict(rec.env_state),
        "observation": rec.observation.tolist(),
        "episode_step": rec.episode_step,
        "accumulated_reward": rec.accumulated_reward,
        "init_provenance": rec.init_provenance,
        "is_terminal": rec.is_terminal,
        "steps_to_episode_end": rec.steps_to_episode_end,
        "seq": rec.seq,
    }


def record_from_dict(payload: dict) -> StateRecord:
    return StateRecord(
        env_state=state_from_dict(payload["env_state"]),
        observation=np.asarray(payload["observation"], dtype=float),
        episode_step=int(payload["episode_step"]),
        accumulated_reward=float(payload["accumulated_reward"]),
        init_provenance=payload["init_provenance"],
        is_terminal=bool(payload["is_terminal"]),
        steps_to_episode_end=payload["steps_to_episode_end"],
        seq=int(payload["seq"]),
    )


def dump_records(path: str | Path, records: list[StateRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")


def load_records(path: str | Path) -> list[StateRecord]:
    with open(path) as fh:
        return [record_from_dict(json.loads(line)) for line in fh if line.strip()]
