"""Restorable proxy tasks.

Two desk-scale environments with a shared protocol:

* ``LocomotionEnv`` — a 2-D point mass tracking velocity commands on a grid
  of terrain tiles (flat, rough, up/down slopes, discrete steps).  Terrain
  shapes drag, actuation efficiency and a gravity-like pull along the local
  height gradient; crossing a large height change at speed is a crash.
* ``RacingEnv`` — a planar thrust/turn vehicle lapping an ordered sequence
  of gates on a circular track with a crash corridor.

Both expose ``snapshot``/``restore`` so that any visited state can later be
used as an episode start, and transitions are a pure function of
(state, action), which makes restored trajectories replay exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TERRAIN_TYPES = ("flat", "rough", "up_slope", "down_slope", "steps")

# locomotion constants
LOCO_DT = 0.05
LOCO_ACTION_MAX = 3.0
TRACK_SIGMA_SQ = 0.25
ACTION_COST = 0.005
CRASH_PENALTY = 10.0
CLIMB_LIMIT = 0.12  # |height change| per step beyond which speed matters
SAFE_SPEED = 0.8  # below this, big height changes are absorbed
GRAVITY_PULL = 3.0
GRAD_EPS = 0.3
GRAD_MAX = 0.8
# per terrain type: (drag, actuation efficiency)
TERRAIN_DYNAMICS = {
    "flat": (0.5, 1.0),
    "rough": (1.2, 0.65),
    "up_slope": (0.6, 0.9),
    "down_slope": (0.6, 0.9),
    "steps": (0.9, 0.8),
}
DEFAULT_LAYOUT = [
    ["steps", "rough", "up_slope", "rough", "steps"],
    ["down_slope", "steps", "rough", "down_slope", "up_slope"],
    ["up_slope", "rough", "flat", "rough", "down_slope"],
    ["down_slope", "up_slope", "steps", "up_slope", "rough"],
    ["steps", "rough", "down_slope", "rough", "steps"],
]

# racing constants
RACE_DT = 0.05
THRUST_ACCEL = 4.0
RACE_DRAG = 0.35
TURN_RATE_MAX = 2.5
TURN_LAG = 0.15
PROGRESS_COEF = 1.0
GATE_BONUS = 3.0
LAP_BONUS = 10.0
RACE_CRASH_PENALTY = 5.0


@dataclass
class EnvState:
    """Restorable snapshot: dynamics state plus episode bookkeeping.

    ``command`` is the locomotion velocity target; ``next_gate`` is the
    racing gate index.  ``episode_step`` and ``accumulated_reward`` travel
    with the state, so an episode started from a stored snapshot continues
    that snapshot's counters.
    """

    task: str
    position: np.ndarray
    velocity: np.ndarray
    command: np.ndarray | None
    next_gate: int | None
    episode_step: int
    accumulated_reward: float

    def copy(self) -> "EnvState":
        return EnvState(
            self.task,
            self.position.copy(),
            self.velocity.copy(),
            None if self.command is None else self.command.copy(),
            self.next_gate,
            self.episode_step,
            self.accumulated_reward,
        )


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    termination_cause: str  # timeout | crash | goal | none


def state_to_dict(state: EnvState) -> dict:
    return {
        "task": state.task,
        "position": state.position.tolist(),
        "velocity": state.velocity.tolist(),
        "command": None if state.command is None else state.command.tolist(),
        "next_gate": state.next_gate,
        "episode_step": state.episode_step,
        "accumulated_reward": state.accumulated_reward,
    }


def state_from_dict(payload: dict) -> EnvState:
    return EnvState(
        payload["task"],
        np.asarray(payload["position"], dtype=float),
        np.asarray(payload["velocity"], dtype=float),
        None if payload["command"] is None else np.asarray(payload["command"], dtype=float),
        payload["next_gate"],
        int(payload["episode_step"]),
        float(payload["accumulated_reward"]),
    )


def dump_trajectory(path: str | Path, rows: list[dict]) -> None:
    """Write one JSON transition per line."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


class Env:
    """Common protocol: reset/step/snapshot/restore plus a pure observation map."""

    task: str = ""
    observation_dim: int = 0
    action_dim: int = 0
    max_step_reward: float = 0.0  # documented per-step |reward| bound

    def __init__(self, horizon: int, rng: np.random.Generator):
        self.horizon = int(horizon)
        self.rng = rng
        self._state: EnvState | None = None
        self._done = False

    # -- protocol ---------------------------------------------------------
    def reset(self, init: EnvState | None = None) -> np.ndarray:
        self.restore(init.copy() if init is not None else self.nominal_state())
        return self.observe(self._state)

    def restore(self, state: EnvState) -> None:
        if state.task != self.task:
            raise ValueError(f"state belongs to task {state.task!r}, env is {self.task!r}")
        self._state = state.copy()
        self._done = False

    def snapshot(self) -> EnvState:
        if self._state is None:
            raise RuntimeError("snapshot() before reset()")
        return self._state.copy()

    def step(self, action: np.ndarray) -> StepResult:
        raise NotImplementedError

    def observe(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def nominal_state(self) -> EnvState:
        """Draw a fresh start state from the task's nominal distribution."""
        raise NotImplementedError

    def terrain_centers(self) -> list[EnvState]:
        raise NotImplementedError(f"terrain_centers is not supported for task {self.task!r}")

    # -- helpers ----------------------------------------------------------
    def _require_active(self, action) -> np.ndarray:
        if self._state is None:
            raise RuntimeError("step() before reset()")
        if self._done:
            raise RuntimeError("step() after episode end; reset the environment first")
        a = np.asarray(action, dtype=float)
        if a.shape != (self.action_dim,):
            raise ValueError(f"action shape {a.shape} != ({self.action_dim},)")
        return a


class LocomotionEnv(Env):
    """Point mass following velocity commands across a terrain tile grid."""

    task = "locomotion"
    action_dim = 2
    max_step_reward = 12.0

    OBS_OFFSETS = [
        (-0.5, -0.5), (-0.5, 0.0), (-0.5, 0.5), (0.0, -0.5),
        (0.0, 0.5), (0.5, -0.5), (0.5, 0.0), (0.5, 0.5),
    ]

    def __init__(
        self,
        rng: np.random.Generator,
        horizon: int = 512,
        tile_size: float = 6.0,
        layout: list[list[str]] | None = None,
        spawn_noise: float = 1.0,
        command_speed_range: tuple[float, float] = (0.3, 1.2),
        prior_init: bool = False,
    ):
        super().__init__(horizon, rng)
        self.tile_size = float(tile_size)
        self.layout = layout if layout is not None else [row[:] for row in DEFAULT_LAYOUT]
        rows = len(self.layout)
        if any(len(r) != rows for r in self.layout):
            raise ValueError("terrain layout must be square")
        for row in self.layout:
            for t in row:
                if t not in TERRAIN_TYPES:
                    raise ValueError(f"unknown terrain type {t!r}")
        self.grid = rows
        self.world_half = self.grid * self.tile_size / 2.0
        self.spawn_noise = float(spawn_noise)
        self.command_speed_range = command_speed_range
        self.prior_init = bool(prior_init)
        self.observation_dim = 5 + len(self.OBS_OFFSETS)

    # -- terrain ----------------------------------------------------------
    def _tile_index(self, x: float, y: float) -> tuple[int, int]:
        j = int((x + self.world_half) // self.tile_size)
        i = int((y + self.world_half) // self.tile_size)
        return min(max(i, 0), self.grid - 1), min(max(j, 0), self.grid - 1)

    def tile_type(self, x: float, y: float) -> str:
        i, j = self._tile_index(x, y)
        return self.layout[i][j]

    def height(self, x: float, y: float) -> float:
        i, j = self._tile_index(x, y)
        t = self.tile_size
        u = x + self.world_half - j * t
        v = y + self.world_half - i * t
        kind = self.layout[i][j]
        if kind == "flat":
            return 0.0
        # window fades every profile to zero at tile borders, keeping the
        # heightfield continuous across tiles
        win = (4.0 * u * (t - u) / (t * t)) * (4.0 * v * (t - v) / (t * t))
        if win <= 0.0:
            return 0.0
        if kind == "rough":
            return 0.12 * win * math.sin(2.1 * x) * math.cos(2.7 * y)
        if kind == "up_slope":
            return 0.4 * (u - t / 2.0) * win
        if kind == "down_slope":
            return -0.4 * (u - t / 2.0) * win
        # steps
        return 0.16 * math.floor((u - t / 2.0) / 0.45) * win

    def _height_gradient(self, x: float, y: float) -> tuple[float, float]:
        gx = (self.height(x + GRAD_EPS, y) - self.height(x - GRAD_EPS, y)) / (2 * GRAD_EPS)
        gy = (self.height(x, y + GRAD_EPS, ) - self.height(x, y - GRAD_EPS)) / (2 * GRAD_EPS)
        norm = math.hypot(gx, gy)
        if norm > GRAD_MAX:
            gx, gy = gx * GRAD_MAX / norm, gy * GRAD_MAX / norm
        return gx, gy

    # -- protocol ---------------------------------------------------------
    def nominal_state(self) -> EnvState:
        if self.prior_init:
            centers = self.terrain_centers()
            base = centers[int(self.rng.integers(len(centers)))]
            pos = base.position + self.rng.uniform(-0.5, 0.5, size=2)
        else:
            pos = self.rng.uniform(-self.spawn_noise, self.spawn_noise, size=2)
        vel = self.rng.uniform(-0.1, 0.1, size=2)
        lo, hi = self.command_speed_range
        speed = self.rng.uniform(lo, hi)
        angle = self.rng.uniform(0.0, 2.0 * math.pi)
        cmd = np.array([speed * math.cos(angle), speed * math.sin(angle)])
        return EnvState("locomotion", pos, vel, cmd, None, 0, 0.0)

    def terrain_centers(self) -> list[EnvState]:
        """One canonical zero-velocity start per terrain type, fixed command."""
        chosen: dict[str, tuple[float, int, int]] = {}
        for i, row in enumerate(self.layout):
            for j, kind in enumerate(row):
                cx = -self.world_half + (j + 0.5) * self.tile_size
                cy = -self.world_half + (i + 0.5) * self.tile_size
                d = math.hypot(cx, cy)
                if kind not in chosen or d < chosen[kind][0]:
                    chosen[kind] = (d, i, j)
        states = []
        for kind in TERRAIN_TYPES:
            if kind not in chosen:
                continue
            _, i, j = chosen[kind]
            pos = np.array(
                [
                    -self.world_half + (j + 0.5) * self.tile_size,
                    -self.world_half + (i + 0.5) * self.tile_size,
                ]
            )
            states.append(
                EnvState("locomotion", pos, np.zeros(2), np.array([0.6, 0.0]), None, 0, 0.0)
            )
        return states

    def observe(self, state: EnvState) -> np.ndarray:
        x, y = state.position
        h0 = self.height(x, y)
        obs = np.empty(self.observation_dim)
        obs[0:2] = state.command
        obs[2:4] = state.velocity
        obs[4] = h0
        for k, (dx, dy) in enumerate(self.OBS_OFFSETS):
            obs[5 + k] = self.height(x + dx, y + dy) - h0
        return obs

    def step(self, action) -> StepResult:
        a = self._require_active(action)
        a = np.clip(a, -LOCO_ACTION_MAX, LOCO_ACTION_MAX)
        s = self._state
        x, y = s.position
        kind = self.tile_type(x, y)
        drag, eff = TERRAIN_DYNAMICS[kind]
        gx, gy = self._height_gradient(x, y)
        vel = s.velocity + LOCO_DT * (
            eff * a - drag * s.velocity - GRAVITY_PULL * np.array([gx, gy])
        )
        pos = s.position + LOCO_DT * vel
        lim = self.world_half - 1e-3
        for i in range(2):
            if pos[i] > lim:
                pos[i], vel[i] = lim, 0.0
            elif pos[i] < -lim:
                pos[i], vel[i] = -lim, 0.0
        dh = self.height(pos[0], pos[1]) - self.height(x, y)
        speed = math.hypot(vel[0], vel[1])
        crashed = abs(dh) > CLIMB_LIMIT and speed > SAFE_SPEED

        err = vel - s.command
        reward = float(math.exp(-float(err @ err) / TRACK_SIGMA_SQ) - ACTION_COST * float(a @ a))
        if crashed:
            reward -= CRASH_PENALTY

        new_state = EnvState(
            "locomotion", pos, vel, s.command.copy(), None,
            s.episode_step + 1, s.accumulated_reward + reward,
        )
        if crashed:
            cause = "crash"
        elif new_state.episode_step >= self.horizon:
            cause = "timeout"
        else:
            cause = "none"
        self._state = new_state
        self._done = cause != "none"
        return StepResult(self.observe(new_state), reward, self._done, cause)


def _segment_crosses_gate(p0, p1, c1, c2) -> bool:
    """True when the motion segment p0->p1 touches or crosses the gate segment."""
    dx, dy = c2[0] - c1[0], c2[1] - c1[1]
    # signed distance from the gate line (un-normalized)
    s0 = (p0[0] - c1[0]) * dy - (p0[1] - c1[1]) * dx
    s1 = (p1[0] - c1[0]) * dy - (p1[1] - c1[1]) * dx
    gate_len_sq = dx * dx + dy * dy
    if s0 == 0.0 and s1 == 0.0:  # sliding along the gate line
        proj = (p1[0] - c1[0]) * dx + (p1[1] - c1[1]) * dy
        return 0.0 <= proj <= gate_len_sq
    if s0 * s1 > 0.0:
        return False
    t = s0 / (s0 - s1)
    xx = p0[0] + t * (p1[0] - p0[0])
    yy = p0[1] + t * (p1[1] - p0[1])
    proj = (xx - c1[0]) * dx + (yy - c1[1]) * dy
    return 0.0 <= proj <= gate_len_sq


class RacingEnv(Env):
    """Thrust/turn vehicle passing ordered gates on a circular course.

    Reward is the per-step distance closed toward the next gate center,
    plus bonuses for gate passage and lap completion; leaving the corridor
    around the track circle ends the episode as a crash.
    """

    task = "racing"
    action_dim = 2
    observation_dim = 6
    max_step_reward = 15.0

    def __init__(
        self,
        rng: np.random.Generator,
        horizon: int = 1024,
        num_gates: int = 6,
        track_radius: float = 9.0,
        gate_half_width: float = 1.3,
        corridor_half_width: float = 3.0,
    ):
        super().__init__(horizon, rng)
        if num_gates < 2:
            raise ValueError("need at least 2 gates")
        self.num_gates = int(num_gates)
        self.track_radius = float(track_radius)
        self.gate_half_width = float(gate_half_width)
        self.corridor_half_width = float(corridor_half_width)
        self.gate_centers: list[np.ndarray] = []
        self.gate_corners: list[tuple[np.ndarray, np.ndarray]] = []
        for g in range(self.num_gates):
            phi = 2.0 * math.pi * g / self.num_gates
            radial = np.array([math.cos(phi), math.sin(phi)])
            center = self.track_radius * radial
            self.gate_centers.append(center)
            self.gate_corners.append(
                (center - self.gate_half_width * radial, center + self.gate_half_width * radial)
            )

    def nominal_state(self) -> EnvState:
        phi = -math.pi / self.num_gates  # halfway between the last and first gate
        pos = np.array(
            [self.track_radius * math.cos(phi), self.track_radius * math.sin(phi), phi + math.pi / 2.0]
        )
        return EnvState("racing", pos, np.array([1.0, 0.0]), None, 0, 0, 0.0)

    def observe(self, state: EnvState) -> np.ndarray:
        x, y, th = state.position
        v, om = state.velocity
        gate = min(state.next_gate, self.num_gates - 1)
        c1, c2 = self.gate_corners[gate]
        cos_t, sin_t = math.cos(th), math.sin(th)
        obs = np.empty(6)
        for k, c in enumerate((c1, c2)):
            rx, ry = c[0] - x, c[1] - y
            obs[2 * k] = cos_t * rx + sin_t * ry
            obs[2 * k + 1] = -sin_t * rx + cos_t * ry
        obs[4] = v
        obs[5] = om
        return obs

    def step(self, action) -> StepResult:
        a = self._require_active(action)
        thrust = min(max(float(a[0]), -1.0), 1.0)
        turn = min(max(float(a[1]), -1.0), 1.0)
        s = self._state
        x, y, th = s.position
        v, om = s.velocity

        om += (turn * TURN_RATE_MAX - om) * min(1.0, RACE_DT / TURN_LAG)
        th += om * RACE_DT
        th = (th + math.pi) % (2.0 * math.pi) - math.pi
        v = max(0.0, v + RACE_DT * (THRUST_ACCEL * thrust - RACE_DRAG * v))
        nx = x + v * math.cos(th) * RACE_DT
        ny = y + v * math.sin(th) * RACE_DT

        gate = s.next_gate
        center = self.gate_centers[gate]
        d_old = math.hypot(x - center[0], y - center[1])
        d_new = math.hypot(nx - center[0], ny - center[1])
        reward = PROGRESS_COEF * (d_old - d_new)

        next_gate = gate
        cause = "none"
        c1, c2 = self.gate_corners[gate]
        if _segment_crosses_gate((x, y), (nx, ny), c1, c2):
            reward += GATE_BONUS
            next_gate += 1
            if next_gate >= self.num_gates:
                reward += LAP_BONUS
                cause = "goal"
        if cause == "none" and abs(math.hypot(nx, ny) - self.track_radius) > self.corridor_half_width:
            reward -= RACE_CRASH_PENALTY
            cause = "crash"

        new_state = EnvState(
            "racing",
            np.array([nx, ny, th]),
            np.array([v, om]),
            None,
            next_gate,
            s.episode_step + 1,
            s.accumulated_reward + reward,
        )
        if cause == "none" and new_state.episode_step >= self.horizon:
            cause = "timeout"
        self._state = new_state
        self._done = cause != "none"
        return StepResult(self.observe(new_state), float(reward), self._done, cause)


def make_env(task: str, rng: np.random.Generator, **kwargs) -> Env:
    if task == "locomotion":
        return LocomotionEnv(rng, **kwargs)
    if task == "racing":
        return RacingEnv(rng, **kwargs)
    raise ValueError(f"unknown task {task!r}")
