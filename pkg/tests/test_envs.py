"""Environment tests: snapshot fidelity, reward definitions, terrain layout."""

import math

import numpy as np
import pytest

from isb_lab.envs import (
    EnvState,
    LocomotionEnv,
    RacingEnv,
    TERRAIN_TYPES,
    _segment_crosses_gate,
    make_env,
    state_from_dict,
    state_to_dict,
)


def loco(seed=0, **kwargs):
    return LocomotionEnv(np.random.default_rng(seed), **kwargs)


def race(seed=0, **kwargs):
    return RacingEnv(np.random.default_rng(seed), **kwargs)


# -- reset / nominal distribution ------------------------------------------


def test_reset_deterministic_given_seed():
    a, b = loco(3), loco(3)
    assert np.array_equal(a.reset(), b.reset())


def test_reset_from_mid_episode_snapshot_reproduces_observation():
    env = loco(1)
    env.reset()
    rng = np.random.default_rng(5)
    for _ in range(20):
        env.step(rng.normal(size=2))
    snap = env.snapshot()
    recorded = env.observe(snap)
    obs = env.reset(snap)
    assert np.array_equal(obs, recorded)


def test_nominal_spread_matches_noise_bounds():
    env = loco(7, spawn_noise=1.0)
    positions = np.array([env.nominal_state().position for _ in range(10_000)])
    assert positions.min() >= -1.0 and positions.max() <= 1.0
    # uniform(-1, 1) per axis: std = 1/sqrt(3)
    assert abs(positions.std() - 1.0 / math.sqrt(3)) < 0.03
    assert abs(positions.mean()) < 0.02


def test_racing_nominal_start_is_fixed():
    env = race(0)
    a, b = env.nominal_state(), env.nominal_state()
    assert np.array_equal(a.position, b.position)
    assert a.next_gate == 0 and a.episode_step == 0


def test_reset_rejects_other_task_state():
    env = race(0)
    with pytest.raises(ValueError, match="locomotion"):
        env.reset(loco(0).nominal_state())


# -- snapshot / restore -----------------------------------------------------


def test_snapshot_restore_idempotent():
    env = loco(2)
    env.reset()
    snap = env.snapshot()
    env.restore(snap)
    again = env.snapshot()
    assert np.array_equal(snap.position, again.position)
    assert np.array_equal(snap.velocity, again.velocity)
    assert np.array_equal(snap.command, again.command)
    assert (snap.episode_step, snap.accumulated_reward) == (
        again.episode_step,
        again.accumulated_reward,
    )


@pytest.mark.parametrize("task", ["locomotion", "racing"])
def test_restore_replay_reproduces_rewards(task):
    env = make_env(task, np.random.default_rng(4))
    env.reset()
    rng = np.random.default_rng(9)
    actions = [rng.uniform(-1, 1, size=2) for _ in range(40)]
    for a in actions[:10]:
        env.step(a)
    snap = env.snapshot()
    tail_rewards = [env.step(a).reward for a in actions[10:]]
    env.restore(snap)
    replayed = [env.step(a).reward for a in actions[10:]]
    assert tail_rewards == replayed  # bit-exact


@pytest.mark.parametrize("task", ["locomotion", "racing"])
def test_restore_into_second_instance_replays(task):
    env1 = make_env(task, np.random.default_rng(4))
    env2 = make_env(task, np.random.default_rng(999))
    env1.reset()
    rng = np.random.default_rng(10)
    actions = [rng.uniform(-1, 1, size=2) for _ in range(30)]
    for a in actions[:5]:
        env1.step(a)
    snap = env1.snapshot()
    r1 = [env1.step(a) for a in actions[5:]]
    env2.restore(snap)
    r2 = [env2.step(a) for a in actions[5:]]
    for x, y in zip(r1, r2):
        assert x.reward == y.reward and x.done == y.done
        assert np.array_equal(x.observation, y.observation)


def test_restored_episode_step_counts_toward_timeout():
    env = loco(0, horizon=30)
    env.reset()
    state = env.snapshot()
    state.episode_step = 28
    env.restore(state)
    assert env.step(np.zeros(2)).done is False
    res = env.step(np.zeros(2))
    assert res.done and res.termination_cause == "timeout"


def test_observation_pure_function_of_state():
    env = loco(5)
    env.reset()
    env.step(np.array([1.0, -0.5]))
    s = env.snapshot()
    assert np.array_equal(env.observe(s), env.observe(s.copy()))


# -- locomotion specifics ---------------------------------------------------


def test_zero_command_zero_velocity_zero_action_max_tracking():
    env = loco(0)
    env.restore(
        EnvState("locomotion", np.zeros(2), np.zeros(2), np.zeros(2), None, 0, 0.0)
    )
    res = env.step(np.zeros(2))
    assert res.reward == 1.0  # tracking term at maximum, no action cost


def test_step_protocol_errors():
    env = loco(0, horizon=2)
    with pytest.raises(RuntimeError, match="before reset"):
        env.step(np.zeros(2))
    env.reset()
    with pytest.raises(ValueError, match="action shape"):
        env.step(np.zeros(3))
    env.step(np.zeros(2))
    env.step(np.zeros(2))  # hits horizon
    with pytest.raises(RuntimeError, match="after episode end"):
        env.step(np.zeros(2))


def test_terrain_centers_one_per_type():
    env = loco(0)
    centers = env.terrain_centers()
    assert len(centers) == len(TERRAIN_TYPES)
    kinds = [env.tile_type(s.position[0], s.position[1]) for s in centers]
    assert kinds == list(TERRAIN_TYPES)
    for s in centers:
        assert np.all(np.abs(s.position) <= env.world_half)


def test_terrain_centers_standing_still_is_safe():
    env = loco(0)
    for s in env.terrain_centers():
        env.reset(s)
        for _ in range(15):
            res = env.step(np.zeros(2))
            assert res.termination_cause != "crash"


def test_terrain_centers_unsupported_for_racing():
    with pytest.raises(NotImplementedError, match="racing"):
        race(0).terrain_centers()


def test_reward_bounded():
    for env in (loco(11), race(11)):
        env.reset()
        rng = np.random.default_rng(12)
        for _ in range(400):
            res = env.step(rng.uniform(-3, 3, size=2))
            assert abs(res.reward) <= env.max_step_reward
            if res.done:
                env.reset()


def test_crash_on_fast_step_traversal():
    env = loco(0)
    # find the canonical steps tile and sprint across it
    steps_center = env.terrain_centers()[TERRAIN_TYPES.index("steps")]
    state = steps_center.copy()
    state.velocity = np.array([2.5, 0.0])
    env.restore(state)
    crashed = False
    for _ in range(60):
        res = env.step(np.array([3.0, 0.0]))
        if res.done:
            crashed = res.termination_cause == "crash"
            break
    assert crashed


# -- racing specifics -------------------------------------------------------


def test_gate_crossing_helper_boundaries():
    c1, c2 = (7.7, 0.0), (10.3, 0.0)
    assert _segment_crosses_gate((9.0, -0.5), (9.0, 0.5), c1, c2)
    assert _segment_crosses_gate((9.0, -0.5), (9.0, 0.0), c1, c2)  # lands on plane
    assert not _segment_crosses_gate((11.0, -0.5), (11.0, 0.5), c1, c2)  # outside extent
    assert not _segment_crosses_gate((9.0, 0.5), (9.0, 1.5), c1, c2)  # same side


def test_state_on_gate_plane_grants_bonus_and_increments():
    env = race(0)
    state = EnvState(
        "racing", np.array([9.0, 0.0, math.pi / 2.0]), np.array([1.0, 0.0]), None, 0, 0, 0.0
    )
    env.restore(state)
    res = env.step(np.zeros(2))
    assert res.reward > 2.0  # gate bonus minus small progress term
    assert env.snapshot().next_gate == 1


def test_progress_reward_closed_form():
    env = race(0)
    env.reset()
    before = env.snapshot()
    res = env.step(np.array([0.5, 0.0]))
    after = env.snapshot()
    center = env.gate_centers[before.next_gate]
    d_old = math.hypot(*(before.position[:2] - center))
    d_new = math.hypot(*(after.position[:2] - center))
    assert res.reward == pytest.approx(1.0 * (d_old - d_new), abs=1e-12)


def test_lap_completion_is_goal():
    env = race(0)
    last = env.num_gates - 1
    center = env.gate_centers[last]
    phi = 2 * math.pi * last / env.num_gates
    state = EnvState(
        "racing",
        np.array([center[0], center[1], phi + math.pi / 2.0]),
        np.array([2.0, 0.0]),
        None,
        last,
        0,
        0.0,
    )
    env.restore(state)
    res = env.step(np.zeros(2))
    assert res.done and res.termination_cause == "goal"
    assert res.reward > 10.0  # lap + gate bonuses


def test_leaving_corridor_crashes():
    env = race(0)
    state = EnvState(
        "racing", np.array([11.9, 0.0, 0.0]), np.array([8.0, 0.0]), None, 0, 0, 0.0
    )
    env.restore(state)
    res = env.step(np.array([1.0, 0.0]))
    assert res.done and res.termination_cause == "crash"


def test_done_iff_cause():
    env = race(1)
    env.reset()
    rng = np.random.default_rng(3)
    for _ in range(200):
        res = env.step(rng.uniform(-1, 1, size=2))
        assert res.done == (res.termination_cause != "none")
        if res.done:
            env.reset()


# -- serialization ----------------------------------------------------------


@pytest.mark.parametrize("task", ["locomotion", "racing"])
def test_state_dict_roundtrip(task):
    env = make_env(task, np.random.default_rng(6))
    env.reset()
    env.step(np.array([0.5, -0.5]))
    s = env.snapshot()
    back = state_from_dict(state_to_dict(s))
    assert np.array_equal(s.position, back.position)
    assert np.array_equal(s.velocity, back.velocity)
    assert s.next_gate == back.next_gate
    assert s.episode_step == back.episode_step
    assert np.array_equal(env.observe(s), env.observe(back))
