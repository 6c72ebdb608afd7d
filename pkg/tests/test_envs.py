import json

import numpy as np
import pytest

from ctxpolicy.envs import (
    ACTION_DIM,
    BUDGET,
    CAPTURE,
    DATASET_MAGIC,
    HOME,
    PARITY_CYCLES_FULL,
    PLATE_A,
    PLATE_B,
    PNP_REST_STEPS,
    SPEED,
    DatasetError,
    ExpertPolicy,
    ParityState,
    PnPState,
    RandomPolicy,
    evaluate_policy,
    expert_action,
    full_success,
    generate_dataset,
    instruction_ids,
    load_dataset,
    partial_success,
    render,
    reset,
    run_expert_episode,
    step,
)


def act(a0=0.0, a1=0.0):
    a = np.zeros(ACTION_DIM)
    a[0], a[1] = a0, a1
    return a


# ---------------------------------------------------------------------------
# Instructions and resets.

def test_instruction_ids():
    assert instruction_ids("parity").tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
    assert instruction_ids("pnp").tolist() == [2, 0, 0, 0, 0, 0, 0, 0]
    assert instruction_ids("pnp", length=4).tolist() == [2, 0, 0, 0]
    with pytest.raises(ValueError):
        instruction_ids("stack")


def test_reset_variants():
    for seed in range(8):
        st = reset("parity", seed)
        assert st.level == SPEED * (seed % 4)
        assert st.direction == 1 and st.cycles == 0 and not st.armed
        pn = reset("pnp", seed)
        assert pn.origin == (PLATE_A if seed % 2 == 0 else PLATE_B)
        assert pn.gripper == HOME and pn.obj == pn.origin
        assert pn.phase == 0 and not pn.held and not pn.closed
    with pytest.raises(ValueError):
        reset("stack", 0)


# ---------------------------------------------------------------------------
# parity mechanics. Level arithmetic stays on the binary-exact 1/8 grid.

def test_parity_level_moves_exactly():
    st = reset("parity", 0)
    st = step(st, act(a0=1.0))
    assert st.level == 0.125
    st = step(st, act(a0=-1.0))
    assert st.level == 0.0
    assert st.steps == 2


def test_parity_full_cycle_counting():
    st = reset("parity", 0)
    for _ in range(PARITY_CYCLES_FULL):
        for _ in range(8):
            st = step(st, act(a0=1.0))
        assert st.armed and st.level == 1.0 and st.direction == -1
        for _ in range(8):
            st = step(st, act(a0=-1.0))
        assert st.level == 0.0 and st.direction == 1 and not st.armed
    assert st.cycles == PARITY_CYCLES_FULL
    assert full_success(st) and partial_success(st)
    assert st.steps == 80


def test_parity_no_cycle_without_touching_top():
    st = reset("parity", 0)
    for _ in range(6):
        st = step(st, act(a0=1.0))
    for _ in range(6):
        st = step(st, act(a0=-1.0))
    assert st.cycles == 0 and not partial_success(st)


def test_parity_level_clips_at_bounds():
    st = reset("parity", 0)
    st = step(st, act(a0=-1.0))
    assert st.level == 0.0
    for _ in range(20):
        st = step(st, act(a0=1.0))
    assert st.level == 1.0 and st.armed


def test_action_validation_and_clipping():
    st = reset("parity", 0)
    with pytest.raises(ValueError):
        step(st, np.zeros(3))
    with pytest.raises(ValueError):
        step(st, np.array([np.nan, 0, 0, 0]))
    big = step(st, np.array([7.0, 0, 0, 0]))
    assert big.level == 0.125  # clipped to +-1 before scaling


# ---------------------------------------------------------------------------
# pnp mechanics.

def test_pnp_capture_requires_proximity_and_edge():
    st = reset("pnp", 0)  # obj at PLATE_A
    grab_far = step(st, act(a1=1.0))
    assert grab_far.closed and not grab_far.held
    # re-closing without opening first must not capture
    near = PnPState(gripper=PLATE_A + CAPTURE / 2, obj=PLATE_A, held=False,
                    closed=True, phase=0, origin=PLATE_A, steps=0)
    still = step(near, act(a1=1.0))
    assert not still.held
    opened = step(near, act(a1=-1.0))
    assert not opened.closed
    grabbed = step(opened, act(a1=1.0))
    assert grabbed.held and grabbed.closed


def test_pnp_held_object_follows_and_drops():
    st = PnPState(gripper=PLATE_A, obj=PLATE_A, held=False, closed=False,
                  phase=0, origin=PLATE_A, steps=0)
    st = step(st, act(a1=1.0))
    assert st.held
    st = step(st, act(a0=1.0))
    assert st.obj == st.gripper == PLATE_A + SPEED
    st = step(st, act(a1=-1.0))
    assert not st.held and not st.closed
    after = step(st, act(a0=1.0))
    assert after.obj == st.obj and after.gripper != st.gripper


def test_pnp_phases_advance_only_on_released_delivery():
    origin, far = PLATE_A, PLATE_B
    st = PnPState(gripper=far, obj=far, held=True, closed=True, phase=0,
                  origin=origin, steps=0)
    assert st.phase == 0
    st = step(st, act(a1=-1.0))  # release on the far plate
    assert st.phase == 1 and not st.held
    st = step(st, act(a1=1.0))  # pick it back up
    assert st.held and st.phase == 1
    # carry home; holding above the origin must not advance
    while abs(st.gripper - origin) > 1e-12:
        st = step(st, act(a0=np.clip((origin - st.gripper) / SPEED, -1, 1)))
    assert st.phase == 1
    st = step(st, act(a1=-1.0))
    assert st.phase == 2 and full_success(st)


def test_pnp_delivery_outside_capture_does_not_advance():
    origin, far = PLATE_A, PLATE_B
    st = PnPState(gripper=far + CAPTURE + 0.02, obj=far + CAPTURE + 0.02,
                  held=True, closed=True, phase=0, origin=origin, steps=0)
    st = step(st, act(a1=-1.0))
    assert st.phase == 0 and not st.held


# ---------------------------------------------------------------------------
# Experts.

def test_parity_expert_full_success_many_seeds():
    for seed in range(200):
        st = reset("parity", seed)
        while st.steps < BUDGET and not full_success(st):
            st = step(st, expert_action(st))
        assert full_success(st), seed


def test_pnp_expert_full_success_many_seeds():
    for seed in range(300):
        st = reset("pnp", seed)
        while st.steps < BUDGET and not full_success(st):
            st = step(st, expert_action(st))
        assert full_success(st), seed
        assert st.steps <= 40, (seed, st.steps)


@pytest.mark.parametrize("task", ["parity", "pnp"])
def test_noisy_executions_still_succeed(task):
    ok = sum(run_expert_episode(task, seed, noise_sigma=0.3).success
             for seed in range(60))
    assert ok >= 58


def test_labels_stay_clean_under_noise():
    ep = run_expert_episode("parity", 3, noise_sigma=0.5)
    assert np.all(np.abs(ep.actions[:, 0]) == 1.0)
    assert np.all(ep.actions[:, 1:] == 0.0)


def test_parity_demo_runs_whole_budget():
    ep = run_expert_episode("parity", 0)
    assert len(ep.images) == BUDGET and ep.success


def test_pnp_demo_rest_tail_is_static_but_short():
    ep = run_expert_episode("pnp", 0)
    n = len(ep.images)
    assert n < BUDGET
    tail = ep.images[n - PNP_REST_STEPS :]
    assert all(np.array_equal(tail[0], t) for t in tail[1:])
    # an 8-frame window at the end must still contain motion, otherwise
    # episode starts would not be the only static histories
    head8 = ep.images[n - 8 : n]
    assert not all(np.array_equal(head8[0], t) for t in head8[1:])


# ---------------------------------------------------------------------------
# Rendering: a pure function of the visible fields, blind to the latents.

def test_render_hides_parity_latents():
    a = ParityState(level=0.5, direction=1, armed=False, cycles=0, steps=10)
    b = ParityState(level=0.5, direction=-1, armed=True, cycles=4, steps=77)
    assert np.array_equal(render(a), render(b))
    c = ParityState(level=0.625, direction=1, armed=False, cycles=0, steps=10)
    assert not np.array_equal(render(a), render(c))


def test_render_hides_pnp_latents():
    a = PnPState(gripper=0.4, obj=0.4, held=True, closed=True, phase=0,
                 origin=PLATE_A, steps=5)
    b = PnPState(gripper=0.4, obj=0.4, held=False, closed=True, phase=1,
                 origin=PLATE_B, steps=50)
    assert np.array_equal(render(a), render(b))


def test_pnp_start_and_finish_look_identical():
    start = reset("pnp", 0)
    st = start
    while not full_success(st) and st.steps < BUDGET:
        st = step(st, expert_action(st))
    while abs(st.gripper - HOME) > CAPTURE:
        st = step(st, expert_action(st))
    parked = PnPState(gripper=HOME, obj=st.obj, held=st.held, closed=st.closed,
                      phase=st.phase, origin=st.origin, steps=st.steps)
    assert np.array_equal(render(start), render(parked))


def test_render_views():
    st = reset("pnp", 1)
    one = render(st, views=1)
    two = render(st, views=2)
    assert one.shape == (1, 32, 32, 1) and two.shape == (2, 32, 32, 1)
    assert np.array_equal(two[0], one[0])
    assert np.array_equal(two[1], one[0][:, ::-1])
    with pytest.raises(ValueError):
        render(st, views=3)


def test_render_open_vs_closed_gripper_differ():
    open_ = PnPState(gripper=0.5, obj=0.2, held=False, closed=False, phase=0,
                     origin=PLATE_A, steps=0)
    closed = PnPState(gripper=0.5, obj=0.2, held=False, closed=True, phase=0,
                      origin=PLATE_A, steps=0)
    assert not np.array_equal(render(open_), render(closed))


# ---------------------------------------------------------------------------
# Dataset file format.

def test_dataset_round_trip(tmp_path):
    path = str(tmp_path / "d.bin")
    ds = generate_dataset(path, "pnp", episodes=3, seed=5, noise_sigma=0.2)
    back = load_dataset(path)
    assert back.task == "pnp"
    assert len(back.episodes) == 3
    for a, b in zip(ds.episodes, back.episodes):
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.actions, b.actions)
        assert a.instruction == b.instruction and a.success == b.success
    side = json.load(open(path + ".json"))
    assert side["records"] == ds.records
    assert side["task"] == "pnp"
    assert side["magic"] == DATASET_MAGIC.decode()


def test_dataset_regeneration_is_byte_identical(tmp_path):
    p1 = str(tmp_path / "a.bin")
    p2 = str(tmp_path / "b.bin")
    generate_dataset(p1, "parity", episodes=2, seed=9, noise_sigma=0.3)
    generate_dataset(p2, "parity", episodes=2, seed=9, noise_sigma=0.3)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    assert open(p1 + ".json").read() == open(p2 + ".json").read()


def test_dataset_no_temp_left_behind(tmp_path):
    path = str(tmp_path / "d.bin")
    generate_dataset(path, "parity", episodes=1, seed=0)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["d.bin", "d.bin.json"]


def test_dataset_validation_errors(tmp_path):
    path = str(tmp_path / "d.bin")
    generate_dataset(path, "parity", episodes=1, seed=0)
    blob = open(path, "rb").read()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DatasetError, match="magic"):
        load_dataset(str(bad))

    bad.write_bytes(blob[:-10])
    with pytest.raises(DatasetError, match="truncated"):
        load_dataset(str(bad))

    bad.write_bytes(blob + b"\x00")
    with pytest.raises(DatasetError, match="trailing"):
        load_dataset(str(bad))

    wrong_version = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    bad.write_bytes(wrong_version)
    with pytest.raises(DatasetError, match="version"):
        load_dataset(str(bad))

    with pytest.raises(ValueError):
        generate_dataset(str(tmp_path / "x.bin"), "stack", episodes=1)
    with pytest.raises(ValueError):
        generate_dataset(str(tmp_path / "x.bin"), "parity", episodes=0)


# ---------------------------------------------------------------------------
# Closed-loop evaluation.

def test_expert_policy_scores_100():
    for task in ("parity", "pnp"):
        report = evaluate_policy(ExpertPolicy(), task, trials=10, seed=0)
        assert report["full_pct"] == 100.0
        assert report["partial_pct"] == 100.0
        assert all(r["steps"] <= BUDGET for r in report["episodes"])


def test_expert_stops_at_latched_success():
    report = evaluate_policy(ExpertPolicy(), "parity", trials=1, seed=0)
    assert report["episodes"][0]["steps"] == 80


def test_random_policy_rarely_solves_pnp():
    report = evaluate_policy(RandomPolicy(seed=1), "pnp", trials=60, seed=0)
    assert report["full_pct"] <= 5.0


def test_evaluation_is_deterministic():
    a = evaluate_policy(RandomPolicy(seed=2), "parity", trials=5, seed=3)
    b = evaluate_policy(RandomPolicy(seed=2), "parity", trials=5, seed=3)
    assert a == b


def test_evaluation_rejects_bad_chunk_shapes():
    class Flat:
        def begin_episode(self, instr_ids, episode):
            pass

        def act(self, views):
            return np.zeros(ACTION_DIM)

        def observe(self, views):
            pass

    with pytest.raises(ValueError):
        evaluate_policy(Flat(), "parity", trials=1)
    with pytest.raises(ValueError):
        evaluate_policy(ExpertPolicy(), "parity", trials=0)
