import itertools
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from tabletop_lifelong import world
from tabletop_lifelong.task_dsl import GoalFormula, Predicate, parse_problem
from tabletop_lifelong.taskgen import interference_suite

LISTING = parse_problem((Path(__file__).parent / "data" / "kitchen_open_drawer.bddl").read_text())
BOWL_ON_PLATE = replace(LISTING, goal=GoalFormula((Predicate("On", ("akita_black_bowl_1", "plate_1")),)))
CFG = world.SimConfig()


def with_region(spec, name, rect):
    regions = tuple(replace(r, ranges=(rect,)) if r.name == name else r for r in spec.regions)
    return replace(spec, regions=regions)


def bowl_xs(spec, n, seed=0):
    rng = np.random.default_rng(seed)
    m = world.compile_scene(spec)
    i = m.object_index["akita_black_bowl_1"]
    return np.array([world.sample_initial_state(spec, rng).object_poses[i][:2] for _ in range(n)])


def test_samples_stay_inside_region_and_are_uniform():
    pts = bowl_xs(LISTING, 10_000)
    off = pts - np.array(world.TABLE_ORIGIN)
    assert np.all(np.abs(off) <= 0.025 + 1e-15)
    u = (off[:, 0] + 0.025) / 0.05
    ks = stats.kstest(u, "uniform")
    # 1% critical value of the one-sample KS statistic for large n
    assert ks.statistic < 1.628 / math.sqrt(len(u))


def test_degenerate_rectangle_pins_position():
    spec = with_region(LISTING, "akita_black_bowl_init_region", (0.1, -0.1, 0.1, -0.1))
    pts = bowl_xs(spec, 20)
    assert np.all(pts == np.array([0.6, 0.4]))


def test_overlapping_regions_raise():
    spec = with_region(LISTING, "plate_init_region", (-0.001, -0.001, 0.001, 0.001))
    spec = with_region(spec, "akita_black_bowl_init_region", (0.0, 0.0, 0.0, 0.0))
    with pytest.raises(world.PlacementInfeasible):
        world.sample_initial_state(spec, np.random.default_rng(0))


@pytest.fixture
def state():
    return world.sample_initial_state(LISTING, np.random.default_rng(1))


def test_zero_action_is_identity(state):
    assert world.step(state, [0.0, 0.0, 0.0], LISTING) == state


def test_closing_on_object_grasps(state):
    bowl = state.object_poses[0]
    s = replace(state, gripper=(bowl[0], bowl[1]))
    s = world.step(s, [0.0, 0.0, -1.0], LISTING)
    assert s.held_object == "akita_black_bowl_1"
    s = world.step(s, [1.0, 0.5, 0.0], LISTING)
    assert s.object_poses[0][:2] == s.gripper
    s = world.step(s, [0.0, 0.0, 1.0], LISTING)
    assert s.held_object is None


def test_drawer_opens_monotonically(state):
    m = world.compile_scene(LISTING)
    d = m.drawers[m.drawer_index["wooden_cabinet_1_top_region"]]
    s = replace(state, gripper=m.handle_position(state, d))
    s = world.step(s, [0, 0, -1], LISTING)
    assert s.held_handle == d.name
    _, (fx, fy) = m.drawer_frame(s, d)
    fracs = []
    for _ in range(12):
        s = world.step(s, [fx, fy, 0], LISTING)
        fracs.append(s.articulations[m.drawer_index[d.name]])
    assert all(b >= a for a, b in zip(fracs, fracs[1:]))
    assert fracs[-1] == 1.0
    assert world.holds(Predicate("Open", (d.name,)), s, LISTING)


def test_open_close_thresholds(state):
    top = "wooden_cabinet_1_top_region"
    for frac, is_open, is_closed in ((1.0, True, False), (0.95, True, False), (0.5, False, False), (0.05, False, True)):
        s = replace(state, articulations=(frac,) + state.articulations[1:])
        assert world.holds(Predicate("Open", (top,)), s, LISTING) is is_open
        assert world.holds(Predicate("Close", (top,)), s, LISTING) is is_closed


def test_on_matches_point_in_rectangle_oracle(state):
    regions = ["kitchen_table_akita_black_bowl_init_region", "kitchen_table_plate_init_region"]
    rects = {
        regions[0]: (0.475, 0.475, 0.525, 0.525),
        regions[1]: (0.475, 0.725, 0.525, 0.775),
    }
    grid = [0.45, 0.475, 0.5, 0.525, 0.55, 0.7, 0.725, 0.75, 0.775, 0.8]
    m = world.compile_scene(LISTING)
    plate_xy = (0.2, 0.2)
    for bx, by in itertools.product([0.5, 0.47], grid):
        poses = list(state.object_poses)
        poses[m.object_index["akita_black_bowl_1"]] = (bx, by, 0.0)
        poses[m.object_index["plate_1"]] = (*plate_xy, 0.0)
        s = replace(state, object_poses=tuple(poses))
        preds = world.extract_predicates(s, LISTING)
        for obj, xy in (("akita_black_bowl_1", (bx, by)), ("plate_1", plate_xy)):
            for r in regions:
                x0, y0, x1, y1 = rects[r]
                expected = x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1
                assert (Predicate("On", (obj, r)) in preds) == expected


def test_observation_length_arithmetic():
    layout = world.ObservationLayout(2, 1, 1, 10)
    assert layout.obs_dim == 3 + 2 * 4 + 1 + 1 + 3 + 10 == 26


def test_observation_is_a_function_of_state(state):
    a = world.observe(state, LISTING)
    b = world.observe(world.WorldState.from_dict(state.to_dict()), LISTING)
    assert a.tobytes() == b.tobytes()


def test_object_order_is_pinned_by_digest(tmp_path, state):
    layout = world.ObservationLayout.for_specs([LISTING])
    orders = list(itertools.permutations(LISTING.object_names))
    digests = {world.ordering_digest(layout, o) for o in orders}
    assert len(digests) == len(orders)
    swapped = world.observe(state, LISTING, (), layout, orders[1])
    assert not np.array_equal(swapped, world.observe(state, LISTING, (), layout, orders[0]))
    demos = world.collect_demos(BOWL_ON_PLATE, 2, np.random.default_rng(0), 0.0)
    path = tmp_path / "d.jsonl"
    world.save_demos(path, demos, layout, orders[0])
    world.load_demos(path, expect_digest=world.ordering_digest(layout, orders[0]))
    with pytest.raises(ValueError):
        world.load_demos(path, expect_digest=world.ordering_digest(layout, orders[1]))


def test_input_normalizer_targets_positions_and_embedding():
    layout = world.ObservationLayout(2, 1, 1, 3)
    offset, scale = layout.input_normalizer(10.0)
    pos = set(layout.position_indices())
    assert pos == {0, 1, 3, 4, 7, 8}
    for i in range(layout.obs_dim):
        if i in pos:
            assert (offset[i], scale[i]) == (0.5, 10.0)
        elif i >= layout.feature_dim:
            assert (offset[i], scale[i]) == (0.0, 10.0)
        else:
            assert (offset[i], scale[i]) == (0.0, 1.0)


def test_expert_solves_bowl_on_plate():
    rng = np.random.default_rng(5)
    for _ in range(100):
        s0 = world.sample_initial_state(BOWL_ON_PLATE, rng)
        assert world.run_expert_episode(BOWL_ON_PLATE, s0, 0.0, None).success


def test_already_satisfied_goal(state):
    done = replace(LISTING, goal=GoalFormula((Predicate("Close", ("wooden_cabinet_1_top_region",)),)))
    assert world.expert_action(done, state) is None
    assert np.all(world.scripted_expert(done, state) == 0)
    traj = world.run_expert_episode(done, state, 0.0, None)
    assert traj.success and len(traj.actions) == 0 and len(traj.observations) == 1


def test_open_precedes_in(state):
    traj = world.run_expert_episode(LISTING, state, 0.0, None)
    assert traj.success
    first = {}
    for t, _, preds in world.replay(LISTING, traj):
        for p in preds:
            first.setdefault(p.name, t)
    assert first["Open"] < first["In"]


def test_unsupported_goal_has_no_plan(state):
    odd = replace(LISTING, goal=GoalFormula((Predicate("TurnOn", ("plate_1",)),)))
    with pytest.raises(world.NoPlan):
        world.expert_action(odd, state)


def test_collect_demos_counts_and_determinism(tmp_path):
    demos = world.collect_demos(BOWL_ON_PLATE, 50, np.random.default_rng(3), 0.02)
    assert len(demos) == 50 and all(d.success for d in demos)
    assert all(len(d.observations) == len(d.actions) + 1 <= CFG.horizon + 1 for d in demos)
    assert world.collect_demos(BOWL_ON_PLATE, 0, np.random.default_rng(3)) == []
    layout = world.ObservationLayout.for_specs([BOWL_ON_PLATE])
    blobs = []
    for k in range(2):
        again = world.collect_demos(BOWL_ON_PLATE, 5, np.random.default_rng(9), 0.02)
        world.save_demos(tmp_path / f"{k}.jsonl", again, layout, BOWL_ON_PLATE.object_names)
        blobs.append((tmp_path / f"{k}.jsonl").read_bytes())
    assert blobs[0] == blobs[1]


def test_unreliable_expert_raises():
    short = world.SimConfig(horizon=2)
    with pytest.raises(world.ExpertUnreliable):
        world.collect_demos(BOWL_ON_PLATE, 3, np.random.default_rng(0), 0.0, short)


def test_evaluate_expert_zero_and_quantization():
    rate = world.evaluate_policy(world.ExpertPolicy(BOWL_ON_PLATE), BOWL_ON_PLATE, 20, np.random.default_rng(0))
    assert rate == 1.0
    rate = world.evaluate_policy(world.ZeroPolicy(), BOWL_ON_PLATE, 20, np.random.default_rng(0))
    assert rate == 0.0
    noisy = world.ExpertPolicy(BOWL_ON_PLATE, 1.5, np.random.default_rng(1))
    rate = world.evaluate_policy(noisy, BOWL_ON_PLATE, 20, np.random.default_rng(0), world.SimConfig(horizon=60))
    assert 0.0 <= rate <= 1.0 and round(rate * 20) == rate * 20


def in_range(s: world.WorldState) -> bool:
    coords = [s.gripper] + [p[:2] for p in s.object_poses] + [p[:2] for p in s.fixture_poses]
    return (
        all(0.0 <= c <= 1.0 for xy in coords for c in xy)
        and 0.0 <= s.aperture <= 1.0
        and all(0.0 <= f <= 1.0 for f in s.articulations)
    )


@pytest.mark.parametrize("spec", [LISTING] + interference_suite(0), ids=lambda s: s.language[:20])
def test_random_action_fuzz_keeps_state_valid(spec):
    rng = np.random.default_rng(17)
    m = world.compile_scene(spec)
    for _ in range(5):
        s = world.sample_initial_state(spec, rng)
        for _ in range(300):
            a = rng.normal(0, 3, size=3)
            if rng.random() < 0.05:
                a[int(rng.integers(3))] = np.nan
            s = world.step(s, a, spec)
            assert in_range(s)
            if s.held_object is not None:
                assert s.object_poses[m.object_index[s.held_object]][:2] == s.gripper


def test_interference_suite_expert_is_reliable():
    rng = np.random.default_rng(2)
    for spec in interference_suite(0):
        ok = sum(world.run_expert_episode(spec, world.sample_initial_state(spec, rng), 0.0, None).success
                 for _ in range(100))
        assert ok >= 95
