from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvln.metrics import (IllegalTrajectoryError, ResultMatrix, average_metric, episode_metrics,
                          evaluate_domain, read_matrix, stability_plasticity, summarize, write_matrix)
from cvln.navsim import Episode, Flavor, candidate_actions, shortest_path
from cvln.policy import PolicyParams

from conftest import chain_scene
from test_navsim import floyd_warshall

# chain 0-1-2-3-4-5 with 2 m spacing: (start, goal, trajectory) -> (success, spl, ne, gp)
GOLDEN = [
    (0, 3, [0, 1, 2, 3], (True, 1.0, 0.0, 6.0)),
    (0, 3, [0, 1, 2], (True, 1.0, 2.0, 4.0)),
    (0, 3, [0, 1], (False, 0.0, 4.0, 2.0)),
    (0, 3, [0], (False, 0.0, 6.0, 0.0)),
    (0, 3, [0, 1, 2, 3, 4, 3], (True, 0.6, 0.0, 6.0)),
    (2, 2, [2], (True, 1.0, 0.0, 0.0)),
    (2, 2, [2, 3, 4], (False, 0.0, 4.0, -4.0)),
    (5, 0, [5, 4, 3, 2, 1], (True, 1.0, 2.0, 8.0)),
    (1, 5, [1, 0, 1, 2, 3, 4, 5], (True, 8 / 12, 0.0, 8.0)),
    (1, 4, [1, 2, 3, 4, 5], (True, 0.75, 2.0, 4.0)),
]


def _episode(scene, start, goal):
    path, _ = shortest_path(scene, start, goal)
    return Episode(0, 0, scene.scene_id, start, goal, path, [0, 1], [0] * len(path), Flavor.INITIAL)


@pytest.mark.parametrize("start,goal,traj,expected", GOLDEN)
def test_golden_set(start, goal, traj, expected):
    scene = chain_scene(6, spacing=2.0)
    fw = floyd_warshall(scene)
    r = episode_metrics(traj, _episode(scene, start, goal), scene)
    success, spl, ne, gp = expected
    assert r.success is success
    assert r.spl_term == pytest.approx(spl, abs=1e-12)
    assert r.ne == pytest.approx(ne, abs=1e-12) and r.ne == pytest.approx(fw[traj[-1], goal], abs=1e-12)
    assert r.gp == pytest.approx(gp, abs=1e-12)
    assert r.shortest_length == pytest.approx(fw[start, goal], abs=1e-12)
    assert r.spl_term <= float(r.success)


def test_threshold_is_inclusive():
    scene = chain_scene(4, spacing=1.5)
    r = episode_metrics([0, 1], _episode(scene, 0, 3), scene)
    assert r.ne == 3.0 and r.success


def test_spl_formula_example():
    scene = chain_scene(3, spacing=5.0)  # l = 10
    r = episode_metrics([0, 1, 0, 1, 2], _episode(scene, 0, 2), scene)  # p = 20
    assert r.spl_term == pytest.approx(0.5)


def test_illegal_trajectories():
    scene = chain_scene(4)
    ep = _episode(scene, 0, 3)
    with pytest.raises(IllegalTrajectoryError, match="illegal trajectory"):
        episode_metrics([0, 2, 3], ep, scene)
    with pytest.raises(IllegalTrajectoryError):
        episode_metrics([1, 2, 3], ep, scene)


def test_summarize_percentages():
    scene = chain_scene(6, spacing=2.0)
    res = [episode_metrics(t, _episode(scene, s, g), scene) for s, g, t, _ in GOLDEN]
    out = summarize(res)
    assert out["SR"] == pytest.approx(70.0)
    assert out["SPL"] == pytest.approx(100 * np.mean([e[1] for *_, e in GOLDEN]))
    assert out["SPL"] <= out["SR"]
    with pytest.raises(ValueError):
        summarize([])


def test_average_metric():
    assert average_metric([50.0] * 4) == 50.0
    assert average_metric([40.0, 20.0, 30.0]) == 30.0
    assert average_metric([12.5]) == 12.5
    with pytest.raises(ValueError, match="incomplete row"):
        average_metric([1.0, float("nan")])
    with pytest.raises(ValueError):
        average_metric([])


@given(st.lists(st.floats(0, 100), min_size=1, max_size=12), st.randoms())
def test_average_metric_permutation_invariant(row, rnd):
    shuffled = list(row)
    rnd.shuffle(shuffled)
    assert average_metric(shuffled) == pytest.approx(average_metric(row), abs=1e-9)


def test_stability_plasticity_examples():
    m = np.array([[40.0, np.nan], [20.0, 60.0]])
    s, p, h = stability_plasticity(m, 2)
    assert (s, p) == (20.0, 50.0) and h == pytest.approx(28.571, abs=1e-3)
    x = np.tril(np.full((4, 4), 7.0))
    assert stability_plasticity(x, 4) == pytest.approx((7.0, 7.0, 7.0))
    z = np.array([[40.0, np.nan], [0.0, 60.0]])
    assert stability_plasticity(z, 2)[2] == 0.0
    assert stability_plasticity(np.zeros((2, 2)), 2) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        stability_plasticity(m, 1)


def test_matrix_round_trip(tmp_path):
    mat = ResultMatrix(3, "ESR", 2)
    rng = np.random.default_rng(0)
    for s in range(1, 4):
        mat.set_row(s, [{m: float(rng.random()) for m in ("SR", "SPL", "NE", "GP")} for _ in range(s)])
    path = tmp_path / "m.tsv"
    write_matrix([mat], path, "abc123", extra={"memory_capacity": 20})
    header, [back] = read_matrix(path)
    assert header["config_hash"] == "abc123" and header["schema_version"] == "1"
    assert header["memory_capacity"] == "20"
    for m in mat.values:
        np.testing.assert_array_equal(np.isnan(back.values[m]), np.isnan(mat.values[m]))
        np.testing.assert_array_equal(np.nan_to_num(back.values[m]), np.nan_to_num(mat.values[m]))
    assert np.isnan(mat.values["SR"][0, 1])  # lower triangle only


def test_perfect_agent_scores_full_marks(small_benchmark):
    d = small_benchmark[0]
    scenes = d.scene_map()

    def oracle_hook(params, eps, sc, max_steps):
        from cvln.policy import Trajectory
        return [Trajectory(list(e.path), True) for e in eps]

    out = evaluate_domain(None, d, oracle_hook)
    assert out["SR"] == 100.0 and out["SPL"] == 100.0 and out["NE"] == 0.0
    gp = np.mean([shortest_path(scenes[e.scene_id], e.start, e.goal)[1] for e in d.val_episodes])
    assert out["GP"] == pytest.approx(gp)


def test_evaluation_is_deterministic(small_benchmark, small_policy):
    d = small_benchmark[1]
    assert evaluate_domain(small_policy, d) == evaluate_domain(small_policy, d)


def random_walk_success(scene, episode, max_steps, threshold=3.0) -> float:
    """Exact success probability of a walker choosing uniformly among candidates."""
    dist = floyd_warshall(scene)
    alive = {episode.start: 1.0}
    p_success = 0.0
    for _ in range(max_steps):
        nxt = {}
        for node, mass in alive.items():
            cands = candidate_actions(scene, node)
            share = mass / len(cands)
            p_success += share * (dist[node, episode.goal] <= threshold)  # STOP
            for c in cands[:-1]:
                nxt[c] = nxt.get(c, 0.0) + share
        alive = nxt
    # budget exhausted: the walker ends wherever it is
    return p_success + sum(m for n, m in alive.items() if dist[n, episode.goal] <= threshold)


def test_uniform_policy_matches_random_walk_oracle(small_benchmark, small_policy):
    d = small_benchmark[2]
    scenes = d.scene_map()
    expected = 100 * np.mean([random_walk_success(scenes[e.scene_id], e, 6) for e in d.val_episodes])
    repeats = -(-10_000 // len(d.val_episodes))
    got = evaluate_domain(PolicyParams(small_policy.cfg), d, max_steps=6,
                          rng=np.random.default_rng(0), repeats=repeats)
    assert abs(got["SR"] - expected) <= 2.0
