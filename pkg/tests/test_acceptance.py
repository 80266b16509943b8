"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The directional criteria (8 to 11) share one grid of full curriculum runs on
the default I-flavor benchmark; it takes a few minutes on one core.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from scipy.stats import chisquare

from cvln import harness as hx
from cvln.clstrategies import (ReplayEntry, ReplayMemory, action_perplexities, agem_project, perpr_memory_update,
                               l2_anchor_loss_and_grad, perplexity_from_log_probs, reservoir_update)
from cvln.metrics import episode_metrics
from cvln.navsim import Episode, Flavor, generate_benchmark
from cvln.policy import (Mode, PolicyConfig, PolicyParams, esr_loss_and_grad, imitation_loss_and_grad,
                         init_params, rollout)

from conftest import SMALL, chain_scene
from oracles import brute_force_perplexity, finite_difference_check
from test_metrics import GOLDEN
from test_navsim import floyd_warshall

RESULTS: dict[int, str] = {}
SEEDS = (0, 1, 2)
SIZES = (10, 20, 40)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- shared fixtures ----------------------------------------------------------------

@pytest.fixture(scope="module")
def bench():
    return generate_benchmark(11, "I", SMALL)


@pytest.fixture(scope="module")
def pcfg():
    return PolicyConfig(vocab_size=SMALL.vocab_size, feature_dim=SMALL.feature_dim, max_degree=SMALL.max_degree)


def _perturbed(cfg, seed, scale=0.3):
    p = init_params(cfg, np.random.default_rng(seed))
    return PolicyParams(cfg, p.flat + scale * np.random.default_rng(seed + 1).standard_normal(p.flat.size))


def _coords(size, g, rng, k=24):
    nz = np.flatnonzero(g)
    return np.concatenate([rng.choice(nz, min(k // 2, nz.size), replace=False), rng.integers(0, size, k // 2)])


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    """Every run the directional criteria need, written to disk as the CLI would."""
    cfg = hx.ExperimentConfig.default("I")
    root = tmp_path_factory.mktemp("acceptance")
    strategies = [cfg.strategy(k) for k in ("vanilla", "joint", "randr", "agem")]
    sizes = sorted(set(SIZES) | {cfg.default_capacity})
    strategies += [cfg.strategy(k, memory_capacity=m) for k in ("perpr", "esr") for m in sizes]
    strategies += hx.ablation_strategies(cfg)
    t0 = time.perf_counter()
    results = hx.run_grid(cfg, strategies, root, SEEDS)
    elapsed = time.perf_counter() - t0
    print(f"\ngrid: {len(results)} runs in {elapsed:.0f} s (default capacity {cfg.default_capacity})")
    print(hx.report([root]).text())
    return cfg, results, elapsed


def _avg_sr(grid, label, capacity=None):
    cfg, results, _ = grid
    cap = cfg.default_capacity if capacity is None else capacity
    out = {r.curriculum.seed: r.matrix.average("SR") for r in results
           if r.label == label and r.strategy.memory_capacity == cap}
    assert sorted(out) == list(SEEDS), f"missing runs for {label} (M={cap})"
    return np.array([out[s] for s in SEEDS])


# -- 1 to 7: exact properties -----------------------------------------------------

def test_c01_gradients(bench, pcfg):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {"imitation": 0.0, "esr": 0.0, "l2": 0.0}
    for i in range(20):
        d = bench[i % len(bench)]
        scenes = d.scene_map()
        p = _perturbed(pcfg, 10 + i)
        eps = [d.train_episodes[j] for j in rng.choice(len(d.train_episodes), 3, replace=False)]
        _, g = imitation_loss_and_grad(p, eps, scenes)
        f = lambda th: imitation_loss_and_grad(PolicyParams(pcfg, th), eps, scenes)[0]
        worst["imitation"] = max(worst["imitation"], finite_difference_check(f, p.flat, g, _coords(p.flat.size, g, rng)))

        ep = eps[0]
        scene = scenes[ep.scene_id]
        Z = [t.logits for t in rollout(_perturbed(pcfg, 500 + i), ep, scene, Mode.TEACHER_FORCED)[0]]
        _, g = esr_loss_and_grad(p, ep, Z, scene, ep.gt_actions)
        f = lambda th: esr_loss_and_grad(PolicyParams(pcfg, th), ep, Z, scene, ep.gt_actions)[0]
        worst["esr"] = max(worst["esr"], finite_difference_check(f, p.flat, g, _coords(p.flat.size, g, rng)))

        th, anchor, lam = rng.standard_normal(50), rng.standard_normal(50), float(rng.uniform(0.01, 1.0))
        _, g = l2_anchor_loss_and_grad(th, anchor, lam)
        f = lambda x: l2_anchor_loss_and_grad(x, anchor, lam)[0]
        worst["l2"] = max(worst["l2"], finite_difference_check(f, th, g, range(50)))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, max(worst.values()) < 1e-4 and elapsed < 30,
           f"max rel. error over 20 instances each: {detail}; {elapsed:.1f} s")


def test_c02_action_perplexity(bench, pcfg):
    rng = np.random.default_rng(1)
    pool = [(e, d.scene_map()) for d in bench for e in d.train_episodes + d.val_episodes]
    picks = rng.integers(0, len(pool), 100)  # each pick gets its own parameters
    worst = 0.0
    for k, j in enumerate(picks):
        ep, scenes = pool[j]
        p = _perturbed(pcfg, 1000 + k, scale=0.5)
        ap = action_perplexities(p, [ep], scenes)[0]
        ref = brute_force_perplexity(p, ep, scenes[ep.scene_id])
        worst = max(worst, abs(ap - ref) / ref)
    examples = [perplexity_from_log_probs([0.0, 0.0]) - 1.0,
                perplexity_from_log_probs(np.log([0.25] * 3)) - 4.0,
                perplexity_from_log_probs(np.log([0.5, 0.25, 0.125])) - 4.0]
    ok = worst < 1e-9 and all(abs(x) <= 1e-12 for x in examples)
    record(2, ok, f"100 episodes max rel. error {worst:.1e}; worked examples off by "
                  f"{max(abs(x) for x in examples):.0e}")


@pytest.mark.slow
def test_c03_esr_zero_anchor(grid):
    losses = [x for r in grid[1] if r.strategy.kind.value == "esr" for x in r.esr_anchor_losses]
    worst = max(losses)
    record(3, bool(losses) and worst <= 1e-18, f"{len(losses)} stored entries, max per-step L_ESR {worst:.1e}")


@pytest.mark.slow
def test_c04_agem_sign(grid):
    checks = [c for r in grid[1] if r.strategy.kind.value == "agem" for c in r.agem_checks]
    ex1 = agem_project(np.array([1.0, -1.0]), np.array([0.0, 1.0]))
    ex2 = agem_project(np.array([0.0, -1.0]), np.array([0.0, 1.0]))
    ok = bool(checks) and min(checks) >= -1e-9 and np.array_equal(ex1, [1.0, 0.0]) and np.array_equal(ex2, [0.0, 0.0])
    record(4, ok, f"{len(checks)} projections, min normalized g~.g_ref {min(checks):.1e}; 2-D examples exact")


def test_c05_reservoir_uniformity():
    stream = [ReplayEntry(Episode(k, 0, 0, 0, 0, [0], [1], [1], Flavor.INITIAL), 0) for k in range(10)]
    rng = np.random.default_rng(2024)
    counts = np.zeros(10)
    for _ in range(20_000):
        for e in reservoir_update(ReplayMemory(5), stream, rng).entries:
            counts[e.episode.episode_id] += 1
    p = chisquare(counts).pvalue
    record(5, p > 0.01, f"chi-square p = {p:.3f} over 20000 trials")


def _ordering_violations(updates, reverse):
    """Count evicting updates and ordering violations; updates are (kept_aps, evicted_aps)."""
    n = bad = 0
    for kept, gone in updates:
        if kept and gone:
            n += 1
            bad += not (max(kept) <= min(gone) if reverse else min(kept) >= max(gone))
    return n, bad


@pytest.mark.slow
def test_c06_perpr_ordering(grid, bench, pcfg):
    # a fixed quota of capacity // domains never overflows inside a curriculum, so
    # evictions are also forced directly: more per-domain inserts than free slots
    n_grid = bad_grid = 0
    for r in grid[1]:
        if r.strategy.is_perpr:
            pairs = [([e["ap"] for e in u["retained_old"]], [e["ap"] for e in u["evicted"]]) for u in r.memory_updates]
            n, bad = _ordering_violations(pairs, r.strategy.perpr_reverse)
            n_grid, bad_grid = n_grid + n, bad_grid + bad
    n_forced = bad_forced = 0
    for reverse in (False, True):
        mem = ReplayMemory(5)
        for stage, d in enumerate(bench * 2):
            perpr_memory_update(mem, d, _perturbed(pcfg, 700 + stage, scale=0.5), reverse=reverse, quota=3)
        pairs = [([e.ap for e in u.retained_old], [e.ap for e in u.evicted]) for u in mem.history]
        n, bad = _ordering_violations(pairs, reverse)
        n_forced, bad_forced = n_forced + n, bad_forced + bad
    record(6, n_forced > 0 and bad_grid == 0 and bad_forced == 0,
           f"curriculum updates with evictions {n_grid} (violations {bad_grid}); forced-overflow updates "
           f"{n_forced} (violations {bad_forced}), PerpR and PerpR-Rev.")


@pytest.mark.slow
def test_c07_metric_oracles(grid):
    scene = chain_scene(6, spacing=2.0)
    fw = floyd_warshall(scene)
    worst = 0.0
    for start, goal, traj, (success, spl, ne, gp) in GOLDEN:
        step = 1 if goal >= start else -1
        path = list(range(start, goal + step, step))
        ep = Episode(0, 0, 0, start, goal, path, [0, 1], [0] * len(path), Flavor.INITIAL)
        r = episode_metrics(traj, ep, scene)
        assert r.success is success
        worst = max(worst, abs(r.spl_term - spl), abs(r.ne - ne), abs(r.gp - gp),
                    abs(r.shortest_length - fw[start, goal]))
    cells = 0
    violations = 0
    for r in grid[1]:
        spl, sr = r.matrix.values["SPL"], r.matrix.values["SR"]
        mask = ~np.isnan(sr)
        cells += int(mask.sum())
        violations += int((spl[mask] > sr[mask] + 1e-9).sum())
    record(7, worst <= 1e-12 and violations == 0 and cells > 0,
           f"golden set max error {worst:.0e}; SPL <= SR on {cells} evaluated cells, violations {violations}")


# -- 8 to 11: directional checks on the default benchmark ---------------------------

@pytest.mark.slow
def test_c08_forgetting(grid):
    firsts, lasts = [], []
    for r in grid[1]:
        if r.label == "Vanilla":
            sr = r.matrix.values["SR"]
            firsts.append(sr[0, 0])
            lasts.append(sr[-1, 0])
    first, last = float(np.mean(firsts)), float(np.mean(lasts))
    record(8, last <= 0.7 * first, f"Vanilla mean R[n][1] = {last:.1f} vs 0.7 * R[1][1] = {0.7 * first:.1f}")


@pytest.mark.slow
def test_c09_bound_ordering(grid):
    van, joint, randr = _avg_sr(grid, "Vanilla"), _avg_sr(grid, "Joint"), _avg_sr(grid, "RandR")
    perpr, esr = _avg_sr(grid, "PerpR"), _avg_sr(grid, "ESR")
    checks = {
        "Joint > Vanilla (each seed)": bool(np.all(joint > van)),
        "RandR > Vanilla (each seed)": bool(np.all(randr > van)),
        "PerpR >= RandR - 1": perpr.mean() >= randr.mean() - 1.0,
        "ESR >= RandR": esr.mean() >= randr.mean(),
        "grid < 30 min": grid[2] < 1800,
    }
    detail = (f"AvgSR Vanilla {np.round(van, 1)}, Joint {np.round(joint, 1)}, RandR {np.round(randr, 1)}; "
              f"means PerpR {perpr.mean():.1f}, ESR {esr.mean():.1f}, RandR {randr.mean():.1f}; "
              f"grid {grid[2]:.0f} s; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    record(9, all(checks.values()), detail)


@pytest.mark.slow
def test_c10_memory_monotonicity(grid):
    parts, ok = [], True
    for label in ("PerpR", "ESR"):
        means = [_avg_sr(grid, label, m).mean() for m in SIZES]
        ok &= all(b >= a - 1.0 for a, b in zip(means, means[1:]))
        parts.append(f"{label} " + " / ".join(f"{v:.1f}" for v in means))
    record(10, ok, f"mean AvgSR at M = {SIZES}: " + "; ".join(parts))


@pytest.mark.slow
def test_c11_ablation_direction(grid):
    perpr, rev = _avg_sr(grid, "PerpR").mean(), _avg_sr(grid, "PerpR-Rev.").mean()
    esr, no_lm, no_lesr = (_avg_sr(grid, l).mean() for l in ("ESR", "ESR -L_M", "ESR -L_ESR"))
    ok = rev <= perpr and (esr - no_lesr) >= (esr - no_lm)
    record(11, ok, f"PerpR {perpr:.1f} vs PerpR-Rev. {rev:.1f}; ESR {esr:.1f}, "
                   f"-L_M {no_lm:.1f} (drop {esr - no_lm:+.1f}), -L_ESR {no_lesr:.1f} (drop {esr - no_lesr:+.1f})")


# -- 12: determinism and resume ------------------------------------------------------

def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_c12_determinism_and_resume(tmp_path):
    cfg = hx.ExperimentConfig.default("I")
    cur = hx.Curriculum.from_seed(0, cfg.generation.num_domains)
    mismatches = []
    for kind, k in (("esr", 3), ("perpr", 6), ("agem", 4)):
        strat = cfg.strategy(kind)
        a, b, c = (tmp_path / kind / x for x in "abc")
        hx.run_curriculum(cfg, strat, cur, run_dir=a)
        hx.run_curriculum(cfg, strat, cur, run_dir=b)
        hx.run_curriculum(cfg, strat, cur, run_dir=c, stop_after=k)
        hx.run_curriculum(cfg, strat, cur, run_dir=c)
        fa = _files(a)
        if fa != _files(b):
            mismatches.append(f"{kind} rerun")
        if fa != _files(c):
            mismatches.append(f"{kind} resume after domain {k}")
    record(12, not mismatches, "rerun and kill-and-resume outputs bit-identical for ESR, PerpR, A-GEM"
           if not mismatches else f"mismatches: {mismatches}")
