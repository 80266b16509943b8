"""Navigation metrics, result matrices and forgetting summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .navsim import Episode, Scene, SceneDomain, shortest_path

SUCCESS_THRESHOLD = 3.0  # meters
METRICS = ("SR", "SPL", "NE", "GP")


class IllegalTrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    spl_term: float
    ne: float
    gp: float
    path_length_taken: float
    shortest_length: float


def episode_metrics(trajectory: Sequence[int], episode: Episode, scene: Scene,
                    success_threshold: float = SUCCESS_THRESHOLD) -> EpisodeResult:
    """Score one trajectory (a node sequence starting at ``episode.start``)."""
    nodes = list(getattr(trajectory, "nodes", trajectory))
    if not nodes or nodes[0] != episode.start:
        raise IllegalTrajectoryError("illegal trajectory: does not begin at the episode start")
    taken = 0.0
    for u, v in zip(nodes[:-1], nodes[1:]):
        if v not in scene.adjacency[u]:
            raise IllegalTrajectoryError(f"illegal trajectory: {u} -> {v} is not an edge")
        taken += scene.edge_length(u, v)
    _, ne = shortest_path(scene, nodes[-1], episode.goal)
    _, l = shortest_path(scene, episode.start, episode.goal)
    success = ne <= success_threshold
    if l == 0.0:
        spl = 1.0 if success else 0.0
    else:
        spl = float(success) * l / max(taken, l)
    return EpisodeResult(success, spl, ne, l - ne, taken, l)


def summarize(results: Iterable[EpisodeResult]) -> dict[str, float]:
    """Means over episodes; SR and SPL in percent, NE and GP in meters."""
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    return {
        "SR": 100.0 * float(np.mean([r.success for r in results])),
        "SPL": 100.0 * float(np.mean([r.spl_term for r in results])),
        "NE": float(np.mean([r.ne for r in results])),
        "GP": float(np.mean([r.gp for r in results])),
    }


def evaluate_domain(params, domain: SceneDomain, strategy_eval_hook: Callable | None = None,
                    max_steps: int = 10, rng: np.random.Generator | None = None,
                    repeats: int = 1) -> dict[str, float]:
    """Mean SR/SPL/NE/GP of greedy rollouts over the domain's validation episodes.

    ``strategy_eval_hook(params, episodes, scenes, max_steps)`` may replace
    the default greedy rollout (AdapterCL uses it to pick an adapter per
    episode). With ``rng`` the policy samples from its softmax instead of
    acting greedily, ``repeats`` times per episode.
    """
    from .policy import Mode, greedy_batch, rollout

    scenes = domain.scene_map()
    eps = domain.val_episodes
    if not eps:
        raise ValueError(f"domain {domain.domain_id} has no validation episodes")
    if rng is not None:
        trajs, owners = [], []
        for e in eps:
            for _ in range(repeats):
                trajs.append(rollout(params, e, scenes[e.scene_id], Mode.SAMPLED, max_steps, rng=rng)[1])
                owners.append(e)
    else:
        hook = strategy_eval_hook or (lambda p, es, sc, ms: greedy_batch(p, es, sc, ms))
        trajs, owners = hook(params, eps, scenes, max_steps), eps
    return summarize(episode_metrics(t.nodes, e, scenes[e.scene_id]) for t, e in zip(trajs, owners))


def average_metric(row: Sequence[float | None]) -> float:
    """Mean of the final row of a result matrix."""
    if len(row) == 0 or any(v is None or (isinstance(v, float) and math.isnan(v)) for v in row):
        raise ValueError("incomplete row: every learned domain needs a value")
    return float(sum(row) / len(row))


def stability_plasticity(matrix: np.ndarray, k: int) -> tuple[float, float, float]:
    """Stability, plasticity and their harmonic mean after the k-th domain (1-based).

    ``matrix[s-1, i-1]`` holds R[s][i].
    """
    if k < 2:
        raise ValueError("stability needs k >= 2")
    m = np.asarray(matrix, float)
    past = m[k - 1, : k - 1]
    diag = np.diag(m)[:k]
    if np.isnan(past).any() or np.isnan(diag).any():
        raise ValueError("result matrix is missing cells needed for stability/plasticity")
    s = float(past.mean())
    p = float(diag.mean())
    h = 0.0 if s + p == 0 else 2 * s * p / (s + p)
    return s, p, h


@dataclass
class ResultMatrix:
    """R[s][i] for every metric: domain i evaluated after learning domain s."""

    domain_count: int
    strategy: str = ""
    curriculum_seed: int = 0
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for m in METRICS:
            self.values.setdefault(m, np.full((self.domain_count, self.domain_count), np.nan))

    def set_row(self, s: int, per_domain: Sequence[Mapping[str, float]], start: int = 0) -> None:
        """Fill R[s][start+1 .. start+len] (s is 1-based)."""
        for j, cell in enumerate(per_domain):
            for m in METRICS:
                self.values[m][s - 1, start + j] = cell[m]

    def row(self, metric: str, s: int | None = None) -> list[float]:
        s = self.domain_count if s is None else s
        return list(self.values[metric][s - 1, :s])

    def average(self, metric: str) -> float:
        return average_metric(self.row(metric))

    def rows(self) -> list[tuple[int, int, str, float]]:
        out = []
        for m in METRICS:
            for s in range(1, self.domain_count + 1):
                for i in range(1, s + 1):
                    v = self.values[m][s - 1, i - 1]
                    if not np.isnan(v):
                        out.append((s, i, m, float(v)))
        return out


MATRIX_HEADER = ("strategy", "curriculum_seed", "s", "i", "metric", "value")


def write_matrix(matrices: Sequence[ResultMatrix], path: str | Path, config_hash: str,
                 schema_version: int = 1, extra: Mapping[str, object] | None = None) -> None:
    """Tab-separated rows ``strategy, seed, s, i, metric, value`` under a comment header.

    ``extra`` adds further ``# key: value`` header lines.
    """
    lines = [f"# schema_version: {schema_version}", f"# config_hash: {config_hash}"]
    lines += [f"# {k}: {v}" for k, v in (extra or {}).items()]
    lines.append("\t".join(MATRIX_HEADER))
    for mat in matrices:
        for s, i, m, v in mat.rows():
            lines.append(f"{mat.strategy}\t{mat.curriculum_seed}\t{s}\t{i}\t{m}\t{v!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path: str | Path) -> tuple[dict[str, str], list[ResultMatrix]]:
    header, mats = {}, {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            header[key.strip()] = val.strip()
            continue
        parts = line.split("\t")
        if parts[0] == "strategy" or not line.strip():
            continue
        strat, seed, s, i, m, v = parts
        key = (strat, int(seed))
        mats.setdefault(key, []).append((int(s), int(i), m, float(v)))
    out = []
    for (strat, seed), cells in mats.items():
        n = max(s for s, _, _, _ in cells)
        mat = ResultMatrix(n, strat, seed)
        for s, i, m, v in cells:
            mat.values[m][s - 1, i - 1] = v
        out.append(mat)
    return header, out
