"""Procedural scene domains for continual instruction-following navigation.

A scene is a random geometric graph laid out in a square arena. Each node
carries a landmark token and a feature vector; a scene domain bundles a few
scenes with train/val episodes. Domains are made deliberately different from
each other (disjoint landmark vocabularies, shifted and re-mixed feature
distributions) so that sequential training on them forgets.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1

# Token ids shared by every domain.
BOS, EOS, TARGET, HINT = 0, 1, 2, 3
DIRECTION_BASE = 4
NUM_DIRECTIONS = 8
LANDMARK_BASE = DIRECTION_BASE + NUM_DIRECTIONS

STOP = -1  # candidate marker for the stop action

_LANDMARK_CODE_SEED = 0x5EED


class Flavor(str, Enum):
    INITIAL = "I"
    DIALOGUE = "D"


class GenerationError(RuntimeError):
    """Raised when a domain cannot be generated under the given parameters."""


@dataclass(frozen=True)
class GenParams:
    num_domains: int = 10
    num_scenes: int = 4
    nodes_per_scene: int = 12
    feature_dim: int = 8
    max_degree: int = 5
    arena_size: float = 30.0
    radius: float = 6.0
    landmarks_per_domain: int = 24
    train_episodes: int = 200
    val_episodes: int = 100
    min_path_len: int = 2  # in hops
    max_steps: int = 6
    shift_margin: float = 1.0
    mixing: float = 0.0
    feature_noise: float = 0.1
    position_dims: int = 2  # 0 or 2
    position_scale: float = 2.0
    grid: tuple[int, int] | None = None
    grid_spacing: float = 5.0
    max_retries: int = 50

    def validate(self) -> None:
        if self.num_scenes < 1:
            raise ValueError("num_scenes must be >= 1")
        if self.train_episodes < 1:
            raise ValueError("train_episodes must be >= 1")
        if self.val_episodes < 0:
            raise ValueError("val_episodes must be >= 0")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        if self.min_path_len < 0 or self.max_steps < 1:
            raise ValueError("invalid path length bounds")
        if self.grid is None and self.nodes_per_scene < 2:
            raise ValueError("nodes_per_scene must be >= 2")

    @property
    def vocab_size(self) -> int:
        return LANDMARK_BASE + self.num_domains * self.landmarks_per_domain

    @classmethod
    def from_dict(cls, data: dict) -> "GenParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generation keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("grid") is not None:
            data["grid"] = tuple(data["grid"])
        return cls(**data)


@dataclass
class Scene:
    scene_id: int
    positions: np.ndarray  # (n, 2) meters
    features: np.ndarray  # (n, F)
    landmarks: np.ndarray  # (n,) token ids
    adjacency: list[list[int]]  # sorted neighbor ids per node

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    def edge_length(self, a: int, b: int) -> float:
        return float(np.hypot(*(self.positions[a] - self.positions[b])))

    def edges(self) -> list[tuple[int, int]]:
        return [(a, b) for a, nbrs in enumerate(self.adjacency) for b in nbrs if a < b]


@dataclass
class Episode:
    episode_id: int
    domain_id: int
    scene_id: int
    start: int
    goal: int
    path: list[int]
    instruction: list[int]
    gt_actions: list[int]
    flavor: Flavor
    # Memoized batch layout used by the policy; never serialized.
    _layout: object = field(default=None, init=False, repr=False, compare=False)

    @property
    def num_steps(self) -> int:
        return len(self.gt_actions)

    @property
    def key(self) -> tuple[int, int]:
        return (self.domain_id, self.episode_id)


@dataclass
class SceneDomain:
    domain_id: int
    flavor: Flavor
    scenes: list[Scene]
    train_episodes: list[Episode]
    val_episodes: list[Episode]
    landmark_vocab: tuple[int, int]  # [lo, hi)
    feature_mean: np.ndarray

    def scene_map(self) -> dict[int, Scene]:
        return {s.scene_id: s for s in self.scenes}


def candidate_actions(scene: Scene, node: int) -> list[int]:
    """Neighbors of ``node`` in ascending id order, then ``STOP``.

    The order is canonical: stored logits and action indices depend on it.
    """
    if not 0 <= node < scene.num_nodes:
        raise KeyError(f"unknown node {node} in scene {scene.scene_id}")
    return list(scene.adjacency[node]) + [STOP]


def shortest_path(scene: Scene, a: int, b: int) -> tuple[list[int], float]:
    """Metric shortest path from ``a`` to ``b``.

    Equal-length paths are resolved towards the lexicographically smallest
    node sequence.
    """
    n = scene.num_nodes
    if not (0 <= a < n and 0 <= b < n):
        raise KeyError(f"unknown node in ({a}, {b})")
    best: dict[int, tuple[float, tuple[int, ...]]] = {a: (0.0, (a,))}
    heap = [(0.0, (a,))]
    done = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in done:
            continue
        done.add(node)
        if node == b:
            return list(path), dist
        for nb in scene.adjacency[node]:
            if nb in done:
                continue
            cand = (dist + scene.edge_length(node, nb), path + (nb,))
            if nb not in best or cand < best[nb]:
                best[nb] = cand
                heapq.heappush(heap, cand)
    raise GenerationError(f"scene {scene.scene_id} is disconnected")


def distance_matrix(scene: Scene) -> np.ndarray:
    """All-pairs metric distances (Dijkstra from each node)."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import dijkstra

    rows, cols, vals = [], [], []
    for a, b in scene.edges():
        w = scene.edge_length(a, b)
        rows += [a, b]
        cols += [b, a]
        vals += [w, w]
    graph = csr_matrix((vals, (rows, cols)), shape=(scene.num_nodes,) * 2)
    return dijkstra(graph, directed=False)


def _hop_matrix(scene: Scene) -> np.ndarray:
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path as sp

    rows = [a for a, nbrs in enumerate(scene.adjacency) for _ in nbrs]
    cols = [b for nbrs in scene.adjacency for b in nbrs]
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(scene.num_nodes,) * 2)
    return sp(graph, unweighted=True)


def direction_token(p: np.ndarray, q: np.ndarray) -> int:
    """Compass bucket (8-way) of the move from ``p`` to ``q``."""
    angle = math.atan2(q[1] - p[1], q[0] - p[0])
    bucket = int(round(angle / (2 * math.pi / NUM_DIRECTIONS))) % NUM_DIRECTIONS
    return DIRECTION_BASE + bucket


def make_instruction(scene: Scene, path: Sequence[int], flavor: Flavor) -> list[int]:
    """Token sequence describing ``path``.

    Initial-instruction flavor narrates every landmark with the compass
    direction of each hop. Dialogue flavor only names the target and hints at
    the first half of the route.
    """
    flavor = Flavor(flavor)
    lm = scene.landmarks
    if flavor is Flavor.INITIAL:
        tokens = [BOS, int(lm[path[0]])]
        for u, v in zip(path[:-1], path[1:]):
            tokens.append(direction_token(scene.positions[u], scene.positions[v]))
            tokens.append(int(lm[v]))
        tokens.append(EOS)
        return tokens
    hint = [int(lm[n]) for n in path[: math.ceil(len(path) / 2)]]
    return [BOS, TARGET, int(lm[path[-1]]), HINT, *hint, EOS]


def landmark_code(token: int, dim: int) -> np.ndarray:
    """Fixed visual signature of a landmark token."""
    rng = np.random.default_rng([_LANDMARK_CODE_SEED, token, dim])
    return rng.standard_normal(dim)


def node_latent(pos: np.ndarray, landmarks: np.ndarray, params: GenParams) -> np.ndarray:
    """Domain-independent description of nodes: scaled position, then landmark code."""
    k = params.position_dims
    codes = np.stack([landmark_code(int(t), params.feature_dim - k) for t in landmarks])
    if k == 0:
        return codes
    centered = params.position_scale * (2.0 * pos / params.arena_size - 1.0)
    return np.concatenate([centered, codes], axis=1)


def domain_feature_mean(domain_id: int, params: GenParams) -> np.ndarray:
    # Axis-aligned offsets whose pairwise distances are >= shift_margin.
    mean = np.zeros(params.feature_dim)
    axis = domain_id % params.feature_dim
    sign = 1.0 if (domain_id // params.feature_dim) % 2 == 0 else -1.0
    mean[axis] = sign * params.shift_margin * (1 + domain_id // (2 * params.feature_dim))
    return mean


def _domain_mixing(domain_id: int, seed: int, params: GenParams) -> np.ndarray:
    rng = np.random.default_rng([seed, domain_id, 17])
    q, _ = np.linalg.qr(rng.standard_normal((params.feature_dim, params.feature_dim)))
    return (1.0 - params.mixing) * np.eye(params.feature_dim) + params.mixing * q


def _layout_positions(rng: np.random.Generator, params: GenParams) -> np.ndarray:
    if params.grid is not None:
        rows, cols = params.grid
        ys, xs = np.divmod(np.arange(rows * cols), cols)
        return np.stack([xs, ys], axis=1).astype(float) * params.grid_spacing
    return rng.uniform(0.0, params.arena_size, size=(params.nodes_per_scene, 2))


def _build_adjacency(pos: np.ndarray, params: GenParams) -> list[list[int]] | None:
    n = len(pos)
    if params.grid is not None:
        rows, cols = params.grid
        adj = [set() for _ in range(n)]
        for r in range(rows):
            for c in range(cols):
                i = r * cols + c
                if c + 1 < cols:
                    adj[i].add(i + 1)
                    adj[i + 1].add(i)
                if r + 1 < rows:
                    adj[i].add(i + cols)
                    adj[i + cols].add(i)
        if any(len(a) > params.max_degree for a in adj):
            return None
        return [sorted(a) for a in adj]

    from scipy.sparse.csgraph import minimum_spanning_tree

    dist = np.hypot(*(pos[:, None, :] - pos[None, :, :]).transpose(2, 0, 1))
    mst = minimum_spanning_tree(dist).tocoo()
    adj = [set() for _ in range(n)]
    for a, b in zip(mst.row, mst.col):
        adj[a].add(int(b))
        adj[b].add(int(a))
    if any(len(a) > params.max_degree for a in adj):
        return None
    iu, ju = np.triu_indices(n, 1)
    order = np.lexsort((ju, iu, dist[iu, ju]))
    for k in order:
        a, b = int(iu[k]), int(ju[k])
        if dist[a, b] > params.radius:
            break
        if b in adj[a] or len(adj[a]) >= params.max_degree or len(adj[b]) >= params.max_degree:
            continue
        adj[a].add(b)
        adj[b].add(a)
    return [sorted(a) for a in adj]


def _make_scene(scene_id: int, domain_id: int, rng: np.random.Generator, params: GenParams,
                mixing: np.ndarray, mean: np.ndarray) -> Scene:
    for _ in range(params.max_retries):
        pos = _layout_positions(rng, params)
        adj = _build_adjacency(pos, params)
        if adj is not None:
            break
    else:
        raise GenerationError("could not build a connected scene within max_degree")
    n = len(pos)
    lo = LANDMARK_BASE + domain_id * params.landmarks_per_domain
    if n <= params.landmarks_per_domain:
        lms = lo + rng.permutation(params.landmarks_per_domain)[:n]
    else:
        lms = lo + rng.integers(0, params.landmarks_per_domain, size=n)
    latent = node_latent(pos, lms, params)
    feats = mean + latent @ mixing.T + params.feature_noise * rng.standard_normal(latent.shape)
    return Scene(scene_id, pos, feats, lms.astype(np.int64), adj)


def _episode_from_path(scene: Scene, path: list[int], episode_id: int, domain_id: int,
                       flavor: Flavor) -> Episode:
    actions = [candidate_actions(scene, u).index(v) for u, v in zip(path[:-1], path[1:])]
    actions.append(len(scene.adjacency[path[-1]]))  # STOP is the last candidate
    return Episode(episode_id, domain_id, scene.scene_id, path[0], path[-1], list(path),
                   make_instruction(scene, path, flavor), actions, flavor)


def generate_domain(domain_id: int, seed: int, flavor: Flavor | str, params: GenParams) -> SceneDomain:
    """Deterministically build one scene domain.

    Episodes follow shortest paths between sampled (start, goal) pairs at
    least ``min_path_len`` hops apart; validation pairs never repeat a
    training pair.
    """
    params.validate()
    flavor = Flavor(flavor)
    rng = np.random.default_rng([seed, domain_id])
    mean = domain_feature_mean(domain_id, params)
    mixing = _domain_mixing(domain_id, seed, params)
    scenes = [_make_scene(domain_id * 1000 + k, domain_id, rng, params, mixing, mean)
              for k in range(params.num_scenes)]

    pools = []
    for scene in scenes:
        hops = _hop_matrix(scene)
        ok = (hops >= params.min_path_len) & (hops + 1 <= params.max_steps) & np.isfinite(hops)
        pools.extend((scene, int(a), int(b)) for a, b in zip(*np.nonzero(ok)))
    total = params.train_episodes + params.val_episodes
    if not pools:
        raise GenerationError("infeasible path length: no (start, goal) pair satisfies "
                              f"min_path_len={params.min_path_len}, max_steps={params.max_steps}")
    episodes = []
    for k in rng.permutation(len(pools)):
        scene, a, b = pools[int(k)]
        path, _ = shortest_path(scene, a, b)
        # the metric shortest path may take more hops than the hop-minimal one
        if len(path) > params.max_steps:
            continue
        episodes.append(_episode_from_path(scene, path, len(episodes), domain_id, flavor))
        if len(episodes) == total:
            break
    else:
        raise GenerationError(f"infeasible path length: only {len(episodes)} distinct pairs for "
                              f"{total} episodes")
    lo = LANDMARK_BASE + domain_id * params.landmarks_per_domain
    return SceneDomain(domain_id, flavor, scenes, episodes[: params.train_episodes],
                       episodes[params.train_episodes:], (lo, lo + params.landmarks_per_domain), mean)


def generate_benchmark(seed: int, flavor: Flavor | str, params: GenParams) -> list[SceneDomain]:
    return [generate_domain(d, seed, flavor, params) for d in range(params.num_domains)]


def default_params(flavor: Flavor | str) -> GenParams:
    """Benchmark defaults: 10 domains (I) or 6 (D) of 200 train / 100 val episodes."""
    if Flavor(flavor) is Flavor.DIALOGUE:
        return GenParams(num_domains=6)
    return GenParams()


# -- serialization ---------------------------------------------------------

def _episode_to_dict(ep: Episode) -> dict:
    return {"episode_id": ep.episode_id, "scene_id": ep.scene_id, "start": ep.start,
            "goal": ep.goal, "path": ep.path, "instruction": ep.instruction,
            "gt_actions": ep.gt_actions}


def domain_to_dict(domain: SceneDomain) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "scene_domain",
        "domain_id": domain.domain_id,
        "flavor": domain.flavor.value,
        "landmark_vocab": list(domain.landmark_vocab),
        "feature_mean": domain.feature_mean.tolist(),
        "scenes": [{"scene_id": s.scene_id, "positions": s.positions.tolist(),
                    "features": s.features.tolist(), "landmarks": s.landmarks.tolist(),
                    "adjacency": s.adjacency} for s in domain.scenes],
        "train_episodes": [_episode_to_dict(e) for e in domain.train_episodes],
        "val_episodes": [_episode_to_dict(e) for e in domain.val_episodes],
    }


def domain_from_dict(data: dict) -> SceneDomain:
    if data.get("schema_version") != SCHEMA_VERSION or data.get("kind") != "scene_domain":
        raise ValueError(f"unsupported domain bundle (schema {data.get('schema_version')!r})")
    flavor = Flavor(data["flavor"])
    did = data["domain_id"]
    scenes = [Scene(s["scene_id"], np.asarray(s["positions"], float), np.asarray(s["features"], float),
                    np.asarray(s["landmarks"], np.int64), [list(a) for a in s["adjacency"]])
              for s in data["scenes"]]

    def ep(e):
        return Episode(e["episode_id"], did, e["scene_id"], e["start"], e["goal"], e["path"],
                       e["instruction"], e["gt_actions"], flavor)

    return SceneDomain(did, flavor, scenes, [ep(e) for e in data["train_episodes"]],
                       [ep(e) for e in data["val_episodes"]], tuple(data["landmark_vocab"]),
                       np.asarray(data["feature_mean"], float))


def dumps_domain(domain: SceneDomain) -> str:
    return json.dumps(domain_to_dict(domain), sort_keys=True, separators=(",", ":"))


def save_domain(domain: SceneDomain, path: str | Path) -> None:
    Path(path).write_text(dumps_domain(domain))


def load_domain(path: str | Path) -> SceneDomain:
    return domain_from_dict(json.loads(Path(path).read_text()))
