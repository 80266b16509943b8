"""Sequence-to-action navigation policy with hand-derived gradients.

The policy encodes the instruction as the mean of its token embeddings and
scores every candidate move (neighbors, then STOP) with a two-layer tanh MLP
over ``[instruction ; proj(node features) ; proj(candidate features) ;
prev-action embedding]``. STOP uses a learned feature vector in place of
node features.

All rollouts whose trajectory is known in advance (teacher-forced and
logit-forced) are evaluated as one stacked matrix computation; the backward
pass is written out by hand over that fixed computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .navsim import STOP, Episode, Scene, candidate_actions


class DivergenceError(FloatingPointError):
    pass


class StaleLogitsError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    feature_dim: int = 8
    embed_dim: int = 16
    hidden_dim: int = 32
    action_dim: int = 8  # H_extra: width of the previous-action embedding
    max_degree: int = 5
    init_scale: float = 1.0
    token_init_scale: float = 1.0

    @property
    def sentinel(self) -> int:
        """Previous-action index used on the first step."""
        return self.max_degree

    @property
    def input_dim(self) -> int:
        return 3 * self.embed_dim + self.action_dim

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        E, F, H, A = self.embed_dim, self.feature_dim, self.hidden_dim, self.action_dim
        return [
            ("token_embedding", (self.vocab_size, E)),
            ("feature_projection", (F, E)),
            ("feature_bias", (E,)),
            ("stop_feature", (F,)),
            ("prev_action_embedding", (self.max_degree + 1, A)),
            ("w1", (self.input_dim, H)),
            ("b1", (H,)),
            ("w2", (H,)),
            ("b2", (1,)),
        ]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())


class PolicyParams:
    """Flat parameter vector with named array views."""

    def __init__(self, cfg: PolicyConfig, flat: np.ndarray | None = None):
        self.cfg = cfg
        if flat is None:
            flat = np.zeros(cfg.num_params)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (cfg.num_params,):
            raise ValueError(f"dimension mismatch: expected {cfg.num_params} parameters, "
                             f"got {flat.shape}")
        self.flat = flat
        self._views = {}
        offset = 0
        for name, shape in cfg.shapes():
            size = int(np.prod(shape))
            self._views[name] = flat[offset:offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.cfg, self.flat.copy())

    def unflatten(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._views.items()}

    @classmethod
    def from_arrays(cls, cfg: PolicyConfig, arrays: Mapping[str, np.ndarray]) -> "PolicyParams":
        flat = np.concatenate([np.asarray(arrays[name], float).ravel() for name, _ in cfg.shapes()])
        return cls(cfg, flat)


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> PolicyParams:
    p = PolicyParams(cfg)
    s = cfg.init_scale
    p["token_embedding"][:] = cfg.token_init_scale * rng.standard_normal(p["token_embedding"].shape)
    p["feature_projection"][:] = s * rng.standard_normal(p["feature_projection"].shape) / np.sqrt(cfg.feature_dim)
    p["stop_feature"][:] = s * rng.standard_normal(cfg.feature_dim)
    p["prev_action_embedding"][:] = s * rng.standard_normal(p["prev_action_embedding"].shape)
    p["w1"][:] = s * rng.standard_normal(p["w1"].shape) / np.sqrt(cfg.input_dim)
    p["w2"][:] = s * rng.standard_normal(cfg.hidden_dim) / np.sqrt(cfg.hidden_dim)
    return p


@dataclass
class Adapter:
    """Low-rank additive bottleneck on the scorer input: ``x + B (A x)``."""

    down: np.ndarray  # (r, D)
    up: np.ndarray  # (D, r)

    @classmethod
    def init(cls, cfg: PolicyConfig, rank: int, rng: np.random.Generator) -> "Adapter":
        down = rng.standard_normal((rank, cfg.input_dim)) / np.sqrt(cfg.input_dim)
        return cls(down, np.zeros((cfg.input_dim, rank)))

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.down.ravel(), self.up.ravel()])

    def with_flat(self, flat: np.ndarray) -> "Adapter":
        k = self.down.size
        return Adapter(flat[:k].reshape(self.down.shape).copy(), flat[k:].reshape(self.up.shape).copy())


# -- stacked layout --------------------------------------------------------

@dataclass
class Layout:
    """Static (parameter-free) inputs of a set of rollouts with known trajectories."""

    tokens: np.ndarray  # (T,) concatenated instruction tokens
    token_ep: np.ndarray  # (T,) owning rollout of each token
    inv_len: np.ndarray  # (B,) 1 / instruction length
    row_ep: np.ndarray  # (R,) owning rollout of each candidate row
    node_feat: np.ndarray  # (R, F)
    cand_feat: np.ndarray  # (R, F), zeros on STOP rows
    is_stop: np.ndarray  # (R,) bool
    prev: np.ndarray  # (R,) previous-action index
    starts: np.ndarray  # (S,) first row of each step
    sizes: np.ndarray  # (S,) candidate count per step
    step_ep: np.ndarray  # (S,) owning rollout of each step
    action: np.ndarray  # (S,) executed candidate index per step
    num_rollouts: int = 1

    @property
    def target_rows(self) -> np.ndarray:
        return self.starts + self.action


def _layout_for_path(cfg: PolicyConfig, instruction: Sequence[int], scene: Scene,
                     nodes: Sequence[int], actions: Sequence[int]) -> Layout:
    if scene.features.shape[1] != cfg.feature_dim:
        raise ValueError(f"dimension mismatch: scene features have width {scene.features.shape[1]}, "
                         f"policy expects {cfg.feature_dim}")
    node_feat, cand_feat, is_stop, prev, sizes = [], [], [], [], []
    prev_action = cfg.sentinel
    for node, action in zip(nodes, actions):
        cands = candidate_actions(scene, node)
        nbrs = cands[:-1]
        k = len(cands)
        sizes.append(k)
        node_feat.append(np.repeat(scene.features[node][None, :], k, axis=0))
        cf = np.zeros((k, cfg.feature_dim))
        if nbrs:
            cf[:-1] = scene.features[nbrs]
        cand_feat.append(cf)
        stop = np.zeros(k, bool)
        stop[-1] = True
        is_stop.append(stop)
        prev.append(np.full(k, prev_action))
        prev_action = action
    sizes = np.asarray(sizes, np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    tokens = np.asarray(instruction, np.int64)
    R = int(sizes.sum())
    return Layout(tokens, np.zeros(len(tokens), np.int64), np.array([1.0 / len(tokens)]),
                  np.zeros(R, np.int64), np.concatenate(node_feat), np.concatenate(cand_feat),
                  np.concatenate(is_stop), np.concatenate(prev), starts, sizes,
                  np.zeros(len(sizes), np.int64), np.asarray(actions, np.int64))


def stack_layouts(layouts: Sequence[Layout]) -> Layout:
    if len(layouts) == 1:
        return layouts[0]
    row_off = np.cumsum([0] + [len(l.row_ep) for l in layouts[:-1]])
    return Layout(
        tokens=np.concatenate([l.tokens for l in layouts]),
        token_ep=np.concatenate([np.full(len(l.tokens), b) for b, l in enumerate(layouts)]),
        inv_len=np.concatenate([l.inv_len for l in layouts]),
        row_ep=np.concatenate([np.full(len(l.row_ep), b) for b, l in enumerate(layouts)]),
        node_feat=np.concatenate([l.node_feat for l in layouts]),
        cand_feat=np.concatenate([l.cand_feat for l in layouts]),
        is_stop=np.concatenate([l.is_stop for l in layouts]),
        prev=np.concatenate([l.prev for l in layouts]),
        starts=np.concatenate([l.starts + o for l, o in zip(layouts, row_off)]),
        sizes=np.concatenate([l.sizes for l in layouts]),
        step_ep=np.concatenate([np.full(len(l.sizes), b) for b, l in enumerate(layouts)]),
        action=np.concatenate([l.action for l in layouts]),
        num_rollouts=len(layouts),
    )


def teacher_layout(cfg: PolicyConfig, episode: Episode, scene: Scene) -> Layout:
    cached = episode._layout
    if cached is not None and cached[0] == cfg.feature_dim and cached[1] == cfg.sentinel:
        return cached[2]
    layout = _layout_for_path(cfg, episode.instruction, scene, episode.path, episode.gt_actions)
    episode._layout = (cfg.feature_dim, cfg.sentinel, layout)
    return layout


# -- forward / backward ----------------------------------------------------

@dataclass
class _Cache:
    enc: np.ndarray
    x: np.ndarray
    u: np.ndarray | None
    xa: np.ndarray
    h: np.ndarray
    scores: np.ndarray


def _forward(params: PolicyParams, lay: Layout, adapter: Adapter | None = None) -> _Cache:
    tok = params["token_embedding"]
    if lay.tokens.size and lay.tokens.max() >= tok.shape[0]:
        raise ValueError("dimension mismatch: token id outside embedding table")
    if lay.node_feat.shape[1] != params.cfg.feature_dim:
        raise ValueError("dimension mismatch: feature width differs from policy config")
    B = lay.num_rollouts
    enc = np.zeros((B, tok.shape[1]))
    np.add.at(enc, lay.token_ep, tok[lay.tokens])
    enc *= lay.inv_len[:, None]
    wp, bp = params["feature_projection"], params["feature_bias"]
    cand = np.where(lay.is_stop[:, None], params["stop_feature"][None, :], lay.cand_feat)
    x = np.concatenate([enc[lay.row_ep], lay.node_feat @ wp + bp, cand @ wp + bp,
                        params["prev_action_embedding"][lay.prev]], axis=1)
    u = None
    xa = x
    if adapter is not None:
        u = x @ adapter.down.T
        xa = x + u @ adapter.up.T
    h = np.tanh(xa @ params["w1"] + params["b1"])
    scores = h @ params["w2"] + params["b2"][0]
    return _Cache(enc, x, u, xa, h, scores)


def _backward(params: PolicyParams, lay: Layout, c: _Cache, dscores: np.ndarray,
              adapter: Adapter | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    cfg = params.cfg
    E = cfg.embed_dim
    g = PolicyParams(cfg)
    g["w2"][:] = c.h.T @ dscores
    g["b2"][0] = dscores.sum()
    dpre = np.outer(dscores, params["w2"]) * (1.0 - c.h * c.h)
    g["w1"][:] = c.xa.T @ dpre
    g["b1"][:] = dpre.sum(axis=0)
    dxa = dpre @ params["w1"].T
    gad = None
    dx = dxa
    if adapter is not None:
        dup = dxa.T @ c.u
        du = dxa @ adapter.up
        ddown = du.T @ c.x
        dx = dxa + du @ adapter.down
        gad = np.concatenate([ddown.ravel(), dup.ravel()])
    denc_rows, dpn, dpc, dpa = dx[:, :E], dx[:, E:2 * E], dx[:, 2 * E:3 * E], dx[:, 3 * E:]
    denc = np.zeros((lay.num_rollouts, E))
    np.add.at(denc, lay.row_ep, denc_rows)
    denc *= lay.inv_len[:, None]
    np.add.at(g["token_embedding"], lay.tokens, denc[lay.token_ep])
    wp = params["feature_projection"]
    cand = np.where(lay.is_stop[:, None], params["stop_feature"][None, :], lay.cand_feat)
    g["feature_projection"][:] = lay.node_feat.T @ dpn + cand.T @ dpc
    g["feature_bias"][:] = dpn.sum(axis=0) + dpc.sum(axis=0)
    g["stop_feature"][:] = dpc[lay.is_stop].sum(axis=0) @ wp.T
    np.add.at(g["prev_action_embedding"], lay.prev, dpa)
    return g.flat, gad


def _segment_log_softmax(scores: np.ndarray, lay: Layout) -> np.ndarray:
    mx = np.maximum.reduceat(scores, lay.starts)
    shifted = scores - np.repeat(mx, lay.sizes)
    lse = np.log(np.add.reduceat(np.exp(shifted), lay.starts))
    return shifted - np.repeat(lse, lay.sizes)


def step_log_probs(params: PolicyParams, lay: Layout, adapter: Adapter | None = None) -> np.ndarray:
    """Log-probability of the executed action at every step of the layout."""
    c = _forward(params, lay, adapter)
    return _segment_log_softmax(c.scores, lay)[lay.target_rows]


def _imitation(params: PolicyParams, lay: Layout, adapter: Adapter | None):
    c = _forward(params, lay, adapter)
    logp = _segment_log_softmax(c.scores, lay)
    B = lay.num_rollouts
    loss = -logp[lay.target_rows].sum() / B
    d = np.exp(logp)
    d[lay.target_rows] -= 1.0
    d /= B
    g, gad = _backward(params, lay, c, d, adapter)
    return loss, g, gad


def imitation_loss_and_grad(params: PolicyParams, episodes: Sequence[Episode],
                            scenes: Mapping[int, Scene], adapter: Adapter | None = None,
                            ) -> tuple[float, np.ndarray]:
    """Teacher-forced cross-entropy, summed over steps and averaged over episodes."""
    if not episodes:
        raise ValueError("empty batch")
    lay = stack_layouts([teacher_layout(params.cfg, e, scenes[e.scene_id]) for e in episodes])
    loss, g, _ = _imitation(params, lay, adapter)
    return float(loss), g


def adapter_loss_and_grad(params: PolicyParams, adapter: Adapter, episodes: Sequence[Episode],
                          scenes: Mapping[int, Scene]) -> tuple[float, np.ndarray, np.ndarray]:
    lay = stack_layouts([teacher_layout(params.cfg, e, scenes[e.scene_id]) for e in episodes])
    loss, g, gad = _imitation(params, lay, adapter)
    return float(loss), g, gad


def _forced_layout(cfg: PolicyConfig, episode: Episode, scene: Scene, Z: Sequence[np.ndarray],
                   actions: Sequence[int] | None) -> Layout:
    nodes, acts = _forced_path(episode, scene, Z, actions)
    return _layout_for_path(cfg, episode.instruction, scene, nodes, acts)


def _forced_path(episode: Episode, scene: Scene, Z: Sequence[np.ndarray],
                 actions: Sequence[int] | None) -> tuple[list[int], list[int]]:
    if len(Z) < 1:
        raise ValueError("logit-forced rollout needs at least one stored logit vector")
    node = episode.start
    nodes, acts = [], []
    for n, z in enumerate(Z):
        cands = candidate_actions(scene, node)
        if len(z) != len(cands):
            raise StaleLogitsError(f"stale logits: step {n} stores {len(z)} logits but node {node} "
                                   f"has {len(cands)} candidates")
        a = int(actions[n]) if actions is not None else int(np.argmax(z))
        nodes.append(node)
        acts.append(a)
        if cands[a] == STOP:
            break
        node = cands[a]
    if len(acts) != len(Z):
        raise StaleLogitsError("stale logits: trajectory stopped before the stored sequence ended")
    return nodes, acts


def esr_loss_and_grad(params: PolicyParams, episode: Episode, Z: Sequence[np.ndarray],
                      scene: Scene, actions: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Squared distance between stored and current logits along the replayed trajectory."""
    return esr_batch_loss_and_grad(params, [(episode, Z, actions)], {episode.scene_id: scene})


def esr_layout(cfg: PolicyConfig, episode: Episode, Z: Sequence[np.ndarray], scene: Scene,
               actions: Sequence[int] | None = None) -> Layout:
    return _forced_layout(cfg, episode, scene, Z, actions)


def esr_batch_loss_and_grad(params: PolicyParams, items, scenes: Mapping[int, Scene],
                            layouts: Sequence[Layout] | None = None) -> tuple[float, np.ndarray]:
    """Batch form: mean over stored episodes of the per-episode logit loss.

    ``items`` holds ``(episode, Z, actions)`` triples; ``layouts`` may supply
    precomputed forced layouts in the same order.
    """
    if layouts is None:
        layouts = [esr_layout(params.cfg, e, Z, scenes[e.scene_id], a) for e, Z, a in items]
    lay = stack_layouts(layouts)
    target = np.concatenate([np.concatenate([np.asarray(z, float) for z in Z]) for _, Z, _ in items])
    c = _forward(params, lay)
    diff = target - c.scores
    B = lay.num_rollouts
    loss = float((diff * diff).sum() / B)
    g, _ = _backward(params, lay, c, -2.0 * diff / B)
    return loss, g


# -- rollouts ----------------------------------------------------------------

class Mode(str, Enum):
    TEACHER_FORCED = "teacher"
    GREEDY = "greedy"
    LOGIT_FORCED = "logit"
    SAMPLED = "sampled"


@dataclass
class StepTrace:
    node: int
    candidates: list[int]
    logits: np.ndarray
    log_prob: float
    action: int


@dataclass
class Trajectory:
    nodes: list[int]
    stopped: bool

    @property
    def end(self) -> int:
        return self.nodes[-1]


def forward_step(params: PolicyParams, instruction: Sequence[int], scene: Scene, node: int,
                 prev_action: int | None, adapter: Adapter | None = None) -> np.ndarray:
    """Logits over ``candidate_actions(scene, node)``.

    ``prev_action=None`` means the first step of an episode.
    """
    cfg = params.cfg
    prev = cfg.sentinel if prev_action is None else int(prev_action)
    if not 0 <= prev <= cfg.max_degree:
        raise ValueError(f"previous action {prev} outside [0, {cfg.max_degree}]")
    lay = _layout_for_path(cfg, instruction, scene, [node], [0])
    lay.prev[:] = prev
    return _forward(params, lay, adapter).scores


def _trace(node, cands, logits, action) -> StepTrace:
    logits = np.asarray(logits, float)
    m = logits.max()
    logp = logits - m - np.log(np.exp(logits - m).sum())
    return StepTrace(node, cands, logits, float(logp[action]), int(action))


def rollout(params: PolicyParams, episode: Episode, scene: Scene, mode: Mode | str = Mode.GREEDY,
            max_steps: int = 10, Z: Sequence[np.ndarray] | None = None,
            actions: Sequence[int] | None = None, adapter: Adapter | None = None,
            rng: np.random.Generator | None = None) -> tuple[list[StepTrace], Trajectory]:
    """Run the policy on one episode.

    Modes: teacher-forced (execute the ground-truth actions), greedy (argmax
    until STOP or ``max_steps``), logit-forced (execute ``actions`` if given,
    else the argmax of each stored logit vector in ``Z``, while recording the
    current logits), and sampled (draw from the softmax with ``rng``).
    """
    mode = Mode(mode)
    cfg = params.cfg
    if mode in (Mode.TEACHER_FORCED, Mode.LOGIT_FORCED):
        if mode is Mode.TEACHER_FORCED:
            nodes, acts = list(episode.path), list(episode.gt_actions)
        else:
            if Z is None:
                raise ValueError("logit-forced rollout requires stored logits Z")
            nodes, acts = _forced_path(episode, scene, Z, actions)
        lay = _layout_for_path(cfg, episode.instruction, scene, nodes, acts)
        scores = _forward(params, lay, adapter).scores
        traces = [_trace(n, candidate_actions(scene, n), scores[s:s + k], a)
                  for n, a, s, k in zip(nodes, acts, lay.starts, lay.sizes)]
        path = list(nodes)
        stopped = candidate_actions(scene, nodes[-1])[acts[-1]] == STOP
        if not stopped:
            path.append(candidate_actions(scene, nodes[-1])[acts[-1]])
        return traces, Trajectory(path, stopped)

    if mode is Mode.SAMPLED and rng is None:
        raise ValueError("sampled rollout requires an rng")
    node, prev = episode.start, None
    traces, path = [], [node]
    for _ in range(max_steps):
        cands = candidate_actions(scene, node)
        logits = forward_step(params, episode.instruction, scene, node, prev, adapter)
        if mode is Mode.GREEDY:
            a = int(np.argmax(logits))  # first maximum: lowest index wins ties
        else:
            p = np.exp(logits - logits.max())
            a = int(rng.choice(len(cands), p=p / p.sum()))
        traces.append(_trace(node, cands, logits, a))
        if cands[a] == STOP:
            return traces, Trajectory(path, True)
        node, prev = cands[a], a
        path.append(node)
    return traces, Trajectory(path, False)


def greedy_batch(params: PolicyParams, episodes: Sequence[Episode], scenes: Mapping[int, Scene],
                 max_steps: int, adapter: Adapter | None = None) -> list[Trajectory]:
    """Greedy rollouts of many episodes, advanced in lockstep.

    Produces exactly the trajectories of ``rollout(..., mode=GREEDY)``.
    """
    cfg = params.cfg
    state = [(e.start, None) for e in episodes]
    paths = [[e.start] for e in episodes]
    stopped = [False] * len(episodes)
    active = list(range(len(episodes)))
    for _ in range(max_steps):
        if not active:
            break
        lays = []
        for b in active:
            e = episodes[b]
            node, prev = state[b]
            lay = _layout_for_path(cfg, e.instruction, scenes[e.scene_id], [node], [0])
            lay.prev[:] = cfg.sentinel if prev is None else prev
            lays.append(lay)
        lay = stack_layouts(lays)
        scores = _forward(params, lay, adapter).scores
        still = []
        for j, b in enumerate(active):
            s = scores[lay.starts[j]:lay.starts[j] + lay.sizes[j]]
            a = int(np.argmax(s))
            cands = candidate_actions(scenes[episodes[b].scene_id], state[b][0])
            if cands[a] == STOP:
                stopped[b] = True
                continue
            state[b] = (cands[a], a)
            paths[b].append(cands[a])
            still.append(b)
        active = still
    return [Trajectory(p, s) for p, s in zip(paths, stopped)]


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(flat: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamHyper = AdamHyper(),
                   context: str = "") -> tuple[np.ndarray, AdamState]:
    """One Adam update; returns new parameters and state without mutating inputs."""
    if flat.shape != grad.shape or state.m.shape != flat.shape:
        raise ValueError("shape mismatch between parameters, gradient and optimizer state")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"divergence: non-finite gradient ({context or 'no context'})")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grad * grad
    mhat = m / (1 - hyper.beta1 ** t)
    vhat = v / (1 - hyper.beta2 ** t)
    return flat - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps), AdamState(m, v, t)
