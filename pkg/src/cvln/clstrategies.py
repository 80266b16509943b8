"""Continual-learning strategies and replay memory machinery.

Eight strategies share one training loop (:func:`train_domain`): Vanilla,
Joint, L2 anchoring, A-GEM, AdapterCL, reservoir replay (RandR), perplexity
replay (PerpR, plus its reversed ablation) and episodic self-replay (ESR).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .navsim import Episode, Scene, SceneDomain
from .policy import (Adapter, AdamHyper, AdamState, PolicyParams, _forward, adapter_loss_and_grad,
                     esr_batch_loss_and_grad, greedy_batch, imitation_loss_and_grad,
                     optimizer_step, stack_layouts, step_log_probs, teacher_layout)

LOGP_CLAMP = -50.0


class Kind(str, Enum):
    VANILLA = "vanilla"
    JOINT = "joint"
    L2 = "l2"
    AGEM = "agem"
    ADAPTERCL = "adaptercl"
    RANDR = "randr"
    PERPR = "perpr"
    PERPR_REV = "perpr_rev"
    ESR = "esr"


REHEARSAL = {Kind.RANDR, Kind.PERPR, Kind.PERPR_REV, Kind.ESR, Kind.AGEM}

# Row order and labels of the comparison table.
TABLE_ORDER = [Kind.VANILLA, Kind.JOINT, Kind.L2, Kind.ADAPTERCL, Kind.AGEM, Kind.RANDR,
               Kind.PERPR, Kind.ESR]
LABELS = {Kind.VANILLA: "Vanilla", Kind.JOINT: "Joint", Kind.L2: "L2", Kind.AGEM: "AGEM",
          Kind.ADAPTERCL: "AdapterCL", Kind.RANDR: "RandR", Kind.PERPR: "PerpR",
          Kind.PERPR_REV: "PerpR-Rev.", Kind.ESR: "ESR"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: Kind = Kind.VANILLA
    l2_lambda: float = 0.01
    lambda1: float = 0.2
    lambda2: float = 0.2
    memory_capacity: int = 20
    esr_use_lm: bool = True
    esr_use_lesr: bool = True
    perpr_reverse: bool = False
    adapter_rank: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.PERPR_REV:
            object.__setattr__(self, "perpr_reverse", True)
        if self.lambda1 < 0 or self.lambda2 < 0 or self.l2_lambda < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def is_perpr(self) -> bool:
        return self.kind in (Kind.PERPR, Kind.PERPR_REV)

    @property
    def label(self) -> str:
        if self.is_perpr:
            return LABELS[Kind.PERPR_REV] if self.perpr_reverse else LABELS[Kind.PERPR]
        if self.kind is Kind.ESR:
            if not self.esr_use_lm and not self.esr_use_lesr:
                return "ESR -L_M -L_ESR"
            if not self.esr_use_lm:
                return "ESR -L_M"
            if not self.esr_use_lesr:
                return "ESR -L_ESR"
        return LABELS[self.kind]

    def validate(self, num_domains: int) -> None:
        if self.kind in REHEARSAL and self.memory_capacity < num_domains:
            raise ConfigError(f"memory capacity {self.memory_capacity} is below the number of "
                              f"domains ({num_domains})")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["kind"] = self.kind.value
        return d


# -- replay memory ---------------------------------------------------------

@dataclass
class ReplayEntry:
    episode: Episode
    recorded_at_domain: int
    ap: float | None = None
    logits: list[np.ndarray] | None = None
    actions: list[int] | None = None

    @property
    def episode_ref(self) -> tuple[int, int]:
        return self.episode.key


@dataclass
class MemoryUpdate:
    """What one memory update kept and dropped (for ordering checks)."""

    inserted: list[ReplayEntry]
    evicted: list[ReplayEntry]
    retained_old: list[ReplayEntry]


@dataclass
class ReplayMemory:
    capacity: int
    per_domain_quota: int = 0
    entries: list[ReplayEntry] = field(default_factory=list)
    stream_counter: int = 0
    history: list[MemoryUpdate] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def sample(self, k: int, rng: np.random.Generator) -> list[ReplayEntry]:
        """Uniform draw with replacement."""
        idx = rng.integers(0, len(self.entries), size=k)
        return [self.entries[i] for i in idx]

    def domains(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            out[e.episode.domain_id] = out.get(e.episode.domain_id, 0) + 1
        return out


def quota_for(capacity: int, total_domains: int) -> int:
    q = capacity // total_domains
    if q <= 0:
        raise ConfigError(f"per-domain quota is 0 (capacity {capacity}, {total_domains} domains)")
    return q


# -- action perplexity -------------------------------------------------------

def perplexity_from_log_probs(log_probs: Sequence[float]) -> float:
    """exp of the mean negative log-probability, with log-probs clamped from below."""
    lp = np.maximum(np.asarray(log_probs, float), LOGP_CLAMP)
    return float(np.exp(-lp.mean()))


def action_perplexities(params: PolicyParams, episodes: Sequence[Episode],
                        scenes: Mapping[int, Scene], adapter: Adapter | None = None) -> np.ndarray:
    """Perplexity of the ground-truth actions of every episode under teacher forcing."""
    lay = stack_layouts([teacher_layout(params.cfg, e, scenes[e.scene_id]) for e in episodes])
    logp = np.maximum(step_log_probs(params, lay, adapter), LOGP_CLAMP)
    step_starts = np.concatenate([[0], np.cumsum([e.num_steps for e in episodes])[:-1]])
    mean_logp = np.add.reduceat(logp, step_starts) / np.array([e.num_steps for e in episodes])
    return np.exp(-mean_logp)


def action_perplexity(params: PolicyParams, episode: Episode, scene: Scene,
                      adapter: Adapter | None = None) -> float:
    return float(action_perplexities(params, [episode], {episode.scene_id: scene}, adapter)[0])


def perpr_memory_update(memory: ReplayMemory, domain: SceneDomain, params: PolicyParams,
                        reverse: bool = False, quota: int | None = None,
                        recorded_at: int | None = None) -> ReplayMemory:
    """Insert the quota highest-perplexity episodes of a finished domain.

    If the memory then overflows, the globally lowest-perplexity entries are
    evicted. ``reverse`` flips both choices. Ties go to the lower episode id.
    """
    quota = memory.per_domain_quota if quota is None else quota
    if quota <= 0:
        raise ConfigError("per-domain quota is 0")
    eps = domain.train_episodes
    aps = action_perplexities(params, eps, domain.scene_map())
    sign = 1.0 if reverse else -1.0
    order = sorted(range(len(eps)), key=lambda k: (sign * aps[k], eps[k].episode_id))
    at = domain.domain_id if recorded_at is None else recorded_at
    inserted = [ReplayEntry(eps[k], at, ap=float(aps[k])) for k in order[:quota]]
    old = list(memory.entries)
    pool = old + inserted
    evicted = []
    if len(pool) > memory.capacity:
        # keep-order: best first (highest ap, or lowest when reversed)
        ranked = sorted(range(len(pool)), key=lambda k: (sign * pool[k].ap, pool[k].episode.domain_id,
                                                         pool[k].episode.episode_id))
        keep = set(ranked[: memory.capacity])
        evicted = [pool[k] for k in ranked[memory.capacity:]]
        pool = [pool[k] for k in range(len(pool)) if k in keep]
    retained_old = [e for e in pool if any(e is o for o in old)]
    memory.entries = pool
    memory.history.append(MemoryUpdate(inserted, evicted, retained_old))
    return memory


def reservoir_update(memory: ReplayMemory, stream: Sequence[ReplayEntry],
                     rng: np.random.Generator) -> ReplayMemory:
    """Classic reservoir sampling over a stream of entries."""
    for item in stream:
        memory.stream_counter += 1
        t = memory.stream_counter
        if len(memory.entries) < memory.capacity:
            memory.entries.append(item)
        else:
            j = int(rng.integers(0, t))
            if j < memory.capacity:
                memory.entries[j] = item
    return memory


def record_logits(params: PolicyParams, episodes: Sequence[Episode],
                  scenes: Mapping[int, Scene]) -> list[list[np.ndarray]]:
    """Per-step logits of teacher-forced rollouts, one list per episode."""
    lays = [teacher_layout(params.cfg, e, scenes[e.scene_id]) for e in episodes]
    scores = _forward(params, stack_layouts(lays)).scores
    out, row = [], 0
    for lay in lays:
        out.append([scores[row + s: row + s + k].copy() for s, k in zip(lay.starts, lay.sizes)])
        row += len(lay.row_ep)
    return out


def esr_memory_update(memory: ReplayMemory, domain: SceneDomain, params: PolicyParams,
                      rng: np.random.Generator, quota: int | None = None,
                      recorded_at: int | None = None) -> ReplayMemory:
    """Store logits of a random subset of the finished domain's episodes."""
    quota = memory.per_domain_quota if quota is None else quota
    if quota <= 0:
        raise ConfigError("per-domain quota is 0")
    eps = domain.train_episodes
    pick = rng.choice(len(eps), size=min(quota, len(eps)), replace=False)
    chosen = [eps[int(k)] for k in sorted(pick)]
    Zs = record_logits(params, chosen, domain.scene_map())
    at = domain.domain_id if recorded_at is None else recorded_at
    inserted = [ReplayEntry(e, at, logits=Z, actions=list(e.gt_actions)) for e, Z in zip(chosen, Zs)]
    _insert_random_evict(memory, inserted, rng)
    return memory


def random_memory_update(memory: ReplayMemory, domain: SceneDomain, rng: np.random.Generator,
                         quota: int | None = None, recorded_at: int | None = None) -> ReplayMemory:
    """Quota-based uniform selection without stored logits (A-GEM's episodic memory)."""
    quota = memory.per_domain_quota if quota is None else quota
    eps = domain.train_episodes
    pick = rng.choice(len(eps), size=min(quota, len(eps)), replace=False)
    at = domain.domain_id if recorded_at is None else recorded_at
    _insert_random_evict(memory, [ReplayEntry(eps[int(k)], at) for k in sorted(pick)], rng)
    return memory


def _insert_random_evict(memory: ReplayMemory, inserted: list[ReplayEntry],
                         rng: np.random.Generator) -> None:
    old = list(memory.entries)
    memory.entries = old + inserted
    evicted = []
    while len(memory.entries) > memory.capacity:
        # entries stay in insertion order, so the head belongs to the oldest domain
        first = memory.entries[0].recorded_at_domain
        cands = [k for k, e in enumerate(memory.entries) if e.recorded_at_domain == first]
        evicted.append(memory.entries.pop(cands[int(rng.integers(0, len(cands)))]))
    kept_old = [e for e in memory.entries if any(e is o for o in old)]
    memory.history.append(MemoryUpdate(inserted, evicted, kept_old))


# -- gradient surgery and penalties -------------------------------------------

def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project ``g`` so that it no longer conflicts with the memory gradient."""
    if g.shape != g_ref.shape:
        raise ValueError("gradient shapes differ")
    ref_sq = float(g_ref @ g_ref)
    if math.sqrt(ref_sq) < 1e-12:
        return g
    dot = float(g @ g_ref)
    if dot >= 0:
        return g
    return g - (dot / ref_sq) * g_ref


def l2_anchor_loss_and_grad(theta: np.ndarray, anchor: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    d = theta - anchor
    return float(lam * (d @ d)), 2.0 * lam * d


def adaptercl_select(base_params: PolicyParams, adapters: Sequence[Adapter], episode: Episode,
                     scene: Scene) -> int:
    """Index of the adapter with the lowest action perplexity (first on ties)."""
    if not adapters:
        raise ValueError("no adapters")
    aps = [action_perplexity(base_params, episode, scene, a) for a in adapters]
    return int(np.argmin(aps))


def adaptercl_select_batch(base_params: PolicyParams, adapters: Sequence[Adapter],
                           episodes: Sequence[Episode], scenes: Mapping[int, Scene]) -> np.ndarray:
    aps = np.stack([action_perplexities(base_params, episodes, scenes, a) for a in adapters])
    return np.argmin(aps, axis=0)


# -- training ----------------------------------------------------------------

@dataclass
class TrainHyper:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-2
    max_steps: int = 6


@dataclass
class LearnerState:
    """Everything a strategy carries from one domain to the next."""

    params: PolicyParams
    opt: AdamState
    memory: ReplayMemory
    train_rng: np.random.Generator
    replay_rng: np.random.Generator
    memory_rng: np.random.Generator
    anchor: np.ndarray | None = None
    adapters: list[Adapter] = field(default_factory=list)
    adapter_opts: list[AdamState] = field(default_factory=list)
    stage: int = 0  # number of finished domains
    agem_checks: list[float] = field(default_factory=list)
    step_count: int = 0


def _episode_scenes(domains: Sequence[SceneDomain]) -> dict[int, Scene]:
    out = {}
    for d in domains:
        out.update(d.scene_map())
    return out


def train_domain(strategy: StrategyConfig, state: LearnerState, domain: SceneDomain | Sequence[SceneDomain],
                 hyper: TrainHyper, total_domains: int, scenes: Mapping[int, Scene] | None = None,
                 ) -> LearnerState:
    """Train on one domain (or, for Joint, the union of several) and update memory.

    Memory terms are skipped while the memory is empty.
    """
    domains = [domain] if isinstance(domain, SceneDomain) else list(domain)
    all_scenes = dict(scenes or {})
    all_scenes.update(_episode_scenes(domains))
    for e in state.memory.entries:
        if e.episode.scene_id not in all_scenes:
            raise KeyError(f"scene {e.episode.scene_id} of a memory entry is unavailable")
    kind = strategy.kind
    eps = [e for d in domains for e in d.train_episodes]
    adam = AdamHyper(lr=hyper.lr)
    cfg = state.params.cfg
    label = strategy.label
    dom_label = ",".join(str(d.domain_id) for d in domains)

    adapter_idx = None
    if kind is Kind.ADAPTERCL:
        state.adapters.append(Adapter.init(cfg, strategy.adapter_rank, state.memory_rng))
        state.adapter_opts.append(AdamState.zeros(state.adapters[-1].flat.size))
        adapter_idx = len(state.adapters) - 1

    params = state.params
    for epoch in range(hyper.epochs):
        perm = state.train_rng.permutation(len(eps))
        for k in range(0, len(eps), hyper.batch_size):
            batch = [eps[j] for j in perm[k:k + hyper.batch_size]]
            ctx = f"strategy={label}, domain={dom_label}, step={state.step_count}"
            state.step_count += 1

            if kind is Kind.ADAPTERCL:
                ad = state.adapters[adapter_idx]
                _, g, gad = adapter_loss_and_grad(params, ad, batch, all_scenes)
                new_flat, state.adapter_opts[adapter_idx] = optimizer_step(
                    ad.flat, gad, state.adapter_opts[adapter_idx], adam, ctx)
                state.adapters[adapter_idx] = ad.with_flat(new_flat)
                if state.stage == 0:
                    flat, state.opt = optimizer_step(params.flat, g, state.opt, adam, ctx)
                    params = PolicyParams(cfg, flat)
                continue

            _, g = imitation_loss_and_grad(params, batch, all_scenes)
            mem = state.memory
            if kind is Kind.L2 and state.anchor is not None and strategy.l2_lambda > 0:
                g = g + l2_anchor_loss_and_grad(params.flat, state.anchor, strategy.l2_lambda)[1]
            elif kind in (Kind.RANDR, Kind.PERPR, Kind.PERPR_REV) and len(mem):
                mb = mem.sample(len(batch), state.replay_rng)
                g = g + imitation_loss_and_grad(params, [e.episode for e in mb], all_scenes)[1]
            elif kind is Kind.ESR and len(mem):
                mb = mem.sample(len(batch), state.replay_rng)
                if strategy.esr_use_lm and strategy.lambda1 > 0:
                    g = g + strategy.lambda1 * imitation_loss_and_grad(
                        params, [e.episode for e in mb], all_scenes)[1]
                if strategy.esr_use_lesr and strategy.lambda2 > 0:
                    lays = [teacher_layout(cfg, e.episode, all_scenes[e.episode.scene_id]) for e in mb]
                    items = [(e.episode, e.logits, e.actions) for e in mb]
                    g = g + strategy.lambda2 * esr_batch_loss_and_grad(params, items, all_scenes, lays)[1]
            elif kind is Kind.AGEM and len(mem):
                mb = mem.sample(len(batch), state.replay_rng)
                g_ref = imitation_loss_and_grad(params, [e.episode for e in mb], all_scenes)[1]
                projected = agem_project(g, g_ref)
                if projected is not g:
                    denom = np.linalg.norm(projected) * np.linalg.norm(g_ref)
                    state.agem_checks.append(float(projected @ g_ref) / denom if denom > 0 else 0.0)
                g = projected
            flat, state.opt = optimizer_step(params.flat, g, state.opt, adam, ctx)
            params = PolicyParams(cfg, flat)

    state.params = params
    snapshot = params.copy()
    state.anchor = snapshot.flat.copy()
    if kind in REHEARSAL:
        quota = quota_for(strategy.memory_capacity, total_domains)
        state.memory.per_domain_quota = quota
        for d in domains:
            if kind is Kind.RANDR:
                order = state.memory_rng.permutation(len(d.train_episodes))
                stream = [ReplayEntry(d.train_episodes[j], d.domain_id) for j in order]
                reservoir_update(state.memory, stream, state.memory_rng)
            elif strategy.is_perpr:
                perpr_memory_update(state.memory, d, snapshot, reverse=strategy.perpr_reverse, quota=quota)
            elif kind is Kind.ESR:
                esr_memory_update(state.memory, d, snapshot, state.memory_rng, quota=quota)
            elif kind is Kind.AGEM:
                random_memory_update(state.memory, d, state.memory_rng, quota=quota)
    state.stage += 1
    return state


def make_eval_hook(strategy: StrategyConfig, state: LearnerState):
    """Rollout function used by evaluation; AdapterCL picks an adapter per episode."""
    if strategy.kind is not Kind.ADAPTERCL or not state.adapters:
        return None
    adapters = list(state.adapters)

    def hook(params, episodes, scenes, max_steps):
        choice = adaptercl_select_batch(params, adapters, episodes, scenes)
        trajs = [None] * len(episodes)
        for a in sorted(set(choice.tolist())):
            idx = [k for k in range(len(episodes)) if choice[k] == a]
            for k, t in zip(idx, greedy_batch(params, [episodes[k] for k in idx], scenes, max_steps,
                                              adapters[a])):
                trajs[k] = t
        return trajs

    return hook
