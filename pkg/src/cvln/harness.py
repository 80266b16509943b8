"""Curriculum runner, experiment grids, persistence and report tables."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import clstrategies as cl
from .clstrategies import (Kind, LearnerState, ReplayEntry, ReplayMemory, StrategyConfig,
                           TrainHyper, make_eval_hook, train_domain)
from .metrics import METRICS, ResultMatrix, evaluate_domain, read_matrix, stability_plasticity, write_matrix
from .navsim import Flavor, GenParams, SceneDomain, default_params, generate_benchmark, load_domain, save_domain
from .policy import (Adapter, AdamState, DivergenceError, PolicyConfig, PolicyParams,
                     esr_batch_loss_and_grad, init_params, teacher_layout)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class PolicySettings:
    embed_dim: int = 16
    hidden_dim: int = 32
    action_dim: int = 8
    init_scale: float = 1.0
    token_init_scale: float = 1.0


def _strict(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


DEFAULT_STRATEGIES = tuple(k.value for k in cl.TABLE_ORDER)


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative experiment description (JSON file, schema version 1)."""

    flavor: str = "I"
    benchmark_seed: int = 0
    generation: GenParams = field(default_factory=GenParams)
    policy: PolicySettings = field(default_factory=PolicySettings)
    training: TrainHyper = field(default_factory=TrainHyper)
    strategies: tuple[str, ...] = DEFAULT_STRATEGIES
    strategy_overrides: dict = field(default_factory=dict)
    memory_capacity: int | None = None  # None: 3% of all training episodes, rounded up
    memory_sizes: tuple[int, ...] = (10, 20, 40)
    curriculum_seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def default(cls, flavor: str = "I") -> "ExperimentConfig":
        return cls(flavor=Flavor(flavor).value, generation=default_params(flavor))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version}")
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        flavor = Flavor(data.get("flavor", "I")).value
        base = default_params(flavor)
        gen_over = data.get("generation", {})
        parsed = GenParams.from_dict(gen_over)  # rejects unknown keys
        gen = replace(base, **{k: getattr(parsed, k) for k in gen_over})
        cfg = cls(
            flavor=flavor,
            benchmark_seed=int(data.get("benchmark_seed", 0)),
            generation=gen,
            policy=_strict(PolicySettings, data.get("policy", {}), "policy"),
            training=_strict(TrainHyper, data.get("training", {}), "training"),
            strategies=tuple(data.get("strategies", DEFAULT_STRATEGIES)),
            strategy_overrides=dict(data.get("strategy_overrides", {})),
            memory_capacity=data.get("memory_capacity"),
            memory_sizes=tuple(data.get("memory_sizes", (10, 20, 40))),
            curriculum_seeds=tuple(data.get("curriculum_seeds", (0, 1, 2))),
            output_dir=str(data.get("output_dir", "runs")),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.generation.validate()
        for s in self.strategies:
            Kind(s)
        for name, over in self.strategy_overrides.items():
            Kind(name)
            unknown = set(over) - {f.name for f in fields(StrategyConfig)}
            if unknown:
                raise ValueError(f"unknown strategy override keys for {name}: {sorted(unknown)}")

    def to_dict(self) -> dict:
        gen = asdict(self.generation)
        if gen["grid"] is not None:
            gen["grid"] = list(gen["grid"])
        return {
            "schema_version": self.schema_version,
            "flavor": self.flavor,
            "benchmark_seed": self.benchmark_seed,
            "generation": gen,
            "policy": asdict(self.policy),
            "training": asdict(self.training),
            "strategies": list(self.strategies),
            "strategy_overrides": self.strategy_overrides,
            "memory_capacity": self.memory_capacity,
            "memory_sizes": list(self.memory_sizes),
            "curriculum_seeds": list(self.curriculum_seeds),
            "output_dir": self.output_dir,
        }

    @property
    def config_hash(self) -> str:
        """Hash of everything that defines the benchmark, the model and training."""
        d = self.to_dict()
        core = {k: d[k] for k in ("schema_version", "flavor", "benchmark_seed", "generation",
                                  "policy", "training")}
        blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def default_capacity(self) -> int:
        if self.memory_capacity is not None:
            return int(self.memory_capacity)
        total = self.generation.num_domains * self.generation.train_episodes
        return math.ceil(0.03 * total)

    def strategy(self, kind: str | Kind, **overrides) -> StrategyConfig:
        kind = Kind(kind)
        opts = {"memory_capacity": self.default_capacity}
        opts.update(self.strategy_overrides.get(kind.value, {}))
        opts.update(overrides)
        return StrategyConfig(kind=kind, **opts)

    def policy_config(self) -> PolicyConfig:
        g = self.generation
        return PolicyConfig(vocab_size=g.vocab_size, feature_dim=g.feature_dim,
                            max_degree=g.max_degree, **asdict(self.policy))


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig.default()
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# -- benchmark ---------------------------------------------------------------

_BENCH_CACHE: dict[tuple, list[SceneDomain]] = {}


def build_benchmark(cfg: ExperimentConfig) -> list[SceneDomain]:
    """Domain contents are fixed per configuration; curricula only reorder them."""
    key = (cfg.flavor, cfg.benchmark_seed, cfg.generation)
    if key not in _BENCH_CACHE:
        _BENCH_CACHE[key] = generate_benchmark(cfg.benchmark_seed, cfg.flavor, cfg.generation)
    return _BENCH_CACHE[key]


def write_benchmark(cfg: ExperimentConfig, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in build_benchmark(cfg):
        p = out / f"domain_{d.domain_id:02d}.json"
        save_domain(d, p)
        paths.append(p)
    return paths


def read_benchmark(directory: str | Path) -> list[SceneDomain]:
    return [load_domain(p) for p in sorted(Path(directory).glob("domain_*.json"))]


@dataclass(frozen=True)
class Curriculum:
    seed: int
    domain_order: tuple[int, ...]
    flavor: str = "I"

    @classmethod
    def from_seed(cls, seed: int, num_domains: int, flavor: str = "I") -> "Curriculum":
        order = np.random.default_rng([seed, 0xC0]).permutation(num_domains)
        return cls(seed, tuple(int(i) for i in order), flavor)


# -- a single run --------------------------------------------------------------

@dataclass
class RunResult:
    matrix: ResultMatrix
    strategy: StrategyConfig
    curriculum: Curriculum
    agem_checks: list[float] = field(default_factory=list)
    memory_updates: list[dict] = field(default_factory=list)
    esr_anchor_losses: list[float] = field(default_factory=list)
    failed: str | None = None

    @property
    def label(self) -> str:
        return self.strategy.label


def initial_state(cfg: ExperimentConfig, strategy: StrategyConfig, curriculum: Curriculum) -> LearnerState:
    pcfg = cfg.policy_config()
    seq = np.random.SeedSequence([curriculum.seed, 0x9A7])
    init_ss, train_ss, replay_ss, mem_ss = seq.spawn(4)
    params = init_params(pcfg, np.random.default_rng(init_ss))
    return LearnerState(
        params=params, opt=AdamState.zeros(pcfg.num_params),
        memory=ReplayMemory(strategy.memory_capacity),
        train_rng=np.random.default_rng(train_ss), replay_rng=np.random.default_rng(replay_ss),
        memory_rng=np.random.default_rng(mem_ss))


def _entry_to_dict(e: ReplayEntry) -> dict:
    d = {"episode_ref": list(e.episode_ref), "recorded_at_domain": e.recorded_at_domain, "ap": e.ap}
    if e.logits is not None:
        d["logits"] = [z.tolist() for z in e.logits]
        d["actions"] = list(e.actions)
    return d


def _update_to_dict(u: cl.MemoryUpdate) -> dict:
    brief = lambda es: [{"ref": list(e.episode_ref), "ap": e.ap} for e in es]
    return {"inserted": brief(u.inserted), "evicted": brief(u.evicted), "retained_old": brief(u.retained_old)}


def state_to_dict(state: LearnerState, cfg: ExperimentConfig, strategy: StrategyConfig,
                  curriculum: Curriculum, matrix: ResultMatrix, extras: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "checkpoint",
        "config_hash": cfg.config_hash,
        "strategy": strategy.to_dict(),
        "curriculum": {"seed": curriculum.seed, "domain_order": list(curriculum.domain_order)},
        "stage": state.stage,
        "step_count": state.step_count,
        "theta": state.params.flat.tolist(),
        "optimizer": {"m": state.opt.m.tolist(), "v": state.opt.v.tolist(), "t": state.opt.t},
        "anchor": None if state.anchor is None else state.anchor.tolist(),
        "adapters": [{"down": a.down.tolist(), "up": a.up.tolist()} for a in state.adapters],
        "adapter_optimizers": [{"m": o.m.tolist(), "v": o.v.tolist(), "t": o.t} for o in state.adapter_opts],
        "rng": {"train": state.train_rng.bit_generator.state, "replay": state.replay_rng.bit_generator.state,
                "memory": state.memory_rng.bit_generator.state},
        "memory": {"capacity": state.memory.capacity, "per_domain_quota": state.memory.per_domain_quota,
                   "stream_counter": state.memory.stream_counter,
                   "entries": [_entry_to_dict(e) for e in state.memory.entries]},
        "agem_checks": state.agem_checks,
        "matrix": [[s, i, m, v] for s, i, m, v in matrix.rows()],
        "extras": extras,
    }


def _rng_from(st: dict) -> np.random.Generator:
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def state_from_dict(data: dict, cfg: ExperimentConfig, domains: Sequence[SceneDomain]):
    if data.get("schema_version") != SCHEMA_VERSION or data.get("kind") != "checkpoint":
        raise ValueError("not a checkpoint of a supported schema")
    if data["config_hash"] != cfg.config_hash:
        raise ValueError("checkpoint was written under a different configuration")
    pcfg = cfg.policy_config()
    lookup = {e.key: e for d in domains for e in d.train_episodes}
    entries = []
    for e in data["memory"]["entries"]:
        ep = lookup[tuple(e["episode_ref"])]
        logits = [np.asarray(z, float) for z in e["logits"]] if "logits" in e else None
        entries.append(ReplayEntry(ep, e["recorded_at_domain"], e["ap"], logits, e.get("actions")))
    mem = ReplayMemory(data["memory"]["capacity"], data["memory"]["per_domain_quota"], entries,
                       data["memory"]["stream_counter"])
    opt = AdamState(np.asarray(data["optimizer"]["m"]), np.asarray(data["optimizer"]["v"]),
                    data["optimizer"]["t"])
    state = LearnerState(
        params=PolicyParams(pcfg, np.asarray(data["theta"], float)), opt=opt, memory=mem,
        train_rng=_rng_from(data["rng"]["train"]), replay_rng=_rng_from(data["rng"]["replay"]),
        memory_rng=_rng_from(data["rng"]["memory"]),
        anchor=None if data["anchor"] is None else np.asarray(data["anchor"], float),
        adapters=[Adapter(np.asarray(a["down"]), np.asarray(a["up"])) for a in data["adapters"]],
        adapter_opts=[AdamState(np.asarray(o["m"]), np.asarray(o["v"]), o["t"])
                      for o in data["adapter_optimizers"]],
        stage=data["stage"], agem_checks=list(data["agem_checks"]), step_count=data["step_count"])
    return state, data["matrix"], data["extras"]


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_dir_for(cfg: ExperimentConfig, strategy: StrategyConfig, curriculum: Curriculum,
                root: str | Path | None = None) -> Path:
    tag = strategy.label.replace(" ", "").replace(".", "").replace("-", "_").lower()
    root = Path(root if root is not None else cfg.output_dir)
    return root / f"{tag}_m{strategy.memory_capacity}_seed{curriculum.seed}"


def run_curriculum(cfg: ExperimentConfig, strategy: StrategyConfig, curriculum: Curriculum,
                   domains: Sequence[SceneDomain] | None = None, run_dir: str | Path | None = None,
                   resume: bool = True, stop_after: int | None = None) -> RunResult:
    """Train a strategy through a curriculum, evaluating every learned domain after each stage.

    With ``run_dir`` a checkpoint is written after every stage; an existing
    checkpoint is resumed from when ``resume`` is set. ``stop_after`` ends the
    run after that many stages (used to emulate interruption).
    """
    domains = list(domains) if domains is not None else build_benchmark(cfg)
    by_id = {d.domain_id: d for d in domains}
    order = [by_id[i] for i in curriculum.domain_order]
    n = len(order)
    strategy.validate(n)
    hyper = cfg.training
    scenes = {}
    for d in domains:
        scenes.update(d.scene_map())
    matrix = ResultMatrix(n, strategy.label, curriculum.seed)
    result = RunResult(matrix, strategy, curriculum)
    run_dir = Path(run_dir) if run_dir is not None else None

    state = initial_state(cfg, strategy, curriculum)
    extras = {"memory_updates": [], "esr_anchor_losses": []}
    if run_dir is not None and resume:
        ckpts = sorted(run_dir.glob("ckpt_stage_*.json"))
        if ckpts:
            state, cells, extras = state_from_dict(json.loads(ckpts[-1].read_text()), cfg, domains)
            for s, i, m, v in cells:
                matrix.values[m][s - 1, i - 1] = v

    stages = [order] if strategy.kind is Kind.JOINT else [[d] for d in order]
    try:
        while state.stage < len(stages):
            if stop_after is not None and state.stage >= stop_after:
                break
            stage_domains = stages[state.stage]
            n_hist = len(state.memory.history)
            train_domain(strategy, state, stage_domains if strategy.kind is Kind.JOINT else stage_domains[0],
                         hyper, n, scenes)
            new_updates = state.memory.history[n_hist:]
            extras["memory_updates"] += [_update_to_dict(u) for u in new_updates]
            if strategy.kind is Kind.ESR:
                fresh = [e for u in new_updates for e in u.inserted]
                if fresh:
                    extras["esr_anchor_losses"] += _esr_anchor_losses(state.params, fresh, scenes)
            hook = make_eval_hook(strategy, state)
            if strategy.kind is Kind.JOINT:
                cells = [evaluate_domain(state.params, d, hook, hyper.max_steps) for d in order]
                matrix.set_row(n, cells)
            else:
                s = state.stage
                cells = [evaluate_domain(state.params, d, hook, hyper.max_steps) for d in order[:s]]
                matrix.set_row(s, cells)
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
                ck = state_to_dict(state, cfg, strategy, curriculum, matrix, extras)
                (run_dir / f"ckpt_stage_{state.stage:02d}.json").write_text(_dump(ck))
    except DivergenceError as exc:
        result.failed = str(exc)
        log.error("run aborted: %s", exc)

    result.agem_checks = list(state.agem_checks)
    result.memory_updates = extras["memory_updates"]
    result.esr_anchor_losses = extras["esr_anchor_losses"]
    if run_dir is not None and (stop_after is None or state.stage >= len(stages)):
        write_matrix([matrix], run_dir / "matrix.tsv", cfg.config_hash, extra=_matrix_extra(strategy, curriculum))
        if result.failed:
            (run_dir / "FAILED").write_text(result.failed + "\n")
    return result


def _matrix_extra(strategy: StrategyConfig, curriculum: Curriculum) -> dict:
    return {"flavor": curriculum.flavor, "memory_capacity": strategy.memory_capacity,
            "domain_order": ",".join(map(str, curriculum.domain_order))}


def _esr_anchor_losses(params: PolicyParams, entries: Sequence[ReplayEntry], scenes) -> list[float]:
    """Per-step L_ESR of freshly stored entries under the recording parameters."""
    out = []
    for e in entries:
        lay = teacher_layout(params.cfg, e.episode, scenes[e.episode.scene_id])
        loss, _ = esr_batch_loss_and_grad(params, [(e.episode, e.logits, e.actions)], scenes, [lay])
        out.append(loss / e.episode.num_steps)
    return out


# -- grids ---------------------------------------------------------------------

def curricula(cfg: ExperimentConfig, seeds: Iterable[int] | None = None) -> list[Curriculum]:
    seeds = cfg.curriculum_seeds if seeds is None else seeds
    return [Curriculum.from_seed(s, cfg.generation.num_domains, cfg.flavor) for s in seeds]


def run_grid(cfg: ExperimentConfig, strategies: Sequence[StrategyConfig], root: str | Path | None = None,
             seeds: Iterable[int] | None = None) -> list[RunResult]:
    out = []
    for strat in strategies:
        for cur in curricula(cfg, seeds):
            rd = run_dir_for(cfg, strat, cur, root) if root is not None else None
            out.append(run_curriculum(cfg, strat, cur, run_dir=rd))
    return out


def sweep(cfg: ExperimentConfig, kinds: Sequence[str] = ("perpr", "esr"), sizes: Sequence[int] | None = None,
          root: str | Path | None = None, seeds: Iterable[int] | None = None) -> list[RunResult]:
    """Memory-size sweep for the rehearsal strategies."""
    sizes = cfg.memory_sizes if sizes is None else sizes
    strategies = [cfg.strategy(k, memory_capacity=m) for k in kinds for m in sizes]
    return run_grid(cfg, strategies, root, seeds)


def ablation_strategies(cfg: ExperimentConfig, perpr_reverse: bool = True, esr_no_lm: bool = True,
                        esr_no_lesr: bool = True) -> list[StrategyConfig]:
    out = []
    if perpr_reverse:
        out.append(cfg.strategy("perpr", perpr_reverse=True))
    if esr_no_lm:
        out.append(cfg.strategy("esr", esr_use_lm=False))
    if esr_no_lesr:
        out.append(cfg.strategy("esr", esr_use_lesr=False))
    return out


def ablate(cfg: ExperimentConfig, root: str | Path | None = None, seeds: Iterable[int] | None = None,
           **flags) -> list[RunResult]:
    return run_grid(cfg, ablation_strategies(cfg, **flags), root, seeds)


# -- reports -------------------------------------------------------------------

ABLATION_GROUPS = (("PerpR", "PerpR-Rev."), ("ESR", "ESR -L_M", "ESR -L_ESR"))
MISSING = "n/a"
NO_STD = "—"


@dataclass
class RunRecord:
    """One (strategy, capacity, curriculum) result, complete or not."""

    strategy: str
    memory_capacity: int | None
    seed: int
    matrix: ResultMatrix
    config_hash: str
    complete: bool = True


def _record_from_tsv(path: Path) -> list[RunRecord]:
    header, mats = read_matrix(path)
    cap = header.get("memory_capacity")
    order = header.get("domain_order")
    out = []
    for m in mats:
        if order:
            n = len(order.split(","))
            if n != m.domain_count:  # Joint fills only the final row
                full = ResultMatrix(n, m.strategy, m.curriculum_seed)
                for metric in METRICS:
                    k = m.domain_count
                    full.values[metric][:k, :k] = m.values[metric]
                m = full
        out.append(RunRecord(m.strategy, None if cap in (None, "None") else int(cap), m.curriculum_seed, m,
                             header.get("config_hash", "")))
    return out


def _record_from_checkpoint(path: Path) -> RunRecord:
    data = json.loads(path.read_text())
    strat = StrategyConfig(**{**data["strategy"], "kind": Kind(data["strategy"]["kind"])})
    n = len(data["curriculum"]["domain_order"])
    mat = ResultMatrix(n, strat.label, data["curriculum"]["seed"])
    for s, i, m, v in data["matrix"]:
        mat.values[m][s - 1, i - 1] = v
    return RunRecord(strat.label, strat.memory_capacity, mat.curriculum_seed, mat, data["config_hash"], False)


def collect_runs(paths: Iterable[str | Path]) -> list[RunRecord]:
    """Gather results from matrix files, run directories or trees of them.

    A run directory without ``matrix.tsv`` contributes its latest checkpoint
    as an incomplete record.
    """
    records = []
    for p in map(Path, paths):
        if p.is_file():
            records += _record_from_tsv(p)
            continue
        if not p.is_dir():
            raise FileNotFoundError(p)
        run_dirs = sorted({q.parent for q in p.rglob("matrix.tsv")} | {q.parent for q in p.rglob("ckpt_stage_*.json")})
        for d in run_dirs:
            if (d / "matrix.tsv").exists():
                records += _record_from_tsv(d / "matrix.tsv")
            else:
                records.append(_record_from_checkpoint(sorted(d.glob("ckpt_stage_*.json"))[-1]))
    return records


def _avg(rec: RunRecord, metric: str) -> float | None:
    try:
        return rec.matrix.average(metric)
    except ValueError:
        return None


def format_mean_std(values: Sequence[float]) -> tuple[str, str]:
    """One-decimal mean and population std; the std is a dash for a single value."""
    if not values:
        return MISSING, MISSING
    mean = float(np.mean(values))
    std = f"{float(np.std(values)):.1f}" if len(values) > 1 else NO_STD
    return f"{mean:.1f}", std


@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[list[str]]

    def text(self) -> str:
        cells = [self.columns] + self.rows
        widths = [max(len(r[j]) for r in cells) for j in range(len(self.columns))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        lines = [self.title, fmt(self.columns), fmt(["-" * w for w in widths])]
        return "\n".join(lines + [fmt(r) for r in self.rows])


@dataclass
class Report:
    config_hash: str
    tables: list[Table]
    warnings: list[str]

    def text(self) -> str:
        head = [f"config_hash: {self.config_hash}",
                "Curricula differ only in domain order; domain contents are fixed per flavor."]
        head += [f"warning: {w}" for w in self.warnings]
        return "\n\n".join(["\n".join(head)] + [t.text() for t in self.tables if t.rows]) + "\n"

    def tsv(self) -> str:
        lines = [f"# schema_version: {SCHEMA_VERSION}", f"# config_hash: {self.config_hash}",
                 "table\trow\tcolumn\tmean\tstd"]
        for t in self.tables:
            for r in t.rows:
                for col, cell in zip(t.columns[1:], r[1:]):
                    mean, _, std = cell.partition(" ± ")
                    lines.append(f"{t.title}\t{r[0]}\t{col}\t{mean}\t{std or NO_STD}")
        return "\n".join(lines) + "\n"


def _cell(values: Sequence[float]) -> str:
    mean, std = format_mean_std(values)
    return MISSING if mean == MISSING else f"{mean} ± {std}"


def _row_order(labels: Iterable[str]) -> list[str]:
    labels = set(labels)
    known = [cl.LABELS[k] for k in cl.TABLE_ORDER]
    return [l for l in known if l in labels] + sorted(labels - set(known))


def report(paths: Iterable[str | Path], flavor: str | None = None,
           default_capacity: int | None = None) -> Report:
    """Comparison, memory-sweep, ablation and stability/plasticity tables."""
    records = collect_runs(paths)
    if not records:
        raise ValueError("no runs found")
    hashes = {r.config_hash for r in records}
    if len(hashes) > 1:
        raise ValueError(f"mixed config hashes in one report: {sorted(hashes)}")
    warnings = []
    incomplete = [r for r in records if not r.complete or _avg(r, "SR") is None]
    for r in incomplete:
        warnings.append(f"incomplete run: {r.strategy} (memory {r.memory_capacity}) seed {r.seed}")

    flavor = flavor or "I"
    caps = [r.memory_capacity for r in records if r.memory_capacity is not None]
    if default_capacity is None and caps:
        default_capacity = max(set(caps), key=lambda c: (caps.count(c), -c))

    def pick(label: str, cap: int | None = None) -> list[RunRecord]:
        want = default_capacity if cap is None else cap
        return [r for r in records if r.strategy == label and
                (Kind(_kind_of(label)) not in cl.REHEARSAL or r.memory_capacity == want)]

    def avgs(rs: Sequence[RunRecord], metric: str) -> list[float]:
        return [v for v in (_avg(r, metric) for r in rs) if v is not None]

    metrics = ("SPL", "SR", "NE") if flavor == "I" else ("SPL", "SR", "GP")
    labels = {r.strategy for r in records}
    ablation_labels = {l for g in ABLATION_GROUPS for l in g[1:]}
    main_rows = [l for l in _row_order(labels) if l not in ablation_labels]
    comparison = Table("comparison", ["strategy"] + [f"Avg{m}" for m in metrics],
                       [[l] + [_cell(avgs(pick(l), m)) for m in metrics] for l in main_rows])

    sweep_labels = [l for l in _row_order(labels)
                    if len({r.memory_capacity for r in records if r.strategy == l}) > 1]
    sizes = sorted({r.memory_capacity for r in records if r.strategy in sweep_labels})
    sweep_table = Table("memory_sweep", ["strategy"] + [f"M={m}" for m in sizes],
                        [[l] + [_cell(avgs(pick(l, m), "SR")) for m in sizes] for l in sweep_labels])

    ablation_rows = [[l] + [_cell(avgs(pick(l), m)) for m in metrics]
                     for g in ABLATION_GROUPS if any(l in labels for l in g[1:]) for l in g]
    ablation = Table("ablation", ["variant"] + [f"Avg{m}" for m in metrics], ablation_rows)

    sp_rows = []
    for l in main_rows:
        if l == cl.LABELS[Kind.JOINT]:  # trained once on everything, no sequential rows
            continue
        trip = []
        for r in pick(l):
            try:
                trip.append(stability_plasticity(r.matrix.values["SR"], r.matrix.domain_count))
            except ValueError:
                pass
        sp_rows.append([l] + [_cell([t[j] for t in trip]) for j in range(3)])
    sp = Table("stability_plasticity", ["strategy", "S", "P", "H"], sp_rows)

    gaps = [t.title for t in (comparison, ablation, sp) for row in t.rows if MISSING in row[1:]]
    if gaps:
        warnings.append("tables contain gaps (n/a) for runs that are missing or incomplete")
    return Report(hashes.pop(), [comparison, sweep_table, ablation, sp], warnings)


def _kind_of(label: str) -> str:
    for k, v in cl.LABELS.items():
        if v == label:
            return k.value
    base = label.split(" ")[0]
    for k, v in cl.LABELS.items():
        if v == base:
            return k.value
    raise ValueError(f"unknown strategy label {label!r}")


def write_report(rep: Report, out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    txt, tsv = out / "report.txt", out / "report.tsv"
    txt.write_text(rep.text())
    tsv.write_text(rep.tsv())
    return txt, tsv
