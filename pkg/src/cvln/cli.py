"""Command line entry point: ``cvln {gen,train,eval,sweep,ablate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as hx
from .clstrategies import Kind, make_eval_hook
from .metrics import METRICS, evaluate_domain

log = logging.getLogger("cvln")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="benchmark seed for gen, curriculum seed otherwise")
    p.add_argument("--out", help="output directory")
    p.add_argument("--flavor", choices=["I", "D"], help="instruction flavor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvln", description="Continual navigation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write domain bundles")
    _common(p)

    p = sub.add_parser("train", help="train one strategy through one curriculum")
    _common(p)
    p.add_argument("--strategy", required=True, choices=[k.value for k in Kind])
    p.add_argument("--memory", type=int, help="replay memory capacity")
    p.add_argument("--data", help="directory of domain bundles written by gen")
    p.add_argument("--stop-after", type=int, help="stop after this many domains (resumable)")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")

    p = sub.add_parser("eval", help="re-evaluate a checkpoint")
    _common(p)
    p.add_argument("checkpoint", help="checkpoint file or run directory")
    p.add_argument("--data", help="directory of domain bundles written by gen")

    p = sub.add_parser("sweep", help="memory-size sweep")
    _common(p)
    p.add_argument("--strategy", action="append", choices=["perpr", "esr", "randr", "agem"])
    p.add_argument("--sizes", type=lambda s: tuple(int(x) for x in s.split(",")),
                   help="comma separated capacities")

    p = sub.add_parser("ablate", help="ablation runs")
    _common(p)
    p.add_argument("--strategy", choices=["perpr", "esr"], help="restrict to one strategy's ablations")
    p.add_argument("--perpr-reverse", action="store_true")
    p.add_argument("--esr-no-lm", action="store_true")
    p.add_argument("--esr-no-lesr", action="store_true")

    p = sub.add_parser("report", help="summary tables over finished runs")
    _common(p)
    p.add_argument("runs", nargs="+", help="matrix files or run directories")
    return parser


def _config(args) -> hx.ExperimentConfig:
    path = args.config
    data = getattr(args, "data", None)
    if path is None and data and (Path(data) / "config.json").exists():
        path = Path(data) / "config.json"  # bundles carry the config they were generated with
    cfg = hx.load_config(path)
    if args.flavor and args.flavor != cfg.flavor:
        if path:
            cfg = replace(cfg, flavor=args.flavor)
        else:
            cfg = hx.ExperimentConfig.default(args.flavor)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    cfg.validate()
    return cfg


def _seeds(args, cfg) -> tuple[int, ...]:
    return (args.seed,) if args.seed is not None else cfg.curriculum_seeds


def _domains(args, cfg):
    if getattr(args, "data", None):
        return hx.read_benchmark(args.data)
    return hx.build_benchmark(cfg)


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, benchmark_seed=args.seed)
    out = Path(args.out or "domains")
    paths = hx.write_benchmark(cfg, out)
    hx.save_config(cfg, out / "config.json")
    print(f"wrote {len(paths)} domain bundles to {out} (config_hash {cfg.config_hash})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    over = {} if args.memory is None else {"memory_capacity": args.memory}
    strat = cfg.strategy(args.strategy, **over)
    domains = _domains(args, cfg)
    for seed in _seeds(args, cfg):
        cur = hx.Curriculum.from_seed(seed, len(domains), cfg.flavor)
        run_dir = hx.run_dir_for(cfg, strat, cur)
        res = hx.run_curriculum(cfg, strat, cur, domains, run_dir=run_dir, resume=not args.no_resume,
                                stop_after=args.stop_after)
        if res.failed:
            print(f"{strat.label} seed {seed}: FAILED ({res.failed})")
            return 1
        try:
            print(f"{strat.label} seed {seed}: AvgSR {res.matrix.average('SR'):.1f} -> {run_dir}")
        except ValueError:
            print(f"{strat.label} seed {seed}: stopped after stage {args.stop_after} -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ck = Path(args.checkpoint)
    if ck.is_dir():
        ck = sorted(ck.glob("ckpt_stage_*.json"))[-1]
    data = json.loads(ck.read_text())
    domains = _domains(args, cfg)
    state, _, _ = hx.state_from_dict(data, cfg, domains)
    strat = hx.StrategyConfig(**{**data["strategy"], "kind": Kind(data["strategy"]["kind"])})
    by_id = {d.domain_id: d for d in domains}
    order = data["curriculum"]["domain_order"]
    learned = order if strat.kind is Kind.JOINT else order[:state.stage]
    hook = make_eval_hook(strat, state)
    lines = [f"# schema_version: {hx.SCHEMA_VERSION}", f"# config_hash: {cfg.config_hash}",
             "domain\t" + "\t".join(METRICS)]
    for i in learned:
        cell = evaluate_domain(state.params, by_id[i], hook, cfg.training.max_steps)
        lines.append(f"{i}\t" + "\t".join(f"{cell[m]:.4f}" for m in METRICS))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    kinds = args.strategy or ["perpr", "esr"]
    results = hx.sweep(cfg, kinds, args.sizes, root=cfg.output_dir, seeds=_seeds(args, cfg))
    for r in results:
        print(f"{r.label} M={r.strategy.memory_capacity} seed {r.curriculum.seed}: "
              f"AvgSR {r.matrix.average('SR'):.1f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    flags = {"perpr_reverse": args.perpr_reverse, "esr_no_lm": args.esr_no_lm,
             "esr_no_lesr": args.esr_no_lesr}
    if not any(flags.values()):
        flags = {k: True for k in flags}
    if args.strategy == "perpr":
        flags.update(esr_no_lm=False, esr_no_lesr=False)
    elif args.strategy == "esr":
        flags.update(perpr_reverse=False)
    results = hx.ablate(cfg, root=cfg.output_dir, seeds=_seeds(args, cfg), **flags)
    for r in results:
        print(f"{r.label} seed {r.curriculum.seed}: AvgSR {r.matrix.average('SR'):.1f}")
    return 0


def cmd_report(args) -> int:
    cfg = hx.load_config(args.config) if args.config else None
    rep = hx.report(args.runs, flavor=args.flavor or (cfg.flavor if cfg else None),
                    default_capacity=cfg.default_capacity if cfg else None)
    for w in rep.warnings:
        log.warning(w)
    if args.out:
        hx.write_report(rep, args.out)
    sys.stdout.write(rep.text())
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
