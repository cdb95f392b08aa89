"""Command-line entry point: ``spes {gen-corpus, run, ablate, report, cost, theory-check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

from .cost import cost_report
from .data import gen_corpus
from .experiment import (
    ABLATION_KEYS,
    PRESETS_EXPERIMENT,
    ExperimentConfig,
    ExperimentError,
    build_corpus,
    emit_report,
    metrics_root,
    preset,
    run_ablation,
    run_dir_for,
    run_experiment,
)
from .model import PRESETS, ModelConfig
from .theory import run_theory_suite

_MODEL_FLAGS = ("vocab", "hidden", "intermediate", "layers", "experts_total", "experts_active", "renormalize_after_topk", "init_std")


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _scalar_type(tp):
    """argparse type for a resolved field annotation (``int | None`` -> int)."""
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    base = args[0] if args else tp
    return _parse_bool if base is bool else base


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="versioned JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS_EXPERIMENT), help="named starting point")
    g = p.add_argument_group("experiment fields")
    hints = typing.get_type_hints(ExperimentConfig)
    for f in fields(ExperimentConfig):
        if f.name == "model":
            continue
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=_scalar_type(hints[f.name]), default=None)
    m = p.add_argument_group("model fields")
    hints = typing.get_type_hints(ModelConfig)
    for name in _MODEL_FLAGS:
        m.add_argument(f"--model-{name.replace('_', '-')}", dest=f"model_{name}", type=_scalar_type(hints[name]), default=None)


def config_from_args(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset is not None:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    over = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if f.name != "model" and getattr(args, f.name, None) is not None}
    model_over = {n: getattr(args, f"model_{n}") for n in _MODEL_FLAGS if getattr(args, f"model_{n}", None) is not None}
    if model_over:
        over["model"] = ModelConfig.from_dict({**cfg.model.to_dict(), **model_over})
    return cfg.replace(**over) if over else cfg


def _grid(specs: list[str]) -> dict[str, list]:
    hints = typing.get_type_hints(ExperimentConfig)
    grid = {}
    for spec in specs:
        key, _, vals = spec.partition("=")
        if key not in ABLATION_KEYS or not vals:
            raise SystemExit(f"bad grid spec {spec!r}; use KEY=v1,v2 with KEY in {sorted(ABLATION_KEYS)}")
        grid[key] = [_scalar_type(hints[key])(v) for v in vals.split(",")]
    return grid


def cmd_gen_corpus(args) -> int:
    c = gen_corpus(args.vocab, args.seq_len, args.sources, args.sequences, args.seed, args.concentration, args.home_weight)
    c.save(args.out)
    rates = [round(c.entropy_rate(k), 4) for k in range(c.n_sources)]
    print(json.dumps({"out": str(args.out), "sequences": len(c), "tokens": int(c.tokens.size), "entropy_rates": rates}))
    return 0


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    out = args.out or run_dir_for(cfg)
    try:
        res = run_experiment(cfg, out)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text, _ = emit_report(res.out_dir)
    print(text)
    return 0


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    grid = _grid(args.grid)
    root = args.out or metrics_root() / f"ablation-{base.name}"
    cells = run_ablation(base, grid, root, corpus=build_corpus(base))
    for c in cells:
        keys = {k: c[k] for k in grid}
        print(f"{keys} {c['status']} final_eval_ce={c['final_eval_ce']:.4f} {c['error']}")
    return 0 if all(c["status"] == "ok" for c in cells) else 1


def cmd_report(args) -> int:
    text, rep = emit_report(args.run_dir)
    print(json.dumps(rep, indent=2, default=str) if args.json else text)
    return 0 if rep["status"] != "no rounds" else 1


def cmd_cost(args) -> int:
    cfg = PRESETS[args.model] if args.model else config_from_args(args).model
    rep = cost_report(cfg, args.nodes).to_dict()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rep, indent=2))
    print(json.dumps(rep, indent=2))
    return 0


def cmd_theory(args) -> int:
    res = run_theory_suite(args.seed, args.rounds)
    text = json.dumps(res, indent=2, default=float)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    for k in ("drift", "variance", "bound", "merge"):
        print(f"{k}: {'ok' if res[k]['ok'] else 'VIOLATED'}")
    return 0 if res["ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spes", description="Sparse expert synchronisation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic Markov-mixture corpus (.npz)")
    g.add_argument("--vocab", type=int, default=32)
    g.add_argument("--seq-len", type=int, default=32)
    g.add_argument("--sources", type=int, default=4)
    g.add_argument("--sequences", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--concentration", type=float, default=0.2)
    g.add_argument("--home-weight", type=float, default=0.0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(fn=cmd_gen_corpus)

    r = sub.add_parser("run", help="run one experiment")
    add_config_flags(r)
    r.add_argument("--out", type=Path)
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("ablate", help="grid over H, N, alpha, K, T_merge, ...")
    add_config_flags(a)
    a.add_argument("--grid", action="append", required=True, help="KEY=v1,v2 (repeatable)")
    a.add_argument("--out", type=Path)
    a.set_defaults(fn=cmd_ablate)

    rep = sub.add_parser("report", help="summarise a run directory")
    rep.add_argument("run_dir", type=Path)
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(fn=cmd_report)

    c = sub.add_parser("cost", help="analytic memory/communication report")
    add_config_flags(c)
    c.add_argument("--model", choices=sorted(PRESETS), help="full-size model preset")
    c.add_argument("--nodes", type=int, default=4)
    c.add_argument("--out", type=Path)
    c.set_defaults(fn=cmd_cost)

    t = sub.add_parser("theory-check", help="drift, variance, bound and merge checks")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--rounds", type=int, default=200)
    t.add_argument("--out", type=Path)
    t.set_defaults(fn=cmd_theory)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
