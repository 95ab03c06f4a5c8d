"""Command-line entry point: ``evnas <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_value
from .data import load_idx_dataset
from .evolution import PRESETS
from .experiment import (
    build_dataset,
    evaluate_checkpoint,
    run_comparison,
    run_multi_seed,
    run_supernet_search,
    run_surrogate_search,
)
from .search_space import genotype_from_json, genotype_to_dot

log = logging.getLogger("evnas")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    return out


def _load(args) -> ExperimentConfig:
    overrides = _overrides(args.set)
    if getattr(args, "output", None):
        overrides["output_dir"] = args.output
    return load_config(args.config, overrides)


def _seeds(text: str) -> list[int]:
    """``"0-19"`` or ``"0,3,5"``."""
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def cmd_search(args) -> int:
    cfg = _load(args)
    res = run_supernet_search(cfg)
    print(f"elite fitness {res.best.fitness:.6f} genotype {res.genotype.digest()} -> {res.output_dir}")
    return 0


def cmd_surrogate(args) -> int:
    cfg = _load(args)
    if args.compare:
        presets = args.compare.split(",")
        for p in presets:
            if p not in PRESETS:
                raise ConfigError(f"unknown preset {p!r}")
        summary = run_comparison(cfg, presets, _seeds(args.seeds))
        for p, m in summary["mean_final_best_fitness"].items():
            print(f"{p}: mean final best fitness {m:.4f}")
        for name, t in summary["rank_sum"].items():
            print(f"rank-sum {name}: p = {t['p_value']:.3g}")
        return 0
    res = run_surrogate_search(cfg)
    print(f"elite fitness {res.best.fitness:.6f} genotype {res.genotype.digest()} -> {res.output_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.idx:
        valdata = load_idx_dataset(args.idx[0], args.idx[1], args.input_size)
        batch_size, max_batches = args.batch_size or 64, None
    else:
        cfg = load_config(args.config, _overrides(args.set))
        _, valdata = build_dataset(cfg)
        batch_size, max_batches = cfg.eval.batch_size, cfg.eval.max_batches
        if args.batch_size:
            batch_size = args.batch_size
    report = evaluate_checkpoint(args.checkpoint, args.genotype, valdata, args.k, batch_size, max_batches)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_export(args) -> int:
    g = genotype_from_json(Path(args.genotype).read_text())
    dot = genotype_to_dot(g)
    if args.output:
        Path(args.output).write_text(dot)
    else:
        sys.stdout.write(dot)
    return 0


def cmd_multi_seed(args) -> int:
    cfg = _load(args)
    rows = run_multi_seed(cfg, _seeds(args.seeds))
    for r in rows:
        print(f"seed {r['seed']}: elite fitness {r['elite_fitness']:.6f} genotype {r['elite_genotype_hash']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evnas", description="Evolutionary architecture search with a shared supernet.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="flat key = value config file")
        sp.add_argument("-o", "--output", help="override output_dir")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        return sp

    sp = with_config(sub.add_parser("search", help="search with supernet training and validation fitness"))
    sp.set_defaults(fn=cmd_search)

    sp = with_config(sub.add_parser("surrogate-search", help="search against a synthetic genotype landscape"))
    sp.add_argument("--compare", metavar="P1,P2,...", help="compare presets over --seeds instead of one run")
    sp.add_argument("--seeds", default="0-19", help="seed list for --compare, e.g. 0-19 or 1,2,3")
    sp.set_defaults(fn=cmd_surrogate)

    sp = sub.add_parser("eval", help="validation accuracy of a checkpoint under a genotype")
    sp.add_argument("checkpoint")
    sp.add_argument("genotype")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="config whose data section defines the validation split")
    src.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"), help="IDX validation files")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--input-size", type=int, default=None, help="downsample IDX images to this size")
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("-k", type=float, default=1.0, help="decode constant")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export", help="genotype JSON to Graphviz DOT")
    sp.add_argument("genotype")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_export)

    sp = with_config(sub.add_parser("multi-seed", help="run the search once per seed"))
    sp.add_argument("--seeds", default="0,1,2,3")
    sp.set_defaults(fn=cmd_multi_seed)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # every failure becomes a diagnostic and exit code 1
        log.debug("failure", exc_info=True)
        print(f"evnas {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
