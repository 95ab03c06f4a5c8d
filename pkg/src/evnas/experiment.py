"""Run orchestration: dataset provisioning, searches, and on-disk artifacts."""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy
from scipy.stats import mannwhitneyu

from . import __version__
from .config import ExperimentConfig
from .data import ImageDataset, SyntheticDatasetSpec, generate_synthetic_dataset, load_idx_dataset
from .evaluation import FitnessReport, SupernetEvaluator, SurrogateEvaluator, SurrogateLandscape, accuracy
from .evolution import GenerationLog, Individual, Population, run_search
from .search_space import (
    CellTopology,
    Genotype,
    decode_genotype,
    derive_genotype,
    genotype_from_json,
    genotype_to_dict,
    genotype_to_dot,
)
from .supernet import Supernet, checkpoint_load, checkpoint_save
from .trainer import OptimizerState, TrainingLog, TrainPlan, train_generation

logger = logging.getLogger(__name__)

GENERATION_COLUMNS = (
    "generation",
    "best_fitness",
    "mean_fitness",
    "min_fitness",
    "elite_genotype_hash",
    "unique_genotypes",
    "total_evaluations",
)


class ExperimentError(RuntimeError):
    pass


def prepare_output_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK | os.X_OK):
        raise ExperimentError(f"output directory {path} is not writable")
    return path


def topology_of(cfg: ExperimentConfig) -> CellTopology:
    return CellTopology(cfg.search_space.inputs, cfg.search_space.intermediates)


def build_dataset(cfg: ExperimentConfig) -> tuple[ImageDataset, ImageDataset]:
    d = cfg.data
    if d.kind == "synthetic":
        spec = SyntheticDatasetSpec(
            num_classes=d.num_classes,
            train_per_class=d.train_per_class,
            val_per_class=d.val_per_class,
            image_size=d.image_size,
            base_frequency=d.base_frequency,
            frequency_step=d.frequency_step,
            noise=d.noise,
            seed=cfg.seed if d.seed is None else d.seed,
        )
        return generate_synthetic_dataset(spec)
    if d.kind == "idx":
        paths = (d.train_images, d.train_labels, d.val_images, d.val_labels)
        if any(p is None for p in paths):
            raise ExperimentError("idx data needs data.train_images, data.train_labels, data.val_images, data.val_labels")
        train = load_idx_dataset(d.train_images, d.train_labels, d.image_size)
        val = load_idx_dataset(d.val_images, d.val_labels, d.image_size)
        return train, val
    raise ExperimentError(f"unknown data.kind {d.kind!r} (expected 'synthetic' or 'idx')")


def build_supernet(cfg: ExperimentConfig, num_classes: int) -> Supernet:
    return Supernet(
        topology=topology_of(cfg),
        num_cells=cfg.supernet.cells,
        channels=cfg.supernet.channels,
        in_channels=1,
        input_size=cfg.data.image_size,
        num_classes=num_classes,
        stem_multiplier=cfg.supernet.stem_multiplier,
        seed=cfg.seed,
        dtype=np.dtype(cfg.supernet.dtype),
    )


def write_generations_csv(path, history: Sequence[GenerationLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GENERATION_COLUMNS)
        for h in history:
            w.writerow(
                [
                    h.generation,
                    repr(h.best_fitness),
                    repr(h.mean_fitness),
                    repr(h.min_fitness),
                    h.elite_genotype_hash,
                    h.unique_genotypes,
                    h.total_evaluations,
                ]
            )


def write_timing_csv(path, history: Sequence[GenerationLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "wall_seconds"])
        for h in history:
            w.writerow([h.generation, f"{h.wall_seconds:.6f}"])


def read_generations_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _versions() -> dict:
    return {
        "evnas": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _write_genotype(out: Path, g: Genotype) -> None:
    (out / "best.genotype.json").write_text(json.dumps(genotype_to_dict(g), indent=2, sort_keys=True) + "\n")
    (out / "best.dot").write_text(genotype_to_dot(g))


def _write_manifest(out: Path, cfg: ExperimentConfig, kind: str, extra: dict) -> None:
    manifest = {
        "kind": kind,
        "seed": cfg.seed,
        "preset": cfg.preset,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "config_text": cfg.to_text(),
        "versions": _versions(),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class SearchResult:
    best: Individual
    genotype: Genotype
    history: list[GenerationLog]
    output_dir: Path
    net: Optional[Supernet] = None
    landscape: Optional[SurrogateLandscape] = None


def run_supernet_search(cfg: ExperimentConfig) -> SearchResult:
    """Full search: round-robin training plus validation-accuracy fitness."""
    out = prepare_output_dir(cfg.output_dir)
    evo = cfg.evolution
    train, val = build_dataset(cfg)
    num_classes = max(train.num_classes, val.num_classes)
    net = build_supernet(cfg, num_classes)
    topo, ops = net.topology, net.ops
    search_rng, data_rng = np.random.default_rng(cfg.seed).spawn(2)
    stream = train.stream(cfg.train.batch_size, data_rng)
    plan = TrainPlan(evo.batches_per_generation, cfg.train.batch_size, grad_clip=cfg.train.grad_clip)
    opt = OptimizerState(
        lr_max=cfg.optimizer.lr_max,
        lr_min=cfg.optimizer.lr_min,
        total_steps=evo.generations * evo.batches_per_generation,
        momentum=cfg.optimizer.momentum,
        weight_decay=cfg.optimizer.weight_decay,
    )
    evaluator = SupernetEvaluator(net, val, cfg.eval.batch_size, cfg.eval.max_batches)
    start = time.perf_counter()
    with TrainingLog(out / "training.csv") as tlog:

        def trainer(pop: Population, g: int) -> None:
            train_generation(net, pop, plan, opt, stream, evo, generation=g, log=tlog)

        best, history = run_search(evo, evaluator, search_rng, trainer=trainer, topology=topo, ops=ops)
    genotype = derive_genotype(best.alpha, topo, ops)
    # weights are untouched between the last evaluation and here
    checkpoint_save(net, out / "supernet.evns")
    write_generations_csv(out / "generations.csv", history)
    write_timing_csv(out / "timing.csv", history)
    _write_genotype(out, genotype)
    _write_manifest(
        out,
        cfg,
        "search",
        {
            "elite_fitness": best.fitness,
            "elite_genotype_hash": genotype.digest(),
            "unique_genotypes": history[-1].unique_genotypes,
            "total_evaluations": history[-1].total_evaluations,
            "training_steps": opt.step,
            "supernet_parameters": net.num_parameters(),
            "wall_seconds": time.perf_counter() - start,
        },
    )
    return SearchResult(best, genotype, history, out, net=net)


def surrogate_landscape(cfg: ExperimentConfig) -> SurrogateLandscape:
    target_seed = cfg.surrogate.target_seed
    if target_seed is None:
        target_seed = int(np.random.default_rng([cfg.seed, 1]).integers(2**31))
    return SurrogateLandscape.random(target_seed, cfg.surrogate.noise_std, topology_of(cfg))


def search_surrogate(cfg: ExperimentConfig, land: Optional[SurrogateLandscape] = None):
    """In-memory surrogate search; returns (best, history, landscape)."""
    land = land or surrogate_landscape(cfg)
    topo = topology_of(cfg)
    best, history = run_search(cfg.evolution, SurrogateEvaluator(land), np.random.default_rng(cfg.seed), topology=topo)
    return best, history, land


def run_surrogate_search(cfg: ExperimentConfig) -> SearchResult:
    out = prepare_output_dir(cfg.output_dir)
    start = time.perf_counter()
    best, history, land = search_surrogate(cfg)
    topo = topology_of(cfg)
    genotype = derive_genotype(best.alpha, topo)
    write_generations_csv(out / "generations.csv", history)
    write_timing_csv(out / "timing.csv", history)
    _write_genotype(out, genotype)
    (out / "hidden_target.json").write_text(json.dumps(genotype_to_dict(land.hidden_target), indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out,
        cfg,
        "surrogate-search",
        {
            "elite_fitness": best.fitness,
            "elite_genotype_hash": genotype.digest(),
            "hidden_target_hash": land.hidden_target.digest(),
            "landscape_seed": land.seed,
            "unique_genotypes": history[-1].unique_genotypes,
            "total_evaluations": history[-1].total_evaluations,
            "wall_seconds": time.perf_counter() - start,
        },
    )
    return SearchResult(best, genotype, history, out, landscape=land)


def compare_presets(
    cfg: ExperimentConfig,
    presets: Sequence[str] = ("full", "rand"),
    seeds: Sequence[int] = tuple(range(20)),
) -> dict:
    """Final best surrogate fitness per preset over ``seeds``.

    Every preset sees the same landscape for a given seed. The first preset
    is tested against each of the others with a one-sided rank-sum test.
    """
    finals: dict[str, list[float]] = {p: [] for p in presets}
    for seed in seeds:
        base = cfg.replace(seed=seed)
        land = surrogate_landscape(base)
        for preset in presets:
            run_cfg = base.replace(preset=preset, evolution=cfg.evolution.with_preset(preset))
            _, history, _ = search_surrogate(run_cfg, land)
            finals[preset].append(history[-1].best_fitness)
    ref = presets[0]
    tests = {}
    for other in presets[1:]:
        res = mannwhitneyu(finals[ref], finals[other], alternative="greater")
        tests[f"{ref}>{other}"] = {"u_statistic": float(res.statistic), "p_value": float(res.pvalue)}
    return {
        "seeds": list(seeds),
        "final_best_fitness": finals,
        "mean_final_best_fitness": {p: float(np.mean(v)) for p, v in finals.items()},
        "rank_sum": tests,
    }


def run_comparison(cfg: ExperimentConfig, presets: Sequence[str], seeds: Sequence[int]) -> dict:
    out = prepare_output_dir(cfg.output_dir)
    summary = compare_presets(cfg, presets, seeds)
    summary["config_hash"] = cfg.config_hash()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_multi_seed(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2, 3)) -> list[dict]:
    """One full search per seed in ``<output_dir>/seed-<s>``; writes seeds.csv."""
    out = prepare_output_dir(cfg.output_dir)
    rows = []
    for seed in seeds:
        res = run_supernet_search(cfg.replace(seed=seed, output_dir=str(out / f"seed-{seed}")))
        rows.append(
            {
                "seed": seed,
                "elite_fitness": res.best.fitness,
                "elite_genotype_hash": res.genotype.digest(),
                "output_dir": str(res.output_dir),
            }
        )
    with open(out / "seeds.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def evaluate_checkpoint(
    checkpoint,
    genotype_json,
    valdata,
    k: float = 1.0,
    batch_size: int = 64,
    max_batches: Optional[int] = None,
) -> FitnessReport:
    """Validation accuracy of a saved supernet under a genotype file."""
    net = checkpoint_load(checkpoint)
    genotype = genotype_from_json(Path(genotype_json).read_text())
    if genotype.topology != net.topology:
        raise ExperimentError(
            f"genotype topology {genotype.topology.to_dict()} does not match checkpoint topology {net.topology.to_dict()}"
        )
    params = decode_genotype(genotype, k, net.ops)
    return accuracy(net, params, valdata, batch_size, max_batches)


__all__ = [
    "ExperimentError",
    "GENERATION_COLUMNS",
    "SearchResult",
    "prepare_output_dir",
    "build_dataset",
    "build_supernet",
    "write_generations_csv",
    "read_generations_csv",
    "run_supernet_search",
    "surrogate_landscape",
    "search_surrogate",
    "run_surrogate_search",
    "compare_presets",
    "run_comparison",
    "run_multi_seed",
    "evaluate_checkpoint",
]
