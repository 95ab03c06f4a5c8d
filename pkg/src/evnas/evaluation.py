"""Fitness: validation accuracy through the shared supernet, or a synthetic
landscape that scores genotypes by their distance to a hidden target."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .evolution import EvolutionConfig, Individual
from .search_space import (
    CELL_NAMES,
    DEFAULT_OPS,
    DEFAULT_TOPOLOGY,
    ArchParam,
    CellTopology,
    Genotype,
    OperationSpace,
    derive_genotype,
    init_arch_param,
)
from .supernet import Supernet, forward


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FitnessReport:
    fitness: float
    correct: int
    total: int
    eval_batches: int

    def __post_init__(self):
        if self.total <= 0:
            raise EvaluationError("fitness needs at least one validation example")

    def to_dict(self) -> dict:
        return {"fitness": self.fitness, "correct": self.correct, "total": self.total, "eval_batches": self.eval_batches}


def _val_batches(valdata, batch_size: int, max_batches: Optional[int]):
    if hasattr(valdata, "batches"):
        return valdata.batches(batch_size, max_batches)
    it = iter(valdata)
    if max_batches is None:
        return it
    return (b for _, b in zip(range(max_batches), it))


def accuracy(
    net: Supernet,
    params: ArchParam,
    valdata,
    batch_size: int = 64,
    max_batches: Optional[int] = None,
) -> FitnessReport:
    """Top-1 accuracy of ``net`` under ``params``; weights are not touched.

    ``valdata`` is a dataset with a ``batches`` method or an iterable of
    ``(images, labels)`` batches.
    """
    correct = total = nb = 0
    with ag.no_grad():
        for images, labels in _val_batches(valdata, batch_size, max_batches):
            logits = forward(net, images, params)
            correct += int((logits.data.argmax(axis=1) == np.asarray(labels)).sum())
            total += len(labels)
            nb += 1
    if total == 0:
        raise EvaluationError("validation stream is empty")
    return FitnessReport(correct / total, correct, total, nb)


def evaluate_fitness(
    net: Supernet,
    ind: Individual,
    valdata,
    cfg: EvolutionConfig,
    batch_size: int = 64,
    max_batches: Optional[int] = None,
) -> FitnessReport:
    """Accuracy of one individual; decoded first when the config says so.

    Stores the result on ``ind.fitness``.
    """
    params = cfg.params_for(ind.alpha, training=False, topology=net.topology, ops=net.ops)
    report = accuracy(net, params, valdata, batch_size, max_batches)
    ind.fitness = report.fitness
    return report


class SupernetEvaluator:
    """Evaluator callable for the search loop, bound to a net and a split."""

    def __init__(self, net: Supernet, valdata, batch_size: int = 64, max_batches: Optional[int] = None):
        self.net = net
        self.valdata = valdata
        self.batch_size = batch_size
        self.max_batches = max_batches

    def __call__(self, ind: Individual, params: ArchParam) -> FitnessReport:
        return accuracy(self.net, params, self.valdata, self.batch_size, self.max_batches)


# ---------------------------------------------------------------------------
# surrogate


def random_genotype(
    rng: np.random.Generator,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
) -> Genotype:
    return derive_genotype(init_arch_param(rng, topology, ops), topology, ops)


@dataclass(frozen=True)
class SurrogateLandscape:
    hidden_target: Genotype
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def random(cls, seed: int, noise_std: float = 0.0, topology=DEFAULT_TOPOLOGY, ops=DEFAULT_OPS):
        """Landscape whose hidden target is drawn from ``seed``."""
        return cls(random_genotype(np.random.default_rng(seed), topology, ops), noise_std, seed)

    @property
    def num_slots(self) -> int:
        return 2 * len(CELL_NAMES) * self.hidden_target.topology.num_intermediate_nodes


def genotype_matches(g: Genotype, target: Genotype) -> int:
    """Number of (node, predecessor, op) entries shared by ``g`` and ``target``."""
    if g.topology != target.topology:
        raise ValueError("genotypes have different topologies")
    n = 0
    for cell in CELL_NAMES:
        for t in range(g.topology.num_intermediate_nodes):
            n += len(set(g.node_entries(cell, t)) & set(target.node_entries(cell, t)))
    return n


def surrogate_fitness(
    land: SurrogateLandscape,
    alpha: ArchParam,
    ops: OperationSpace = DEFAULT_OPS,
) -> float:
    """Fraction of matching entries, plus noise that is a fixed function of alpha."""
    g = derive_genotype(alpha, land.hidden_target.topology, ops)
    score = genotype_matches(g, land.hidden_target) / land.num_slots
    if land.noise_std > 0:
        digest = hashlib.sha256(np.ascontiguousarray(alpha.to_array()).tobytes()).digest()
        rng = np.random.default_rng([land.seed, int.from_bytes(digest[:8], "little")])
        score += land.noise_std * rng.standard_normal()
    return float(min(1.0, max(0.0, score)))


class SurrogateEvaluator:
    """Evaluator callable scoring the raw alpha of each individual.

    The decoded matrices passed by the search loop derive the same genotype
    as the raw ones, so only the noise seed would differ; the raw alpha is
    used so that noise does not depend on the decode flag.
    """

    def __init__(self, land: SurrogateLandscape, ops: OperationSpace = DEFAULT_OPS):
        self.land = land
        self.ops = ops

    def __call__(self, ind: Individual, params: ArchParam) -> float:
        return surrogate_fitness(self.land, ind.alpha, self.ops)


__all__ = [
    "EvaluationError",
    "FitnessReport",
    "accuracy",
    "evaluate_fitness",
    "SupernetEvaluator",
    "random_genotype",
    "SurrogateLandscape",
    "genotype_matches",
    "surrogate_fitness",
    "SurrogateEvaluator",
]
