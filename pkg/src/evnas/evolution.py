"""Genetic search over architecture parameters.

Mutation and crossover work on whole edge rows of each cell matrix. The best
individual of a generation is copied unchanged into the next one; the rest
are bred from tournament winners.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .search_space import (
    DEFAULT_OPS,
    DEFAULT_TOPOLOGY,
    ArchParam,
    CellTopology,
    OperationSpace,
    decode,
    derive_genotype,
    init_arch_param,
)

logger = logging.getLogger(__name__)

PRESETS: dict[str, dict[str, bool]] = {
    "full": dict(use_decode_in_training=True, use_decode_in_fitness=True, enable_crossover=True, enable_mutation=True, random_mode=False),
    "rand": dict(use_decode_in_training=True, use_decode_in_fitness=True, enable_crossover=False, enable_mutation=False, random_mode=True),
    "nd": dict(use_decode_in_training=False, use_decode_in_fitness=False, enable_crossover=True, enable_mutation=True, random_mode=False),
    "ndf": dict(use_decode_in_training=True, use_decode_in_fitness=False, enable_crossover=True, enable_mutation=True, random_mode=False),
    "ndt": dict(use_decode_in_training=False, use_decode_in_fitness=True, enable_crossover=True, enable_mutation=True, random_mode=False),
    "mut": dict(use_decode_in_training=True, use_decode_in_fitness=True, enable_crossover=False, enable_mutation=True, random_mode=False),
    "cross": dict(use_decode_in_training=True, use_decode_in_fitness=True, enable_crossover=True, enable_mutation=False, random_mode=False),
}


class SearchError(RuntimeError):
    pass


@dataclass
class EvolutionConfig:
    population_size: int = 50
    generations: int = 50
    tournament_size: int = 10
    mutation_rate: float = 0.1
    batches_per_generation: Optional[int] = None
    decode_k: float = 1.0
    use_decode_in_training: bool = True
    use_decode_in_fitness: bool = True
    enable_crossover: bool = True
    enable_mutation: bool = True
    random_mode: bool = False
    mutation_granularity: str = "row"

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not 2 <= self.tournament_size <= self.population_size:
            raise ValueError(f"tournament_size must lie in [2, {self.population_size}], got {self.tournament_size}")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError(f"mutation_rate must lie in [0, 1], got {self.mutation_rate}")
        if self.generations < 1:
            raise ValueError("generations must be at least 1")
        if not self.decode_k > 0:
            raise ValueError("decode_k must be positive")
        if self.mutation_granularity not in ("row", "scalar"):
            raise ValueError("mutation_granularity must be 'row' or 'scalar'")
        if self.batches_per_generation is None:
            self.batches_per_generation = 2 * self.population_size
        if self.batches_per_generation < 0:
            raise ValueError("batches_per_generation must be non-negative")
        if 0 < self.batches_per_generation < self.population_size:
            logger.warning(
                "batches_per_generation=%d < population_size=%d: some individuals get no training batch",
                self.batches_per_generation,
                self.population_size,
            )

    @classmethod
    def from_preset(cls, preset: str, **kwargs) -> "EvolutionConfig":
        try:
            flags = PRESETS[preset]
        except KeyError:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**flags, **kwargs})

    def with_preset(self, preset: str) -> "EvolutionConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        return replace(self, **PRESETS[preset])

    def params_for(self, alpha: ArchParam, *, training: bool, topology=DEFAULT_TOPOLOGY, ops=DEFAULT_OPS) -> ArchParam:
        """The matrices fed to the supernet for training or fitness."""
        use = self.use_decode_in_training if training else self.use_decode_in_fitness
        return decode(alpha, self.decode_k, topology, ops) if use else alpha


@dataclass
class Individual:
    alpha: ArchParam
    fitness: Optional[float] = None
    id: int = 0


@dataclass
class Population:
    individuals: list[Individual]
    generation: int = 0
    elite: Optional[Individual] = None

    def __len__(self) -> int:
        return len(self.individuals)

    def __iter__(self):
        return iter(self.individuals)

    def __getitem__(self, i: int) -> Individual:
        return self.individuals[i]

    def best(self) -> Individual:
        _require_fitness(self.individuals)
        return min(self.individuals, key=lambda ind: (-ind.fitness, ind.id))


@dataclass
class GenerationLog:
    generation: int
    best_fitness: float
    mean_fitness: float
    min_fitness: float
    elite_genotype_hash: str
    wall_seconds: float
    unique_genotypes: int = 0
    total_evaluations: int = 0
    elite_id: int = 0


def _require_fitness(individuals) -> None:
    for ind in individuals:
        if ind.fitness is None:
            raise ValueError(f"individual {ind.id} has no fitness")


def random_population(
    n: int,
    rng: np.random.Generator,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
) -> Population:
    return Population([Individual(init_arch_param(rng, topology, ops), id=i) for i in range(n)])


def mutate(alpha: ArchParam, r: float, rng: np.random.Generator, granularity: str = "row") -> ArchParam:
    """Resample each edge row (or scalar) uniformly from [0, 1) with probability r."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"mutation rate must lie in [0, 1], got {r}")
    out = []
    for mat in alpha.cells():
        if granularity == "row":
            hit = rng.random(mat.shape[0]) < r
            new = np.array(mat)
            new[hit] = rng.random((int(hit.sum()), mat.shape[1]))
        elif granularity == "scalar":
            hit = rng.random(mat.shape) < r
            new = np.array(mat)
            new[hit] = rng.random(int(hit.sum()))
        else:
            raise ValueError(f"unknown mutation granularity {granularity!r}")
        out.append(new)
    return ArchParam(*out)


def crossover(p1: ArchParam, p2: ArchParam, rng: np.random.Generator) -> ArchParam:
    """Take each edge row from parent 1 with probability 0.5, else parent 2."""
    if p1.shape != p2.shape:
        raise ValueError(f"parent shapes differ: {p1.shape} vs {p2.shape}")
    out = []
    for a, b in zip(p1.cells(), p2.cells()):
        take_first = rng.random(a.shape[0]) < 0.5
        out.append(np.where(take_first[:, None], a, b))
    return ArchParam(*out)


def tournament_select(pop: Population, t: int, rng: np.random.Generator) -> tuple[Individual, Individual]:
    """Draw ``t`` distinct individuals and return the fittest two, best first."""
    n = len(pop)
    if not 2 <= t <= n:
        raise ValueError(f"tournament size must lie in [2, {n}], got {t}")
    _require_fitness(pop.individuals)
    picks = rng.choice(n, size=t, replace=False)
    ranked = sorted((pop[i] for i in picks), key=lambda ind: (-ind.fitness, ind.id))
    return ranked[0], ranked[1]


def next_generation(
    pop: Population,
    cfg: EvolutionConfig,
    rng: np.random.Generator,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
) -> Population:
    """Elite in slot 0, then N-1 children (or fresh samples in random mode)."""
    elite = pop.best()
    children = [Individual(elite.alpha, id=0)]
    for i in range(1, len(pop)):
        if cfg.random_mode:
            alpha = init_arch_param(rng, topology, ops)
        else:
            p1, p2 = tournament_select(pop, cfg.tournament_size, rng)
            alpha = crossover(p1.alpha, p2.alpha, rng) if cfg.enable_crossover else p1.alpha
            if cfg.enable_mutation:
                alpha = mutate(alpha, cfg.mutation_rate, rng, cfg.mutation_granularity)
        children.append(Individual(alpha, id=i))
    return Population(children, generation=pop.generation + 1, elite=elite)


# evaluator(individual, params) -> float in [0, 1] or an object with .fitness
Evaluator = Callable[[Individual, ArchParam], object]
# trainer(population, generation) -> None
Trainer = Callable[[Population, int], None]


def evaluate_population(
    pop: Population,
    cfg: EvolutionConfig,
    evaluator: Evaluator,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
) -> None:
    for ind in pop:
        params = cfg.params_for(ind.alpha, training=False, topology=topology, ops=ops)
        try:
            result = evaluator(ind, params)
        except Exception as exc:
            raise SearchError(f"fitness evaluation failed in generation {pop.generation}, individual {ind.id}: {exc}") from exc
        fitness = float(getattr(result, "fitness", result))
        if not 0.0 <= fitness <= 1.0:
            raise SearchError(f"fitness {fitness} of individual {ind.id} is outside [0, 1]")
        ind.fitness = fitness


def run_search(
    cfg: EvolutionConfig,
    evaluator: Evaluator,
    rng: np.random.Generator,
    trainer: Optional[Trainer] = None,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
    on_generation: Optional[Callable[[Population, GenerationLog], None]] = None,
    initial: Optional[Population] = None,
) -> tuple[Individual, list[GenerationLog]]:
    """Train, evaluate, select the elite and breed, for ``cfg.generations`` rounds.

    Returns the elite of the last generation and one log entry per generation.
    """
    pop = initial if initial is not None else random_population(cfg.population_size, rng, topology, ops)
    if len(pop) != cfg.population_size:
        raise ValueError("initial population size does not match the config")
    history: list[GenerationLog] = []
    seen: set[str] = set()
    evaluations = 0
    elite = None
    for g in range(cfg.generations):
        start = time.perf_counter()
        pop.generation = g
        if trainer is not None:
            try:
                trainer(pop, g)
            except Exception as exc:
                raise SearchError(f"training failed in generation {g}: {exc}") from exc
        evaluate_population(pop, cfg, evaluator, topology, ops)
        evaluations += len(pop)
        for ind in pop:
            seen.add(derive_genotype(ind.alpha, topology, ops).digest())
        elite = pop.best()
        pop.elite = elite
        fits = np.array([ind.fitness for ind in pop])
        log = GenerationLog(
            generation=g,
            best_fitness=float(fits.max()),
            mean_fitness=float(fits.mean()),
            min_fitness=float(fits.min()),
            elite_genotype_hash=derive_genotype(elite.alpha, topology, ops).digest(),
            wall_seconds=time.perf_counter() - start,
            unique_genotypes=len(seen),
            total_evaluations=evaluations,
            elite_id=elite.id,
        )
        history.append(log)
        logger.info(
            "generation %d: best %.4f mean %.4f min %.4f", g, log.best_fitness, log.mean_fitness, log.min_fitness
        )
        if on_generation is not None:
            on_generation(pop, log)
        if g + 1 < cfg.generations:
            pop = next_generation(pop, cfg, rng, topology, ops)
    return elite, history


__all__ = [
    "PRESETS",
    "EvolutionConfig",
    "Individual",
    "Population",
    "GenerationLog",
    "SearchError",
    "random_population",
    "mutate",
    "crossover",
    "tournament_select",
    "next_generation",
    "evaluate_population",
    "run_search",
]
