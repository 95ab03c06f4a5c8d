"""Evolutionary architecture search over a weight-sharing supernet."""

from .evaluation import FitnessReport, SurrogateLandscape, evaluate_fitness, surrogate_fitness
from .evolution import PRESETS, EvolutionConfig, Individual, Population, run_search
from .search_space import (
    DEFAULT_OPS,
    DEFAULT_TOPOLOGY,
    PRIMITIVES,
    ArchParam,
    CellTopology,
    DecodedParam,
    Genotype,
    OperationSpace,
    decode,
    derive_genotype,
    genotype_from_json,
    genotype_to_json,
    init_arch_param,
)
from .supernet import Supernet, checkpoint_load, checkpoint_save

__version__ = "0.1.0"

__all__ = [
    "ArchParam",
    "CellTopology",
    "DEFAULT_OPS",
    "DEFAULT_TOPOLOGY",
    "DecodedParam",
    "EvolutionConfig",
    "FitnessReport",
    "Genotype",
    "Individual",
    "OperationSpace",
    "PRESETS",
    "PRIMITIVES",
    "Population",
    "Supernet",
    "SurrogateLandscape",
    "checkpoint_load",
    "checkpoint_save",
    "decode",
    "derive_genotype",
    "evaluate_fitness",
    "genotype_from_json",
    "genotype_to_json",
    "init_arch_param",
    "run_search",
    "surrogate_fitness",
]
