"""scikit-learn wrappers around the search engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from ._validation import check_arch_array, check_image_labels, check_images
from .data import ImageDataset
from .evaluation import SupernetEvaluator
from .evolution import EvolutionConfig, run_search
from .search_space import ArchParam, CellTopology, OperationSpace, decode, decode_genotype, derive_genotype
from .supernet import Supernet, forward
from .trainer import OptimizerState, TrainPlan, train_generation


class EvNASClassifier(ClassifierMixin, BaseEstimator):
    """Searches a cell architecture on (X, y) and predicts with the elite.

    A stratified ``validation_fraction`` of the training data supplies the
    fitness signal. Prediction runs the trained supernet under the decoded
    elite genotype.
    """

    def __init__(
        self,
        population_size=8,
        generations=5,
        tournament_size=None,
        mutation_rate=0.1,
        batches_per_generation=None,
        batch_size=32,
        decode_k=1.0,
        preset="full",
        num_cells=2,
        channels=8,
        stem_multiplier=3,
        lr_max=0.025,
        lr_min=0.001,
        momentum=0.9,
        weight_decay=3e-4,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.population_size = population_size
        self.generations = generations
        self.tournament_size = tournament_size
        self.mutation_rate = mutation_rate
        self.batches_per_generation = batches_per_generation
        self.batch_size = batch_size
        self.decode_k = decode_k
        self.preset = preset
        self.num_cells = num_cells
        self.channels = channels
        self.stem_multiplier = stem_multiplier
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _evolution_config(self) -> EvolutionConfig:
        t = self.tournament_size if self.tournament_size is not None else min(10, self.population_size)
        return EvolutionConfig.from_preset(
            self.preset,
            population_size=self.population_size,
            generations=self.generations,
            tournament_size=t,
            mutation_rate=self.mutation_rate,
            batches_per_generation=self.batches_per_generation,
            decode_k=self.decode_k,
        )

    def fit(self, X, y):
        X, y = check_image_labels(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        seed = int(self.random_state)
        X_tr, X_val, y_tr, y_val = train_test_split(
            X, y_enc, test_size=self.validation_fraction, random_state=seed, stratify=y_enc
        )
        cfg = self._evolution_config()
        net = Supernet(
            num_cells=self.num_cells,
            channels=self.channels,
            in_channels=X.shape[1],
            input_size=X.shape[2],
            num_classes=len(self.classes_),
            stem_multiplier=self.stem_multiplier,
            seed=seed,
        )
        search_rng, data_rng = np.random.default_rng(seed).spawn(2)
        stream = ImageDataset(X_tr, y_tr).stream(self.batch_size, data_rng)
        plan = TrainPlan(cfg.batches_per_generation, self.batch_size)
        opt = OptimizerState(
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            total_steps=cfg.generations * cfg.batches_per_generation,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

        def trainer(pop, g):
            train_generation(net, pop, plan, opt, stream, cfg, generation=g)

        evaluator = SupernetEvaluator(net, ImageDataset(X_val, y_val), batch_size=64)
        best, history = run_search(cfg, evaluator, search_rng, trainer=trainer)
        self.supernet_ = net
        self.best_alpha_ = best.alpha
        self.genotype_ = derive_genotype(best.alpha)
        self.best_fitness_ = best.fitness
        self.history_ = history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "supernet_")
        net = self.supernet_
        X = check_images(X, n_channels=net.in_channels, size=net.input_size)
        params = decode_genotype(self.genotype_, self.decode_k)
        out = []
        with ag.no_grad():
            for start in range(0, len(X), 64):
                out.append(forward(net, X[start : start + 64], params).data)
        return np.concatenate(out) if out else np.empty((0, len(self.classes_)))

    def predict_proba(self, X) -> np.ndarray:
        return ag.softmax(self._logits(X), axis=1)

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]


class GenotypeDecoder(TransformerMixin, BaseEstimator):
    """Maps stacks of architecture parameters to their decoded form.

    Input and output have shape (n, 2, edges, ops); index 0 on the second
    axis is the normal cell, 1 the reduction cell.
    """

    def __init__(self, k=1.0, inputs=2, intermediates=4):
        self.k = k
        self.inputs = inputs
        self.intermediates = intermediates

    def _space(self):
        return CellTopology(self.inputs, self.intermediates), OperationSpace()

    def fit(self, X, y=None):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        topo, ops = self._space()
        check_arch_array(X, topo.num_edges, len(ops))
        self.topology_ = topo
        self.n_features_in_ = 2 * topo.num_edges * len(ops)
        return self

    def transform(self, X):
        check_is_fitted(self, "topology_")
        topo, ops = self.topology_, OperationSpace()
        A = check_arch_array(X, topo.num_edges, len(ops))
        return np.stack([decode(ArchParam.from_array(a), self.k, topo, ops).to_array() for a in A])

    def genotypes(self, X):
        check_is_fitted(self, "topology_")
        A = check_arch_array(X, self.topology_.num_edges, len(OperationSpace()))
        return [derive_genotype(ArchParam.from_array(a), self.topology_) for a in A]


__all__ = ["EvNASClassifier", "GenotypeDecoder"]
