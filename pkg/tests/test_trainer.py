import logging

import numpy as np
import pytest

from evnas.autograd import Tensor
from evnas.evolution import EvolutionConfig, Individual, Population, random_population
from evnas.search_space import decode, init_arch_param
from evnas.supernet import Supernet
from evnas.trainer import (
    OptimizerState,
    TrainingError,
    TrainingLog,
    TrainPlan,
    cosine_lr,
    sgd_step,
    train_generation,
)


def scalar_param(value, grad):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    p.grad = np.array([grad], dtype=np.float64)
    return p


def tiny_net(seed=0):
    return Supernet(num_cells=2, channels=2, input_size=8, num_classes=2, seed=seed)


def batches(seed=0, size=4, classes=2):
    rng = np.random.default_rng(seed)
    while True:
        yield rng.random((size, 1, 8, 8)).astype(np.float32), rng.integers(0, classes, size)


def test_cosine_endpoints_and_midpoint():
    assert abs(cosine_lr(0, 1000, 0.025, 0.001) - 0.025) < 1e-9
    assert abs(cosine_lr(1000, 1000, 0.025, 0.001) - 0.001) < 1e-9
    # cos(pi/2) = 0, so the midpoint is the mean of the endpoints
    assert abs(cosine_lr(500, 1000, 0.025, 0.001) - 0.013) < 1e-12


def test_cosine_is_monotone_without_restart():
    lrs = [cosine_lr(s, 200, 0.025, 0.001) for s in range(201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_vanilla_sgd_step():
    p = scalar_param(5.0, 1.0)
    opt = OptimizerState(lr_max=0.1, lr_min=0.1, momentum=0.0, weight_decay=0.0, total_steps=10)
    sgd_step(opt, [p])
    assert p.data[0] == pytest.approx(4.9, abs=1e-15)
    assert p.grad is None and opt.step == 1


def test_momentum_two_steps():
    g, lr = 0.7, 0.05
    p = scalar_param(0.0, g)
    opt = OptimizerState(lr_max=lr, lr_min=lr, momentum=0.9, weight_decay=0.0, total_steps=10)
    sgd_step(opt, [p])
    p.grad = np.array([g])
    sgd_step(opt, [p])
    # v1 = g, v2 = 0.9 g + g
    assert -p.data[0] == pytest.approx(lr * g * (1 + 1.9), rel=1e-12)


def test_weight_decay_only():
    p = scalar_param(1.0, 0.0)
    opt = OptimizerState(lr_max=0.025, lr_min=0.025, momentum=0.0, weight_decay=3e-4, total_steps=10)
    sgd_step(opt, [p])
    assert p.data[0] == pytest.approx(1 - 0.025 * 3e-4, abs=1e-15)


def test_sgd_requires_gradients():
    p = scalar_param(1.0, 0.0)
    p.grad = None
    with pytest.raises(TrainingError, match="no gradient"):
        sgd_step(OptimizerState(), [p])


def test_optimizer_validation():
    with pytest.raises(ValueError):
        OptimizerState(lr_max=0.001, lr_min=0.01)
    with pytest.raises(ValueError):
        OptimizerState(momentum=1.0)
    with pytest.raises(ValueError):
        TrainPlan(batches_per_generation=-1)


def test_zero_batches_leave_supernet_unchanged():
    net = tiny_net()
    before = net.state_hash()
    pop = random_population(4, np.random.default_rng(0))
    cfg = EvolutionConfig(population_size=4, tournament_size=2, batches_per_generation=0)
    losses = train_generation(net, pop, TrainPlan(0, 4), OptimizerState(total_steps=1), batches(), cfg)
    assert losses == [] and net.state_hash() == before


def test_round_robin_assignment_and_alpha_untouched():
    net = tiny_net()
    n, m = 3, 2
    pop = random_population(n, np.random.default_rng(1))
    alphas = [ind.alpha.to_array().copy() for ind in pop]
    cfg = EvolutionConfig(population_size=n, tournament_size=2, batches_per_generation=n * m)
    log = TrainingLog()
    train_generation(net, pop, TrainPlan(n * m, 4), OptimizerState(total_steps=n * m), batches(), cfg, 0, log)
    used = [row[2] for row in log.rows]
    assert used == [i % n for i in range(n * m)]
    assert all(used.count(i) == m for i in range(n))
    for ind, a in zip(pop, alphas):
        np.testing.assert_array_equal(ind.alpha.to_array(), a)


def test_leftover_batches_go_to_lowest_indices_with_warning(caplog):
    net = tiny_net()
    pop = random_population(3, np.random.default_rng(2))
    cfg = EvolutionConfig(population_size=3, tournament_size=2, batches_per_generation=4)
    log = TrainingLog()
    with caplog.at_level(logging.WARNING):
        train_generation(net, pop, TrainPlan(4, 4), OptimizerState(total_steps=4), batches(), cfg, 0, log)
    assert [row[2] for row in log.rows] == [0, 1, 2, 0]
    assert "not a multiple" in caplog.text


class Spy:
    """Records the architecture parameters each forward call receives."""

    def __init__(self, net):
        self.net = net
        self.seen = []

    def __call__(self, net, images, params):
        self.seen.append(params)
        from evnas.supernet import forward

        return forward(net, images, params)


@pytest.mark.parametrize("use_decode", [True, False])
def test_training_uses_decoded_or_raw_params(monkeypatch, use_decode):
    import evnas.trainer as trainer

    net = tiny_net()
    spy = Spy(net)
    monkeypatch.setattr(trainer, "forward", spy)
    pop = random_population(2, np.random.default_rng(3))
    cfg = EvolutionConfig(population_size=2, tournament_size=2, use_decode_in_training=use_decode)
    train_generation(net, pop, TrainPlan(2, 4), OptimizerState(total_steps=2), batches(), cfg)
    for ind, params in zip(pop, spy.seen):
        expected = decode(ind.alpha) if use_decode else ind.alpha
        assert params == expected
        assert hasattr(params, "k") == use_decode


def test_non_finite_loss_aborts_with_batch_index():
    net = tiny_net()
    pop = random_population(2, np.random.default_rng(0))
    cfg = EvolutionConfig(population_size=2, tournament_size=2)

    def bad():
        yield from [next(batches())] * 2
        images = np.zeros((4, 1, 8, 8), dtype=np.float32)
        while True:
            yield images, np.zeros(4, dtype=int)

    net.classifier_b.data[:] = np.inf
    with pytest.raises((TrainingError, FloatingPointError)):
        train_generation(net, pop, TrainPlan(4, 4), OptimizerState(total_steps=4), bad(), cfg)


def test_empty_stream_is_an_error():
    net = tiny_net()
    pop = random_population(2, np.random.default_rng(0))
    cfg = EvolutionConfig(population_size=2, tournament_size=2)
    with pytest.raises(TrainingError, match="exhausted after 0"):
        train_generation(net, pop, TrainPlan(2, 4), OptimizerState(total_steps=2), iter(()), cfg)


def test_weights_are_inherited_across_generations():
    net = tiny_net()
    canary = net.parameters()[0]
    storage = id(canary.data)
    canary.data[0, 0, 0, 0] = 123.0
    pop = random_population(2, np.random.default_rng(0))
    cfg = EvolutionConfig(population_size=2, tournament_size=2, batches_per_generation=2)
    opt = OptimizerState(total_steps=4)
    stream = batches()
    train_generation(net, pop, TrainPlan(2, 4), opt, stream, cfg, generation=0)
    after_g0 = float(canary.data[0, 0, 0, 0])
    train_generation(net, pop, TrainPlan(2, 4), opt, stream, cfg, generation=1)
    assert id(net.parameters()[0].data) == storage
    # perturbed-then-trained: still far from the fresh initialisation scale
    assert abs(after_g0 - 123.0) < 1.0 and abs(float(canary.data[0, 0, 0, 0]) - 123.0) < 2.0
    assert opt.step == 4


def test_loss_decreases_on_fixed_tiny_dataset():
    wins = 0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        images = rng.random((8, 1, 8, 8)).astype(np.float32)
        labels = np.arange(8) % 2
        images[labels == 1] += 0.5

        def fixed():
            while True:
                yield images, labels

        net = tiny_net(seed)
        pop = Population([Individual(init_arch_param(rng))])
        cfg = EvolutionConfig(population_size=2, tournament_size=2)
        losses = train_generation(net, pop, TrainPlan(40, 8), OptimizerState(total_steps=40), fixed(), cfg)
        q = len(losses) // 4
        wins += np.mean(losses[-q:]) < np.mean(losses[:q])
    assert wins >= 2


def test_training_log_csv(tmp_path):
    path = tmp_path / "training.csv"
    with TrainingLog(path) as log:
        log.record(0, 0, 1, 0.5, 0.025)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,generation,individual_index,loss,lr"
    assert lines[1].split(",")[:3] == ["0", "0", "1"]
