"""Shared oracles for the test suite."""

import numpy as np

from evnas import autograd as ag
from evnas.search_space import ArchParam, OperationSpace
from evnas.supernet import Supernet


def single_op_space(kind: str) -> OperationSpace:
    """``kind`` paired with ``zero`` (or with skip_connect when kind is zero)."""
    return OperationSpace((kind, "zero")) if kind != "zero" else OperationSpace(("skip_connect", "zero"))


def small_net(ops: OperationSpace, dtype=np.float32, seed=0, cells=3, channels=4, size=8, classes=3) -> Supernet:
    return Supernet(ops=ops, num_cells=cells, channels=channels, input_size=size, num_classes=classes, seed=seed, dtype=dtype)


def copy_weights(src: Supernet, dst: Supernet) -> None:
    for (n1, a), (n2, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert n1 == n2
        b.data[...] = a.data.astype(b.data.dtype)


def gradient_check(kind: str, n_params: int = 20, seed: int = 0, h: float = 1e-5):
    """Relative errors of float32 analytic gradients of sum(logits) against
    float64 central differences, on parameters drawn from the op under test
    (or from the whole net when the op has no weights)."""
    rng = np.random.default_rng(seed)
    ops = single_op_space(kind)
    net32 = small_net(ops, np.float32, seed)
    net64 = small_net(ops, np.float64, seed)
    copy_weights(net32, net64)
    alpha = ArchParam(rng.standard_normal((net32.topology.num_edges, 2)), rng.standard_normal((net32.topology.num_edges, 2)))
    x = rng.random((2, 1, 8, 8))
    ag.backward(ag.sum_all(net32(x, alpha)))

    own = [i for i, (name, _) in enumerate(net32.named_parameters()) if f".{kind}." in name + "."]
    pool = own or list(range(len(net32.parameters())))
    sizes = np.array([net32.parameters()[i].data.size for i in pool], dtype=float)
    errors = []
    p32, p64 = net32.parameters(), net64.parameters()
    for _ in range(n_params):
        i = pool[rng.choice(len(pool), p=sizes / sizes.sum())]
        idx = tuple(rng.integers(0, s) for s in p64[i].shape)
        old = p64[i].data[idx]
        with ag.no_grad():
            p64[i].data[idx] = old + h
            lp = float(net64(x, alpha).data.sum())
            p64[i].data[idx] = old - h
            lm = float(net64(x, alpha).data.sum())
        p64[i].data[idx] = old
        num = (lp - lm) / (2 * h)
        ana = float(p32[i].grad[idx])
        errors.append(abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return errors
