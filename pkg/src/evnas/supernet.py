"""The one-shot network shared by every individual of the population.

Each cell edge holds one instance of every candidate operation and returns
their softmax-weighted mixture. Which architecture the network computes is
decided per forward call by the parameter matrices passed in, so a single
weight set serves all individuals.

Conventions (no batch normalization anywhere):

* separable conv: (ReLU, depthwise kxk, pointwise 1x1) applied twice, the
  first depthwise carrying the stride;
* dilated conv: ReLU, depthwise kxk with dilation 2, pointwise 1x1;
* pooling: 3x3, padding 1, average pooling excludes padding;
* skip_connect: identity, or ReLU + strided 1x1 conv when stride is 2;
* zero: no contribution (a zero tensor of the strided shape).
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .search_space import (
    DEFAULT_OPS,
    DEFAULT_TOPOLOGY,
    ArchParam,
    CellTopology,
    OperationSpace,
)

CHECKPOINT_MAGIC = b"EVNS"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Ordered registry of learnable tensors; order is the checkpoint order."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.named: list[tuple[str, Tensor]] = []

    def conv(self, name: str, out_ch: int, in_ch: int, k: int) -> Tensor:
        t = Tensor(_kaiming_uniform(self.rng, (out_ch, in_ch, k, k), in_ch * k * k, self.dtype), requires_grad=True)
        self.named.append((name, t))
        return t

    def add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self.named.append((name, t))
        return t


class OpInstance:
    """One candidate operation on one edge, with its own weights."""

    needs_relu = False

    def __init__(self, kind: str, stride: int):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.kind = kind
        self.stride = stride

    def parameters(self) -> list[Tensor]:
        return []

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (h + self.stride - 1) // self.stride, (w + self.stride - 1) // self.stride

    def __call__(self, x: Tensor, x_relu: Tensor | None = None) -> Tensor | None:
        if self.needs_relu and x_relu is None:
            x_relu = ag.relu(x)
        return self.apply(x, x_relu)

    def apply(self, x: Tensor, x_relu: Tensor | None) -> Tensor | None:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.kind}, stride={self.stride})"


class SepConv(OpInstance):
    needs_relu = True

    def __init__(self, kind, stride, channels, k, store: ParamStore, prefix: str):
        super().__init__(kind, stride)
        self.k = k
        self.dw1 = store.conv(f"{prefix}.dw1", channels, 1, k)
        self.pw1 = store.conv(f"{prefix}.pw1", channels, channels, 1)
        self.dw2 = store.conv(f"{prefix}.dw2", channels, 1, k)
        self.pw2 = store.conv(f"{prefix}.pw2", channels, channels, 1)

    def parameters(self):
        return [self.dw1, self.pw1, self.dw2, self.pw2]

    def apply(self, x, x_relu):
        c = x.shape[0]
        p = self.k // 2
        y = ag.conv2d(x_relu, self.dw1, stride=self.stride, padding=p, groups=c)
        y = ag.conv2d(y, self.pw1)
        y = ag.relu(y)
        y = ag.conv2d(y, self.dw2, padding=p, groups=c)
        return ag.conv2d(y, self.pw2)


class DilConv(OpInstance):
    needs_relu = True

    def __init__(self, kind, stride, channels, k, store: ParamStore, prefix: str):
        super().__init__(kind, stride)
        self.k = k
        self.dw = store.conv(f"{prefix}.dw", channels, 1, k)
        self.pw = store.conv(f"{prefix}.pw", channels, channels, 1)

    def parameters(self):
        return [self.dw, self.pw]

    def apply(self, x, x_relu):
        c = x.shape[0]
        y = ag.conv2d(x_relu, self.dw, stride=self.stride, padding=2 * (self.k // 2), dilation=2, groups=c)
        return ag.conv2d(y, self.pw)


class Pool(OpInstance):
    def apply(self, x, x_relu):
        fn = ag.max_pool2d if self.kind == "max_pool_3x3" else ag.avg_pool2d
        return fn(x, 3, self.stride, 1)


class Skip(OpInstance):
    def __init__(self, kind, stride, channels, store: ParamStore, prefix: str):
        super().__init__(kind, stride)
        self.needs_relu = stride == 2
        self.proj = store.conv(f"{prefix}.proj", channels, channels, 1) if stride == 2 else None

    def parameters(self):
        return [self.proj] if self.proj is not None else []

    def apply(self, x, x_relu):
        if self.proj is None:
            return x
        return ag.conv2d(x_relu, self.proj, stride=2)


class Zero(OpInstance):
    def apply(self, x, x_relu):
        return None


def make_op(kind: str, stride: int, channels: int, store: ParamStore, prefix: str) -> OpInstance:
    if kind.startswith("sep_conv"):
        return SepConv(kind, stride, channels, int(kind[-1]), store, prefix)
    if kind.startswith("dil_conv"):
        return DilConv(kind, stride, channels, int(kind[-1]), store, prefix)
    if kind in ("max_pool_3x3", "avg_pool_3x3"):
        return Pool(kind, stride)
    if kind == "skip_connect":
        return Skip(kind, stride, channels, store, prefix)
    if kind == "zero":
        return Zero(kind, stride)
    raise ValueError(f"unknown operation kind {kind!r}")


def _call_op(op, x: Tensor, x_relu: Tensor | None):
    if isinstance(op, OpInstance):
        return op(x, x_relu)
    return op(x)


def _mix(x: Tensor, edge_ops: Sequence, weights: np.ndarray, x_relu: Tensor | None = None) -> Tensor:
    outs, coeffs = [], []
    zero_shape = None
    for op, w in zip(edge_ops, weights):
        y = _call_op(op, x, x_relu)
        if y is None:
            zero_shape = (*x.shape[:2], *op.out_hw(*x.shape[2:]))
            continue
        outs.append(y)
        coeffs.append(w)
    if not outs:
        return ag.zeros_like_shape(zero_shape, x.data.dtype)
    shape = outs[0].shape
    for y in outs[1:]:
        if y.shape != shape:
            raise ValueError(f"operation outputs disagree in shape: {y.shape} vs {shape}")
    if zero_shape is not None and zero_shape != shape:
        raise ValueError(f"zero op shape {zero_shape} disagrees with {shape}")
    return ag.weighted_sum(outs, coeffs)


def mixed_edge_forward(x: Tensor, edge_ops: Sequence, weights_row, x_relu: Tensor | None = None) -> Tensor:
    """Softmax(weights_row)-weighted sum of every operation applied to ``x``.

    ``weights_row`` is a raw row of architecture parameters; the softmax is
    taken here. ``edge_ops`` may be :class:`OpInstance` objects or plain
    callables.
    """
    weights_row = np.asarray(weights_row, dtype=float)
    if weights_row.shape != (len(edge_ops),):
        raise ValueError(f"expected {len(edge_ops)} weights, got shape {weights_row.shape}")
    return _mix(x, edge_ops, ag.softmax(weights_row), x_relu)


class Cell:
    def __init__(
        self,
        topology: CellTopology,
        ops: OperationSpace,
        c_prev_prev: int,
        c_prev: int,
        channels: int,
        reduction: bool,
        reduction_prev: bool,
        store: ParamStore,
        prefix: str,
    ):
        self.topology = topology
        self.reduction = reduction
        self.reduction_prev = reduction_prev
        self.channels = channels
        self.pre0 = store.conv(f"{prefix}.pre0", channels, c_prev_prev, 1)
        self.pre1 = store.conv(f"{prefix}.pre1", channels, c_prev, 1)
        self.edge_ops: list[list[OpInstance]] = []
        for e, (src, t) in enumerate(topology.edges):
            stride = 2 if reduction and src < topology.num_input_nodes else 1
            self.edge_ops.append(
                [make_op(kind, stride, channels, store, f"{prefix}.e{e}.{kind}") for kind in ops.ops]
            )

    @property
    def out_channels(self) -> int:
        return self.channels * self.topology.num_intermediate_nodes

    def forward(self, s0: Tensor, s1: Tensor, weights: np.ndarray) -> Tensor:
        """``weights`` is the already-softmaxed (edges x ops) matrix."""
        topo = self.topology
        s0 = ag.conv2d(ag.relu(s0), self.pre0, stride=2 if self.reduction_prev else 1)
        s1 = ag.conv2d(ag.relu(s1), self.pre1)
        states = [s0, s1] if topo.num_input_nodes == 2 else [s1]
        relus: list[Tensor | None] = [None] * len(states)
        for t in range(topo.num_intermediate_nodes):
            terms = []
            for e in topo.incoming(t):
                src = topo.edges[e][0]
                if relus[src] is None:
                    relus[src] = ag.relu(states[src])
                terms.append(_mix(states[src], self.edge_ops[e], weights[e], relus[src]))
            states.append(ag.add(*terms))
            relus.append(None)
        return ag.concat(states[topo.num_input_nodes :], axis=0)


class Supernet:
    """Stem, stacked cells, global pooling and a linear classifier."""

    def __init__(
        self,
        topology: CellTopology = DEFAULT_TOPOLOGY,
        ops: OperationSpace = DEFAULT_OPS,
        num_cells: int = 4,
        channels: int = 8,
        in_channels: int = 1,
        input_size: int = 16,
        num_classes: int = 4,
        stem_multiplier: int = 3,
        seed: int = 0,
        dtype=np.float32,
    ):
        if num_cells < 1:
            raise ValueError("need at least one cell")
        if topology.num_input_nodes not in (1, 2):
            raise ValueError("the supernet wires cells with one or two input nodes")
        self.topology = topology
        self.ops = ops
        self.num_cells = num_cells
        self.channels = channels
        self.in_channels = in_channels
        self.input_size = input_size
        self.num_classes = num_classes
        self.stem_multiplier = stem_multiplier
        self.seed = seed
        self.dtype = np.dtype(dtype)

        store = ParamStore(np.random.default_rng(seed), self.dtype)
        c_stem = stem_multiplier * channels
        self.stem = store.conv("stem", c_stem, in_channels, 3)
        self.reduction_positions = sorted({num_cells // 3, 2 * num_cells // 3})
        self.cells: list[Cell] = []
        c_pp, c_p, c = c_stem, c_stem, channels
        reduction_prev = False
        for i in range(num_cells):
            reduction = i in self.reduction_positions
            if reduction:
                c *= 2
            cell = Cell(topology, ops, c_pp, c_p, c, reduction, reduction_prev, store, f"cell{i}")
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, cell.out_channels
        self.classifier_w = store.add(
            "classifier.weight", _kaiming_uniform(store.rng, (num_classes, c_p), c_p, self.dtype) / math.sqrt(2)
        )
        self.classifier_b = store.add("classifier.bias", np.zeros(num_classes))
        self._named = store.named

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._named)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self._named]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def metadata(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "ops": list(self.ops.ops),
            "num_cells": self.num_cells,
            "channels": self.channels,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "stem_multiplier": self.stem_multiplier,
            "seed": self.seed,
            "dtype": self.dtype.name,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "Supernet":
        topo = meta["topology"]
        return cls(
            topology=CellTopology(topo["inputs"], topo["intermediates"]),
            ops=OperationSpace(tuple(meta["ops"])),
            num_cells=meta["num_cells"],
            channels=meta["channels"],
            in_channels=meta["in_channels"],
            input_size=meta["input_size"],
            num_classes=meta["num_classes"],
            stem_multiplier=meta["stem_multiplier"],
            seed=meta.get("seed", 0),
            dtype=np.dtype(meta.get("dtype", "float32")),
        )

    # -- computation --------------------------------------------------------

    def forward(self, batch, params: ArchParam) -> Tensor:
        return forward(self, batch, params)

    __call__ = forward

    def state_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for _, t in self._named:
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def forward(net: Supernet, batch, params: ArchParam) -> Tensor:
    """Class logits for ``batch`` under the architecture described by ``params``."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=net.dtype))
    expected = (net.in_channels, net.input_size, net.input_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"batch must have shape (n, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    shape = (net.topology.num_edges, len(net.ops))
    if params.shape != shape:
        raise ValueError(f"architecture parameters have shape {params.shape}, supernet expects {shape}")
    w_normal = ag.softmax(params.normal, axis=1)
    w_reduce = ag.softmax(params.reduce, axis=1)
    s = ag.conv2d(ag.to_channel_major(x), net.stem, padding=1)
    s0 = s1 = s
    for cell in net.cells:
        s0, s1 = s1, cell.forward(s0, s1, w_reduce if cell.reduction else w_normal)
    pooled = ag.global_avg_pool(s1)
    logits = ag.linear(pooled, net.classifier_w, net.classifier_b)
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("non-finite activation in supernet forward pass")
    return logits


def backward(net: Supernet, loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into the supernet weights."""
    ag.backward(loss)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(net: Supernet, path) -> None:
    """Write ``EVNS`` | u32 version | u32 len | metadata JSON | float32 weights."""
    meta = net.metadata()
    meta["parameters"] = [[name, list(t.shape)] for name, t in net.named_parameters()]
    blob = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for _, t in net.named_parameters():
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def checkpoint_load(path) -> Supernet:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError(f"checkpoint truncated: {len(raw)} bytes, header needs 12")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    if len(raw) < 12 + meta_len:
        raise CheckpointError("checkpoint truncated inside metadata block")
    try:
        meta = json.loads(raw[12 : 12 + meta_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    try:
        net = Supernet.from_metadata(meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint metadata: {exc}") from None
    stored = meta.get("parameters")
    actual = [[name, list(t.shape)] for name, t in net.named_parameters()]
    if stored is not None and stored != actual:
        raise CheckpointError("parameter shapes in checkpoint do not match the network described by its metadata")
    offset = 12 + meta_len
    expected_bytes = 4 * sum(t.data.size for t in net.parameters())
    if len(raw) - offset != expected_bytes:
        raise CheckpointError(
            f"weight block has {len(raw) - offset} bytes, network needs {expected_bytes}"
        )
    for _, t in net.named_parameters():
        n = t.data.size
        t.data[...] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(t.shape)
        offset += 4 * n
    return net

