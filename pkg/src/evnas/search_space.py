"""Cell topology, operation space, architecture parameters and genotypes.

An architecture is a pair of real matrices (normal cell, reduction cell)
with one row per edge and one column per candidate operation. Rows are
ordered canonically by (target node, source node).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .autograd import softmax

PRIMITIVES = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "zero",
)

CELL_NAMES = ("normal", "reduce")


class GenotypeError(ValueError):
    """Raised for malformed or inconsistent genotypes."""


@dataclass(frozen=True)
class CellTopology:
    num_input_nodes: int = 2
    num_intermediate_nodes: int = 4

    def __post_init__(self):
        if self.num_input_nodes < 1 or self.num_intermediate_nodes < 1:
            raise ValueError("a cell needs at least one input and one intermediate node")

    @cached_property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """(source node, target intermediate index) pairs in canonical order."""
        return tuple(
            (src, t)
            for t in range(self.num_intermediate_nodes)
            for src in range(self.num_input_nodes + t)
        )

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_nodes(self) -> int:
        return self.num_input_nodes + self.num_intermediate_nodes

    def incoming(self, t: int) -> range:
        """Edge indices entering intermediate node ``t``."""
        start = sum(self.num_input_nodes + u for u in range(t))
        return range(start, start + self.num_input_nodes + t)

    def edge_index(self, src: int, t: int) -> int:
        if not 0 <= src < self.num_input_nodes + t:
            raise IndexError(f"node {src} is not a predecessor of intermediate node {t}")
        return self.incoming(t)[src]

    def to_dict(self) -> dict:
        return {"inputs": self.num_input_nodes, "intermediates": self.num_intermediate_nodes}


@dataclass(frozen=True)
class OperationSpace:
    ops: tuple[str, ...] = PRIMITIVES

    def __post_init__(self):
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        if len(ops) < 2:
            raise ValueError("operation space needs at least two operations")
        if ops.count("zero") != 1:
            raise ValueError("operation space must contain exactly one 'zero' op")
        unknown = set(ops) - set(PRIMITIVES)
        if unknown:
            raise ValueError(f"unknown operation kinds: {sorted(unknown)}")
        if len(set(ops)) != len(ops):
            raise ValueError("duplicate operation kinds")

    def __len__(self) -> int:
        return len(self.ops)

    def index(self, op: str) -> int:
        return self.ops.index(op)

    @property
    def zero_index(self) -> int:
        return self.ops.index("zero")


DEFAULT_TOPOLOGY = CellTopology()
DEFAULT_OPS = OperationSpace()


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class ArchParam:
    """Real-valued architecture parameters for the normal and reduction cells."""

    __slots__ = ("normal", "reduce")

    def __init__(self, normal, reduce):
        normal, reduce = _frozen(normal), _frozen(reduce)
        if normal.ndim != 2 or normal.shape != reduce.shape:
            raise ValueError(f"cell matrices must be 2-D and equal shape, got {normal.shape}, {reduce.shape}")
        if not (np.isfinite(normal).all() and np.isfinite(reduce).all()):
            raise ValueError("architecture parameters must be finite")
        self.normal = normal
        self.reduce = reduce

    @property
    def shape(self) -> tuple[int, int]:
        return self.normal.shape

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        return self.normal, self.reduce

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArchParam):
            return NotImplemented
        return np.array_equal(self.normal, other.normal) and np.array_equal(self.reduce, other.reduce)

    def __hash__(self):
        return hash((self.normal.tobytes(), self.reduce.tobytes()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    def to_array(self) -> np.ndarray:
        return np.stack([self.normal, self.reduce])

    @classmethod
    def from_array(cls, arr) -> "ArchParam":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError(f"expected an array of shape (2, edges, ops), got {arr.shape}")
        return cls(arr[0], arr[1])


@dataclass(frozen=True)
class Genotype:
    """Discrete cell pair: two (predecessor, op) choices per intermediate node.

    Entries are stored flat, node by node, and sorted by predecessor within
    a node so that equal architectures compare equal.
    """

    normal: tuple[tuple[int, str], ...]
    reduce: tuple[tuple[int, str], ...]
    topology: CellTopology = DEFAULT_TOPOLOGY

    def __post_init__(self):
        for name in CELL_NAMES:
            entries = [(int(p), str(o)) for p, o in getattr(self, name)]
            n = self.topology.num_intermediate_nodes
            if len(entries) != 2 * n:
                raise GenotypeError(f"{name}: expected {2 * n} entries, got {len(entries)}")
            canon = []
            for t in range(n):
                pair = sorted(entries[2 * t : 2 * t + 2])
                (p0, o0), (p1, o1) = pair
                if p0 == p1:
                    raise GenotypeError(f"{name}: node {t} uses predecessor {p0} twice")
                for p, o in pair:
                    if not 0 <= p < self.topology.num_input_nodes + t:
                        raise GenotypeError(f"{name}: node {t} cannot take input from node {p}")
                    if o == "zero":
                        raise GenotypeError(f"{name}: 'zero' is not a selectable operation")
                    if o not in PRIMITIVES:
                        raise GenotypeError(f"{name}: unknown operation {o!r}")
                canon.extend(pair)
            object.__setattr__(self, name, tuple(canon))

    def node_entries(self, cell: str, t: int) -> tuple[tuple[int, str], ...]:
        return getattr(self, cell)[2 * t : 2 * t + 2]

    def selected_cells(self, cell: str, ops: OperationSpace) -> list[tuple[int, int]]:
        """(edge index, op column) for every chosen entry of ``cell``."""
        out = []
        for t in range(self.topology.num_intermediate_nodes):
            for p, o in self.node_entries(cell, t):
                out.append((self.topology.edge_index(p, t), ops.index(o)))
        return out

    def digest(self) -> str:
        return hashlib.sha1(genotype_to_json(self).encode()).hexdigest()[:12]


class DecodedParam(ArchParam):
    """k on the operations of the derived genotype, 0 elsewhere."""

    __slots__ = ("k", "genotype")

    def __init__(self, normal, reduce, k: float, genotype: Genotype):
        super().__init__(normal, reduce)
        self.k = float(k)
        self.genotype = genotype

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArchParam):
            return NotImplemented
        return ArchParam.__eq__(self, other) and getattr(other, "k", None) == self.k

    __hash__ = ArchParam.__hash__


def init_arch_param(
    rng: np.random.Generator,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
) -> ArchParam:
    """Sample both cell matrices uniformly from [0, 1)."""
    shape = (topology.num_edges, len(ops))
    return ArchParam(rng.random(shape), rng.random(shape))


def _check_shape(alpha: ArchParam, topology: CellTopology, ops: OperationSpace) -> None:
    expected = (topology.num_edges, len(ops))
    if alpha.shape != expected:
        raise ValueError(f"architecture parameter has shape {alpha.shape}, expected {expected}")


def _derive_cell(mat: np.ndarray, topology: CellTopology, ops: OperationSpace) -> list[tuple[int, str]]:
    w = softmax(mat, axis=1)
    w[:, ops.zero_index] = -np.inf
    best_op = w.argmax(axis=1)  # first max -> lowest column
    score = w[np.arange(len(w)), best_op]
    entries = []
    for t in range(topology.num_intermediate_nodes):
        incoming = list(topology.incoming(t))
        if len(incoming) < 2:
            raise GenotypeError(f"intermediate node {t} has fewer than 2 candidate edges")
        top = sorted(incoming, key=lambda e: (-score[e], e))[:2]
        for e in top:
            entries.append((topology.edges[e][0], ops.ops[best_op[e]]))
    return entries


def derive_genotype(
    alpha: ArchParam,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
) -> Genotype:
    """Discretize: per node keep the 2 incoming edges whose best non-zero op
    has the largest softmax weight, each with that op."""
    _check_shape(alpha, topology, ops)
    return Genotype(
        normal=tuple(_derive_cell(alpha.normal, topology, ops)),
        reduce=tuple(_derive_cell(alpha.reduce, topology, ops)),
        topology=topology,
    )


def decode_genotype(
    genotype: Genotype,
    k: float = 1.0,
    ops: OperationSpace = DEFAULT_OPS,
) -> DecodedParam:
    if not k > 0:
        raise ValueError(f"k must be positive, got {k}")
    topology = genotype.topology
    mats = []
    for cell in CELL_NAMES:
        m = np.zeros((topology.num_edges, len(ops)))
        for e, o in genotype.selected_cells(cell, ops):
            m[e, o] = k
        mats.append(m)
    return DecodedParam(mats[0], mats[1], k, genotype)


def decode(
    alpha: ArchParam,
    k: float = 1.0,
    topology: CellTopology = DEFAULT_TOPOLOGY,
    ops: OperationSpace = DEFAULT_OPS,
) -> DecodedParam:
    """Replace ``alpha`` by k on its derived architecture and 0 elsewhere."""
    if not k > 0:
        raise ValueError(f"k must be positive, got {k}")
    return decode_genotype(derive_genotype(alpha, topology, ops), k, ops)


# ---------------------------------------------------------------------------
# serialization


def genotype_to_dict(g: Genotype) -> dict:
    return {
        "normal": [[p, o] for p, o in g.normal],
        "reduce": [[p, o] for p, o in g.reduce],
        "topology": g.topology.to_dict(),
    }


def genotype_to_json(g: Genotype) -> str:
    return json.dumps(genotype_to_dict(g), sort_keys=True)


def genotype_from_dict(obj) -> Genotype:
    if not isinstance(obj, dict):
        raise GenotypeError("genotype JSON must be an object")
    for key in ("normal", "reduce", "topology"):
        if key not in obj:
            raise GenotypeError(f"missing field {key!r}")
    topo = obj["topology"]
    if not isinstance(topo, dict):
        raise GenotypeError("field 'topology' must be an object")
    for key in ("inputs", "intermediates"):
        if key not in topo:
            raise GenotypeError(f"missing field 'topology.{key}'")
    try:
        topology = CellTopology(int(topo["inputs"]), int(topo["intermediates"]))
    except (TypeError, ValueError) as exc:
        raise GenotypeError(f"invalid topology: {exc}") from None
    cells = {}
    for name in CELL_NAMES:
        raw = obj[name]
        if not isinstance(raw, list):
            raise GenotypeError(f"field {name!r} must be a list")
        entries = []
        for i, item in enumerate(raw):
            if (
                not isinstance(item, list)
                or len(item) != 2
                or not isinstance(item[0], int)
                or isinstance(item[0], bool)
                or not isinstance(item[1], str)
            ):
                raise GenotypeError(f"{name}[{i}] must be [predecessor:int, op:string]")
            entries.append((item[0], item[1]))
        cells[name] = tuple(entries)
    return Genotype(cells["normal"], cells["reduce"], topology)


def genotype_from_json(text: str) -> Genotype:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return genotype_from_dict(obj)


def genotype_to_dot(g: Genotype) -> str:
    """Graphviz source with one cluster per cell."""
    topo = g.topology
    lines = ["digraph genotype {", "  rankdir=LR;"]
    for cell in CELL_NAMES:
        lines.append(f"  subgraph cluster_{cell} {{")
        lines.append(f'    label="{cell}";')
        name = lambda n: f"{cell}_{n}"  # noqa: E731
        for n in range(topo.num_input_nodes):
            lines.append(f'    {name(n)} [label="c_{{k-{topo.num_input_nodes - n}}}", shape=box];')
        for t in range(topo.num_intermediate_nodes):
            lines.append(f'    {name(topo.num_input_nodes + t)} [label="{t}"];')
        lines.append(f'    {cell}_out [label="c_{{k}}", shape=box];')
        for t in range(topo.num_intermediate_nodes):
            target = name(topo.num_input_nodes + t)
            for p, o in g.node_entries(cell, t):
                lines.append(f'    {name(p)} -> {target} [label="{o}"];')
            lines.append(f"    {target} -> {cell}_out;")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
