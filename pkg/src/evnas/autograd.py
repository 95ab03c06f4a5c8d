"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives needed by the supernet are provided: n-ary add,
constant-weighted sums, ReLU, 2-D convolution (dense, depthwise, dilated,
strided), 3x3 max/avg pooling, channel concat, global average pooling,
a linear layer and softmax cross-entropy.

Leaf tensors created with ``requires_grad=True`` accumulate gradients in
``.grad`` across calls to :func:`backward`; intermediate gradients are
recomputed on every call, so a recorded graph may be replayed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if not loss.requires_grad:
        raise RuntimeError("backward() called on a tensor with no recorded graph")
    order = _toposort(loss)
    if grad is None:
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: add the full contribution of this call in one step
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(*xs: Tensor) -> Tensor:
    data = xs[0].data
    for x in xs[1:]:
        data = data + x.data

    def _bw(g):
        return [g] * len(xs)

    return _make(data, xs, _bw, "add")


def weighted_sum(xs: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
    """sum_i coeffs[i] * xs[i] with constant (non-differentiated) coefficients."""
    if len(xs) != len(coeffs):
        raise ValueError("weighted_sum needs one coefficient per tensor")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch in weighted sum: {x.shape} vs {shape}")
    dtype = np.result_type(*[x.data.dtype for x in xs])
    cs = [dtype.type(c) if dtype.kind == "f" else c for c in coeffs]
    data = xs[0].data * cs[0]
    for x, c in zip(xs[1:], cs[1:]):
        data = data + x.data * c

    def _bw(g):
        return [g * c for c in cs]

    return _make(data, xs, _bw, "weighted_sum")


def scale(x: Tensor, c: float) -> Tensor:
    return weighted_sum([x], [c])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = x.data * mask

    def _bw(g):
        return [g * mask]

    return _make(data, (x,), _bw, "relu")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def _bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(data, xs, _bw, "concat")


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def _bw(g):
        return [np.broadcast_to(g, x.shape).astype(x.data.dtype)]

    return _make(data, (x,), _bw, "sum")


def zeros_like_shape(shape: tuple[int, ...], dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# convolution and pooling
#
# Feature maps are channel-major: (C, N, H, W). A 1x1 convolution is then a
# single (out, in) @ (in, N*H*W) product and depthwise im2col needs no
# transposes.


def _out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _pad(x: np.ndarray, pad: int, value=0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def _window(i: int, j: int, stride: int, dilation: int, ho: int, wo: int):
    r0, c0 = i * dilation, j * dilation
    return (
        slice(None),
        slice(None),
        slice(r0, r0 + stride * (ho - 1) + 1, stride),
        slice(c0, c0 + stride * (wo - 1) + 1, stride),
    )


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(C, N, Hp, Wp) -> (C, k*k, N*ho*wo) copy of every receptive field."""
    c, n = xp.shape[:2]
    sc, sn, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, k, k, n, ho, wo),
        strides=(sc, dilation * sh, dilation * sw, sn, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(c, k * k, n * ho * wo)


def _tap_offsets(k: int, dilation: int, row: int) -> list[int]:
    return [i * dilation * row + j * dilation for i in range(k) for j in range(k)]


def _depthwise_flat(x: Tensor, w: Tensor, xp: np.ndarray, padding: int) -> Tensor:
    """Stride-1, undilated depthwise conv on the flattened padded grid.

    Flattening each channel's padded maps makes every kernel tap a single
    contiguous shifted slice; outputs whose window would wrap across a row
    or image boundary are computed and then dropped.
    """
    xp = np.ascontiguousarray(xp)
    c, n, hp, wp = xp.shape
    wdat = w.data
    k = wdat.shape[-1]
    flat = xp.reshape(c, -1)
    offs = [i * wp + j for i in range(k) for j in range(k)]
    span = flat.shape[1] - offs[-1]
    taps = wdat.reshape(c, k * k)
    full = np.zeros_like(flat)
    acc = full[:, :span]
    tmp = np.empty_like(acc)
    for t, o in enumerate(offs):
        np.multiply(flat[:, o : o + span], taps[:, t, None], out=tmp)
        acc += tmp
    valid = (slice(None), slice(None), slice(0, hp - k + 1), slice(0, wp - k + 1))
    data = full.reshape(xp.shape)[valid]

    def _bw(g):
        gfull = np.zeros_like(xp)
        gfull[valid] = g
        gsrc = gfull.reshape(c, -1)[:, :span]
        gx = np.zeros_like(flat)
        gw = np.empty((c, k * k), dtype=wdat.dtype)
        tmp = np.empty_like(gsrc)
        for t, o in enumerate(offs):
            np.multiply(gsrc, taps[:, t, None], out=tmp)
            gx[:, o : o + span] += tmp
            gw[:, t] = np.einsum("cl,cl->c", gsrc, flat[:, o : o + span])
        return [_unpad(gx.reshape(xp.shape), padding), gw.reshape(wdat.shape)]

    return _make(data, (x, w), _bw, "dwconv2d")


def conv2d(
    x: Tensor,
    w: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Bias-free convolution of a (C, N, H, W) map with an (O, C/groups, k, k) kernel.

    ``groups`` must be 1 (dense) or the channel count (depthwise).
    """
    c, n, h, wd = x.shape
    o, cg, k, k2 = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if groups == 1:
        if cg != c:
            raise ValueError(f"conv2d expects {cg} input channels, got {c}")
    elif not (groups == c and cg == 1 and o == c):
        raise ValueError("groups must be 1 or equal to the channel count (depthwise)")
    ho = _out_size(h, k, stride, padding, dilation)
    wo = _out_size(wd, k, stride, padding, dilation)
    xd, wdat = x.data, w.data

    if k == 1 and groups == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        x2 = xs.reshape(c, n * ho * wo)
        w2 = wdat.reshape(o, c)
        data = (w2 @ x2).reshape(o, n, ho, wo)

        def _bw(g):
            g2 = g.reshape(o, n * ho * wo)
            gw = (g2 @ x2.T).reshape(wdat.shape)
            gx = (w2.T @ g2).reshape(c, n, ho, wo)
            if stride > 1:
                full = np.zeros_like(xd)
                full[:, :, ::stride, ::stride] = gx
                gx = full
            return [gx, gw]

        return _make(data, (x, w), _bw, "conv1x1")

    xp = _pad(xd, padding)

    if groups == 1:
        cols = _im2col(xp, k, stride, dilation, ho, wo).reshape(c * k * k, n * ho * wo)
        w2 = wdat.reshape(o, c * k * k)
        data = (w2 @ cols).reshape(o, n, ho, wo)

        def _bw(g):
            g2 = g.reshape(o, n * ho * wo)
            gw = (g2 @ cols.T).reshape(wdat.shape)
            gcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[_window(i, j, stride, dilation, ho, wo)] += gcols[:, i, j]
            return [_unpad(gxp, padding), gw]

        return _make(data, (x, w), _bw, "conv2d")

    wk = wdat[:, 0]
    if stride == 1 and dilation == 1:
        return _depthwise_flat(x, w, xp, padding)

    patches = _im2col(xp, k, stride, dilation, ho, wo)
    data = np.matmul(wk.reshape(c, 1, k * k), patches).reshape(c, n, ho, wo)
    del patches

    def _bw_dw(g):
        # columns are rebuilt rather than kept alive: they are k*k times the input
        patches = _im2col(xp, k, stride, dilation, ho, wo)
        gw = np.matmul(patches, g.reshape(c, n * ho * wo, 1)).reshape(wdat.shape)
        del patches
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[_window(i, j, stride, dilation, ho, wo)] += g * wk[:, i, j][:, None, None, None]
        return [_unpad(gxp, padding), gw]

    return _make(data, (x, w), _bw_dw, "dwconv2d")


def max_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max pooling; the gradient goes to the first maximal cell of each window."""
    h, w = x.shape[2:]
    ho = _out_size(h, k, stride, padding, 1)
    wo = _out_size(w, k, stride, padding, 1)
    xp = _pad(x.data, padding, value=-np.inf)
    slices = [_window(i, j, stride, 1, ho, wo) for i in range(k) for j in range(k)]
    data = xp[slices[0]].copy()
    for sl in slices[1:]:
        np.maximum(data, xp[sl], out=data)

    def _bw(g):
        gxp = np.zeros_like(xp)
        taken = np.zeros(data.shape, dtype=bool)
        for sl in slices:
            hit = xp[sl] == data
            hit &= ~taken
            taken |= hit
            gxp[sl] += g * hit
        return [_unpad(gxp, padding)]

    return _make(data, (x,), _bw, "max_pool")


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that excludes padded cells from the divisor."""
    c, n, h, w = x.shape
    ho = _out_size(h, k, stride, padding, 1)
    wo = _out_size(w, k, stride, padding, 1)
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, h, w), dtype=x.data.dtype), padding)
    slices = [_window(i, j, stride, 1, ho, wo) for i in range(k) for j in range(k)]
    total = np.zeros((c, n, ho, wo), dtype=x.data.dtype)
    count = np.zeros((1, 1, ho, wo), dtype=x.data.dtype)
    for sl in slices:
        total += xp[sl]
        count += ones[sl]
    data = total / count

    def _bw(g):
        gs = g / count
        gxp = np.zeros_like(xp)
        for sl in slices:
            gxp[sl] += gs
        return [_unpad(gxp, padding)]

    return _make(data, (x,), _bw, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """(C, N, H, W) -> (N, C)."""
    c, n, h, w = x.shape
    data = x.data.mean(axis=(2, 3)).T

    def _bw(g):
        return [np.broadcast_to((g.T / (h * w))[:, :, None, None], x.shape).copy()]

    return _make(data, (x,), _bw, "gap")


def to_channel_major(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (C, N, H, W)."""
    data = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))

    def _bw(g):
        return [g.transpose(1, 0, 2, 3)]

    return _make(data, (x,), _bw, "to_channel_major")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    data = x.data @ weight.data.T + bias.data

    def _bw(g):
        return [g @ weight.data, g.T @ x.data, g.sum(axis=0)]

    return _make(data, (x, weight, bias), _bw, "linear")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=z.dtype)

    def _bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return [(p * (g / n)).astype(z.dtype)]

    return _make(data, (logits,), _bw, "cross_entropy")
