"""A small reverse-mode automatic differentiation engine on top of numpy.

Only the operators the fusion network needs are provided. Every operator
returns a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :func:`backward` walks
the recorded graph in reverse topological order.

Arrays keep whatever floating dtype they were created with; networks train
in float32 and gradient checks run the same code in float64.
"""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientCheckError, ShapeError

LRELU_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Within this block operators record no parents, so graphs are freed eagerly."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        self.data = np.asarray(data)
        self.grad = None
        if not _GRAD_ENABLED:
            parents, backward_fn = (), None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


class Tape:
    """Topologically ordered record of the nodes that produced ``output``.

    Nodes are listed so that every node appears after all of its parents;
    backward traversal iterates the list in reverse.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; graphs can be deeper than the recursion limit
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, seed: float = 1.0) -> Tape:
    """Accumulate d(seed * loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Raises
    ------
    ShapeError
        If ``loss`` is not a single-element tensor.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar terminal node, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, seed, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=bw, op="add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, parents=(a, b), backward_fn=bw, op="sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=bw, op="mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=bw, op="div")


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data**exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return Tensor(out, parents=(x,), backward_fn=bw, op="pow")


def tsqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return Tensor(out, parents=(x,), backward_fn=bw, op="sqrt")


def tabs(x: Tensor) -> Tensor:
    def bw(g):
        return (g * np.sign(x.data),)

    return Tensor(np.abs(x.data), parents=(x,), backward_fn=bw, op="abs")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, parents=(x,), backward_fn=bw, op="sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return Tensor(x.data.reshape(shape), parents=(x,), backward_fn=bw, op="reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def bw(g):
        return (g.T,)

    return Tensor(x.data.T, parents=(x,), backward_fn=bw, op="transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, parents=(a, b), backward_fn=bw, op="matmul")


# ---------------------------------------------------------------------------
# network operators


def lrelu(x: Tensor, slope: float = LRELU_SLOPE) -> Tensor:
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)

    def bw(g):
        return (np.where(pos, g, slope * g),)

    return Tensor(out, parents=(x,), backward_fn=bw, op="lrelu")


def ttanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, parents=(x,), backward_fn=bw, op="tanh")


def apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "lrelu":
        return lrelu(x)
    if kind == "tanh":
        return ttanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 2D cross-correlation with zero padding, NCHW layout.

    ``padding`` defaults to ``(k - 1) // 2`` so the spatial size is kept.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (N, C, H, W), got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has Cin={cin} but weight expects Cin={wcin}")
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size must be 1 or 3, got {k}")
    pad = (k - 1) // 2 if padding is None else padding
    if 2 * pad != k - 1:
        raise ShapeError(f"conv2d: padding {pad} does not preserve size for k={k}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    if k == 1:
        w2 = weight.data[:, :, 0, 0]
        out = np.einsum("nchw,oc->nohw", x.data, w2, optimize=True)
    else:
        # one contiguous (N*H*W, Cin*k*k) patch matrix serves the forward pass and the weight gradient
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, cin * k * k)
        wm = weight.data.reshape(cout, cin * k * k)
        out = (cols @ wm.T).reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if k == 1:
            gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
            gx = np.einsum("nohw,oc->nchw", g, w2, optimize=True)
        else:
            gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
            gw = (gm.T @ cols).reshape(weight.shape)
            gcols = (wm.T @ gm.T).reshape(cin, k, k, n, h, w)
            gxp = np.zeros((cin, n, h + 2 * pad, w + 2 * pad), xp.dtype)
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dy : dy + h, dx : dx + w] += gcols[:, dy, dx]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad : pad + h, pad : pad + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents=parents, backward_fn=bw, op="conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In train mode the running statistics are updated in place with an
    exponential moving average (unbiased variance); in eval mode they are used
    for normalization.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm input must be (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    axes = (0, 2, 3)
    if train:
        if count < 2:
            raise ShapeError("batch_norm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if train:
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            gx = (dxhat - s1 / count - xhat * s2 / count) * inv_std[None, :, None, None]
        else:
            gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor(out, parents=(x, gamma, beta), backward_fn=bw, op="batch_norm")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4D maps, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return Tensor(np.concatenate([a.data, b.data], axis=1), parents=(a, b), backward_fn=bw, op="concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)

    return Tensor(x.data[:, start:stop].copy(), parents=(x,), backward_fn=bw, op="slice")


def linear_map(z: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``z @ weight.T + bias`` with weight shaped (Dout, Din)."""
    if z.ndim != 2 or weight.ndim != 2 or z.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear_map: input {z.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear_map: bias {bias.shape} != ({weight.shape[0]},)")
    out = z.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        return g @ weight.data, g.T @ z.data, (g.sum(axis=0) if bias is not None else None)

    parents = (z, weight) if bias is None else (z, weight, bias)
    return Tensor(out, parents=parents, backward_fn=bw, op="linear")


def flatten_rows(x: Tensor) -> Tensor:
    """Reshape (D1, D2, D3, D4) to (D1, D2*D3*D4)."""
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named learnable arrays with gradient slots, plus non-learnable buffers.

    Iteration order is insertion order. ``rng`` is seeded from ``seed`` and
    is the only source of randomness used during initialization.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value), requires_grad=True, name=name)
        t.zero_grad()
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.array(value)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with every value and buffer cast to ``dtype``."""
        out = ParamStore(self.seed)
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        for name, b in self.buffers.items():
            out.add_buffer(name, b.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        for name, b in self.buffers.items():
            out.add_buffer(name, b.copy())
        return out


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, int] | None = None
    records: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    step: float = 1e-6,
    n_coords: int = 100,
    coords: Sequence[tuple[str, int]] | None = None,
    rng: np.random.Generator | int | None = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    For each probed coordinate the relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. Coordinates
    are drawn by first picking a parameter uniformly, so small arrays such as
    wavelet filters are probed as often as large weight matrices.

    Raises
    ------
    GradientCheckError
        If ``f`` does not return the same value twice for unchanged inputs.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    first = f(params).item()
    second = f(params).item()
    if first != second:
        raise GradientCheckError(f"computation is not deterministic ({first!r} != {second!r})")

    params.zero_grad()
    backward(f(params))
    analytic = {name: t.grad.copy() for name, t in params.items()}

    if coords is None:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        names = params.names()
        coords = []
        for _ in range(n_coords):
            name = names[gen.integers(len(names))]
            coords.append((name, int(gen.integers(params[name].data.size))))

    records = []
    worst, worst_err = None, 0.0
    for name, idx in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f(params).item()
        flat[idx] = orig - step
        fm = f(params).item()
        flat[idx] = orig
        numeric = (fp - fm) / (2 * step)
        a = float(analytic[name].reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        records.append((name, idx, a, numeric, err))
        if err >= worst_err:
            worst, worst_err = (name, idx), err
    return GradCheckReport(worst_err, len(records), worst, records)
