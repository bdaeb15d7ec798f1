"""Dense tensors with reverse-mode automatic differentiation and SGD.

The numeric substrate for the whole package. Values live in numpy arrays
(float32 by default for training, float64 for gradient verification); the
gradient tape is the graph of parent links recorded on each op output, and
``grad`` materialises it in topological order exactly once.

Design notes:
  * relu's gradient at exactly 0 is 0.
  * softmax subtracts the row max before exponentiating.
  * exp raises on overflow and log raises on non-positive input instead of
    silently propagating non-finite values.
  * broadcasting is supported only where add/mul need it (bias terms and
    per-row weights); the backward pass sums gradients over the broadcast
    axes.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher forwards, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """N-dimensional float array, optionally recorded on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._spent = False

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._spent = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A leaf sharing this tensor's values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            data = a.data + b.data
            return Tensor._from_op(
                data,
                (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
            )
        c = float(other)
        return Tensor._from_op(self.data + c, (self,), lambda g: (g,))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            data = a.data * b.data
            return Tensor._from_op(
                data,
                (a, b),
                lambda g: (
                    _unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape),
                ),
            )
        c = float(other)
        return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; use * (1/c)")
        return self * (1.0 / float(other))

    # -- matmul ------------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data
        return Tensor._from_op(
            data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
        )

    __matmul__ = matmul

    # -- nonlinearities ------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0
        data = np.where(mask, self.data, 0)
        return Tensor._from_op(data, (self,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        x = self.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return Tensor._from_op(s, (self,), lambda g: (g * s * (1.0 - s),))

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            data = np.exp(self.data)
        if not np.all(np.isfinite(data)):
            raise OverflowError("exp overflowed; rescale its input")
        return Tensor._from_op(data, (self,), lambda g: (g * data,))

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise ValueError("log of a non-positive value; clip_min first")
        data = np.log(self.data)
        x = self.data
        return Tensor._from_op(data, (self,), lambda g: (g / x,))

    def clip_min(self, floor: float) -> "Tensor":
        mask = self.data > floor
        data = np.where(mask, self.data, floor).astype(self.data.dtype)
        return Tensor._from_op(data, (self,), lambda g: (g * mask,))

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=axis, keepdims=True)
        def vjp(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            return ((g - dot) * p,)
        return Tensor._from_op(p, (self,), vjp)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(self.data.dtype),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).astype(self.data.dtype),)

        return Tensor._from_op(np.asarray(data), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        data = self.data.reshape(shape)
        return Tensor._from_op(data, (self,), lambda g: (g.reshape(orig),))

    def flatten_spatial(self) -> "Tensor":
        """[B, C, H, W] -> [B, C*H*W]."""
        if self.ndim != 4:
            raise ValueError(f"flatten_spatial expects NCHW, got {self.shape}")
        b = self.shape[0]
        return self.reshape(b, -1)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        """Contiguous slice along one axis (the adjoint of concat)."""
        idx = [slice(None)] * self.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        data = np.ascontiguousarray(self.data[idx])
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return Tensor._from_op(data, (self,), vjp)

    def global_avg_pool(self) -> "Tensor":
        """[B, C, H, W] -> [B, C], averaging over the spatial extent."""
        if self.ndim != 4:
            raise ValueError(f"global_avg_pool expects NCHW, got {self.shape}")
        b, c, h, w = self.shape
        data = self.data.mean(axis=(2, 3))
        inv = 1.0 / (h * w)

        def vjp(g):
            return (np.broadcast_to((g * inv)[:, :, None, None], (b, c, h, w)).astype(g.dtype),)

        return Tensor._from_op(data, (self,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along an axis (channel axis by default)."""
    if not tensors:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def vjp(g):
        outs = []
        for i, t in enumerate(tensors):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return Tensor._from_op(data, tuple(tensors), vjp)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects NCHW x OIHW, got {x.shape}, {kernel.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d output extent {ho}x{wo} is not positive "
            f"(input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad})"
        )
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(kernel.data)
    data = _kernels.conv2d_forward(xd, wd, stride, pad)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv2d_backward_input(g, wd, stride, pad, h, w)
        gw = _kernels.conv2d_backward_kernel(g, xd, stride, pad, kh, kw)
        return (gx, gw)

    return Tensor._from_op(data, (x, kernel), vjp)


# -- the tape ----------------------------------------------------------------


class GradTape:
    """Topologically ordered record of the ops below one output tensor.

    Construction guarantees the order; ``backward`` visits each node exactly
    once. A tape is consumed by the single backward pass that runs on it.
    """

    __slots__ = ("output", "nodes")

    def __init__(self, output: Tensor):
        self.output = output
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.nodes = nodes

    def backward(self) -> dict[int, np.ndarray]:
        out = self.output
        if out._spent:
            raise RuntimeError("gradient tape already consumed by a backward pass")
        out._spent = True
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return grads


def grad(output: Tensor, params: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """d(output)/d(param) for each param; zeros for params off the tape.

    ``output`` must be a scalar (shape [] or [1]). Consumes the tape.
    """
    if output.size != 1:
        raise ValueError(f"grad requires a scalar output, got shape {output.shape}")
    params = list(params)
    table = GradTape(output).backward()
    result: dict[Tensor, Tensor] = {}
    for p in params:
        g = table.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        result[p] = Tensor(g)
    return result


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Classical SGD with momentum and L2 folded into the gradient."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor | np.ndarray],
    state: OptimizerState,
) -> None:
    """v <- momentum*v + (g + wd*p); p <- p - lr*v. Updates params in place."""
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        step = g if state.weight_decay == 0 else g + state.weight_decay * p.data
        if state.momentum > 0:
            v = state.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = state.momentum * v + step
            state.velocities[name] = v
            step = v
        p.data = p.data - state.lr * step


def randn(rng: np.random.Generator, shape, scale: float = 1.0, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype))


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> Tensor:
    return randn(rng, shape, scale=math.sqrt(2.0 / fan_in), dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
