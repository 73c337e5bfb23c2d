import functools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.Errors import (DisconnectedGraph, InvalidProbability, NotScalar,
                        NumericOverflow, ShapeMismatch)

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _quiet(fn):
    # Forward ops report non-finite output through NumericOverflow, not warnings.
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(all="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _check_operands(a: Shape, b: Shape, op: str):
    # Equal shapes, a 0-d scalar, or a trailing-suffix operand (bias rows).
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeMismatch(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad.reshape(shape)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


class Tensor:
    # N-dimensional double-precision array that records the ops producing it.

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _grad_fn: Optional[GradFn] = None,
                 _op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._op = _op

    # Build an op output; drops the graph when nothing upstream needs gradients.
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], grad_fn: GradFn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericOverflow(f"{op} produced non-finite values")
        needs_grad = any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = needs_grad
        out.grad = None
        out._parents = tuple(parents) if needs_grad else ()
        out._grad_fn = grad_fn if needs_grad else None
        out._op = op
        return out

    # --- inspection ------------------------------------------------------

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def assign(self, data: np.ndarray):
        # Explicit parameter update; the only way data changes after construction.
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise ShapeMismatch(f"assign: {data.shape} into {self.shape}")
        self.data = data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # --- elementwise arithmetic ------------------------------------------

    @_quiet
    def __add__(self, other) -> "Tensor":
        other = lift(other)
        _check_operands(self.shape, other.shape, "add")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(self.data + other.data, (self, other),
                              lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    def __radd__(self, other) -> "Tensor":
        return lift(other) + self

    @_quiet
    def __sub__(self, other) -> "Tensor":
        other = lift(other)
        _check_operands(self.shape, other.shape, "sub")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(self.data - other.data, (self, other),
                              lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)), "sub")

    def __rsub__(self, other) -> "Tensor":
        return lift(other) - self

    @_quiet
    def __mul__(self, other) -> "Tensor":
        other = lift(other)
        _check_operands(self.shape, other.shape, "mul")
        a, b = self.data, other.data
        return Tensor._result(a * b, (self, other),
                              lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    def __rmul__(self, other) -> "Tensor":
        return lift(other) * self

    @_quiet
    def __truediv__(self, other) -> "Tensor":
        other = lift(other)
        _check_operands(self.shape, other.shape, "div")
        a, b = self.data, other.data
        return Tensor._result(a / b, (self, other),
                              lambda g: (_unbroadcast(g / b, a.shape),
                                         _unbroadcast(-g * a / (b * b), b.shape)), "div")

    def __rtruediv__(self, other) -> "Tensor":
        return lift(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    @_quiet
    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor._result(a ** exponent, (self,),
                              lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    @_quiet
    def __matmul__(self, other) -> "Tensor":
        # x[..., n] @ W[n, m]
        other = lift(other)
        if other.ndim != 2 or self.ndim < 1 or self.shape[-1] != other.shape[0]:
            raise ShapeMismatch(f"matmul: {self.shape} @ {other.shape}")
        a, b = self.data, other.data
        n, m = b.shape

        def grad_fn(g):
            return g @ b.T, a.reshape(-1, n).T @ g.reshape(-1, m)
        return Tensor._result(a @ b, (self, other), grad_fn, "matmul")

    # --- reductions --------------------------------------------------------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn, "sum")

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.data.size // max(total.data.size, 1)
        return total * (1.0 / count)

    @_quiet
    def norm(self, axis: int = -1) -> "Tensor":
        # Euclidean norm along one axis; gradient defined as 0 at the origin.
        a = self.data
        out = np.sqrt((a * a).sum(axis=axis))

        def grad_fn(g):
            denom = np.expand_dims(out, axis)
            scale = np.divide(np.expand_dims(g, axis), denom,
                              out=np.zeros_like(denom), where=denom > 0)
            return (a * scale,)
        return Tensor._result(out, (self,), grad_fn, "norm")

    # --- elementwise functions ----------------------------------------------

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    @_quiet
    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,), "log")

    @_quiet
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    @_quiet
    def sigmoid(self) -> "Tensor":
        a = self.data
        positive = a >= 0
        out = np.empty_like(a)
        out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
        expa = np.exp(a[~positive])
        out[~positive] = expa / (1.0 + expa)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),), "relu")

    # --- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        source = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeMismatch(f"reshape {source} -> {shape}") from exc
        return Tensor._result(out, (self,), lambda g: (g.reshape(source),), "reshape")

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeMismatch(f"transpose axes {axes} for rank {self.ndim}")
        inverse = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,),
                              lambda g: (g.transpose(inverse),), "transpose")

    def __getitem__(self, index) -> "Tensor":
        source = self.shape
        basic = _is_basic_index(index)

        def grad_fn(g):
            full = np.zeros(source)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)
        return Tensor._result(self.data[index], (self,), grad_fn, "getitem")

    def pad(self, widths: Sequence[Tuple[int, int]]) -> "Tensor":
        widths = tuple(tuple(w) for w in widths)
        if len(widths) != self.ndim:
            raise ShapeMismatch(f"pad widths {widths} for rank {self.ndim}")
        crop = tuple(slice(lo, dim + lo) for (lo, _), dim in zip(widths, self.shape))
        return Tensor._result(np.pad(self.data, widths), (self,), lambda g: (g[crop],), "pad")


def lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [lift(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("stack of empty sequence")
    first = tensors[0].shape
    if any(t.shape != first for t in tensors):
        raise ShapeMismatch(f"stack: shapes differ {[t.shape for t in tensors]}")
    data = np.stack([t.data for t in tensors], axis=axis)
    count = len(tensors)
    return Tensor._result(data, tensors,
                          lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)), "stack")


def activate(x: Tensor, name: str) -> Tensor:
    if name in (None, "linear"):
        return x
    if name == "relu":
        return x.relu()
    if name == "tanh":
        return x.tanh()
    if name == "sigmoid":
        return x.sigmoid()
    raise ValueError(f"Unsupported activation: {name}")


# --- automatic differentiation ---------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None,
             strict: bool = False) -> Dict[Tensor, np.ndarray]:
    # Reverse-mode accumulation into `.grad` of every reachable leaf.
    # Repeated calls accumulate; parameters listed in `params` but unreachable
    # get a zero gradient, or DisconnectedGraph when strict.
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: Dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                reached[node] = node.grad
            continue
        for parent, parent_grad in zip(node._parents, node._grad_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    for param in params or ():
        if param in reached:
            continue
        if strict:
            raise DisconnectedGraph(f"{param!r} is not reachable from the loss")
        if param.grad is None:
            param.grad = np.zeros_like(param.data)
        reached[param] = param.grad
    return reached


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      floor: float = 1e-3) -> float:
    # Max relative error between backward() and central differences.
    # Entries smaller than `floor` in magnitude are compared on an absolute scale.
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data, requires_grad=True)
    backward(f(probe), params=[probe])
    analytic = probe.grad
    base = x.data.reshape(-1)
    numeric = np.zeros(base.size)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        f_plus = f(Tensor(plus.reshape(x.shape))).item()
        f_minus = f(Tensor(minus.reshape(x.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


# --- layers -----------------------------------------------------------------

class LayerKind(str, Enum):
    CONV = "Conv"
    CONV_TRANSPOSE = "ConvTranspose"
    DENSE = "Dense"
    GRU = "GRU"
    DROPOUT = "Dropout"


@dataclass
class LayerParams:
    # Trainable state of one layer plus its hyperparameters.
    # Conv: weights [C_out, C_in, *k]; ConvTranspose: [C_in, C_out, *k];
    # Dense: [in, out]; GRU: weights [in, 3h], recurrent [h, 3h], gates (z, r, n).
    kind: LayerKind
    weights: Optional[Tensor] = None
    biases: Optional[Tensor] = None
    recurrent: Optional[Tensor] = None
    hyper: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        if self.kind == LayerKind.DROPOUT:
            if self.weights is not None or self.biases is not None:
                raise ValueError("Dropout carries no trainable weights")
            p = self.hyper.get("p", 0.5)
            if not 0.0 <= p <= 1.0:
                raise InvalidProbability(f"drop probability {p} outside [0, 1]")

    def parameters(self) -> List[Tensor]:
        return [t for t in (self.weights, self.recurrent, self.biases) if t is not None]

    def regularized(self) -> List[Tensor]:
        # Tensors the L1 penalty applies to: kernels and recurrent kernels only.
        return [t for t in (self.weights, self.recurrent) if t is not None]


def _per_axis(value, rank: int) -> Tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        if len(value) != rank:
            raise ShapeMismatch(f"expected {rank} values, got {value}")
        return tuple(int(v) for v in value)
    return (int(value),) * rank


@functools.lru_cache(maxsize=256)
def _window_indices(spatial: Shape, kernel: Shape, stride: Shape) -> Tuple[Shape, np.ndarray]:
    # Flat input positions touched by each (output position, kernel offset).
    rank = len(spatial)
    out_shape = tuple((n - k) // s + 1 for n, k, s in zip(spatial, kernel, stride))
    origins = np.indices(out_shape).reshape(rank, -1).T * np.array(stride)
    offsets = np.indices(kernel).reshape(rank, -1).T
    coords = origins[:, None, :] + offsets[None, :, :]
    flat = np.ravel_multi_index(tuple(coords[..., axis] for axis in range(rank)), spatial)
    flat.setflags(write=False)
    return out_shape, flat


def _conv_geometry(x: Tensor, w: Tensor, channels: int, stride: Shape, op: str):
    rank = w.ndim - 2
    if rank < 1:
        raise ShapeMismatch(f"{op}: kernel tensor of rank {w.ndim}")
    if x.ndim < rank + 1:
        raise ShapeMismatch(f"{op}: input rank {x.ndim} too small for {rank}-D kernel")
    if x.shape[-rank - 1] != channels:
        raise ShapeMismatch(f"{op}: input has {x.shape[-rank - 1]} channels, kernel expects {channels}")
    if any(s < 1 for s in stride):
        raise ShapeMismatch(f"{op}: stride must be >= 1, got {stride}")
    lead = x.shape[:-rank - 1]
    return rank, lead, int(np.prod(lead, dtype=np.int64)), x.shape[-rank:]


@_quiet
def conv(x: Tensor, w: Tensor, b: Optional[Tensor], stride: Sequence[int]) -> Tensor:
    # Valid cross-correlation; x [..., C_in, *S], w [C_out, C_in, *k].
    c_out, c_in = w.shape[:2]
    kernel = w.shape[2:]
    stride = _per_axis(stride, len(kernel))
    rank, lead, n, spatial = _conv_geometry(x, w, c_in, stride, "conv")
    if any(k > s for k, s in zip(kernel, spatial)):
        raise ShapeMismatch(f"conv: kernel {kernel} larger than input {spatial}")
    out_shape, idx = _window_indices(spatial, kernel, stride)
    positions, taps = idx.shape
    flat_in = x.data.reshape(n, c_in, -1)
    cols = flat_in[:, :, idx].transpose(0, 2, 1, 3).reshape(n, positions, c_in * taps)
    wm = w.data.reshape(c_out, c_in * taps)
    out = cols @ wm.T
    if b is not None:
        out = out + b.data
    data = out.transpose(0, 2, 1).reshape(lead + (c_out,) + out_shape)

    def grad_fn(g):
        gm = g.reshape(n, c_out, positions).transpose(0, 2, 1)
        gw = (gm.reshape(-1, c_out).T @ cols.reshape(-1, c_in * taps)).reshape(w.shape)
        dcols = (gm @ wm).reshape(n, positions, c_in, taps).transpose(0, 2, 1, 3)
        gx = np.zeros(flat_in.shape)
        for tap in range(taps):
            gx[:, :, idx[:, tap]] += dcols[:, :, :, tap]
        grads = (gx.reshape(x.shape), gw)
        return grads + (gm.sum(axis=(0, 1)),) if b is not None else grads
    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._result(data, parents, grad_fn, "conv")


@_quiet
def conv_transpose(x: Tensor, w: Tensor, b: Optional[Tensor], stride: Sequence[int]) -> Tensor:
    # Adjoint of conv with the same kernel; x [..., C_in, *S], w [C_in, C_out, *k].
    c_in, c_out = w.shape[:2]
    kernel = w.shape[2:]
    stride = _per_axis(stride, len(kernel))
    rank, lead, n, spatial = _conv_geometry(x, w, c_in, stride, "conv_transpose")
    out_spatial = tuple((s - 1) * st + k for s, st, k in zip(spatial, stride, kernel))
    _, idx = _window_indices(out_spatial, kernel, stride)
    positions, taps = idx.shape
    xm = x.data.reshape(n, c_in, positions).transpose(0, 2, 1)
    wm = w.data.reshape(c_in, c_out * taps)
    vals = (xm @ wm).reshape(n, positions, c_out, taps).transpose(0, 2, 1, 3)
    out = np.zeros((n, c_out, int(np.prod(out_spatial))))
    for tap in range(taps):
        out[:, :, idx[:, tap]] += vals[:, :, :, tap]
    if b is not None:
        out += b.data[None, :, None]
    data = out.reshape(lead + (c_out,) + out_spatial)

    def grad_fn(g):
        gf = g.reshape(n, c_out, -1)
        gcols = gf[:, :, idx].transpose(0, 2, 1, 3).reshape(n, positions, c_out * taps)
        gx = (gcols @ wm.T).transpose(0, 2, 1).reshape(x.shape)
        gw = (xm.reshape(-1, c_in).T @ gcols.reshape(-1, c_out * taps)).reshape(w.shape)
        grads = (gx, gw)
        return grads + (gf.sum(axis=(0, 2)),) if b is not None else grads
    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._result(data, parents, grad_fn, "conv_transpose")


def conv_forward(input: Tensor, layer: LayerParams) -> Tensor:
    rank = layer.weights.ndim - 2
    stride = _per_axis(layer.hyper.get("stride", 1), rank)
    padding = _per_axis(layer.hyper.get("padding", 0), rank)
    if any(padding):
        widths = [(0, 0)] * (input.ndim - rank) + [(p, p) for p in padding]
        input = input.pad(widths)
    return conv(input, layer.weights, layer.biases, stride)


def conv_transpose_forward(input: Tensor, layer: LayerParams) -> Tensor:
    rank = layer.weights.ndim - 2
    stride = _per_axis(layer.hyper.get("stride", 1), rank)
    padding = _per_axis(layer.hyper.get("padding", 0), rank)
    out = conv_transpose(input, layer.weights, layer.biases, stride)
    if any(padding):
        if any(2 * p >= n for p, n in zip(padding, out.shape[-rank:])):
            raise ShapeMismatch(f"conv_transpose: padding {padding} crops everything")
        crop = (Ellipsis,) + tuple(slice(p, n - p) for p, n in zip(padding, out.shape[-rank:]))
        out = out[crop]
    return out


def dense_forward(input: Tensor, layer: LayerParams) -> Tensor:
    w = layer.weights
    if input.ndim < 1 or input.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"dense: input {input.shape} vs weights {w.shape}")
    out = input @ w
    return out + layer.biases if layer.biases is not None else out


def gru_seq2seq_forward(input: Tensor, layer: LayerParams) -> Tensor:
    # input [..., T, features] -> [..., T, hidden], zero initial state.
    w, u, b = layer.weights, layer.recurrent, layer.biases
    hidden = u.shape[0]
    if input.ndim < 2 or input.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"gru: input {input.shape} vs weights {w.shape}")
    if w.shape[1] != 3 * hidden or u.shape != (hidden, 3 * hidden):
        raise ShapeMismatch(f"gru: inconsistent gate shapes {w.shape}, {u.shape}")
    projected = input @ w
    if b is not None:
        projected = projected + b
    u_gates, u_candidate = u[:, :2 * hidden], u[:, 2 * hidden:]
    h = Tensor(np.zeros(input.shape[:-2] + (hidden,)))
    outputs = []
    for t in range(input.shape[-2]):
        x_t = projected[..., t, :]
        gates = x_t[..., :2 * hidden] + h @ u_gates
        z = gates[..., :hidden].sigmoid()
        r = gates[..., hidden:].sigmoid()
        candidate = (x_t[..., 2 * hidden:] + (r * h) @ u_candidate).tanh()
        h = (1.0 - z) * h + z * candidate
        outputs.append(h)
    return stack(outputs, axis=-2)


def dropout_forward(input: Tensor, p: float, training: bool,
                    rng_seed: Union[int, np.random.Generator]) -> Tensor:
    # Inverted dropout: survivors scaled by 1/(1-p), identity at inference.
    if not 0.0 <= p <= 1.0:
        raise InvalidProbability(f"drop probability {p} outside [0, 1]")
    if not training or p == 0.0:
        return input
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = rng.random(input.shape) >= p
    scale = 0.0 if p == 1.0 else 1.0 / (1.0 - p)
    return input * Tensor(keep * scale)


def layer_forward(input: Tensor, layer: LayerParams, training: bool = False,
                  rng: Union[int, np.random.Generator] = 0) -> Tensor:
    if layer.kind == LayerKind.CONV:
        return conv_forward(input, layer)
    if layer.kind == LayerKind.CONV_TRANSPOSE:
        return conv_transpose_forward(input, layer)
    if layer.kind == LayerKind.DENSE:
        return dense_forward(input, layer)
    if layer.kind == LayerKind.GRU:
        return gru_seq2seq_forward(input, layer)
    return dropout_forward(input, layer.hyper.get("p", 0.5), training, rng)
