"""
Dense float64 tensors with reverse-mode automatic differentiation.

A `Tape` records every operation applied to tensors that live on it. Tensors that are not on any tape are
constants: when none of the inputs of an operation is on a tape, nothing is recorded at all, which is how
inference runs. Gradient rules are looked up by operation name in a registry, so every forward operation has
exactly one documented backward rule.

``` python
>>> tape = Tape()
>>> x = tape.leaf([1.0, 2.0, 3.0])
>>> grads = tape.backward(total(x * x))
>>> grads[x.grad_id].tolist()
[2.0, 4.0, 6.0]
```
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, TokenLookupError

LAYER_NORM_EPSILON = 1e-5
"""The constant added to the variance by `layer_norm`."""

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
Shape = Tuple[int, ...]


class Node(NamedTuple):
    """One recorded operation on a `Tape`."""

    op: str
    inputs: Tuple[int, ...]
    output: int
    saved: tuple = ()


class Tensor:
    """
    A row-major array of 64-bit floats, optionally linked into a `Tape` through `grad_id`.
    """

    __slots__ = ("data", "tape", "grad_id")

    def __init__(
        self,
        data: ArrayLike,
        tape: Optional["Tape"] = None,
        grad_id: Optional[int] = None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.grad_id = grad_id

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        """
        :return: The single value held by this tensor.
        """
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def tolist(self) -> list:
        return self.data.tolist()

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        on_tape = f", grad_id={self.grad_id}" if self.tape is not None else ""
        return f"Tensor({self.data.tolist()}{on_tape})"


class Tape:
    """
    An append-only record of operations, in the order they were executed.

    Ids are handed out in creation order, so every node's inputs precede it and a reverse walk over `nodes`
    is a valid topological order for backpropagation.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._shapes: List[Shape] = []

    def __len__(self) -> int:
        return len(self._shapes)

    def _new_id(self, shape: Shape) -> int:
        self._shapes.append(shape)
        return len(self._shapes) - 1

    def leaf(self, data: ArrayLike) -> Tensor:
        """
        Registers a value (a parameter or an input) that gradients should be collected for.

        :param data: The value of the leaf. Arrays are not copied.
        :return: A `Tensor` on this tape.
        """
        tensor = Tensor(data)
        tensor.tape = self
        tensor.grad_id = self._new_id(tensor.shape)
        self.nodes.append(Node("leaf", (), tensor.grad_id))
        return tensor

    def record(
        self, op: str, inputs: Sequence[Tensor], out: np.ndarray, saved: tuple = ()
    ) -> Tensor:
        """
        Appends a node for `op` and returns its output tensor. Inputs that are not on this tape are registered
        as leaves first.
        """
        ids = []
        for tensor in inputs:
            if tensor.tape is None:
                tensor = self.leaf(tensor.data)
            elif tensor.tape is not self:
                raise ContractError(f"{op}: inputs belong to different tapes")
            ids.append(tensor.grad_id)
        out_id = self._new_id(out.shape)
        self.nodes.append(Node(op, tuple(ids), out_id, saved))
        return Tensor(out, self, out_id)

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Backpropagates from a scalar `loss`.

        :param loss: A tensor holding one value, recorded on this tape.
        :return: A map from every id on the tape to the gradient of `loss` with respect to it. Every gradient
        has the shape of the value it belongs to.
        """
        if loss.tape is not self or loss.grad_id is None:
            raise ContractError("backward: loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")

        grads = [np.zeros(shape) for shape in self._shapes]
        grads[loss.grad_id] = np.ones(loss.shape)
        for node in reversed(self.nodes):
            if not node.inputs:
                continue
            upstream = grads[node.output]
            if not upstream.any():
                continue
            rule = _GRADIENT_RULES[node.op]
            for input_id, grad in zip(node.inputs, rule(upstream, node.saved)):
                if grad is not None:
                    grads[input_id] += grad
        return dict(enumerate(grads))


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Functional form of `Tape.backward`.
    """
    return tape.backward(loss)


GradientRule = Callable[[np.ndarray, tuple], Tuple[Optional[np.ndarray], ...]]
_GRADIENT_RULES: Dict[str, GradientRule] = {}


def gradient_rule(op: str) -> Callable[[GradientRule], GradientRule]:
    """Registers the backward rule of `op`."""

    def register(rule: GradientRule) -> GradientRule:
        _GRADIENT_RULES[op] = rule
        return rule

    return register


def registered_ops() -> List[str]:
    """
    :return: The names of every operation with a gradient rule.
    """
    return sorted(_GRADIENT_RULES)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(tensors: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise ContractError("inputs belong to different tapes")
    return tape


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, saved: tuple = ()) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, out, saved)


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """Sums `grad` over the axes that broadcasting added or stretched to reach `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Shape:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, (a.shape, b.shape))


@gradient_rule("add")
def _add_grad(g, saved):
    a_shape, b_shape = saved
    return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, (a.shape, b.shape))


@gradient_rule("sub")
def _sub_grad(g, saved):
    a_shape, b_shape = saved
    return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, (a.data, b.data))


@gradient_rule("mul")
def _mul_grad(g, saved):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return _emit("div", (a, b), a.data / b.data, (a.data, b.data))


@gradient_rule("div")
def _div_grad(g, saved):
    a, b = saved
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data)


@gradient_rule("neg")
def _neg_grad(g, saved):
    return (-g,)


def matmul(a, b) -> Tensor:
    """
    Matrix product of two tensors with one or two dimensions each.

    :param a: A matrix `[m x k]` or a row vector `[k]`.
    :param b: A matrix `[k x n]` or a column vector `[k]`.
    :return: The product, with the dimensions of vector operands dropped as in `numpy.matmul`.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return _emit("matmul", (a, b), a.data @ b.data, (a.data, b.data))


@gradient_rule("matmul")
def _matmul_grad(g, saved):
    a, b = saved
    a2 = a if a.ndim == 2 else a[None, :]
    b2 = b if b.ndim == 2 else b[:, None]
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _emit("transpose", (a,), a.data.T.copy())


@gradient_rule("transpose")
def _transpose_grad(g, saved):
    return (g.T,)


def reshape(a, shape: Shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", a.shape, shape) from None
    return _emit("reshape", (a,), out.copy(), (a.shape,))


@gradient_rule("reshape")
def _reshape_grad(g, saved):
    (shape,) = saved
    return (g.reshape(shape),)


def total(a) -> Tensor:
    """
    Sum of every entry, as a scalar tensor.
    """
    a = as_tensor(a)
    return _emit("sum", (a,), np.asarray(a.data.sum()), (a.shape,))


@gradient_rule("sum")
def _sum_grad(g, saved):
    (shape,) = saved
    return (np.full(shape, float(g)),)


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise DomainError("mean of an empty tensor")
    return _emit("mean", (a,), np.asarray(a.data.mean()), (a.shape,))


@gradient_rule("mean")
def _mean_grad(g, saved):
    (shape,) = saved
    return (np.full(shape, float(g) / int(np.prod(shape))),)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """
    Concatenates tensors along their last axis.
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("concat of no tensors")
    leading = tensors[0].shape[:-1]
    if any(t.ndim == 0 or t.shape[:-1] != leading for t in tensors):
        raise DimensionError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[-1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _emit("concat", tensors, out, (sizes,))


@gradient_rule("concat")
def _concat_grad(g, saved):
    (sizes,) = saved
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=-1))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """
    Stacks equally shaped tensors along a new leading axis.
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("stack of no tensors")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError("stack", *(t.shape for t in tensors))
    return _emit("stack", tensors, np.stack([t.data for t in tensors]))


@gradient_rule("stack")
def _stack_grad(g, saved):
    return tuple(g)


def take(a, start: int, stop: int) -> Tensor:
    """
    Slices `a[..., start:stop]`.
    """
    a = as_tensor(a)
    if a.ndim == 0 or not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError("take", a.shape, (start, stop))
    return _emit("take", (a,), a.data[..., start:stop].copy(), (a.shape, start, stop))


@gradient_rule("take")
def _take_grad(g, saved):
    shape, start, stop = saved
    grad = np.zeros(shape)
    grad[..., start:stop] = g
    return (grad,)


def row(table, index: int) -> Tensor:
    """
    Selects row `index` of a matrix; the gradient flows into that row only.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError("row", table.shape)
    if not 0 <= index < table.shape[0]:
        raise TokenLookupError(index, table.shape[0])
    return _emit("row", (table,), table.data[index].copy(), (table.shape, index))


@gradient_rule("row")
def _row_grad(g, saved):
    shape, index = saved
    grad = np.zeros(shape)
    grad[index] = g
    return (grad,)


def pick(a, index: int) -> Tensor:
    """
    Selects entry `index` of a vector as a scalar tensor.
    """
    a = as_tensor(a)
    if a.ndim != 1:
        raise DimensionError("pick", a.shape)
    if not 0 <= index < a.shape[0]:
        raise TokenLookupError(index, a.shape[0])
    return _emit("pick", (a,), np.asarray(a.data[index]), (a.shape, index))


@gradient_rule("pick")
def _pick_grad(g, saved):
    shape, index = saved
    grad = np.zeros(shape)
    grad[index] = g
    return (grad,)


def log(a, floor: float = 0.0) -> Tensor:
    """
    Natural logarithm. Entries below `floor` are clamped to it, and clamped entries receive no gradient.
    """
    a = as_tensor(a)
    clamped = np.maximum(a.data, floor)
    if np.any(clamped <= 0.0):
        raise DomainError("log of a non-positive value")
    return _emit("log", (a,), np.log(clamped), (clamped, a.data >= floor))


@gradient_rule("log")
def _log_grad(g, saved):
    clamped, active = saved
    return (np.where(active, g / clamped, 0.0),)


def softmax(a) -> Tensor:
    """
    Softmax over the last axis, computed after subtracting the maximum.

    ``` python
    >>> softmax([0.0, 0.0]).tolist()
    [0.5, 0.5]
    ```
    """
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    shifted = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)
    return _emit("softmax", (a,), out, (out,))


@gradient_rule("softmax")
def _softmax_grad(g, saved):
    (y,) = saved
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), out, (out,))


@gradient_rule("sigmoid")
def _sigmoid_grad(g, saved):
    (y,) = saved
    return (g * y * (1.0 - y),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", (a,), np.maximum(a.data, 0.0), (a.data > 0.0,))


@gradient_rule("relu")
def _relu_grad(g, saved):
    (active,) = saved
    return (g * active,)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, (out,))


@gradient_rule("tanh")
def _tanh_grad(g, saved):
    (y,) = saved
    return (g * (1.0 - y * y),)


def layer_norm(x, gain, bias) -> Tensor:
    """
    Normalizes a vector to zero mean and unit variance, then applies `gain` and `bias`.

    :param x: A vector of length `d >= 2`.
    :param gain: Elementwise scale, length `d`.
    :param bias: Elementwise shift, length `d`.
    :return: `gain * (x - mean) / sqrt(var + LAYER_NORM_EPSILON) + bias`
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 1 or x.shape[0] < 2:
        raise DomainError(f"layer_norm needs a vector of length >= 2, got shape {x.shape}")
    if gain.shape != x.shape or bias.shape != x.shape:
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    centered = x.data - x.data.mean()
    inv_std = 1.0 / np.sqrt((centered * centered).mean() + LAYER_NORM_EPSILON)
    normalized = centered * inv_std
    out = gain.data * normalized + bias.data
    return _emit("layer_norm", (x, gain, bias), out, (normalized, inv_std, gain.data))


@gradient_rule("layer_norm")
def _layer_norm_grad(g, saved):
    normalized, inv_std, gain = saved
    d_normalized = g * gain
    d_x = inv_std * (
        d_normalized
        - d_normalized.mean()
        - normalized * (d_normalized * normalized).mean()
    )
    return d_x, g * normalized, g


def stop_gradient(a) -> Tensor:
    """
    Identity in the forward pass; passes no gradient backwards.
    """
    a = as_tensor(a)
    return _emit("stop_gradient", (a,), a.data.copy())


@gradient_rule("stop_gradient")
def _stop_gradient_grad(g, saved):
    return (None,)
