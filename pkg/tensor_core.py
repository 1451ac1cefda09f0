"""Dense tensors, the gradient tape, and the elementwise operators built on them."""

# == IMPORTS ===================================================================================== #

import threading

from typing import *

import numpy as np

# == ERRORS ====================================================================================== #

class ShapeError(ValueError):
    """Raised when tensor extents or lengths disagree."""

class NonFiniteError(ArithmeticError):
    """Raised when a forward operator produces NaN or Inf from finite inputs."""

# == GLOBALS ===================================================================================== #

TEST_DTYPE = np.float64
TRAIN_DTYPE = np.float32

Array = np.ndarray
Shape = Sequence[int]

_LOCAL = threading.local()

def _tape_stack() -> List["GradTape"]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []

    return _LOCAL.tapes

def resolve_dtype(dtype: Union[str, type, np.dtype, None]) -> np.dtype:
    """Maps a dtype name ("float32", "float64", "f32", "f64") to a numpy dtype."""

    if dtype is None:
        return np.dtype(TEST_DTYPE)
    if isinstance(dtype, str):
        dtype = { "f32": "float32", "f64": "float64" }.get(dtype, dtype)

    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype '{resolved}'; expected float32 or float64.")

    return resolved

# == TENSOR ====================================================================================== #

class Tensor:
    """A dense row-major array with an optional gradient buffer.

    Tensors created by users are leaves. Tensors produced by an operator while a `GradTape`
    is active are interior nodes; their gradients only live inside `GradTape.backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_interior")

    def __init__(self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None
    ):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(TEST_DTYPE)

        self.data: Array = array
        self.grad: Optional[Array] = None
        self.requires_grad: bool = requires_grad
        self.name: Optional[str] = name
        self._interior: bool = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._interior

    def item(self) -> float:
        """Returns the value of a one-element tensor as a Python float."""

        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor; got shape {self.shape}.")

        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: Array) -> None:
        """Adds `grad` into this tensor's gradient buffer, allocating it on first use."""

        if grad.shape != self.data.shape:
            raise ShapeError(
                f"Gradient of shape {grad.shape} does not match tensor of shape {self.shape}."
            )

        if self.grad is None:
            self.grad = np.zeros_like(self.data)

        self.grad += grad.astype(self.data.dtype, copy=False)

    def astype(self, dtype: Union[str, np.dtype]) -> "Tensor":
        return Tensor(self.data.astype(resolve_dtype(dtype)), self.requires_grad, self.name)

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={list(self.shape)} dtype={self.dtype}>"

# ---- Constructors ------------------------------------------------------------------------------ #

def zeros(shape: Shape, dtype: Union[str, np.dtype, None] = None) -> Tensor:
    """Creates a tensor filled with zeros."""

    return Tensor(np.zeros(_check_shape(shape), dtype=resolve_dtype(dtype)))

def ones(shape: Shape, dtype: Union[str, np.dtype, None] = None) -> Tensor:
    """Creates a tensor filled with ones."""

    return Tensor(np.ones(_check_shape(shape), dtype=resolve_dtype(dtype)))

def from_data(
    shape: Shape,
    values: Iterable[float],
    dtype: Union[str, np.dtype, None] = None,
    requires_grad: bool = False
) -> Tensor:
    """Creates a tensor from a flat row-major sequence of values.

    Parameters
    ==========
    shape: `Sequence[int]`
        Extents of the new tensor; each must be non-negative.

    values: `Iterable[float]`
        Exactly `product(shape)` values in row-major order.

    dtype: `str | np.dtype | None` = `None`
        Element type; float64 when omitted.

    Returns
    =======
    `Tensor`
        A leaf tensor.
    """

    shape = _check_shape(shape)
    flat = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
        dtype = resolve_dtype(dtype)
    ).reshape(-1)

    expected = int(np.prod(shape, dtype=np.int64))
    if flat.size != expected:
        raise ShapeError(
            f"Shape {list(shape)} holds {expected} values; got {flat.size}."
        )

    return Tensor(flat.reshape(shape), requires_grad=requires_grad)

def _check_shape(shape: Shape) -> Tuple[int, ...]:
    errors = []
    extents = tuple(shape)

    for axis, extent in enumerate(extents):
        if not isinstance(extent, (int, np.integer)):
            errors.append(f"Extent {axis} must be an integer; got {type(extent).__name__}.")
        elif extent < 0:
            errors.append(f"Extent {axis} must be non-negative; got {extent}.")

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    return tuple(int(extent) for extent in extents)

# == GRADIENT TAPE =============================================================================== #

BackwardFn = Callable[[Tuple[Optional[Array], ...]], Sequence[Optional[Array]]]

class TapeRecord(NamedTuple):
    """One recorded operator application."""

    name: str
    inputs: Tuple[Tensor, ...]
    outputs: Tuple[Tensor, ...]
    backward: BackwardFn

class GradTape:
    """Ordered record of operator applications for reverse-mode differentiation.

    Operators record themselves onto the innermost active tape whenever at least one of their
    inputs requires a gradient. A tape is owned by one thread.

    >>> with GradTape() as tape:
    ...     y = tanh(x)
    >>> tape.backward(y)
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def record(self,
        name: str,
        inputs: Sequence[Tensor],
        outputs: Sequence[Tensor],
        backward: BackwardFn
    ) -> None:
        self.records.append(TapeRecord(name, tuple(inputs), tuple(outputs), backward))

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Propagates `seed * d(loss)` back through every record in reverse order.

        Gradients are added into the `grad` buffers of leaf tensors that require them;
        existing buffers are never overwritten, so two calls without resetting double them.
        """

        pending: Dict[int, Array] = { id(loss): np.full(loss.shape, seed, dtype=loss.dtype) }
        leaves: Dict[int, Tensor] = {}

        if loss.is_leaf and loss.requires_grad:
            leaves[id(loss)] = loss

        for record in reversed(self.records):
            upstream = tuple(pending.pop(id(out), None) for out in record.outputs)
            if all(grad is None for grad in upstream):
                continue

            grads = record.backward(upstream)

            for tensor, grad in zip(record.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue

                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad

                if tensor.is_leaf:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            if key in pending:
                tensor.accumulate(np.asarray(pending[key]).reshape(tensor.shape))

def active_tape() -> Optional[GradTape]:
    """Returns the innermost active tape of the calling thread, if any."""

    stack = _tape_stack()
    return stack[-1] if stack else None

def make_output(
    name: str,
    value: Union[Array, Sequence[Array]],
    inputs: Sequence[Tensor],
    backward: BackwardFn
) -> Union[Tensor, Tuple[Tensor, ...]]:
    """Wraps raw operator results as tensors and records them on the active tape.

    Every operator in this package funnels its results through here, which is also where the
    finite-output contract is enforced.

    Parameters
    ==========
    name: `str`
        Operator name used in diagnostics.

    value: `Array | Sequence[Array]`
        One result array, or a tuple/list of them for multi-output operators.

    inputs: `Sequence[Tensor]`
        Operator inputs, in the order `backward` returns their gradients.

    backward: `BackwardFn`
        Maps a tuple of upstream gradients (one per output, `None` when unused) to one
        gradient (or `None`) per input.
    """

    multi = isinstance(value, (tuple, list))
    arrays = tuple(value) if multi else (value,)

    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"{name} produced a non-finite value.")

    track = any(tensor.requires_grad for tensor in inputs)
    outputs = tuple(Tensor(array, requires_grad=track) for array in arrays)

    tape = active_tape()
    if track and tape is not None:
        for out in outputs:
            out._interior = True
        tape.record(name, inputs, outputs, backward)

    return outputs if multi else outputs[0]

def _as_tensor(value: Union[Tensor, float], like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value

    return Tensor(np.asarray(value, dtype=like.dtype))

def _reduce_broadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad

    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)

def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return

    raise ShapeError(
        f"{name}: shapes {list(a.shape)} and {list(b.shape)} are not broadcast-compatible "
        "(only scalar and exact-shape operands are supported)."
    )

# == ELEMENTWISE OPERATORS ======================================================================= #

def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Elementwise sum; either operand may be a one-element scalar."""

    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)

    def backward(upstream):
        (g,) = upstream
        return _reduce_broadcast(g, a.shape), _reduce_broadcast(g, b.shape)

    return make_output("add", a.data + b.data, (a, b), backward)

def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Elementwise product; either operand may be a one-element scalar."""

    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)

    def backward(upstream):
        (g,) = upstream
        return (
            _reduce_broadcast(g * b.data, a.shape),
            _reduce_broadcast(g * a.data, b.shape)
        )

    return make_output("mul", a.data * b.data, (a, b), backward)

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(upstream):
        (g,) = upstream
        return (g * mask,)

    return make_output("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)

def _sigmoid(values: Array) -> Array:
    # split by sign so exp never overflows
    out = np.empty_like(values)
    positive = values >= 0
    out[positive] = 1 / (1 + np.exp(-values[positive]))
    exp = np.exp(values[~positive])
    out[~positive] = exp / (1 + exp)
    return out

def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(upstream):
        (g,) = upstream
        return (g * s * (1 - s),)

    return make_output("sigmoid", s, (x,), backward)

def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(upstream):
        (g,) = upstream
        return (g * (1 - t * t),)

    return make_output("tanh", t, (x,), backward)

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of `a[M, K]` and `b[K, N]`."""

    errors = []
    if a.ndim != 2 or b.ndim != 2:
        errors.append(f"matmul expects two matrices; got ranks {a.ndim} and {b.ndim}.")
    elif a.shape[1] != b.shape[0]:
        errors.append(
            f"matmul inner dimensions differ: {list(a.shape)} @ {list(b.shape)}."
        )

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    def backward(upstream):
        (g,) = upstream
        return g @ b.data.T, a.data.T @ g

    return make_output("matmul", a.data @ b.data, (a, b), backward)

# == SHAPE OPERATORS ============================================================================= #

def reshape(x: Tensor, shape: Shape) -> Tensor:
    shape = tuple(shape)
    try:
        value = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e))

    def backward(upstream):
        (g,) = upstream
        return (g.reshape(x.shape),)

    return make_output("reshape", value, (x,), backward)

def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(upstream):
        (g,) = upstream
        return (np.transpose(g, inverse),)

    return make_output("transpose", np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,), backward
    )

def take(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Selects one slice along `axis`, dropping that axis."""

    axis = axis % x.ndim
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise ShapeError(f"Index {index} out of range for axis {axis} of {list(x.shape)}.")

    def backward(upstream):
        (g,) = upstream
        grad = np.zeros_like(x.data)
        selector = [slice(None)] * x.ndim
        selector[axis] = index
        grad[tuple(selector)] = g
        return (grad,)

    return make_output("take", np.take(x.data, index, axis=axis), (x,), backward)

def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("stack needs at least one tensor.")
    if len({ t.shape for t in tensors }) != 1:
        raise ShapeError("stack needs tensors of identical shape.")

    def backward(upstream):
        (g,) = upstream
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_output("stack", np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors), backward
    )

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("concat needs at least one tensor.")

    value = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(upstream):
        (g,) = upstream
        return tuple(np.split(g, bounds, axis=axis))

    return make_output("concat", value, tuple(tensors), backward)

# == REDUCTIONS ================================================================================== #

def sum_all(x: Tensor) -> Tensor:
    def backward(upstream):
        (g,) = upstream
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_output("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)

def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor is undefined.")

    count = x.size

    def backward(upstream):
        (g,) = upstream
        return (np.full(x.shape, g / count, dtype=x.dtype),)

    return make_output("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)

# == FINITE DIFFERENCES ========================================================================== #

def numeric_gradient(
    fn: Callable[[], float],
    tensor: Tensor,
    h: float = 1e-4,
    indices: Optional[Iterable[Tuple[int, ...]]] = None
) -> Array:
    """Central-difference estimate of d fn() / d tensor, perturbing `tensor.data` in place.

    Parameters
    ==========
    fn: `Callable[[], float]`
        Recomputes the scalar objective from the current tensor values.

    tensor: `Tensor`
        The tensor to perturb. Its values are restored afterwards.

    h: `float` = `1e-4`
        Step size.

    indices: `Optional[Iterable[Tuple[int, ...]]]` = `None`
        Entries to probe; every entry when omitted. Unprobed entries are left at zero.
    """

    grad = np.zeros(tensor.shape, dtype=np.float64)
    if indices is None:
        indices = np.ndindex(*tensor.shape)

    for index in indices:
        original = tensor.data[index]

        tensor.data[index] = original + h
        plus = fn()
        tensor.data[index] = original - h
        minus = fn()
        tensor.data[index] = original

        grad[index] = (plus - minus) / (2 * h)

    return grad

def relative_error(analytic: Array, numeric: Array, floor: float = 1e-8) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""

    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))

def gradient_errors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-4
) -> List[float]:
    """Relative error (see `relative_error`) between tape and central-difference gradients.

    `loss_fn` must rebuild the scalar loss from the current values of `tensors` on every call.
    Returns one error per tensor, in order.
    """

    for tensor in tensors:
        tensor.zero_grad()

    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    def value() -> float:
        return loss_fn().item()

    return [
        relative_error(
            tensor.grad if tensor.grad is not None else np.zeros(tensor.shape),
            numeric_gradient(value, tensor, h)
        )
        for tensor in tensors
    ]
