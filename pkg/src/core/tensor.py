"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the encoder needs are provided. Every op computes its
result with numpy and, when an input requires gradients and a tape is
active, records an adjoint closure on that tape.

Usage:
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with ComputationTape() as tape:
        loss = sum_all(matmul(x, w))
    backward(loss, tape, params=[w])
    w.grad  # d loss / d w

Precision is a process-wide switch (float64 by default). Tensors are
converted to the default dtype when constructed.
"""
from __future__ import annotations

import contextlib
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
Adjoint = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

LAYER_NORM_EPS = 1e-5

_PRECISIONS = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}
_dtype_lock = threading.Lock()
_default_dtype = np.dtype(np.float64)


# === Precision switch ===


def resolve_dtype(precision: Union[str, np.dtype, type]) -> np.dtype:
    """Map "float32"/"float64" (or a numpy dtype) to a supported dtype."""
    if isinstance(precision, str):
        if precision not in _PRECISIONS:
            raise ContractError(
                f"Unsupported precision: {precision}",
                {"supported": sorted(_PRECISIONS)},
            )
        return _PRECISIONS[precision]
    dtype = np.dtype(precision)
    if dtype not in _PRECISIONS.values():
        raise ContractError(f"Unsupported dtype: {dtype}", {"supported": sorted(_PRECISIONS)})
    return dtype


def get_default_dtype() -> np.dtype:
    """Get the dtype new tensors are created with."""
    with _dtype_lock:
        return _default_dtype


def set_default_dtype(precision: Union[str, np.dtype, type]) -> None:
    """Set the dtype new tensors are created with."""
    global _default_dtype
    dtype = resolve_dtype(precision)
    with _dtype_lock:
        _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(precision: Union[str, np.dtype, type]) -> Iterator[np.dtype]:
    """Temporarily switch the default dtype."""
    previous = get_default_dtype()
    set_default_dtype(precision)
    try:
        yield get_default_dtype()
    finally:
        set_default_dtype(previous)


# === Tensor ===


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        copy: bool = True,
    ):
        dtype = get_default_dtype()
        if copy:
            self.data = np.array(data, dtype=dtype)
        else:
            self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        """Add grad into the gradient buffer. Never mutates grad in place."""
        if grad.shape != self.data.shape:
            raise ContractError(
                f"Gradient shape {grad.shape} does not match tensor shape {self.data.shape}",
                {"tensor": self.name},
            )
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=False)
        else:
            self.grad = self.grad + grad

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are wrapped without gradients.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap a non-Tensor value as a constant tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


# === Computation tape ===


@dataclass
class TapeEntry:
    """One recorded op: its inputs, its output and the adjoint rule."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


@dataclass
class ComputationTape:
    """Ordered record of executed ops, replayed in reverse by backward().

    Used as a context manager it becomes the active tape of the current
    thread; ops executed outside any tape are not recorded.
    """

    _entries: list = field(default_factory=list)

    def record(self, entry: TapeEntry) -> None:
        self._entries.append(entry)

    @property
    def entries(self) -> Tuple[TapeEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        """Release every recorded reference."""
        self._entries.clear()

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[ComputationTape]:
    """Tape ops are currently recorded on (None when recording is off)."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def recording_paused() -> Iterator[None]:
    """Run ops without recording, even inside an active tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], adjoint: Adjoint) -> Tensor:
    """Wrap an op result and record it when gradients flow through it."""
    if not np.all(np.isfinite(out)):
        raise NumericalError(op, out.shape)
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires_grad, copy=False)
    if requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.record(TapeEntry(op, tuple(inputs), result, adjoint))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape, reason="not broadcastable")


# === Elementwise ops ===


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), adjoint)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), adjoint)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), adjoint)


def scale(a, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = as_tensor(a)

    def adjoint(g):
        return (g * factor,)

    return _emit("scale", a.data * factor, (a,), adjoint)


def square(a) -> Tensor:
    return mul(a, a)


# === Linear algebra and layout ===


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    The 2-D case is the plain product of an m×k and a k×n matrix.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul", a.shape, b.shape, reason="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape, reason="inner extents differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape, reason="batch extents differ")

    def adjoint(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # Fold the batch axes into rows: one GEMM instead of a batched sum.
            k, n = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit("matmul", np.matmul(a.data, b.data), (a, b), adjoint)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("transpose", a.shape, axes, reason="axes must permute every axis")
    inverse = tuple(np.argsort(axes))

    def adjoint(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", np.transpose(a.data, axes), (a,), adjoint)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", a.shape, tuple(shape), reason="element count differs")

    def adjoint(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", out, (a,), adjoint)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    except ValueError:
        raise DimensionError("broadcast_to", a.shape, tuple(shape), reason="not broadcastable")

    def adjoint(g):
        return (_unbroadcast(g, a.shape),)

    return _emit("broadcast_to", out, (a,), adjoint)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(t.shape for t in tensors))
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _emit("concat", out, tensors, adjoint)


def getitem(a, index) -> Tensor:
    """Basic indexing (ints and slices)."""
    a = as_tensor(a)
    out = np.array(a.data[index])

    def adjoint(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("getitem", out, (a,), adjoint)


# === Reductions ===


def sum_all(a, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", out, (a,), adjoint)


def mean(a, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_all(a, axis=axis), 1.0 / count)


# === Neural network ops ===


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax_rows", x.shape, reason="needs at least one column")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", probs, (x,), adjoint)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then gain·x̂ + bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    width = x.shape[-1] if x.ndim else 0
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape, reason="gain/bias must match last axis")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + eps)
    normed = centered * inv_std

    def adjoint(g):
        lead = tuple(range(g.ndim - 1))
        grad_gain = (g * normed).sum(axis=lead)
        grad_bias = g.sum(axis=lead)
        d_normed = g * gain.data
        grad_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _emit("layer_norm", normed * gain.data + bias.data, (x, gain, bias), adjoint)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu(x) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = as_tensor(x)

    def adjoint(g):
        return (g * _gelu_grad(x.data),)

    return _emit("gelu", _gelu_value(x.data), (x,), adjoint)


# === Reverse mode ===


def backward(loss: Tensor, tape: ComputationTape, params: Optional[Sequence[Tensor]] = None) -> None:
    """Propagate d loss through the tape into every tensor that requires grad.

    Gradients accumulate into existing buffers; call zero_grad() first for a
    fresh pass. Tensors in params that the loss does not reach receive a
    zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad and not any(entry.output is loss for entry in tape.entries):
        raise ContractError("Loss was not produced on this tape")

    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        upstream = entry.output.grad
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.adjoint(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            tensor.accumulate_grad(grad)

    for param in params or ():
        if param.grad is None:
            param.grad = np.zeros_like(param.data)


# === Gradient checking ===


@dataclass
class GradCheckReport:
    """Relative error between backward() and central differences, per block."""

    errors: dict
    tolerance: float
    checked_entries: dict = field(default_factory=dict)

    @property
    def worst(self) -> Tuple[Optional[str], float]:
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def failed(self) -> list:
        return [name for name, err in self.errors.items() if err > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        name, err = self.worst
        return {
            "tolerance": self.tolerance,
            "worst_block": name,
            "worst_error": err,
            "failed": self.failed,
            "errors": dict(self.errors),
        }


def _block_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale_ <= floor:
        return diff
    return diff / scale_


def noise_floor(dtype: np.dtype, loss_value: float, atol: float = 1e-7) -> float:
    """Gradient norm below which a block is compared absolutely.

    sqrt(eps)·max(1, |f|) of the working dtype, never below atol.
    """
    eps = float(np.finfo(dtype).eps)
    return max(atol, math.sqrt(eps) * max(1.0, abs(loss_value)))


@contextlib.contextmanager
def _widened(params: Sequence[Tensor]) -> Iterator[None]:
    saved = [param.data for param in params]
    try:
        for param in params:
            param.data = param.data.astype(np.float64)
        with default_dtype("float64"):
            yield
    finally:
        for param, data in zip(params, saved):
            param.data = data


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tuple[str, Tensor]]],
    step: float = 1e-3,
    tol: float = 1e-3,
    *,
    max_entries: Optional[int] = None,
    atol: float = 1e-7,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() with (f(θ+h) − f(θ−h)) / 2h for every parameter block.

    f must rebuild the scalar loss from the current parameter values. The
    step per entry is step·max(1, |θ|). Block error is ‖a − n‖ / max(‖a‖, ‖n‖);
    blocks whose gradient norm is under noise_floor() of the working dtype
    are compared absolutely. The differences are taken in float64 at the
    working-precision parameter values, so a float32 backward is checked
    against a noise-free reference. The default dtype is switched for the
    duration of those evaluations.
    With max_entries, large blocks are checked on a seeded random subset.
    """
    named = list(params.items()) if isinstance(params, Mapping) else list(params)
    for _, param in named:
        param.zero_grad()

    with ComputationTape() as tape:
        loss = f()
    backward(loss, tape, params=[p for _, p in named])
    tape.clear()
    analytic = {name: param.grad.copy() for name, param in named}
    floor = noise_floor(loss.dtype, loss.item(), atol)

    rng = np.random.default_rng(seed)
    errors = {}
    checked = {}
    with recording_paused(), _widened([p for _, p in named]):
        for name, param in named:
            size = param.size
            indices = np.arange(size)
            if max_entries is not None and size > max_entries:
                indices = np.sort(rng.choice(size, size=max_entries, replace=False))
            numeric = np.empty(len(indices))
            for j, flat_index in enumerate(indices):
                pos = np.unravel_index(flat_index, param.shape)
                original = param.data[pos]
                h = step * max(1.0, abs(float(original)))
                param.data[pos] = original + h
                upper = float(param.data[pos])
                plus = f().item()
                param.data[pos] = original - h
                lower = float(param.data[pos])
                minus = f().item()
                param.data[pos] = original
                numeric[j] = (plus - minus) / (upper - lower)
            errors[name] = _block_error(analytic[name].reshape(-1)[indices], numeric, floor)
            checked[name] = len(indices)
            logger.debug(f"grad_check {name}: rel err {errors[name]:.3e} over {len(indices)} entries")

    report = GradCheckReport(errors=errors, tolerance=tol, checked_entries=checked)
    if not report.passed:
        logger.warning(f"grad_check failed for blocks: {report.failed}")
    return report
