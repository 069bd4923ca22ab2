"""Dense tensor math with hand-written backward passes.

Values are numpy arrays. A DualTensor pairs a value with an accumulated
gradient and a closure that pushes its own gradient to its parents. Graphs are
small and static, so backward() simply topologically sorts the nodes reachable
from the output and runs each closure once.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

import config
from errors import DomainError, GradCheckEvaluationError, ShapeError

_DTYPES = {"double": np.float64, "single": np.float32}

# Relative-error tolerances per precision mode
TOLERANCES = {"double": 1e-4, "single": 1e-2}

_state = threading.local()


def get_precision() -> str:
    return getattr(_state, "precision", config.DEFAULT_PRECISION)


def set_precision(mode: str):
    """Set the precision mode ("double" or "single") for the calling thread."""
    if mode not in _DTYPES:
        raise ValueError(f"Unknown precision mode '{mode}', expected one of {sorted(_DTYPES)}")
    _state.precision = mode


@contextmanager
def precision(mode: str):
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def float_dtype():
    return _DTYPES[get_precision()]


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Build no backward closures inside this block (inference)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


ArrayLike = Union[np.ndarray, float, int, Sequence]


class DualTensor:
    """A value together with its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")
    # ndarray <op> DualTensor defers to the reflected DualTensor operator
    __array_ufunc__ = None

    def __init__(self, value: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["DualTensor", ...] = ()):
        self.value = np.asarray(value, dtype=float_dtype())
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"DualTensor(shape={self.shape}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def backward(self):
        """Backpropagate from this tensor (gradient seed of ones).

        Gradients of every node in the graph are zeroed first, so leaves hold
        exactly d(self)/d(leaf) afterwards.
        """
        order = _topological_order(self)
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return pow_const(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: DualTensor) -> List[DualTensor]:
    order: List[DualTensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def parameter(value: ArrayLike, name: str) -> DualTensor:
    return DualTensor(value, requires_grad=True, name=name)


def as_dual(x) -> DualTensor:
    if isinstance(x, DualTensor):
        return x
    return DualTensor(x)


def _result(value: np.ndarray, parents: Iterable[DualTensor], backward) -> DualTensor:
    parents = tuple(parents)
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = DualTensor(value, requires_grad=needs, _parents=parents if needs else ())
    if needs:
        out._backward = lambda: backward(out)
    return out


def _accumulate(node: DualTensor, grad: np.ndarray):
    if node.requires_grad:
        node.grad = node.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Leading-batch / trailing-axis broadcasting only: one operand's shape must win."""
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible") from None
    if shape != a and shape != b:
        raise ShapeError(f"{op}: shapes {a} and {b} would broadcast to a new shape {shape}")
    return shape


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> DualTensor:
    a, b = as_dual(a), as_dual(b)
    _broadcast_shape("add", a.shape, b.shape)

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    return _result(a.value + b.value, (a, b), backward)


def sub(a, b) -> DualTensor:
    a, b = as_dual(a), as_dual(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.shape))

    return _result(a.value - b.value, (a, b), backward)


def mul(a, b) -> DualTensor:
    a, b = as_dual(a), as_dual(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad * b.value, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.value, b.shape))

    return _result(a.value * b.value, (a, b), backward)


def div(a, b) -> DualTensor:
    a, b = as_dual(a), as_dual(b)
    _broadcast_shape("div", a.shape, b.shape)

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad / b.value, a.shape))
        _accumulate(b, _unbroadcast(-out.grad * a.value / (b.value * b.value), b.shape))

    return _result(a.value / b.value, (a, b), backward)


def pow_const(x, exponent: float) -> DualTensor:
    x = as_dual(x)

    def backward(out):
        _accumulate(x, out.grad * exponent * np.power(x.value, exponent - 1))

    return _result(np.power(x.value, exponent), (x,), backward)


def sqrt(x) -> DualTensor:
    x = as_dual(x)
    if np.any(x.value < 0):
        raise DomainError("sqrt of a negative value")
    value = np.sqrt(x.value)

    def backward(out):
        _accumulate(x, out.grad * 0.5 / value)

    return _result(value, (x,), backward)


def matmul(a, b) -> DualTensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = as_dual(a), as_dual(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} disagree") from None

    def backward(out):
        _accumulate(a, _unbroadcast(np.matmul(out.grad, np.swapaxes(b.value, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), out.grad), b.shape))

    return _result(value, (a, b), backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def transpose(x, axes: Optional[Sequence[int]] = None) -> DualTensor:
    x = as_dual(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(out):
        _accumulate(x, np.transpose(out.grad, inverse))

    return _result(np.transpose(x.value, axes), (x,), backward)


def reshape(x, shape: Sequence[int]) -> DualTensor:
    x = as_dual(x)
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(out):
        _accumulate(x, out.grad.reshape(x.shape))

    return _result(value, (x,), backward)


def sum(x, axis=None, keepdims: bool = False) -> DualTensor:  # noqa: A001
    x = as_dual(x)

    def backward(out):
        grad = out.grad
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        _accumulate(x, np.broadcast_to(grad, x.shape).copy())

    return _result(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> DualTensor:
    x = as_dual(x)
    if axis is None:
        count = x.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def getitem(x, index) -> DualTensor:
    x = as_dual(x)

    def backward(out):
        grad = np.zeros_like(x.value)
        np.add.at(grad, index, out.grad)
        _accumulate(x, grad)

    return _result(x.value[index], (x,), backward)


def take(x, indices, axis: int = 0) -> DualTensor:
    """Gather rows (or slices along `axis`); repeated indices accumulate gradient."""
    x = as_dual(x)
    indices = np.asarray(indices, dtype=np.int64)
    index = [slice(None)] * x.ndim
    index[axis] = indices
    return getitem(x, tuple(index))


def concat(tensors: Sequence, axis: int = 0) -> DualTensor:
    tensors = [as_dual(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: shapes {shapes} disagree off axis {axis}") from None
    splits = np.cumsum(sizes)[:-1]

    def backward(out):
        for t, grad in zip(tensors, np.split(out.grad, splits, axis=axis)):
            _accumulate(t, grad)

    return _result(value, tensors, backward)


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(v):
    cdf = 0.5 * (1.0 + special.erf(v * _SQRT_HALF))
    return v * cdf, lambda: cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)


def _sigmoid(v):
    y = special.expit(v)
    return y, lambda: y * (1.0 - y)


def _relu(v):
    return np.maximum(v, 0.0), lambda: (v > 0).astype(v.dtype)


def _log(v):
    if np.any(v <= 0):
        raise DomainError(f"log of non-positive input (min {float(np.min(v))})")
    return np.log(v), lambda: 1.0 / v


def _exp(v):
    y = np.exp(v)
    return y, lambda: y


_ELEMENTWISE = {"gelu": _gelu, "sigmoid": _sigmoid, "relu": _relu, "log": _log, "exp": _exp}


def elementwise(op: str, x) -> DualTensor:
    """Apply one of gelu, sigmoid, relu, log, exp elementwise."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"Unknown elementwise op '{op}'")
    x = as_dual(x)
    value, derivative = _ELEMENTWISE[op](x.value)

    def backward(out):
        _accumulate(x, out.grad * derivative())

    return _result(value, (x,), backward)


def gelu(x) -> DualTensor:
    return elementwise("gelu", x)


def sigmoid(x) -> DualTensor:
    return elementwise("sigmoid", x)


def relu(x) -> DualTensor:
    return elementwise("relu", x)


def log(x) -> DualTensor:
    return elementwise("log", x)


def exp(x) -> DualTensor:
    return elementwise("exp", x)


def clip(x, lo: float, hi: float) -> DualTensor:
    x = as_dual(x)
    inside = (x.value >= lo) & (x.value <= hi)

    def backward(out):
        _accumulate(x, out.grad * inside)

    return _result(np.clip(x.value, lo, hi), (x,), backward)


def smooth_l1(x, transition: float = 1.0) -> DualTensor:
    """0.5 x^2 / t below |x| = t, |x| - 0.5 t above."""
    x = as_dual(x)
    ax = np.abs(x.value)
    small = ax < transition
    value = np.where(small, 0.5 * x.value * x.value / transition, ax - 0.5 * transition)

    def backward(out):
        _accumulate(x, out.grad * np.where(small, x.value / transition, np.sign(x.value)))

    return _result(value, (x,), backward)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def softmax_with_bias(logits, bias=None) -> DualTensor:
    """Softmax over the last axis of logits + bias.

    A bias of None or all zeros gives bitwise the same result as plain softmax.
    """
    logits = as_dual(logits)
    parents = [logits]
    z = logits.value
    if bias is not None:
        bias = as_dual(bias)
        _broadcast_shape("softmax_with_bias", logits.shape, bias.shape)
        z = z + bias.value
        parents.append(bias)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(out):
        dz = y * (out.grad - np.sum(out.grad * y, axis=-1, keepdims=True))
        _accumulate(logits, _unbroadcast(dz, logits.shape))
        if bias is not None:
            _accumulate(bias, _unbroadcast(dz, bias.shape))

    return _result(y, parents, backward)


def softmax(x) -> DualTensor:
    return softmax_with_bias(x, None)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> DualTensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, shift = as_dual(x), as_dual(gain), as_dual(shift)
    if gain.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / shift {shift.shape} do not match last axis of {x.shape}"
        )
    n = x.shape[-1]
    mu = np.mean(x.value, axis=-1, keepdims=True)
    centered = x.value - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    value = xhat * gain.value + shift.value

    def backward(out):
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, np.sum(g * xhat, axis=lead))
        _accumulate(shift, np.sum(g, axis=lead))
        dxhat = g * gain.value
        dx = inv_std / n * (
            n * dxhat
            - np.sum(dxhat, axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
        )
        _accumulate(x, dx)

    return _result(value, (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[DualTensor], DualTensor], theta: np.ndarray, h: float = 1e-5,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               abs_tol: float = 0.0) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    Args:
        f: Maps a DualTensor shaped like theta to a scalar DualTensor
        theta: Point at which to check
        h: Central-difference step
        max_coords: If set, check only this many randomly chosen coordinates
        rng: Generator used to choose the coordinates
        abs_tol: Coordinates whose absolute discrepancy is at most this are
            treated as exact (for gradients that are zero up to roundoff)

    Returns:
        max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)
    """
    with precision("double"):
        theta = np.asarray(theta, dtype=np.float64)
        point = DualTensor(theta.copy(), requires_grad=True)
        out = f(point)
        if out.value.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
        out.backward()
        analytic = point.grad.reshape(-1).copy()

        coords = np.arange(theta.size)
        if max_coords is not None and max_coords < theta.size:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(theta.size, size=max_coords, replace=False))

        worst = 0.0
        flat = theta.reshape(-1)
        for i in coords:
            values = []
            for step in (h, -h):
                bumped = flat.copy()
                bumped[i] += step
                with no_grad():
                    v = float(f(DualTensor(bumped.reshape(theta.shape))).value)
                if not np.isfinite(v):
                    raise GradCheckEvaluationError(
                        f"f is not finite at coordinate {int(i)} perturbed by {step:+g}"
                    )
                values.append(v)
            numeric = (values[0] - values[1]) / (2.0 * h)
            gap = abs(analytic[i] - numeric)
            if gap <= abs_tol:
                continue
            worst = max(worst, gap / (abs(numeric) + 1e-8))
    return worst


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Scaled Gaussian weights, std 1/sqrt(fan_in)."""
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
