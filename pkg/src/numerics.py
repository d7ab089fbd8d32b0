"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy float64 array. Every primitive is a Function
subclass; applying one records the Function as the creator of its output, so the
graph is rebuilt on each forward pass. backward() linearises the graph into a Tape
(topological order) and walks it once in reverse, accumulating gradients only on
leaves that asked for them. Frozen tensors never receive a gradient array.

Shapes never broadcast implicitly. The one exception is add_bias, which adds a
vector to every row of its input.
"""

import contextvars
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import expit

from src.errors import NumericsError, ShapeError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
# finite_diff_check: rounding allowance in units in the last place of f, and the
# smallest denominator of its relative error
FINITE_DIFF_NOISE_ULPS = 1024.0
FINITE_DIFF_MIN_SCALE = 1e-12

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
# Activation patterns recorded by relu while a finite-difference evaluation is running
_relu_patterns: contextvars.ContextVar[list[np.ndarray] | None] = contextvars.ContextVar(
    "relu_patterns", default=None
)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Function:
    """Base class for a differentiable primitive.

    Subclasses implement forward() on raw arrays and backward(), which receives
    dL/d(output) and returns one gradient (or None) per input, in input order.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **params: Any) -> "Tensor":
        """Run the primitive and wrap its result, recording it when gradients are needed.

        Args:
            *inputs: Input tensors.
            **params: Non-tensor parameters forwarded to the constructor.

        Returns:
            The output tensor; tracked (requires_grad) iff any input is tracked and
            recording is enabled.
        """
        func = cls(*inputs, **params)
        out = func.forward(*(t.data for t in inputs))
        tracked = grad_enabled() and any(t.requires_grad for t in inputs)
        creator = func if tracked else None
        return Tensor(out, requires_grad=tracked, creator=creator, op=cls.__name__, copy=False)


class Tensor:
    """Dense n-dimensional float64 array with optional gradient.

    Attributes:
        data: Contiguous float64 array, row-major.
        requires_grad: True for trainable leaves and for tracked intermediates.
        grad: Accumulated gradient for leaves, same shape as data, or None.
        creator: Function that produced this tensor (None for leaves).
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Function | None = None,
        op: str | None = None,
        copy: bool = True,
    ):
        # np.array keeps 0-d results 0-d; only op outputs may skip the copy
        if copy:
            array = np.array(data, dtype=np.float64, order="C")
        else:
            array = np.asarray(data, dtype=np.float64, order="C")
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"tensor dimensions must be positive, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            where = f" produced by {op}" if op else ""
            raise NumericsError(f"non-finite value in tensor{where}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.creator = creator

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


# ============================================================================
# Primitives
# ============================================================================


def _require_same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


class MatMul(Function):
    """Matrix product for (m×k)@(k×n), (m×k)@(k,) and batched (b×m×k)@(b×k×n)."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        match (a.ndim, b.ndim):
            case (2, 2) | (2, 1):
                ok = a.shape[1] == b.shape[0]
            case (3, 3):
                ok = a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
            case _:
                ok = False
        if not ok:
            raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, b = self.a, self.b
        if b.ndim == 1:
            return np.outer(grad, b), a.T @ grad
        if a.ndim == 3:
            return grad @ np.swapaxes(b, 1, 2), np.swapaxes(a, 1, 2) @ grad
        return grad @ b.T, a.T @ grad


class Transpose(Function):
    """Swap the last two axes."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dimensions, got shape {x.shape}")
        return np.swapaxes(x, -1, -2)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.swapaxes(grad, -1, -2),)


class Reshape(Function):
    def __init__(self, x: "Tensor", *, shape: tuple[int, ...]):
        super().__init__(x)
        self.shape = shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        if int(np.prod(self.shape)) != x.size:
            raise ShapeError(f"cannot reshape {x.shape} into {self.shape}")
        self.original = x.shape
        return x.reshape(self.shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.reshape(self.original),)


class Permute(Function):
    def __init__(self, x: "Tensor", *, axes: tuple[int, ...]):
        super().__init__(x)
        self.axes = axes

    def forward(self, x: np.ndarray) -> np.ndarray:
        if sorted(self.axes) != list(range(x.ndim)):
            raise ShapeError(f"axes {self.axes} are not a permutation for shape {x.shape}")
        return np.transpose(x, self.axes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _require_same_shape("add", a, b)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, grad


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _require_same_shape("sub", a, b)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, -grad


class Mul(Function):
    """Elementwise product of equal-shape tensors."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _require_same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad * self.b, grad * self.a


class Scale(Function):
    def __init__(self, x: "Tensor", *, factor: float):
        super().__init__(x)
        self.factor = factor

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x * self.factor

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.factor,)


class AddBias(Function):
    """Add a length-n vector to every row of a (..., n) tensor."""

    def forward(self, x: np.ndarray, bias: np.ndarray) -> np.ndarray:
        if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
            raise ShapeError(f"add_bias: bias {bias.shape} does not fit rows of {x.shape}")
        return x + bias

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, grad.reshape(-1, grad.shape[-1]).sum(axis=0)


class Relu(Function):
    """max(0, x); the subgradient at 0 is 0."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.active = x > 0
        patterns = _relu_patterns.get()
        if patterns is not None:
            patterns.append(self.active)
        return np.where(self.active, x, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.where(self.active, grad, 0.0),)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = expit(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.out * (1.0 - self.out),)


class SoftmaxRows(Function):
    """Softmax over the last axis with optional boolean mask (False = excluded).

    Excluded entries get probability exactly 0 and no gradient. Every row must keep
    at least one entry.
    """

    def __init__(self, x: "Tensor", *, mask: np.ndarray | None = None):
        super().__init__(x)
        self.mask = mask

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim < 1:
            raise ShapeError("softmax_rows needs at least one axis")
        if self.mask is None:
            shifted = x - x.max(axis=-1, keepdims=True)
            weights = np.exp(shifted)
        else:
            if self.mask.shape != x.shape:
                raise ShapeError(f"softmax mask {self.mask.shape} does not match {x.shape}")
            if not np.all(self.mask.any(axis=-1)):
                raise NumericsError("softmax_rows: a row has every entry masked")
            row_max = np.where(self.mask, x, -np.inf).max(axis=-1, keepdims=True)
            weights = np.where(self.mask, np.exp(np.where(self.mask, x - row_max, 0.0)), 0.0)
        self.out = weights / weights.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        p = self.out
        return (p * (grad - (grad * p).sum(axis=-1, keepdims=True)),)


class LayerNorm(Function):
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""

    def forward(self, x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
        n = x.shape[-1]
        if gain.shape != (n,) or bias.shape != (n,):
            raise ShapeError(
                f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {n}"
            )
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
        self.xhat = (x - mean) * self.inv_std
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        n = grad.shape[-1]
        rows = grad.reshape(-1, n)
        grad_gain = (rows * self.xhat.reshape(-1, n)).sum(axis=0)
        grad_bias = rows.sum(axis=0)
        dxhat = grad * self.gain
        grad_x = (
            self.inv_std
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
            )
        )
        return grad_x, grad_gain, grad_bias


class ReduceSum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.full(self.shape, float(grad)),)


class ReduceMean(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.mean())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.full(self.shape, float(grad) / int(np.prod(self.shape))),)


class MseLoss(Function):
    """Mean of squared differences; gradient 2(pred - target)/n."""

    def forward(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        _require_same_shape("mse_loss", pred, target)
        self.diff = pred - target
        return np.asarray(np.mean(self.diff**2))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        g = float(grad) * 2.0 * self.diff / self.diff.size
        return g, -g


class TakeRows(Function):
    """Gather rows of a 2-D table by integer index (embedding lookup)."""

    def __init__(self, table: "Tensor", *, indices: np.ndarray):
        super().__init__(table)
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1)

    def forward(self, table: np.ndarray) -> np.ndarray:
        if table.ndim != 2:
            raise ShapeError(f"take_rows needs a 2-D table, got shape {table.shape}")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= table.shape[0]):
            raise ShapeError(f"take_rows: index out of range for {table.shape[0]} rows")
        self.rows = table.shape
        return table[self.indices]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        out = np.zeros(self.rows)
        np.add.at(out, self.indices, grad)
        return (out,)


# ============================================================================
# Functional API
# ============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def transpose(x: Tensor) -> Tensor:
    return Transpose.apply(x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(int(d) for d in shape))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(x, axes=tuple(axes))


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    return AddBias.apply(x, bias)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; rows sum to 1 and are computed with max subtraction."""
    return SoftmaxRows.apply(x, mask=None if mask is None else np.asarray(mask, dtype=bool))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return LayerNorm.apply(x, gain, bias)


def reduce_sum(x: Tensor) -> Tensor:
    return ReduceSum.apply(x)


def reduce_mean(x: Tensor) -> Tensor:
    return ReduceMean.apply(x)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error between equal-shape tensors.

    Raises:
        ShapeError: If the shapes differ.
    """
    return MseLoss.apply(pred, target)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    return TakeRows.apply(table, indices=indices)


# ============================================================================
# Backward pass
# ============================================================================


@dataclass
class Tape:
    """Tracked tensors reachable from an output, inputs always before their consumers."""

    nodes: list[Tensor]

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, children_done = stack.pop()
            if id(node) in visited:
                continue
            if children_done:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        """Propagate seed from the last node back to every tracked leaf."""
        pending: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                node.accumulate_grad(grad)
                continue
            for parent, parent_grad in zip(
                node.creator.inputs, node.creator.backward(grad), strict=True
            ):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf that loss depends on.

    Raises:
        NumericsError: If loss is not a scalar (shape ()).
    """
    if loss.ndim != 0:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward on an untracked loss: no trainable inputs")
        return
    Tape.trace(loss).backward(np.ones(()))


def _evaluate_recording(
    f: Callable[[Tensor], Tensor], x: Tensor
) -> tuple[float, list[np.ndarray]]:
    token = _relu_patterns.set([])
    try:
        with no_grad():
            value = f(x)
        patterns = _relu_patterns.get() or []
    finally:
        _relu_patterns.reset(token)
    if value.ndim != 0:
        raise NumericsError(f"finite_diff_check needs a scalar function, got shape {value.shape}")
    return value.item(), patterns


def _same_patterns(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b, strict=True))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of f at x with central differences.

    Relative error per coordinate is max(|a - n| - r, 0) / max(|a|, |n|, 1e-12), where
    r = 1024 ulp(f) / eps is the rounding noise of the central difference. Tiny
    gradients are thus checked relatively, not against an absolute floor. A coordinate
    is skipped when some relu changes its activation pattern between x + eps*e_i and
    x - eps*e_i, since the function is not differentiable across that kink.

    Args:
        f: Scalar-valued function rebuilding its graph from x on every call.
        x: Leaf tensor with requires_grad=True; perturbed in place and restored.
        eps: Step size in (0, 1e-2].

    Returns:
        The largest relative error over the checked coordinates (0.0 if none).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    if not x.requires_grad or not x.is_leaf:
        raise NumericsError("finite_diff_check needs a leaf tensor with requires_grad=True")

    x.zero_grad()
    out = f(x)
    if out.ndim != 0:
        raise NumericsError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    worst = 0.0
    skipped = 0
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus, plus_pattern = _evaluate_recording(f, x)
        flat[i] = original - eps
        minus, minus_pattern = _evaluate_recording(f, x)
        flat[i] = original
        if not _same_patterns(plus_pattern, minus_pattern):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * eps)
        noise = FINITE_DIFF_NOISE_ULPS * float(np.spacing(max(abs(plus), abs(minus)))) / eps
        scale_i = max(abs(analytic[i]), abs(numeric), FINITE_DIFF_MIN_SCALE)
        err = max(abs(analytic[i] - numeric) - noise, 0.0) / scale_i
        worst = max(worst, err)
    if skipped:
        logger.debug("finite_diff_check skipped %d coordinate(s) at relu kinks", skipped)
    return worst
