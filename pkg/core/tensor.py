"""Dense tensors with reverse-mode gradients over registered leaves.

Each differentiable operation is a ``Function`` subclass with a numpy
``forward`` and a ``backward`` that maps the output gradient onto its inputs.
Applying a function to tensors that track gradients records the function on
the output, so the graph is the chain of ``_ctx`` links back to the leaves.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
LOG_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]


class TensorError(Exception):
    """Base exception for tensor operations."""
    pass


class ShapeError(TensorError):
    """Raised when operand shapes are incompatible."""
    pass


class ParameterError(TensorError):
    """Raised when an operation parameter is out of its valid range."""
    pass


class GradientContractError(TensorError):
    """Raised when backward is called outside of its contract."""
    pass


class NonFiniteError(TensorError):
    """Raised when a tensor holds NaN or Inf values."""
    pass


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        """Run the forward pass and record the function when any input tracks gradients.

        Args:
            *inputs: Input tensors
            **kwargs: Non-tensor parameters of the operation

        Returns:
            Output tensor
        """
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        tracks = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=tracks, _ctx=fn if tracks else None)


class Tensor:
    """Dense n-dimensional real array with optional gradient tracking.

    Tensors are treated as immutable values: operations and optimizer steps
    create new tensors instead of writing into ``data``. A tensor created
    with ``requires_grad=True`` and no producing function is a leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Any = None,
                 name: Optional[str] = None, _ctx: Optional[Function] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[Tensor] = None
        self._ctx = _ctx
        self.name = name

    # -- properties -------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        """Return the underlying array (do not modify it)."""
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing the same data."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def as_leaf(self) -> "Tensor":
        """Return a fresh gradient leaf sharing the same data."""
        return Tensor(self.data, requires_grad=True, name=self.name)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        kind = "leaf" if self.requires_grad and self.is_leaf else ("tracked" if self.requires_grad else "const")
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {kind})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, _lift(other, self.dtype))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(_lift(other, self.dtype), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, _lift(other, self.dtype))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(_lift(other, self.dtype), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, _lift(other, self.dtype))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(_lift(other, self.dtype), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, _lift(other, self.dtype))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(_lift(other, self.dtype), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # -- reductions and shape ops ----------------------------------------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return log_floor(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)


def _lift(value: ArrayLike, dtype: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def as_tensor(value: ArrayLike, dtype: Any = None) -> Tensor:
    """Wrap a value as a constant tensor (tensors pass through unchanged)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        ga = grad / b.data
        gb = -grad * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent):
        self.exponent = exponent
        return a ** exponent

    def backward(self, grad):
        (a,) = self.inputs
        return (grad * self.exponent * a.data ** (self.exponent - 1.0),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class LogFloor(Function):
    """Natural log of ``max(x, floor)``; no gradient flows where the floor is active."""

    def forward(self, a, floor):
        self.active = a > floor
        return np.log(np.where(self.active, a, floor))

    def backward(self, grad):
        (a,) = self.inputs
        safe = np.where(self.active, a.data, 1.0)
        return (np.where(self.active, grad / safe, 0.0),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Gelu(Function):
    """Tanh-approximated GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""

    def forward(self, x):
        inner = _GELU_C * (x + 0.044715 * x ** 3)
        self.t = np.tanh(inner)
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        (x,) = self.inputs
        x = x.data
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        local = 0.5 * (1.0 + self.t) + 0.5 * x * (1.0 - self.t * self.t) * d_inner
        return (grad * local,)


# ---------------------------------------------------------------------------
# Linear algebra, reductions, shape
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (_unbroadcast(grad, self.inputs[0].shape),)


class GetItem(Function):
    def forward(self, a, index):
        self.index = index
        return a[index]

    def backward(self, grad):
        (a,) = self.inputs
        full = np.zeros_like(a.data)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------

class SoftmaxTemp(Function):
    def forward(self, z, tau):
        self.tau = tau
        scaled = z / tau
        shifted = scaled - scaled.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        inner = (grad * y).sum(axis=-1, keepdims=True)
        return (y * (grad - inner) / self.tau,)


class LogSoftmax(Function):
    def forward(self, z):
        shifted = z - z.max(axis=-1, keepdims=True)
        self.lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - self.lse
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=-1, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.rstd
        return self.xhat * gamma + beta

    def backward(self, grad):
        x, gamma, beta = self.inputs
        lead = tuple(range(grad.ndim - 1))
        g_gamma = (grad * self.xhat).sum(axis=lead)
        g_beta = grad.sum(axis=lead)
        dxhat = grad * gamma.data
        gx = self.rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma.reshape(gamma.shape), g_beta.reshape(beta.shape)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., p, q] @ b[..., q, r]``.

    Raises:
        ShapeError: If inner dimensions differ or batch dimensions do not broadcast
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} x {b.shape}")
    return MatMul.apply(a, b)


def softmax_temp(z: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax of ``z / tau`` along the last axis, computed with max-subtraction.

    Raises:
        ParameterError: If ``tau`` is not positive
    """
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    return SoftmaxTemp.apply(as_tensor(z), tau=float(tau))


def log_softmax(z: Tensor) -> Tensor:
    return LogSoftmax.apply(as_tensor(z))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Raises:
        ParameterError: If ``eps`` is not positive
        ShapeError: If gamma/beta do not match the normalized axis
    """
    if not eps > 0:
        raise ParameterError(f"layer norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer norm affine shapes {gamma.shape}, {beta.shape} do not match input {x.shape}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(as_tensor(x))


def log_floor(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    return LogFloor.apply(as_tensor(x), floor=floor)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return Concat.apply(*tensors, axis=axis)


def check_finite(tensor: Tensor, name: str = "tensor") -> None:
    """Raise NonFiniteError when ``tensor`` holds NaN or Inf."""
    if not tensor.is_finite():
        bad = int(np.size(tensor.data) - np.count_nonzero(np.isfinite(tensor.data)))
        raise NonFiniteError(f"{name} has {bad} non-finite value(s) (shape {tensor.shape})")


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Registered gradient targets of a backward pass.

    Nodes are not stored eagerly: ``nodes(loss)`` walks the recorded functions
    from the loss and returns them in topological order.
    """
    leaves: List[Tensor] = field(default_factory=list)

    def register(self, tensor: Tensor) -> Tensor:
        """Register a leaf tensor as a gradient target.

        Raises:
            GradientContractError: If the tensor is not a gradient leaf
        """
        if not tensor.requires_grad or not tensor.is_leaf:
            raise GradientContractError(f"only gradient leaves can be registered, got {tensor!r}")
        if not any(t is tensor for t in self.leaves):
            self.leaves.append(tensor)
        return tensor

    def register_all(self, tensors: Iterable[Tensor]) -> "ComputeGraph":
        for tensor in tensors:
            self.register(tensor)
        return self

    def nodes(self, loss: Tensor) -> List[Tensor]:
        """Tensors reachable from ``loss`` in topological order (inputs first)."""
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            if tensor._ctx is not None:
                for parent in tensor._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order


def backward(loss: Tensor, graph: ComputeGraph) -> Dict[Tensor, Tensor]:
    """Compute d(loss)/d(leaf) for every registered leaf.

    The pass is pure: calling it again on the same graph re-derives identical
    values. Leaves unreachable from the loss get a zero gradient.

    Args:
        loss: Scalar loss tensor
        graph: Graph holding the registered leaves

    Returns:
        Mapping from each registered leaf to its gradient tensor

    Raises:
        GradientContractError: If the loss is not scalar or no leaf is registered
    """
    if loss.data.size != 1:
        raise GradientContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.leaves:
        raise GradientContractError("backward needs at least one registered leaf")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(graph.nodes(loss)):
            upstream = grads.get(id(node))
            if upstream is None or node._ctx is None:
                continue
            parent_grads = node._ctx.backward(upstream)
            for parent, pgrad in zip(node._ctx.inputs, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pgrad
                else:
                    grads[key] = pgrad
            if node is not loss:
                # intermediate gradients are not exposed
                del grads[id(node)]

    result: Dict[Tensor, Tensor] = {}
    for leaf in graph.leaves:
        value = grads.get(id(leaf))
        if value is None:
            value = np.zeros_like(leaf.data)
        grad = Tensor(np.asarray(value, dtype=leaf.dtype).reshape(leaf.shape))
        leaf.grad = grad
        result[leaf] = grad
    return result


def finite_diff_gradient(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central finite-difference gradient of a scalar function.

    Args:
        f: Function of one tensor returning a scalar tensor or float
        x: Point to differentiate at
        h: Step size

    Returns:
        Tensor of (f(x + h·e_i) − f(x − h·e_i)) / 2h per element

    Raises:
        ParameterError: If ``h`` is not positive
    """
    if not h > 0:
        raise ParameterError(f"finite difference step must be positive, got {h}")
    base = np.array(x.data, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)

    def evaluate(arr: np.ndarray) -> float:
        value = f(Tensor(arr.reshape(base.shape)))
        return value.item() if isinstance(value, Tensor) else float(value)

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = evaluate(flat.copy())
        flat[i] = original - h
        minus = evaluate(flat.copy())
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return Tensor(grad)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric relative error ``‖a − b‖ / max(‖a‖ + ‖b‖, tiny)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)
