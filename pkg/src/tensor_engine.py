"""
Tensor Engine for ConvNova

Dense numpy-backed tensors with a reverse-mode gradient tape. Provides exactly
the operations needed to train ConvNova: dilated (and strided) 1D convolution,
layer norm, GELU, sigmoid, affine maps, pooling and the training losses.

Tensors are rank 0-3 and row-major. Sequence tensors are laid out as
``[..., length, channels]`` so every op also accepts one leading batch axis.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special, stats

from src.errors import NumericalError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}
MAX_RANK = 3
LAYER_NORM_EPS = 1e-5
GRAD_CHECK_FLOOR = 1e-3
_SQRT_2PI = math.sqrt(2.0 * math.pi)

_default_dtype = np.float32


def get_default_dtype() -> type:
    """Return the numpy dtype new tensors are created with."""
    return _default_dtype


def set_default_dtype(name: str) -> None:
    """
    Set the dtype new tensors are created with.

    Args:
        name: 'float32' (training) or 'float64' (gradient checks)
    """
    global _default_dtype
    if name not in DTYPES:
        raise PreconditionError(f"Unknown precision {name!r}; expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default dtype."""
    global _default_dtype
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = previous


class Rng:
    """Seeded deterministic generator (PCG64, identical draws on every platform)."""

    def __init__(self, seed: int, stream: Optional[int] = None):
        """
        Initialize the generator.

        Args:
            seed: Non-negative integer seed
            stream: Optional sub-stream key; (seed, stream) pairs give independent draws
        """
        self.seed = int(seed)
        self.stream = stream
        entropy = self.seed if stream is None else [self.seed, int(stream)]
        self._generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def normal(self, shape: Tuple[int, ...], std: float = 1.0, dtype: Optional[type] = None) -> np.ndarray:
        values = self._generator.normal(0.0, std, size=shape)
        return values.astype(dtype or _default_dtype)

    def truncated_normal(self, shape: Tuple[int, ...], std: float, bound: float = 2.0,
                         dtype: Optional[type] = None) -> np.ndarray:
        """Normal(0, std^2) truncated at +/- bound * std."""
        values = stats.truncnorm(-bound, bound, loc=0.0, scale=std).rvs(
            size=shape, random_state=self._generator
        )
        return np.asarray(values).astype(dtype or _default_dtype)

    def integers(self, low: int, high: int, size: Any = None) -> Any:
        return self._generator.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)


class Tensor:
    """A dense array plus optional linkage to a gradient tape."""

    def __init__(self, data: Any, dtype: Optional[type] = None):
        """
        Initialize a tensor (the data is copied).

        Args:
            data: Array-like numeric data of rank 0-3
            dtype: numpy float dtype; defaults to the current precision
        """
        array = np.array(data, dtype=dtype or _default_dtype)
        if array.ndim > MAX_RANK:
            raise ShapeError(f"Tensors have rank <= {MAX_RANK}, got shape {array.shape}")
        self.data = array
        self.grad_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.grad_id = None
        tensor.tape = None
        return tensor

    @classmethod
    def zeros(cls, shape: Tuple[int, ...], dtype: Optional[type] = None) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=dtype or _default_dtype))

    @classmethod
    def ones(cls, shape: Tuple[int, ...], dtype: Optional[type] = None) -> "Tensor":
        return cls._wrap(np.ones(shape, dtype=dtype or _default_dtype))

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
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype: type) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __repr__(self) -> str:
        tracked = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"


class Function:
    """
    Base class for differentiable operations.

    ``forward`` receives numpy arrays and may stash whatever ``backward`` needs
    on ``self``; ``backward`` maps the output gradient to one gradient (or
    None) per tensor input.
    """

    kind = "function"

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        """Run the forward pass and record the node if any input is taped."""
        function = cls()
        out_data = function.forward(*(tensor.data for tensor in tensors), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise NumericalError(f"{cls.kind} produced non-finite values")
        out = Tensor._wrap(out_data)
        tape = _shared_tape(tensors)
        if tape is not None:
            tape.record(function, tensors, out)
        return out


def _shared_tape(tensors: Sequence[Tensor]) -> Optional["Tape"]:
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise PreconditionError("Operation mixes tensors from different tapes")
    return next(iter(tapes.values()), None)


@dataclass
class TapeNode:
    """One recorded operation (or a watched leaf when ``function`` is None)."""

    node_id: int
    kind: str
    inputs: Tuple[Optional[int], ...]
    function: Optional[Function] = None


class Gradients(dict):
    """Gradient map from tape node id to gradient tensor."""

    def of(self, tensor: Tensor) -> Tensor:
        """
        Gradient for a tensor watched on the tape.

        Returns:
            The gradient, or zeros when the loss does not depend on the tensor
        """
        if tensor.grad_id is None:
            raise PreconditionError(f"{tensor!r} is not tracked by a tape")
        grad = self.get(tensor.grad_id)
        if grad is None:
            return Tensor.zeros(tensor.shape, dtype=tensor.dtype)
        return grad


class Tape:
    """
    Records operations in execution order.

    Nodes are appended as they run, so the node list is already a topological
    order; backward walks it in reverse and visits each node once. Use it as a
    context manager so watched tensors are released on exit.
    """

    def __init__(self):
        """Initialize an empty tape."""
        self.nodes: List[TapeNode] = []
        self._tracked: List[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.release()

    def watch(self, tensor: Tensor) -> Tensor:
        """
        Make a tensor a gradient leaf of this tape.

        Args:
            tensor: Tensor to track (rebinding a tensor from an older tape is allowed)

        Returns:
            The same tensor, now carrying a grad_id
        """
        if tensor.tape is self:
            return tensor
        node = TapeNode(node_id=len(self.nodes), kind="leaf", inputs=())
        self.nodes.append(node)
        tensor.grad_id = node.node_id
        tensor.tape = self
        self._tracked.append(tensor)
        return tensor

    def record(self, function: Function, inputs: Sequence[Tensor], out: Tensor) -> None:
        input_ids = tuple(t.grad_id if t.tape is self else None for t in inputs)
        node = TapeNode(node_id=len(self.nodes), kind=function.kind, inputs=input_ids, function=function)
        self.nodes.append(node)
        out.grad_id = node.node_id
        out.tape = self
        self._tracked.append(out)

    def release(self) -> None:
        """Detach every tensor this tape tracked and drop saved values."""
        for tensor in self._tracked:
            if tensor.tape is self:
                tensor.tape = None
                tensor.grad_id = None
        self._tracked = []
        self.nodes = []

    def backward(self, loss: Tensor) -> Gradients:
        """
        Reverse-mode pass from a scalar loss.

        Args:
            loss: Scalar tensor produced on this tape

        Returns:
            Gradients of the loss for every tape node the loss depends on
        """
        if loss.tape is not self or loss.grad_id is None:
            raise PreconditionError("Loss is not connected to this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.grad_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.grad_id + 1]):
            grad = grads.get(node.node_id)
            if grad is None or node.function is None:
                continue
            input_grads = node.function.backward(grad)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_id is None or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad
        return Gradients({node_id: Tensor._wrap(g) for node_id, g in grads.items()})


def backward(loss: Tensor) -> Gradients:
    """Backward pass on the tape the loss was recorded on."""
    if loss.tape is None:
        raise PreconditionError("Loss is not connected to any tape")
    return loss.tape.backward(loss)


def _as_tensor(value: Union[Tensor, np.ndarray, float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _require_same_shape(kind: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{kind} needs equal shapes, got {x.shape} and {y.shape}")


# ----------------------------------------------------------------------------
# Operations
# ----------------------------------------------------------------------------


class Conv1d(Function):
    kind = "conv1d"

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1,
                stride: int = 1, padding: int = 0) -> np.ndarray:
        k, c_in, c_out = w.shape
        pad_width = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (0, 0)]
        xp = np.pad(x, pad_width)
        l_in = x.shape[-2]
        l_out = (l_in + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        span = stride * (l_out - 1) + 1

        out = np.zeros(x.shape[:-2] + (l_out, c_out), dtype=np.result_type(x, w))
        for j in range(k):
            start = j * dilation
            out += xp[..., start:start + span:stride, :] @ w[j]
        out += b

        self.xp, self.w = xp, w
        self.l_in, self.l_out, self.span = l_in, l_out, span
        self.dilation, self.stride, self.padding = dilation, stride, padding
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        k, c_in, c_out = self.w.shape
        flat_grad = grad.reshape(-1, c_out)
        dxp = np.zeros_like(self.xp)
        dw = np.empty_like(self.w)
        for j in range(k):
            taps = slice(j * self.dilation, j * self.dilation + self.span, self.stride)
            dw[j] = self.xp[..., taps, :].reshape(-1, c_in).T @ flat_grad
            dxp[..., taps, :] += grad @ self.w[j].T
        db = flat_grad.sum(axis=0)
        dx = dxp[..., self.padding:self.padding + self.l_in, :]
        return dx, dw, db


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor) -> None:
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d input must be [l, c_in] or [batch, l, c_in], got {x.shape}")
    if w.ndim != 3:
        raise ShapeError(f"conv1d weight must be [k, c_in, c_out], got {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d input has {x.shape[-1]} channels, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d bias must be [{c_out}], got {b.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")


def conv1d(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """
    Same-length dilated 1D convolution.

    out[t, o] = b[o] + sum_{j,i} w[j, i, o] * x_padded[t + j*dilation, i], with
    symmetric zero padding of dilation*(k-1)/2 so the output keeps the input length.

    Args:
        x: Input [l, c_in] (or [batch, l, c_in])
        w: Kernel [k, c_in, c_out] with k odd
        b: Bias [c_out]
        dilation: Tap spacing >= 1

    Returns:
        Tensor [l, c_out] (or [batch, l, c_out])
    """
    _check_conv_shapes(x, w, b)
    if int(dilation) < 1:
        raise ShapeError(f"conv1d dilation must be >= 1, got {dilation}")
    padding = int(dilation) * (w.shape[0] - 1) // 2
    return Conv1d.apply(x, w, b, dilation=int(dilation), stride=1, padding=padding)


def conv1d_strided(x: Tensor, w: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """
    Downsampling convolution (dilation 1) producing ceil(l / stride) positions.

    Args:
        x: Input [l, c_in] (or batched)
        w: Kernel [k, c_in, c_out] with k odd
        b: Bias [c_out]
        stride: Step between output positions

    Returns:
        Tensor [ceil(l / stride), c_out]
    """
    _check_conv_shapes(x, w, b)
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    return Conv1d.apply(x, w, b, dilation=1, stride=int(stride), padding=(w.shape[0] - 1) // 2)


class LayerNorm(Function):
    kind = "layer_norm"

    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
        centered = x - x.mean(axis=-1, keepdims=True)
        variance = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(variance + eps)
        self.x_hat = centered * self.inv_std
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.x_hat.shape[-1]
        g_hat = grad * self.gamma
        dx = self.inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - self.x_hat * (g_hat * self.x_hat).mean(axis=-1, keepdims=True)
        )
        dgamma = (grad * self.x_hat).reshape(-1, d).sum(axis=0)
        dbeta = grad.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalize each position over the channel axis, then scale and shift.

    Args:
        x: Input [..., d]
        gamma: Scale [d]
        beta: Shift [d]
        eps: Variance floor

    Returns:
        Tensor shaped like x
    """
    d = x.shape[-1] if x.ndim else 0
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm over {x.shape} needs gamma/beta [{d}], got {gamma.shape}/{beta.shape}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class Gelu(Function):
    kind = "gelu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.cdf = special.ndtr(x)
        return x * self.cdf

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        pdf = np.exp(-0.5 * self.x * self.x) / _SQRT_2PI
        return (grad * (self.cdf + self.x * pdf),)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    return Gelu.apply(_as_tensor(x))


class Sigmoid(Function):
    kind = "sigmoid"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = special.expit(x)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.out * (1.0 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function 1 / (1 + exp(-x))."""
    return Sigmoid.apply(_as_tensor(x))


class Add(Function):
    kind = "add"

    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return x + y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, grad


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two equally shaped tensors."""
    x, y = _as_tensor(x), _as_tensor(y)
    _require_same_shape("add", x, y)
    return Add.apply(x, y)


class Subtract(Function):
    kind = "subtract"

    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return x - y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, -grad


def subtract(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise difference of two equally shaped tensors."""
    x, y = _as_tensor(x), _as_tensor(y)
    _require_same_shape("subtract", x, y)
    return Subtract.apply(x, y)


class Hadamard(Function):
    kind = "hadamard"

    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.x, self.y = x, y
        return x * y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad * self.y, grad * self.x


def hadamard(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of two equally shaped tensors."""
    x, y = _as_tensor(x), _as_tensor(y)
    _require_same_shape("hadamard", x, y)
    return Hadamard.apply(x, y)


class Affine(Function):
    kind = "affine"

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_in, d_out = self.w.shape
        flat_grad = grad.reshape(-1, d_out)
        dx = grad @ self.w.T
        dw = self.x.reshape(-1, d_in).T @ flat_grad
        db = flat_grad.sum(axis=0)
        return dx, dw, db


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    Linear map over the last axis, x @ w + b.

    Args:
        x: Input [..., d_in]
        w: Weight [d_in, d_out]
        b: Bias [d_out]

    Returns:
        Tensor [..., d_out]
    """
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine cannot map {x.shape} with weight {w.shape} and bias {b.shape}")
    return Affine.apply(x, w, b)


class MeanPool(Function):
    kind = "mean_pool"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return x.mean(axis=-2)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        length = self.shape[-2]
        expanded = np.expand_dims(grad / length, axis=-2)
        return (np.broadcast_to(expanded, self.shape).copy(),)


def mean_pool(x: Tensor) -> Tensor:
    """Average over the position axis: [..., l, d] -> [..., d]."""
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"mean_pool needs at least one position, got shape {x.shape}")
    return MeanPool.apply(x)


class UpsampleNearest(Function):
    kind = "upsample_nearest"

    def forward(self, x: np.ndarray, factor: int = 2) -> np.ndarray:
        self.factor = factor
        self.shape = x.shape
        return np.repeat(x, factor, axis=-2)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        length, channels = self.shape[-2], self.shape[-1]
        grouped = grad.reshape(self.shape[:-2] + (length, self.factor, channels))
        return (grouped.sum(axis=-2),)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every position ``factor`` times along the position axis."""
    if x.ndim < 2 or factor < 1:
        raise ShapeError(f"upsample_nearest needs [..., l, d] and factor >= 1, got {x.shape}, {factor}")
    return UpsampleNearest.apply(x, factor=int(factor))


class ReduceSum(Function):
    kind = "reduce_sum"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.full(self.shape, grad, dtype=grad.dtype),)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return ReduceSum.apply(_as_tensor(x))


class MaskedCrossEntropy(Function):
    kind = "masked_cross_entropy"

    def forward(self, logits: np.ndarray, targets: Optional[np.ndarray] = None,
                mask: Optional[np.ndarray] = None) -> np.ndarray:
        log_probs = special.log_softmax(logits, axis=-1)
        picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
        self.count = int(mask.sum())
        self.log_probs, self.targets, self.mask = log_probs, targets, mask
        return np.asarray(-picked[mask].sum() / self.count, dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        dlogits = np.exp(self.log_probs)
        np.put_along_axis(
            dlogits,
            self.targets[..., None],
            np.take_along_axis(dlogits, self.targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        scale = self.mask[..., None].astype(dlogits.dtype) / self.count
        return (dlogits * scale * grad,)


def masked_cross_entropy(logits: Tensor, targets: Any, mask: Any) -> Tensor:
    """
    Mean softmax cross entropy over masked positions.

    Args:
        logits: Scores [..., C]
        targets: Integer class indices shaped like logits without the class axis
        mask: Booleans shaped like targets; unmasked positions contribute nothing

    Returns:
        Scalar tensor
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    expected = logits.shape[:-1]
    if targets.shape != expected or mask.shape != expected:
        raise ShapeError(
            f"masked_cross_entropy over logits {logits.shape} needs targets/mask {expected}, "
            f"got {targets.shape}/{mask.shape}"
        )
    if not mask.any():
        raise PreconditionError("masked_cross_entropy needs at least one masked position")
    n_classes = logits.shape[-1]
    masked_targets = targets[mask]
    if masked_targets.min() < 0 or masked_targets.max() >= n_classes:
        raise PreconditionError(f"Targets must lie in [0, {n_classes})")
    # Unmasked targets may hold placeholders; point them at class 0.
    safe_targets = np.where(mask, targets, 0)
    return MaskedCrossEntropy.apply(logits, targets=safe_targets, mask=mask)


class SigmoidCrossEntropy(Function):
    kind = "sigmoid_cross_entropy"

    def forward(self, logits: np.ndarray, targets: Optional[np.ndarray] = None) -> np.ndarray:
        self.logits, self.targets = logits, targets
        losses = np.logaddexp(0.0, logits) - targets * logits
        return np.asarray(losses.mean(), dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return ((special.expit(self.logits) - self.targets) * (grad / self.logits.size),)


def sigmoid_cross_entropy(logits: Tensor, targets: Any) -> Tensor:
    """Mean binary cross entropy of independent sigmoid outputs (multi-label tasks)."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"sigmoid_cross_entropy needs targets {logits.shape}, got {targets.shape}")
    return SigmoidCrossEntropy.apply(logits, targets=targets)


# ----------------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------------


def _project(out: Tensor, projection: Optional[Tensor]) -> Tensor:
    if projection is None:
        return out if out.ndim == 0 else reduce_sum(out)
    return reduce_sum(hadamard(out, projection))


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Union[Tensor, np.ndarray]],
               h: float = 1e-5, seed: int = 0) -> float:
    """
    Compare tape gradients against central finite differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element takes part. Runs entirely in 64-bit.

    Args:
        f: Function of tensors returning a tensor
        inputs: Points at which to check
        h: Finite-difference step
        seed: Seed of the output projection

    Returns:
        Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
    """
    with precision("float64"):
        base = [np.array(_as_tensor(x).data, dtype=np.float64) for x in inputs]
        with Tape() as tape:
            tracked = [tape.watch(Tensor(array)) for array in base]
            out = f(*tracked)
            projection = None
            if out.ndim > 0:
                projection = Tensor(Rng(seed).normal(out.shape, dtype=np.float64))
            grads = tape.backward(_project(out, projection))
            analytic = [grads.of(t).data.copy() for t in tracked]

        def evaluate(arrays: List[np.ndarray]) -> float:
            value = _project(f(*[Tensor(a) for a in arrays]), projection)
            return float(value.data)

        worst = 0.0
        for i, array in enumerate(base):
            for index in np.ndindex(array.shape):
                shifted = list(base)
                plus = array.copy()
                plus[index] += h
                minus = array.copy()
                minus[index] -= h
                shifted[i] = plus
                f_plus = evaluate(shifted)
                shifted[i] = minus
                f_minus = evaluate(shifted)
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = float(analytic[i][index])
                scale = max(abs(exact), abs(numeric), GRAD_CHECK_FLOOR)
                worst = max(worst, abs(exact - numeric) / scale)
    logger.debug("grad_check max relative error %.3e", worst)
    return worst
