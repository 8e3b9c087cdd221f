"""Dense N-D tensors with reverse-mode differentiation.

Only the operations the segmentation and multi-task networks need are
implemented. Arrays are stored channel-first: ``(batch, channels, *spatial)``
for convolution, pooling and batch-normalisation inputs.

Operations run eagerly. Inside a ``with ComputationGraph() as graph:`` block
every operation touching a tensor that requires gradients is appended to the
graph in execution order, so the node list is already a topological order
and :func:`backward` simply walks it in reverse.
"""
from __future__ import annotations

import contextvars
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from itertools import product
from typing import Any

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
BATCHNORM_MOMENTUM = 0.99
BATCHNORM_EPSILON = 1e-5

_ACTIVE_GRAPH: contextvars.ContextVar[ComputationGraph | None] = (
    contextvars.ContextVar("cardioquant_active_graph", default=None)
)


class Tensor:
    """A dense array plus the bookkeeping needed for differentiation.

    Parameters
    ----------
    data
        Array-like values. Floating arrays keep their precision, anything
        else is converted to ``DEFAULT_DTYPE``.

    requires_grad
        Whether gradients should flow to this tensor.

    name
        Optional name, used for parameters and in error messages.
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        if any(extent == 0 for extent in array.shape):
            msg = f"Zero-extent axis in tensor of shape {array.shape}"
            raise ShapeError(msg)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    def __repr__(self) -> str:
        """Describe shape, dtype and name."""
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} {self.shape} {self.dtype}>"

    @property
    def shape(self) -> tuple[int, ...]:
        """Extents of every axis."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Number of axes."""
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        """Element type of the underlying array."""
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return the underlying array (not a copy)."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        return float(self.data.reshape(-1)[0])

    def _lift(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: Tensor | float) -> Tensor:
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: float) -> Tensor:
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other: float) -> Tensor:
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: float) -> Tensor:
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other: float) -> Tensor:
        return Div.apply(self._lift(other), self)

    def __neg__(self) -> Tensor:
        return Mul.apply(self, self._lift(-1.0))

    def __getitem__(self, index: Any) -> Tensor:
        return Slice.apply(self, index=index)

    def sum(
        self,
        axis: int | Sequence[int] | None = None,
        keepdims: bool = False,
    ) -> Tensor:
        """Sum over the given axes (all axes by default)."""
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(
        self,
        axis: int | Sequence[int] | None = None,
        keepdims: bool = False,
    ) -> Tensor:
        """Average over the given axes (all axes by default)."""
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> Tensor:
        """Reshape without copying data where possible."""
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> Tensor:
        """Permute axes."""
        return Transpose.apply(self, axes=axes)

    def log(self) -> Tensor:
        """Elementwise natural logarithm."""
        return Log.apply(self)

    def clip(self, low: float, high: float) -> Tensor:
        """Clamp values; gradient is zero where clamping was active."""
        return Clip.apply(self, low=low, high=high)


@dataclass
class Node:
    """One recorded operation: the function object and its tensors."""

    op: Function
    inputs: tuple[Tensor, ...]
    output: Tensor


@dataclass
class ComputationGraph:
    """Operations recorded while the graph is active.

    Attributes
    ----------
    nodes
        Operation records in execution order.

    parameters
        Leaf tensors with ``requires_grad`` that fed any recorded node, in
        first-use order.
    """

    nodes: list[Node] = field(default_factory=list)
    parameters: list[Tensor] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set, repr=False)
    _seen: set[int] = field(default_factory=set, repr=False)
    _token: Any = field(default=None, repr=False)

    def __enter__(self) -> ComputationGraph:
        """Make this the graph new operations are recorded on."""
        if _ACTIVE_GRAPH.get() is not None:
            msg = "A computation graph is already active in this context"
            raise GradientError(msg)
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, *_):
        """Stop recording."""
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None

    def record(
        self,
        op: Function,
        inputs: tuple[Tensor, ...],
        output: Tensor,
    ):
        """Append an operation and register any new parameter leaves."""
        for tensor in inputs:
            key = id(tensor)
            if (
                tensor.requires_grad
                and key not in self._produced
                and key not in self._seen
            ):
                self._seen.add(key)
                self.parameters.append(tensor)
        self._produced.add(id(output))
        self.nodes.append(Node(op, inputs, output))


def current_graph() -> ComputationGraph | None:
    """Return the graph active in this context, if any."""
    return _ACTIVE_GRAPH.get()


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which
    maps the gradient of the output to one gradient (or None) per input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        """Compute the output array."""
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        """Return input gradients given the output gradient."""
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        """Run the operation and record it on the active graph."""
        func = cls()
        out = Tensor(func.forward(*(t.data for t in inputs), **kwargs))
        graph = current_graph()
        if graph is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            graph.record(func, inputs, out)
        return out


def _normalize_axes(
    axis: int | Sequence[int] | None,
    ndim: int,
) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    """Broadcasting addition."""

    def forward(self, left, right):
        self.shapes = (left.shape, right.shape)
        return left + right

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(
            grad,
            self.shapes[1],
        )


class Sub(Function):
    """Broadcasting subtraction."""

    def forward(self, left, right):
        self.shapes = (left.shape, right.shape)
        return left - right

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(
            -grad,
            self.shapes[1],
        )


class Mul(Function):
    """Broadcasting elementwise product."""

    def forward(self, left, right):
        self.left, self.right = left, right
        return left * right

    def backward(self, grad):
        return (
            unbroadcast(grad * self.right, self.left.shape),
            unbroadcast(grad * self.left, self.right.shape),
        )


class Div(Function):
    """Broadcasting elementwise quotient."""

    def forward(self, left, right):
        self.left, self.right = left, right
        return left / right

    def backward(self, grad):
        return (
            unbroadcast(grad / self.right, self.left.shape),
            unbroadcast(
                -grad * self.left / (self.right * self.right),
                self.right.shape,
            ),
        )


class Sum(Function):
    """Reduction by summation."""

    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    """Shape change preserving element order."""

    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    """Axis permutation."""

    def forward(self, x, axes):
        self.axes = axes
        return np.ascontiguousarray(np.transpose(x, axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Slice(Function):
    """Basic (view) indexing."""

    def forward(self, x, index):
        self.shape = x.shape
        self.dtype = x.dtype
        self.index = index
        return np.array(x[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        full[self.index] = grad
        return (full,)


class Concat(Function):
    """Concatenation along one axis."""

    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Log(Function):
    """Natural logarithm."""

    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Clip(Function):
    """Clamp into ``[low, high]``."""

    def forward(self, x, low, high):
        self.active = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.active,)


class Relu(Function):
    """Rectified linear unit."""

    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.positive,)


class Sigmoid(Function):
    """Logistic function."""

    def forward(self, x):
        self.out = expit(x).astype(x.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Softmax(Function):
    """Softmax along one axis."""

    def forward(self, x, axis=1):
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        dot = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - dot),)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of an N-D convolution.

    Attributes
    ----------
    kernel
        Kernel extent per spatial axis.

    in_channels, out_channels
        Channel counts of input and output.

    stride, dilation
        Per-axis step between outputs and between kernel taps. Empty means
        one on every axis.

    padding
        ``"same"`` zero-pads so stride-1 outputs keep the input extent;
        ``"valid"`` does not pad.
    """

    kernel: tuple[int, ...]
    in_channels: int
    out_channels: int
    stride: tuple[int, ...] = ()
    dilation: tuple[int, ...] = ()
    padding: str = "same"

    def __post_init__(self):
        """Fill per-axis defaults and check invariants."""
        rank = len(self.kernel)
        if not self.stride:
            object.__setattr__(self, "stride", (1,) * rank)
        if not self.dilation:
            object.__setattr__(self, "dilation", (1,) * rank)
        if not rank == len(self.stride) == len(self.dilation):
            msg = (
                f"kernel {self.kernel}, stride {self.stride} and dilation "
                f"{self.dilation} must have the same rank"
            )
            raise ShapeError(msg)
        if min(self.kernel + self.stride) < 1:
            msg = f"Kernel and stride extents must be >= 1: {self}"
            raise ShapeError(msg)
        if min(self.dilation) < 1:
            msg = f"Dilation must be >= 1 on every axis: {self.dilation}"
            raise ShapeError(msg)
        if min(self.in_channels, self.out_channels) < 1:
            msg = f"Channel counts must be >= 1: {self}"
            raise ShapeError(msg)
        if self.padding not in ("same", "valid"):
            msg = f"Unknown padding mode {self.padding!r}"
            raise ShapeError(msg)

    @property
    def rank(self) -> int:
        """Number of spatial axes."""
        return len(self.kernel)

    def pads(self) -> tuple[tuple[int, int], ...]:
        """Zero padding (before, after) per spatial axis."""
        if self.padding == "valid":
            return ((0, 0),) * self.rank
        totals = [d * (k - 1) for k, d in zip(self.kernel, self.dilation)]
        return tuple((total // 2, total - total // 2) for total in totals)

    def output_extents(self, extents: Sequence[int]) -> tuple[int, ...]:
        """Apply the dilated-convolution size formula per axis."""
        out = []
        for extent, k, s, d, (lo, hi) in zip(
            extents,
            self.kernel,
            self.stride,
            self.dilation,
            self.pads(),
        ):
            span = d * (k - 1) + 1
            size = (extent + lo + hi - span) // s + 1
            if size < 1:
                msg = (
                    f"Kernel span {span} does not fit axis of extent "
                    f"{extent} (padding {lo}+{hi})"
                )
                raise ShapeError(msg)
            out.append(size)
        return tuple(out)


def _windows(
    padded: np.ndarray,
    out_extents: Sequence[int],
    window: Sequence[int],
    stride: Sequence[int],
    dilation: Sequence[int],
) -> np.ndarray:
    """Strided view ``(N, C, *out_extents, *window)`` over ``padded``."""
    spatial = padded.strides[2:]
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(*padded.shape[:2], *out_extents, *window),
        strides=(
            *padded.strides[:2],
            *(st * s for st, s in zip(spatial, stride)),
            *(st * d for st, d in zip(spatial, dilation)),
        ),
        writeable=False,
    )


def _offset_slices(
    offset: Sequence[int],
    out_extents: Sequence[int],
    stride: Sequence[int],
    dilation: Sequence[int],
) -> tuple[slice, ...]:
    """Input positions touched by one kernel tap across all outputs."""
    return (
        slice(None),
        slice(None),
        *(
            slice(k * d, k * d + (o - 1) * s + 1, s)
            for k, o, s, d in zip(offset, out_extents, stride, dilation)
        ),
    )


class Conv(Function):
    """Cross-correlation with stride, dilation and zero padding."""

    def forward(self, x, weights, bias, spec: ConvSpec):
        rank = spec.rank
        self.spec = spec
        self.pads = spec.pads()
        self.in_extents = x.shape[2:]
        self.out_extents = spec.output_extents(self.in_extents)
        self.padded_shape = (
            *x.shape[:2],
            *(n + lo + hi for n, (lo, hi) in zip(x.shape[2:], self.pads)),
        )
        padded = np.pad(x, ((0, 0), (0, 0), *self.pads))
        self.windows = _windows(
            padded,
            self.out_extents,
            spec.kernel,
            spec.stride,
            spec.dilation,
        )
        self.weights = weights
        out = np.tensordot(
            self.windows,
            weights,
            axes=(
                [1, *range(2 + rank, 2 + 2 * rank)],
                [1, *range(2, 2 + rank)],
            ),
        )
        out = np.moveaxis(out, -1, 1)
        out = out + bias.reshape(1, -1, *([1] * rank))
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, grad):
        spec = self.spec
        rank = spec.rank
        reduce_axes = [0, *range(2, 2 + rank)]
        grad_weights = np.tensordot(
            grad,
            self.windows,
            axes=(reduce_axes, reduce_axes),
        )
        grad_bias = grad.sum(axis=tuple(reduce_axes))
        # (N, *out, C_in, *kernel)
        grad_windows = np.tensordot(grad, self.weights, axes=([1], [0]))
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for offset in product(*(range(k) for k in spec.kernel)):
            tap = np.moveaxis(grad_windows[(Ellipsis, *offset)], -1, 1)
            grad_padded[
                _offset_slices(
                    offset,
                    self.out_extents,
                    spec.stride,
                    spec.dilation,
                )
            ] += tap
        crop = (
            slice(None),
            slice(None),
            *(
                slice(lo, lo + n)
                for (lo, _), n in zip(self.pads, self.in_extents)
            ),
        )
        return grad_padded[crop], grad_weights, grad_bias


class MaxPool(Function):
    """Windowed maximum; ties route the gradient to the first element."""

    def forward(self, x, window, stride):
        rank = len(window)
        self.shape = x.shape
        self.window = window
        self.stride = stride
        self.out_extents = tuple(
            (n - w) // s + 1 for n, w, s in zip(x.shape[2:], window, stride)
        )
        windows = _windows(x, self.out_extents, window, stride, (1,) * rank)
        flat = windows.reshape(*windows.shape[: 2 + rank], -1)
        self.argmax = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[
            ...,
            0,
        ]

    def backward(self, grad):
        rank = len(self.window)
        grad_x = np.zeros(self.shape, dtype=grad.dtype)
        for flat_index, offset in enumerate(
            product(*(range(w) for w in self.window)),
        ):
            grad_x[
                _offset_slices(
                    offset,
                    self.out_extents,
                    self.stride,
                    (1,) * rank,
                )
            ] += grad * (self.argmax == flat_index)
        return (grad_x,)


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalisation layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BATCHNORM_MOMENTUM
    epsilon: float = BATCHNORM_EPSILON

    @classmethod
    def for_channels(
        cls,
        channels: int,
        dtype: Any = DEFAULT_DTYPE,
    ) -> BatchNormState:
        """Start from zero mean and unit variance."""
        return cls(
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
        )


class BatchNorm(Function):
    """Per-channel normalisation over every axis except axis 1."""

    def forward(self, x, gamma, beta, state: BatchNormState, training: bool):
        self.axes = (0, *range(2, x.ndim))
        view = (1, -1, *([1] * (x.ndim - 2)))
        self.training = training
        if training:
            mean = x.mean(axis=self.axes)
            var = x.var(axis=self.axes)
            state.running_mean[...] = (
                state.momentum * state.running_mean
                + (1 - state.momentum) * mean
            )
            state.running_var[...] = (
                state.momentum * state.running_var
                + (1 - state.momentum) * var
            )
        else:
            mean, var = state.running_mean, state.running_var
        self.inv_std = (1.0 / np.sqrt(var + state.epsilon)).reshape(view)
        self.x_hat = (x - mean.reshape(view)) * self.inv_std
        self.gamma = gamma.reshape(view)
        self.count = x.size // x.shape[1]
        return (self.gamma * self.x_hat + beta.reshape(view)).astype(x.dtype)

    def backward(self, grad):
        grad_gamma = (grad * self.x_hat).sum(axis=self.axes)
        grad_beta = grad.sum(axis=self.axes)
        grad_x_hat = grad * self.gamma
        if not self.training:
            return grad_x_hat * self.inv_std, grad_gamma, grad_beta
        sum_g = grad_x_hat.sum(axis=self.axes, keepdims=True)
        sum_gx = (grad_x_hat * self.x_hat).sum(axis=self.axes, keepdims=True)
        grad_x = (
            self.inv_std
            / self.count
            * (self.count * grad_x_hat - sum_g - self.x_hat * sum_gx)
        )
        return grad_x, grad_gamma, grad_beta


class Dense(Function):
    """Affine map over the last axis: ``x @ weights + bias``."""

    def forward(self, x, weights, bias):
        self.x, self.weights = x, weights
        return x @ weights + bias

    def backward(self, grad):
        inner = self.weights.shape[0]
        grad_x = grad @ self.weights.T
        grad_weights = self.x.reshape(-1, inner).T @ grad.reshape(
            -1,
            self.weights.shape[1],
        )
        grad_bias = grad.reshape(-1, self.weights.shape[1]).sum(axis=0)
        return grad_x, grad_weights, grad_bias


class Upsample(Function):
    """Nearest-neighbour upsampling of the spatial axes by integer factors."""

    def forward(self, x, factors):
        self.factors = factors
        out = x
        for axis, factor in enumerate(factors, start=2):
            out = np.repeat(out, factor, axis=axis)
        return out

    def backward(self, grad):
        shape = list(grad.shape[:2])
        sum_axes = []
        for axis, factor in enumerate(self.factors):
            extent = grad.shape[2 + axis]
            shape.extend([extent // factor, factor])
            sum_axes.append(len(shape) - 1)
        return (grad.reshape(shape).sum(axis=tuple(sum_axes)),)


def conv_nd(
    x: Tensor,
    weights: Tensor,
    bias: Tensor,
    spec: ConvSpec,
) -> Tensor:
    """Dilated, strided N-D cross-correlation.

    Parameters
    ----------
    x
        Input of shape ``(N, C_in, *spatial)`` with ``len(spatial)`` equal
        to ``spec.rank``.

    weights
        Kernel of shape ``(C_out, C_in, *spec.kernel)``.

    bias
        Per-output-channel offset of shape ``(C_out,)``.

    spec
        Kernel geometry.

    Returns
    -------
    Tensor
        Output of shape ``(N, C_out, *spec.output_extents(spatial))``.

    Raises
    ------
    ShapeError
        If any shape disagrees with ``spec``.
    """
    if x.ndim != spec.rank + 2:
        msg = (
            f"Input rank {x.ndim} does not match {spec.rank} spatial axes "
            "plus batch and channel axes"
        )
        raise ShapeError(msg)
    if x.shape[1] != spec.in_channels:
        msg = (
            f"Input has {x.shape[1]} channels, spec expects "
            f"{spec.in_channels}"
        )
        raise ShapeError(msg)
    expected = (spec.out_channels, spec.in_channels, *spec.kernel)
    if weights.shape != expected:
        msg = f"Weights have shape {weights.shape}, expected {expected}"
        raise ShapeError(msg)
    if bias.shape != (spec.out_channels,):
        msg = f"Bias has shape {bias.shape}, expected ({spec.out_channels},)"
        raise ShapeError(msg)
    spec.output_extents(x.shape[2:])
    return Conv.apply(x, weights, bias, spec=spec)


def maxpool_nd(
    x: Tensor,
    window: Sequence[int],
    stride: Sequence[int] | None = None,
) -> Tensor:
    """Max-pool the spatial axes without padding.

    ``stride`` defaults to ``window``. Raises ShapeError when a window does
    not fit its axis.
    """
    window = tuple(window)
    stride = window if stride is None else tuple(stride)
    if x.ndim != len(window) + 2 or len(stride) != len(window):
        msg = (
            f"Pooling window {window} / stride {stride} do not match input "
            f"of shape {x.shape}"
        )
        raise ShapeError(msg)
    if min(window + stride) < 1:
        msg = f"Pooling window and stride must be >= 1: {window}, {stride}"
        raise ShapeError(msg)
    for extent, size in zip(x.shape[2:], window):
        if size > extent:
            msg = f"Pooling window {size} larger than axis extent {extent}"
            raise ShapeError(msg)
    return MaxPool.apply(x, window=window, stride=stride)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``."""
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function."""
    return Sigmoid.apply(x)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax over the channel axis (axis 1 unless told otherwise)."""
    if x.ndim == 0:
        msg = "softmax needs a channel axis"
        raise ShapeError(msg)
    return Softmax.apply(x, axis=axis % x.ndim)


ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_over_channels": softmax,
}


def activation(x: Tensor, kind: str) -> Tensor:
    """Dispatch to one of the supported activations by name."""
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        msg = f"Unknown activation {kind!r}"
        raise ShapeError(msg) from None


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
) -> Tensor:
    """Batch-normalise ``x`` per channel (axis 1).

    Training mode normalises with batch statistics and folds them into the
    running statistics with ``state.momentum``; inference mode uses the
    running statistics.
    """
    channels = x.shape[1] if x.ndim > 1 else 0
    if gamma.shape != (channels,) or beta.shape != (channels,):
        msg = (
            f"gamma {gamma.shape} / beta {beta.shape} do not match "
            f"{channels} channels"
        )
        raise ShapeError(msg)
    if state.running_mean.shape != (channels,):
        msg = "Running statistics do not match the channel count"
        raise ShapeError(msg)
    return BatchNorm.apply(x, gamma, beta, state=state, training=training)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        msg = (
            f"Input inner extent {x.shape[-1]} does not match weights "
            f"{weights.shape}"
        )
        raise ShapeError(msg)
    if bias.shape != (weights.shape[1],):
        msg = f"Bias {bias.shape} does not match weights {weights.shape}"
        raise ShapeError(msg)
    return Dense.apply(x, weights, bias)


def upsample_nearest(x: Tensor, factors: Sequence[int]) -> Tensor:
    """Repeat every spatial element ``factors[i]`` times along axis i."""
    if len(factors) != x.ndim - 2:
        msg = f"Need one factor per spatial axis of {x.shape}"
        raise ShapeError(msg)
    return Upsample.apply(x, factors=tuple(factors))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along an existing axis."""
    return Concat.apply(*tensors, axis=axis)


def he_init(
    shape: Sequence[int],
    fan_in: int,
    rng: np.random.Generator,
    dtype: Any = DEFAULT_DTYPE,
    name: str | None = None,
) -> Tensor:
    """Draw trainable weights from N(0, 2 / fan_in)."""
    if fan_in < 1:
        msg = f"fan_in must be >= 1, got {fan_in}"
        raise ValueError(msg)
    values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape))
    return Tensor(values, requires_grad=True, name=name, dtype=dtype)


def backward(
    graph: ComputationGraph,
    loss: Tensor,
    parameters: Iterable[Tensor] = (),
) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``graph`` seeded at a scalar ``loss``.

    Parameters
    ----------
    graph
        Graph the loss was computed on.

    loss
        Single-element tensor.

    parameters
        Extra leaves to report; any leaf not on a path to the loss gets a
        zero gradient.

    Returns
    -------
    dict[Tensor, np.ndarray]
        Gradient per parameter leaf (graph leaves plus ``parameters``). The
        same arrays are stored on each tensor's ``grad``.

    Raises
    ------
    GradientError
        If ``loss`` holds more than one value.
    """
    if loss.data.size != 1:
        msg = f"backward needs a scalar seed, got shape {loss.shape}"
        raise GradientError(msg)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.op.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad

    leaves = list(graph.parameters)
    known = {id(leaf) for leaf in leaves}
    leaves.extend(p for p in parameters if id(p) not in known)
    result = {}
    for leaf in leaves:
        grad = grads.get(id(leaf))
        if grad is None:
            grad = np.zeros_like(leaf.data)
        leaf.grad = np.asarray(grad, dtype=leaf.dtype).reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result


class ShapeError(Exception):
    """Exception raised when tensor shapes are inconsistent."""


class GradientError(Exception):
    """Exception raised when a backward pass cannot be performed."""
