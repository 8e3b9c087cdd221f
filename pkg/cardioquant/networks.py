"""Segmentation network G (DR-UNet) and multi-task network D.

Both networks are built from small ``Module`` objects that own their
parameters and hand them out under dotted names, so optimisers, checkpoints
and gradient checks can address every tensor by name.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from os import PathLike
from typing import Any

import numpy as np

from cardioquant.container import read_tensors, write_tensors
from cardioquant.tensor import (
    DEFAULT_DTYPE,
    BatchNormState,
    ConvSpec,
    ShapeError,
    Tensor,
    batchnorm,
    concat,
    conv_nd,
    dense,
    he_init,
    maxpool_nd,
    relu,
    softmax,
    upsample_nearest,
)

logger = logging.getLogger(__name__)

SPATIAL_MODES = ("2d", "3d")
BLOCK_KINDS = ("factorized", "full3d")
KIND_DRUNET = 1
KIND_STMT = 2


@dataclass(frozen=True)
class DrUnetConfig:
    """Topology of the dilated residual U-Net.

    Attributes
    ----------
    base_filters
        Filters of the first encoder block; doubled at every level.

    depth
        Number of encoder (and decoder) blocks, i.e. pooling levels.

    dilations
        Dilation rates of the stacked bottleneck convolutions whose
        outputs are summed.

    spatial_mode
        ``"2d"`` maps frames independently, ``"3d"`` convolves over
        (t, h, w) and pools only the spatial axes.

    classes
        Output channels (background, cavity, myocardium).

    in_channels
        Image channels.

    input_size
        Expected spatial side; must be divisible by ``2 ** depth``.
    """

    base_filters: int = 16
    depth: int = 4
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    spatial_mode: str = "2d"
    classes: int = 3
    in_channels: int = 1
    input_size: int = 80

    def __post_init__(self):
        """Check invariants of the topology."""
        if self.base_filters < 1 or self.depth < 1:
            msg = "base_filters and depth must be >= 1"
            raise NetworkConfigError(msg)
        if not self.dilations or min(self.dilations) < 1:
            msg = f"Dilation list must be non-empty with rates >= 1: {self}"
            raise NetworkConfigError(msg)
        if self.spatial_mode not in SPATIAL_MODES:
            msg = f"spatial_mode must be one of {SPATIAL_MODES}"
            raise NetworkConfigError(msg)
        if self.classes < 2 or self.in_channels < 1:  # noqa: PLR2004
            msg = "Need at least two classes and one input channel"
            raise NetworkConfigError(msg)
        if self.input_size % 2**self.depth:
            msg = (
                f"Spatial extent {self.input_size} is not divisible by "
                f"2**depth = {2 ** self.depth}"
            )
            raise NetworkConfigError(msg)

    def header(self) -> dict[str, np.ndarray]:
        """Encode the topology as checkpoint tensors."""
        return {
            "kind": np.array(KIND_DRUNET),
            "base_filters": np.array(self.base_filters),
            "depth": np.array(self.depth),
            "dilations": np.array(self.dilations),
            "spatial_mode": np.array(2 if self.spatial_mode == "2d" else 3),
            "classes": np.array(self.classes),
            "in_channels": np.array(self.in_channels),
            "input_size": np.array(self.input_size),
        }

    @classmethod
    def from_header(cls, header: Mapping[str, np.ndarray]) -> DrUnetConfig:
        """Rebuild the topology from checkpoint tensors."""
        return cls(
            base_filters=_as_int(header["base_filters"]),
            depth=_as_int(header["depth"]),
            dilations=tuple(int(d) for d in header["dilations"].reshape(-1)),
            spatial_mode=f"{_as_int(header['spatial_mode'])}d",
            classes=_as_int(header["classes"]),
            in_channels=_as_int(header["in_channels"]),
            input_size=_as_int(header["input_size"]),
        )


@dataclass(frozen=True)
class StmtConfig:
    """Topology of the spatio-temporal multi-task network.

    Attributes
    ----------
    channels
        Output channels of each spatio-temporal block; its length is the
        block count.

    temporal_kernel, spatial_kernel
        Extents of the ``k x 1 x 1`` and ``1 x k x k`` kernels.

    pool
        Pooling window (t, h, w); the temporal entry must be 1.

    block_kind
        ``"factorized"`` (temporal conv then spatial conv) or ``"full3d"``
        (one ``k x k x k`` conv per block).

    head_width
        Hidden width of each task branch; 0 maps pooled features straight
        to the outputs.

    weight_decay
        L2 coefficient applied by the optimiser to this network.

    in_channels
        Mask channels fed in (cavity, myocardium).

    outputs
        Regression outputs per frame.
    """

    channels: tuple[int, ...] = (32, 64, 128)
    temporal_kernel: int = 3
    spatial_kernel: int = 3
    pool: tuple[int, int, int] = (1, 3, 3)
    block_kind: str = "factorized"
    head_width: int = 0
    weight_decay: float = 1e-4
    in_channels: int = 2
    outputs: int = 11

    def __post_init__(self):
        """Check invariants of the topology."""
        if not self.channels or min(self.channels) < 1:
            msg = f"Block channels must be non-empty and positive: {self}"
            raise NetworkConfigError(msg)
        if len(self.pool) != 3 or self.pool[0] != 1:  # noqa: PLR2004
            msg = f"Pooling must keep the temporal axis: {self.pool}"
            raise NetworkConfigError(msg)
        if self.block_kind not in BLOCK_KINDS:
            msg = f"block_kind must be one of {BLOCK_KINDS}"
            raise NetworkConfigError(msg)
        if min(self.temporal_kernel, self.spatial_kernel) < 1:
            msg = "Kernel extents must be >= 1"
            raise NetworkConfigError(msg)
        if self.head_width < 0 or self.weight_decay < 0:
            msg = "head_width and weight_decay must be >= 0"
            raise NetworkConfigError(msg)

    def header(self) -> dict[str, np.ndarray]:
        """Encode the topology as checkpoint tensors."""
        return {
            "kind": np.array(KIND_STMT),
            "channels": np.array(self.channels),
            "temporal_kernel": np.array(self.temporal_kernel),
            "spatial_kernel": np.array(self.spatial_kernel),
            "pool": np.array(self.pool),
            "block_kind": np.array(BLOCK_KINDS.index(self.block_kind)),
            "head_width": np.array(self.head_width),
            "weight_decay": np.array(self.weight_decay),
            "in_channels": np.array(self.in_channels),
            "outputs": np.array(self.outputs),
        }

    @classmethod
    def from_header(cls, header: Mapping[str, np.ndarray]) -> StmtConfig:
        """Rebuild the topology from checkpoint tensors."""
        return cls(
            channels=tuple(int(c) for c in header["channels"].reshape(-1)),
            temporal_kernel=_as_int(header["temporal_kernel"]),
            spatial_kernel=_as_int(header["spatial_kernel"]),
            pool=tuple(int(p) for p in header["pool"].reshape(-1)),
            block_kind=BLOCK_KINDS[_as_int(header["block_kind"])],
            head_width=_as_int(header["head_width"]),
            weight_decay=float(header["weight_decay"]),
            in_channels=_as_int(header["in_channels"]),
            outputs=_as_int(header["outputs"]),
        )


def _as_int(value: np.ndarray) -> int:
    return int(round(float(np.asarray(value).reshape(-1)[0])))


@dataclass
class SegmentationOutput:
    """Per-frame segmentation of one cine sequence.

    Attributes
    ----------
    probabilities
        ``t x h x w x classes`` softmax maps.

    hard_labels
        ``t x h x w`` argmax of ``probabilities``.
    """

    probabilities: np.ndarray
    hard_labels: np.ndarray


class Module:
    """A node in a network tree owning parameters and child modules."""

    def __init__(self):
        self.training = True
        self.children: dict[str, Module] = {}
        self.params: dict[str, Tensor] = {}

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Trainable tensors under dotted names, in construction order."""
        named = {f"{prefix}{key}": value for key, value in self.params.items()}
        for name, child in self.children.items():
            named.update(child.parameters(f"{prefix}{name}."))
        return named

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Non-trainable state (running statistics) under dotted names."""
        named = {}
        for name, child in self.children.items():
            named.update(child.buffers(f"{prefix}{name}."))
        return named

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays."""
        state = {name: p.data for name, p in self.parameters().items()}
        state.update(self.buffers())
        return state

    def parameter_count(self) -> int:
        """Number of trainable scalars."""
        return sum(p.data.size for p in self.parameters().values())

    def train(self, mode: bool = True) -> Module:
        """Switch this module and its children between train and infer."""
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> Module:
        """Switch to inference mode."""
        return self.train(mode=False)

    def to(self, dtype: Any) -> Module:
        """Cast parameters and buffers in place (e.g. to float64)."""
        for param in self.params.values():
            param.data = param.data.astype(dtype)
        for child in self.children.values():
            child.to(dtype)
        return self

    def load_state(self, state: Mapping[str, np.ndarray]):
        """Copy arrays into parameters and buffers, checking every name.

        Raises
        ------
        CheckpointError
            Naming the first tensor that is missing, unexpected or of the
            wrong shape.
        """
        targets: dict[str, np.ndarray] = {
            name: p.data for name, p in self.parameters().items()
        }
        targets.update(self.buffers())
        for name in state:
            if name not in targets:
                msg = f"Unexpected tensor {name!r} for this architecture"
                raise CheckpointError(msg)
        for name, target in targets.items():
            if name not in state:
                msg = f"Checkpoint is missing tensor {name!r}"
                raise CheckpointError(msg)
            value = np.asarray(state[name])
            if value.shape != target.shape:
                msg = (
                    f"Tensor {name!r} has shape {value.shape}, architecture "
                    f"expects {target.shape}"
                )
                raise CheckpointError(msg)
            target[...] = value


class ConvLayer(Module):
    """Convolution with He-initialised weights and zero bias."""

    def __init__(
        self,
        spec: ConvSpec,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        self.params = {
            "weight": he_init(
                (spec.out_channels, spec.in_channels, *spec.kernel),
                fan_in,
                rng,
                dtype=dtype,
            ),
            "bias": Tensor(
                np.zeros(spec.out_channels),
                requires_grad=True,
                dtype=dtype,
            ),
        }

    def __call__(self, x: Tensor) -> Tensor:
        params = self.params
        return conv_nd(x, params["weight"], params["bias"], self.spec)


class BatchNormLayer(Module):
    """Per-channel batch normalisation with running statistics."""

    def __init__(self, channels: int, dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        self.state = BatchNormState.for_channels(channels, dtype=dtype)
        self.params = {
            "gamma": Tensor(
                np.ones(channels),
                requires_grad=True,
                dtype=dtype,
            ),
            "beta": Tensor(
                np.zeros(channels),
                requires_grad=True,
                dtype=dtype,
            ),
        }

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            f"{prefix}running_mean": self.state.running_mean,
            f"{prefix}running_var": self.state.running_var,
        }

    def to(self, dtype: Any) -> Module:
        super().to(dtype)
        self.state.running_mean = self.state.running_mean.astype(dtype)
        self.state.running_var = self.state.running_var.astype(dtype)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.state,
            training=self.training,
        )


class DenseLayer(Module):
    """Fully connected layer over the last axis."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        self.params = {
            "weight": he_init(
                (in_features, out_features),
                in_features,
                rng,
                dtype=dtype,
            ),
            "bias": Tensor(
                np.zeros(out_features),
                requires_grad=True,
                dtype=dtype,
            ),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.params["weight"], self.params["bias"])


@dataclass(frozen=True)
class _Layout:
    """Kernel shapes for the 2D or 3D flavour of the U-Net."""

    volumetric: bool

    def kernel(self) -> tuple[int, ...]:
        return (3, 3, 3) if self.volumetric else (3, 3)

    def pointwise(self) -> tuple[int, ...]:
        return (1, 1, 1) if self.volumetric else (1, 1)

    def pool(self) -> tuple[int, ...]:
        return (1, 2, 2) if self.volumetric else (2, 2)

    def dilation(self, rate: int) -> tuple[int, ...]:
        return (1, rate, rate) if self.volumetric else (rate, rate)

    def conv(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        dtype: Any,
        rate: int = 1,
    ) -> ConvLayer:
        return ConvLayer(
            ConvSpec(
                self.kernel(),
                in_channels,
                out_channels,
                dilation=self.dilation(rate),
            ),
            rng,
            dtype,
        )


class EncoderBlock(Module):
    """Two convolutions with a residual skip, followed by pooling.

    ``bn2(relu(conv2(bn1(relu(conv1(x))))) + skip(x))``; the skip is the
    identity when channel counts agree and a 1x1 projection otherwise.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        layout: _Layout,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        self.layout = layout
        self.children = {
            "conv1": layout.conv(in_channels, out_channels, rng, dtype),
            "bn1": BatchNormLayer(out_channels, dtype),
            "conv2": layout.conv(out_channels, out_channels, rng, dtype),
            "bn2": BatchNormLayer(out_channels, dtype),
        }
        if in_channels != out_channels:
            self.children["skip"] = ConvLayer(
                ConvSpec(layout.pointwise(), in_channels, out_channels),
                rng,
                dtype,
            )

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (pre-pool features for the decoder, pooled features)."""
        layers = self.children
        hidden = layers["bn1"](relu(layers["conv1"](x)))
        hidden = relu(layers["conv2"](hidden))
        shortcut = layers["skip"](x) if "skip" in layers else x
        features = layers["bn2"](hidden + shortcut)
        return features, maxpool_nd(features, self.layout.pool())


class Bottleneck(Module):
    """Stacked dilated convolutions whose activations are summed."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        dilations: Sequence[int],
        layout: _Layout,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        channels = in_channels
        for index, rate in enumerate(dilations):
            self.children[f"dilated{index}"] = layout.conv(
                channels,
                out_channels,
                rng,
                dtype,
                rate=rate,
            )
            channels = out_channels
        self.children["bn"] = BatchNormLayer(out_channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = x
        total = None
        for name, layer in self.children.items():
            if name == "bn":
                continue
            hidden = relu(layer(hidden))
            total = hidden if total is None else total + hidden
        return self.children["bn"](total)


class DecoderBlock(Module):
    """Nearest upsampling + conv, skip concatenation, then two convs."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        layout: _Layout,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        self.layout = layout
        self.children = {
            "up": layout.conv(in_channels, out_channels, rng, dtype),
            "conv1": layout.conv(2 * out_channels, out_channels, rng, dtype),
            "bn1": BatchNormLayer(out_channels, dtype),
            "conv2": layout.conv(out_channels, out_channels, rng, dtype),
            "bn2": BatchNormLayer(out_channels, dtype),
        }

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        layers = self.children
        upsampled = relu(
            layers["up"](upsample_nearest(x, self.layout.pool())),
        )
        hidden = concat([upsampled, skip], axis=1)
        hidden = layers["bn1"](relu(layers["conv1"](hidden)))
        return layers["bn2"](relu(layers["conv2"](hidden)))


class DrUnet(Module):
    """Dilated residual U-Net producing per-pixel class probabilities."""

    def __init__(
        self,
        config: DrUnetConfig,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        self.config = config
        self.layout = _Layout(volumetric=config.spatial_mode == "3d")
        widths = [
            config.base_filters * 2**level for level in range(config.depth)
        ]
        channels = config.in_channels
        for level, width in enumerate(widths):
            self.children[f"enc{level}"] = EncoderBlock(
                channels,
                width,
                self.layout,
                rng,
                dtype,
            )
            channels = width
        self.children["bottleneck"] = Bottleneck(
            channels,
            2 * channels,
            config.dilations,
            self.layout,
            rng,
            dtype,
        )
        channels *= 2
        for level in reversed(range(config.depth)):
            self.children[f"dec{level}"] = DecoderBlock(
                channels,
                widths[level],
                self.layout,
                rng,
                dtype,
            )
            channels = widths[level]
        self.children["head"] = ConvLayer(
            ConvSpec(self.layout.pointwise(), channels, config.classes),
            rng,
            dtype,
        )

    def __call__(self, x: Tensor) -> Tensor:
        """Map ``(N, C, [T,] H, W)`` images to channel-first probabilities."""
        factor = 2**self.config.depth
        if any(extent % factor for extent in x.shape[-2:]):
            msg = (
                f"Spatial extents {x.shape[-2:]} are not divisible by "
                f"2**depth = {factor}"
            )
            raise ShapeError(msg)
        skips = []
        hidden = x
        for level in range(self.config.depth):
            features, hidden = self.children[f"enc{level}"](hidden)
            skips.append(features)
        hidden = self.children["bottleneck"](hidden)
        for level in reversed(range(self.config.depth)):
            hidden = self.children[f"dec{level}"](hidden, skips[level])
        return softmax(self.children["head"](hidden), axis=1)

    def header(self) -> dict[str, np.ndarray]:
        """Topology tensors for checkpoints."""
        return self.config.header()


def factorized_mid_channels(in_channels: int, out_channels: int) -> int:
    """Width between the temporal and spatial convs of a factorized block.

    Chosen so ``3*Cin*M + 9*M*Cout`` matches the ``27*Cin*Cout`` weights of
    a full 3x3x3 convolution, rounded down.
    """
    return max(
        1,
        (27 * in_channels * out_channels)
        // (3 * in_channels + 9 * out_channels),
    )


class SpatioTemporalBlock(Module):
    """Temporal conv, spatial conv (or one full 3D conv), then pooling."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        config: StmtConfig,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        self.pool = config.pool
        t, s = config.temporal_kernel, config.spatial_kernel
        if config.block_kind == "factorized":
            mid = factorized_mid_channels(in_channels, out_channels)
            self.children = {
                "temporal": ConvLayer(
                    ConvSpec((t, 1, 1), in_channels, mid),
                    rng,
                    dtype,
                ),
                "spatial": ConvLayer(
                    ConvSpec((1, s, s), mid, out_channels),
                    rng,
                    dtype,
                ),
            }
        else:
            self.children = {
                "conv": ConvLayer(
                    ConvSpec((t, s, s), in_channels, out_channels),
                    rng,
                    dtype,
                ),
            }

    def __call__(self, x: Tensor) -> Tensor:
        hidden = x
        for layer in self.children.values():
            hidden = relu(layer(hidden))
        return maxpool_nd(hidden, self.pool)


class TaskHead(Module):
    """Per-frame branch: optional hidden layer, then a linear output."""

    def __init__(
        self,
        in_features: int,
        hidden: int,
        outputs: int,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        if hidden:
            self.children["hidden"] = DenseLayer(
                in_features,
                hidden,
                rng,
                dtype,
            )
            in_features = hidden
        self.children["out"] = DenseLayer(in_features, outputs, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if "hidden" in self.children:
            x = relu(self.children["hidden"](x))
        return self.children["out"](x)


class SpatioTemporalNet(Module):
    """Shared spatio-temporal encoder with regression and phase branches."""

    def __init__(
        self,
        config: StmtConfig,
        rng: np.random.Generator,
        dtype: Any = DEFAULT_DTYPE,
    ):
        super().__init__()
        self.config = config
        channels = config.in_channels
        for index, width in enumerate(config.channels):
            self.children[f"block{index}"] = SpatioTemporalBlock(
                channels,
                width,
                config,
                rng,
                dtype,
            )
            channels = width
        self.children["regression"] = TaskHead(
            channels,
            config.head_width,
            config.outputs,
            rng,
            dtype,
        )
        self.children["phase"] = TaskHead(
            channels,
            config.head_width,
            1,
            rng,
            dtype,
        )

    def __call__(
        self,
        x: Tensor,
        trace: list[tuple[int, ...]] | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Map ``(N, 2, T, H, W)`` masks to ``(N, T, 11)`` and ``(N, T, 1)``.

        ``trace`` collects the shape of every block activation.
        """
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:  # noqa: PLR2004
            msg = (
                f"Expected (N, {self.config.in_channels}, T, H, W) input, "
                f"got {x.shape}"
            )
            raise ShapeError(msg)
        frames = x.shape[2]
        hidden = x
        for index in range(len(self.config.channels)):
            hidden = self.children[f"block{index}"](hidden)
            if trace is not None:
                trace.append(hidden.shape)
            if hidden.shape[2] != frames:
                msg = (
                    f"Block {index} changed the frame count "
                    f"to {hidden.shape[2]}"
                )
                raise ShapeError(msg)
        pooled = hidden.mean(axis=(3, 4)).transpose(0, 2, 1)
        return (
            self.children["regression"](pooled),
            self.children["phase"](pooled),
        )

    def header(self) -> dict[str, np.ndarray]:
        """Topology tensors for checkpoints."""
        return self.config.header()


def build_drunet(
    config: DrUnetConfig,
    rng: np.random.Generator,
    dtype: Any = DEFAULT_DTYPE,
) -> DrUnet:
    """Build and report the segmentation network G."""
    network = DrUnet(config, rng, dtype)
    logger.info(
        "Built DR-UNet %s with %d filters, depth %d: %d parameters",
        config.spatial_mode,
        config.base_filters,
        config.depth,
        network.parameter_count(),
    )
    return network


def build_stmt(
    config: StmtConfig,
    rng: np.random.Generator,
    dtype: Any = DEFAULT_DTYPE,
) -> SpatioTemporalNet:
    """Build and report the multi-task network D."""
    network = SpatioTemporalNet(config, rng, dtype)
    logger.info(
        "Built %s spatio-temporal network %s: %d parameters",
        config.block_kind,
        config.channels,
        network.parameter_count(),
    )
    return network


def segmentation_input(network: DrUnet, frames: np.ndarray) -> Tensor:
    """Arrange ``t x h x w`` frames the way G consumes them."""
    array = np.asarray(frames)
    dtype = network.children["head"].params["weight"].dtype
    if network.config.spatial_mode == "3d":
        return Tensor(array[None, None], dtype=dtype)
    return Tensor(array[:, None], dtype=dtype)


def frame_probabilities(network: DrUnet, probabilities: Tensor) -> Tensor:
    """Bring G's output to ``(T, classes, H, W)`` for either mode."""
    if network.config.spatial_mode == "3d":
        classes, frames = probabilities.shape[1:3]
        return probabilities.reshape(
            classes,
            frames,
            *probabilities.shape[3:],
        ).transpose(1, 0, 2, 3)
    return probabilities


def multitask_input(mask_channels: Tensor) -> Tensor:
    """Turn ``(T, 2, H, W)`` cavity/myocardium maps into D's input."""
    frames, channels, height, width = mask_channels.shape
    return mask_channels.transpose(1, 0, 2, 3).reshape(
        1,
        channels,
        frames,
        height,
        width,
    )


def hard_masks(labels: np.ndarray, classes: int = 3) -> np.ndarray:
    """One-hot ``(T, classes, H, W)`` encoding of a ``t x h x w`` label map."""
    labels = np.asarray(labels).astype(np.int64)
    return np.moveaxis(np.eye(classes, dtype=np.float32)[labels], -1, 1)


def forward_segmentation(network: DrUnet, frames: Any) -> SegmentationOutput:
    """Segment every frame of a cine sequence.

    Parameters
    ----------
    network
        Segmentation network G.

    frames
        ``t x h x w`` array or an object with a ``frames`` attribute.

    Raises
    ------
    NetworkInputError
        If any pixel is not finite.
    """
    array = np.asarray(getattr(frames, "frames", frames))
    if not np.all(np.isfinite(array)):
        msg = "Input sequence contains non-finite pixels"
        raise NetworkInputError(msg)
    probabilities = frame_probabilities(
        network,
        network(segmentation_input(network, array)),
    ).numpy()
    channel_last = np.moveaxis(probabilities, 1, -1)
    return SegmentationOutput(
        probabilities=channel_last,
        hard_labels=channel_last.argmax(axis=-1),
    )


def forward_multitask(
    network: SpatioTemporalNet,
    masks: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict normalised indices and phase logits from ``t x h x w x 2``.

    Raises
    ------
    ShapeError
        If the trailing axis is not the expected channel count.

    NetworkInputError
        If mask values fall outside [0, 1].
    """
    array = np.asarray(masks)
    if array.ndim != 4 or array.shape[-1] != network.config.in_channels:  # noqa: PLR2004
        msg = (
            f"Expected t x h x w x {network.config.in_channels} masks, got "
            f"{array.shape}"
        )
        raise ShapeError(msg)
    if not np.all((array >= 0) & (array <= 1)):
        msg = "Mask values must lie in [0, 1]"
        raise NetworkInputError(msg)
    dtype = network.children["phase"].children["out"].params["weight"].dtype
    channels_first = Tensor(np.moveaxis(array, -1, 1), dtype=dtype)
    indices, logits = network(multitask_input(channels_first))
    return indices.numpy()[0], logits.numpy()[0]


NETWORK_BUILDERS = {
    KIND_DRUNET: (DrUnetConfig, DrUnet),
    KIND_STMT: (StmtConfig, SpatioTemporalNet),
}


@dataclass
class Checkpoint:
    """Networks and auxiliary arrays restored from one container."""

    networks: dict[str, Module]
    extras: dict[str, np.ndarray]


def save_checkpoint(
    path: PathLike[str] | str,
    networks: Mapping[str, DrUnet | SpatioTemporalNet],
    extras: Mapping[str, np.ndarray] | None = None,
):
    """Write networks (topology header + state) and extras to a container.

    Network tensors are stored as ``{key}/config/{field}`` and
    ``{key}/{parameter}``; extras keep their own names and must not contain
    a ``/config/`` segment.
    """
    tensors: dict[str, np.ndarray] = {}
    for key, network in networks.items():
        for field_name, value in network.header().items():
            tensors[f"{key}/config/{field_name}"] = value
        for name, value in network.state_dict().items():
            tensors[f"{key}/{name}"] = value
    for name, value in (extras or {}).items():
        tensors[name] = value
    write_tensors(path, tensors)


def load_checkpoint(path: PathLike[str] | str) -> Checkpoint:
    """Rebuild every network stored in a checkpoint.

    Raises
    ------
    CheckpointError
        If a topology header is unknown or a tensor does not fit.
    """
    tensors = read_tensors(path)
    keys = sorted(
        {name.split("/")[0] for name in tensors if "/config/kind" in name},
    )
    networks: dict[str, Module] = {}
    claimed = set()
    for key in keys:
        header_prefix = f"{key}/config/"
        header = {
            name[len(header_prefix) :]: value
            for name, value in tensors.items()
            if name.startswith(header_prefix)
        }
        kind = _as_int(header["kind"])
        if kind not in NETWORK_BUILDERS:
            msg = f"Unknown network kind {kind} in {key}/config/kind"
            raise CheckpointError(msg)
        config_cls, network_cls = NETWORK_BUILDERS[kind]
        try:
            config = config_cls.from_header(header)
        except KeyError as err:
            msg = f"Checkpoint is missing tensor {header_prefix}{err.args[0]}"
            raise CheckpointError(msg) from err
        network = network_cls(config, np.random.default_rng(0))
        state = {
            name[len(key) + 1 :]: value
            for name, value in tensors.items()
            if name.startswith(f"{key}/")
            and not name.startswith(header_prefix)
        }
        try:
            network.load_state(state)
        except CheckpointError as err:
            msg = f"{key}: {err}"
            raise CheckpointError(msg) from err
        networks[key] = network.eval()
        claimed.update(
            name for name in tensors if name.startswith(f"{key}/")
        )
    extras = {
        name: value for name, value in tensors.items() if name not in claimed
    }
    return Checkpoint(networks=networks, extras=extras)


class NetworkConfigError(Exception):
    """Exception raised for an invalid network topology."""


class NetworkInputError(Exception):
    """Exception raised when network inputs hold invalid values."""


class CheckpointError(Exception):
    """Exception raised when a checkpoint does not match an architecture."""
