"""Bit-exact integer-only golden model of the 5-layer 1D CNN.

All arithmetic is done on wide integers (int64 intermediates checked against
the 32-bit accumulator budget), so every result here is the contract the
cycle-accurate simulator has to match exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AccumulatorOverflow, ConfigError, ShapeError

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

# Fixed feature depth the GAP shifter is hardwired for (1 << GAP_SHIFT elements).
GAP_LENGTH = 64
GAP_SHIFT = 6


class LayerKind(IntEnum):
    CONV1D = 0
    FULLY_CONNECTED = 1


class PoolMode(IntEnum):
    MAXPOOL2 = 0
    GLOBAL_AVG = 1
    BYPASS = 2


class Activation(IntEnum):
    RELU_SATURATE = 0
    SIGNED_BYPASS = 1


@dataclass
class QuantTensor:
    """Channel-major 8-bit activation map with quantization metadata."""

    data: np.ndarray  # uint8, shape [channels, length]
    scale: float = 1.0
    zero_point: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise ShapeError(f"expected [channels][length], got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError("channels and length must be >= 1")
        if not 0 <= self.zero_point <= 255:
            raise ShapeError(f"zero_point {self.zero_point} outside u8 range")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LayerSpec:
    """Runtime configuration of one accelerator layer."""

    kind: LayerKind
    c_in: int
    c_out: int
    kernel: int
    padding: int
    pool_mode: PoolMode
    activation: Activation
    requant_multiplier: int = 1 << 30
    requant_shift: int = 30
    out_zero_point: int = 0  # optional output offset, 0 in the default scheme
    stride: int = 1

    def __post_init__(self):
        if self.stride != 1:
            raise ConfigError("datapath is strictly stride-one")
        if self.c_in < 1 or self.c_out < 1 or self.kernel < 1:
            raise ConfigError("channel counts and kernel must be >= 1")
        if self.padding < 0:
            raise ConfigError("padding must be >= 0")
        if self.kind == LayerKind.FULLY_CONNECTED:
            if self.kernel != 1 or self.padding != 0:
                raise ConfigError("FC layers are 1x1 convolutions without padding")
            if self.pool_mode != PoolMode.BYPASS:
                raise ConfigError("FC layers bypass the pooling unit")
            if self.activation != Activation.SIGNED_BYPASS:
                raise ConfigError("FC layers emit signed logits")
        if not INT32_MIN <= self.requant_multiplier <= INT32_MAX:
            raise ConfigError("requant multiplier must fit in i32")
        if not 0 <= self.requant_shift <= 63:
            raise ConfigError("requant shift must be in [0, 63]")

    def out_length(self, w_in: int) -> int:
        """Spatial length after conv (stride 1, resolution preserving) and pooling."""
        if self.pool_mode == PoolMode.MAXPOOL2:
            if w_in % 2 != 0:
                raise ConfigError(f"maxpool input length {w_in} must be even")
            return w_in // 2
        if self.pool_mode == PoolMode.GLOBAL_AVG:
            return 1
        return w_in


@dataclass(frozen=True)
class NetworkSpec:
    """The whole network: an ordered layer chain plus input geometry."""

    layers: tuple[LayerSpec, ...]
    input_length: int = 512
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.c_out != b.c_in:
                raise ConfigError(f"channel chain broken: {a.c_out} -> {b.c_in}")
        if self.layers[-1].c_out != self.num_classes:
            raise ConfigError("last layer must emit num_classes channels")

    def layer_input_lengths(self) -> list[int]:
        """Spatial input length seen by each layer."""
        lengths = []
        w = self.input_length
        for layer in self.layers:
            lengths.append(w)
            w = layer.out_length(w)
        return lengths

    @staticmethod
    def default(l3_width: int = 128) -> "NetworkSpec":
        """The published 5-layer topology (L3 width configurable, default 128)."""
        conv = dict(kind=LayerKind.CONV1D, pool_mode=PoolMode.MAXPOOL2,
                    activation=Activation.RELU_SATURATE)
        layers = (
            LayerSpec(c_in=1, c_out=16, kernel=9, padding=4, **conv),
            LayerSpec(c_in=16, c_out=32, kernel=9, padding=4, **conv),
            LayerSpec(c_in=32, c_out=64, kernel=9, padding=4, **conv),
            LayerSpec(kind=LayerKind.CONV1D, c_in=64, c_out=l3_width, kernel=5,
                      padding=2, pool_mode=PoolMode.GLOBAL_AVG,
                      activation=Activation.RELU_SATURATE),
            LayerSpec(kind=LayerKind.FULLY_CONNECTED, c_in=l3_width, c_out=3,
                      kernel=1, padding=0, pool_mode=PoolMode.BYPASS,
                      activation=Activation.SIGNED_BYPASS),
        )
        return NetworkSpec(layers=layers)


@dataclass
class LayerWeights:
    """INT8 weights and INT32 biases for one layer."""

    weights: np.ndarray  # int8, [c_out, c_in, K]
    biases: np.ndarray   # int32, [c_out]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int8)
        self.biases = np.asarray(self.biases, dtype=np.int32)
        if self.weights.ndim != 3:
            raise ShapeError("weights must be [c_out][c_in][K]")
        if self.biases.shape != (self.weights.shape[0],):
            raise ShapeError("one bias per output channel")


@dataclass
class WeightSet:
    layers: list[LayerWeights]

    def check_against(self, net: NetworkSpec) -> None:
        if len(self.layers) != len(net.layers):
            raise ShapeError("weight set layer count mismatch")
        for lw, spec in zip(self.layers, net.layers):
            if lw.weights.shape != (spec.c_out, spec.c_in, spec.kernel):
                raise ShapeError(
                    f"weights {lw.weights.shape} != "
                    f"({spec.c_out}, {spec.c_in}, {spec.kernel})")


@dataclass
class Logits:
    values: np.ndarray  # int32, one per class

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int32)

    @property
    def predicted_class(self) -> int:
        # np.argmax returns the first maximum: lowest index wins ties,
        # matching a hardware priority encoder.
        return int(np.argmax(self.values))


def zscore_quantize(window, zero_point: int = 128,
                    scale_divisor: float = 1.0 / 32.0) -> QuantTensor:
    """Per-window z-score normalize then quantize to a 1-channel u8 tensor."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1 or window.size == 0:
        raise ShapeError("window must be a non-empty 1-D array")
    if scale_divisor <= 0:
        raise ConfigError("scale_divisor must be positive")
    mean = window.mean()
    std = window.std()
    if std == 0.0:
        std = 1.0  # flat window carries no information; output is all-zero-point
    z = (window - mean) / std / scale_divisor
    q = np.where(z >= 0, np.floor(z + 0.5), np.ceil(z - 0.5)) + zero_point
    q = np.clip(q, 0, 255).astype(np.uint8)
    return QuantTensor(q[np.newaxis, :], scale=scale_divisor, zero_point=zero_point)


def conv1d_acc(x: QuantTensor, layer: LayerSpec, lw: LayerWeights) -> np.ndarray:
    """Stride-1 integer convolution into the signed 32-bit accumulator map.

    Out-of-range taps read the zero point, i.e. contribute nothing after the
    offset subtraction; output length equals input length.
    """
    if x.channels != layer.c_in:
        raise ShapeError(f"input has {x.channels} channels, layer expects {layer.c_in}")
    if lw.weights.shape != (layer.c_out, layer.c_in, layer.kernel):
        raise ShapeError("weight tensor does not match layer geometry")
    w_in = x.length
    k, pad = layer.kernel, layer.padding
    # Offsets t + k - pad for t in [0, w_in): indices span [-pad, w_in - 1 + k - 1 - pad].
    left = pad
    right = max(k - 1 - pad, 0)
    xoff = np.zeros((layer.c_in, left + w_in + right), dtype=np.int64)
    xoff[:, left:left + w_in] = x.data.astype(np.int64) - x.zero_point
    windows = sliding_window_view(xoff, k, axis=1)[:, :w_in, :]  # [c_in, w_in, K]
    acc = np.einsum("ock,ctk->ot", lw.weights.astype(np.int64), windows)
    acc += lw.biases.astype(np.int64)[:, np.newaxis]
    if acc.min() < INT32_MIN or acc.max() > INT32_MAX:
        raise AccumulatorOverflow(
            f"accumulator range [{acc.min()}, {acc.max()}] exceeds signed 32-bit")
    return acc


def maxpool2_acc(acc: np.ndarray) -> np.ndarray:
    """Pairwise max over the spatial axis; odd tails are padded with INT32_MIN."""
    acc = np.asarray(acc, dtype=np.int64)
    if acc.ndim != 2:
        raise ShapeError("accumulator map must be [c_out][length]")
    c, n = acc.shape
    if n % 2 != 0:
        pad = np.full((c, 1), INT32_MIN, dtype=np.int64)  # identity element of max
        acc = np.concatenate([acc, pad], axis=1)
        n += 1
    return np.maximum(acc[:, 0::2], acc[:, 1::2])


def gap_shift_acc(acc: np.ndarray) -> np.ndarray:
    """Per-element arithmetic right shift by 6, then sum over the spatial axis.

    The hardware shifts each sample before feeding the persistent accumulator,
    so this is NOT equivalent to shifting the final sum.
    """
    acc = np.asarray(acc, dtype=np.int64)
    if acc.ndim != 2:
        raise ShapeError("accumulator map must be [c_out][length]")
    if acc.shape[1] != GAP_LENGTH:
        raise ConfigError(f"GAP unit is hardwired for length {GAP_LENGTH}, "
                          f"got {acc.shape[1]}")
    return np.sum(acc >> GAP_SHIFT, axis=1)


def requantize(acc, multiplier: int, shift: int, activation: Activation,
               out_zero_point: int = 0):
    """Scale a 32-bit accumulator back to the activation format.

    64-bit product, round to nearest with ties away from zero, then either
    unsigned saturation to [0, 255] (fused ReLU) or signed 32-bit saturation
    for raw logits.
    """
    if not 0 <= shift <= 63:
        raise ConfigError("shift must be in [0, 63]")
    acc = np.asarray(acc, dtype=np.int64)
    p = acc * np.int64(multiplier)
    if shift == 0:
        r = p
    else:
        half = np.int64(1) << np.int64(shift - 1)
        mag = (np.abs(p) + half) >> np.int64(shift)
        r = np.where(p < 0, -mag, mag)
    if activation == Activation.RELU_SATURATE:
        r = np.clip(r + out_zero_point, 0, 255)
        return r.astype(np.uint8)
    r = np.clip(r, INT32_MIN, INT32_MAX)
    return r.astype(np.int32)


def infer_window(net: NetworkSpec, ws: WeightSet, x: QuantTensor):
    """Run the full golden pipeline; returns (Logits, per-layer snapshots).

    Snapshots hold the post-requantization QuantTensor of every ReLU layer;
    the final signed logits are returned separately.
    """
    ws.check_against(net)
    if x.length != net.input_length or x.channels != net.layers[0].c_in:
        raise ShapeError(f"input {x.channels}x{x.length} does not match network "
                         f"{net.layers[0].c_in}x{net.input_length}")
    snapshots: list[QuantTensor] = []
    cur = x
    logits = None
    for layer, lw in zip(net.layers, ws.layers):
        acc = conv1d_acc(cur, layer, lw)
        if layer.pool_mode == PoolMode.MAXPOOL2:
            acc = maxpool2_acc(acc)
        elif layer.pool_mode == PoolMode.GLOBAL_AVG:
            acc = gap_shift_acc(acc)[:, np.newaxis]
        out = requantize(acc, layer.requant_multiplier, layer.requant_shift,
                         layer.activation, layer.out_zero_point)
        if layer.activation == Activation.RELU_SATURATE:
            cur = QuantTensor(out, zero_point=layer.out_zero_point)
            snapshots.append(cur)
        else:
            logits = Logits(out[:, 0])
    if logits is None:
        raise ConfigError("network has no signed-output classification layer")
    return logits, snapshots
