"""Model preparation and serialization.

Covers the full path from floating-point layer parameters to the packed
weight-memory image the device loads: batch-norm folding, symmetric INT8
weight quantization, requant-constant derivation, the versioned weight
binary format, and SRAM image packing.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (BadMagicError, CapacityError, ConfigError, SerializationError,
                     ShapeError, TruncationError)
from .qnn import (INT32_MAX, INT32_MIN, Activation, LayerKind, LayerSpec,
                  LayerWeights, NetworkSpec, PoolMode, WeightSet)

MAGIC = b"SANN"
FORMAT_VERSION = 1
DESCRIPTOR_SIZE = 16
HEADER_SIZE = len(MAGIC) + 2 + 1  # magic + u16 version + u8 layer_count

WEIGHT_MEM_WORDS = 32768          # two 16Kx16 banks
WEIGHT_MEM_BYTES = 2 * WEIGHT_MEM_WORDS
BANK_SELECT_BIT = 14              # address MSB selects lower/upper bank


# ---------------------------------------------------------------------------
# Floating-point side
# ---------------------------------------------------------------------------

@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))


@dataclass
class FloatLayerParams:
    weights: np.ndarray          # float, [c_out, c_in, K]
    bias: np.ndarray             # float, [c_out]
    bn: BatchNorm | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ShapeError("weights must be [c_out][c_in][K]")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("one bias per output channel")
        if self.bn is not None:
            c_out = self.weights.shape[0]
            for name in ("gamma", "beta", "running_mean", "running_var"):
                if getattr(self.bn, name).shape != (c_out,):
                    raise ShapeError(f"bn.{name} must have length c_out")


@dataclass
class FloatModel:
    """Float parameters bound to a network geometry (requant fields unused)."""

    net: NetworkSpec
    layers: list[FloatLayerParams]

    def __post_init__(self):
        if len(self.layers) != len(self.net.layers):
            raise ShapeError("float model layer count mismatch")
        for p, spec in zip(self.layers, self.net.layers):
            if p.weights.shape != (spec.c_out, spec.c_in, spec.kernel):
                raise ShapeError("float weights do not match layer geometry")


def fold_batchnorm(params: FloatLayerParams) -> FloatLayerParams:
    """Fold frozen batch-norm scale and bias into the convolution parameters."""
    if params.bn is None:
        raise ConfigError("layer has no batch-norm to fold")
    bn = params.bn
    denom = bn.running_var + bn.epsilon
    if np.any(denom <= 0):
        raise ConfigError("running_var + epsilon must be positive")
    factor = bn.gamma / np.sqrt(denom)                       # [c_out]
    w = params.weights * factor[:, np.newaxis, np.newaxis]
    b = (params.bias - bn.running_mean) * factor + bn.beta
    return FloatLayerParams(weights=w, bias=b, bn=None)


def quantize_weights(params: FloatLayerParams, input_scale: float):
    """Symmetric per-tensor INT8 quantization; biases to i32 at s_in * s_w."""
    if params.bn is not None:
        raise ConfigError("fold batch-norm before quantizing")
    if not np.all(np.isfinite(params.weights)) or not np.all(np.isfinite(params.bias)):
        raise ConfigError("parameters must be finite")
    max_abs = float(np.max(np.abs(params.weights)))
    s_w = max_abs / 127.0 if max_abs > 0 else 1.0
    q = np.clip(np.rint(params.weights / s_w), -127, 127).astype(np.int8)
    bias_scale = input_scale * s_w
    b = np.rint(params.bias / bias_scale)
    if np.any(b < INT32_MIN) or np.any(b > INT32_MAX):
        raise ConfigError("quantized bias exceeds i32")
    return LayerWeights(weights=q, biases=b.astype(np.int32)), s_w


def derive_requant_constants(s_in: float, s_w: float, s_out: float) -> tuple[int, int]:
    """Fixed-point (multiplier, shift) with multiplier/2^shift ~ s_in*s_w/s_out."""
    if s_in <= 0 or s_w <= 0 or s_out <= 0:
        raise ConfigError("scales must be positive")
    ratio = s_in * s_w / s_out
    mantissa, exponent = math.frexp(ratio)   # ratio = mantissa * 2^exponent, mantissa in [0.5, 1)
    multiplier = round(mantissa * (1 << 31))
    if multiplier == 1 << 31:
        multiplier //= 2
        exponent += 1
    shift = 31 - exponent
    if shift > 62:
        raise ConfigError(f"requant ratio {ratio:g} too small: shift {shift} > 62")
    if shift < 0:
        raise ConfigError(f"requant ratio {ratio:g} too large for the datapath")
    return multiplier, shift


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

def pack_weight_bytes(flat: np.ndarray) -> np.ndarray:
    """Pack signed bytes two per 16-bit word, low byte first; zero-padded tail."""
    raw = np.asarray(flat, dtype=np.int8).astype(np.uint8)
    if raw.size % 2 != 0:
        raw = np.concatenate([raw, np.zeros(1, dtype=np.uint8)])
    return (raw[0::2].astype(np.uint16)
            | (raw[1::2].astype(np.uint16) << 8))


def unpack_weight_bytes(words: np.ndarray, count: int) -> np.ndarray:
    """Inverse of pack_weight_bytes; returns `count` signed bytes."""
    words = np.asarray(words, dtype=np.uint16)
    lo = (words & 0xFF).astype(np.uint8)
    hi = (words >> 8).astype(np.uint8)
    raw = np.empty(2 * words.size, dtype=np.uint8)
    raw[0::2] = lo
    raw[1::2] = hi
    return raw[:count].view(np.int8)


def pack_sram_image(ws: WeightSet) -> tuple[np.ndarray, list[int]]:
    """Lay out all layer weights in controller traversal order.

    Each layer starts on a word boundary so its fetch address is a pure
    counter from the layer base; returns the image and per-layer bases.
    """
    bases: list[int] = []
    chunks: list[np.ndarray] = []
    addr = 0
    for i, lw in enumerate(ws.layers):
        bases.append(addr)
        words = pack_weight_bytes(lw.weights.reshape(-1))
        addr += words.size
        if addr > WEIGHT_MEM_WORDS:
            raise CapacityError(
                f"layer {i} exceeds weight memory: {addr} > {WEIGHT_MEM_WORDS} words")
        chunks.append(words)
    image = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint16)
    return image.astype(np.uint16), bases


# ---------------------------------------------------------------------------
# PackedModel and the weight binary format
# ---------------------------------------------------------------------------

_DESCRIPTOR = struct.Struct("<BBBBBBHHiBB")  # kind, pool, act, K, pad, shift,
                                             # c_in, c_out, multiplier, out_zp, reserved


@dataclass
class PackedModel:
    """Self-describing deployable model: topology, constants, weight image."""

    layers: list[LayerSpec]
    biases: list[np.ndarray]          # i32 per output channel per layer
    weight_words: np.ndarray          # uint16 SRAM image, layer-aligned
    layer_word_base: list[int]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.weight_words = np.asarray(self.weight_words, dtype=np.uint16)
        self.biases = [np.asarray(b, dtype=np.int32) for b in self.biases]
        self.validate()

    def validate(self) -> None:
        if len(self.biases) != len(self.layers):
            raise SerializationError("bias table layer count mismatch")
        expect_words = 0
        for i, spec in enumerate(self.layers):
            if self.biases[i].shape != (spec.c_out,):
                raise SerializationError(f"layer {i}: bias count != c_out")
            if self.layer_word_base[i] != expect_words:
                raise SerializationError(f"layer {i}: unexpected base address")
            expect_words += (spec.c_out * spec.c_in * spec.kernel + 1) // 2
        if self.weight_words.size != expect_words:
            raise SerializationError(
                f"weight image has {self.weight_words.size} words, expected {expect_words}")
        if 2 * self.weight_words.size > WEIGHT_MEM_BYTES:
            raise CapacityError("weight image exceeds the 64 KB weight memory")

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_weights(net: NetworkSpec, ws: WeightSet) -> "PackedModel":
        ws.check_against(net)
        image, bases = pack_sram_image(ws)
        return PackedModel(layers=list(net.layers),
                           biases=[lw.biases.copy() for lw in ws.layers],
                           weight_words=image, layer_word_base=bases)

    def to_network_spec(self, input_length: int = 512) -> NetworkSpec:
        return NetworkSpec(layers=tuple(self.layers), input_length=input_length,
                           num_classes=self.layers[-1].c_out)

    def to_weight_set(self) -> WeightSet:
        layers = []
        for i, spec in enumerate(self.layers):
            n = spec.c_out * spec.c_in * spec.kernel
            base = self.layer_word_base[i]
            words = self.weight_words[base:base + (n + 1) // 2]
            flat = unpack_weight_bytes(words, n)
            layers.append(LayerWeights(
                weights=flat.reshape(spec.c_out, spec.c_in, spec.kernel),
                biases=self.biases[i].copy()))
        return WeightSet(layers=layers)

    # -- wire format --------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<HB", self.version, len(self.layers))
        for spec in self.layers:
            out += _DESCRIPTOR.pack(int(spec.kind), int(spec.pool_mode),
                                    int(spec.activation), spec.kernel, spec.padding,
                                    spec.requant_shift, spec.c_in, spec.c_out,
                                    spec.requant_multiplier, spec.out_zero_point, 0)
        for b in self.biases:
            out += b.astype("<i4").tobytes()
        out += self.weight_words.astype("<u2").tobytes()
        return bytes(out)

    @staticmethod
    def from_bytes(blob: bytes) -> "PackedModel":
        if len(blob) < HEADER_SIZE:
            raise TruncationError("stream shorter than header")
        if blob[:4] != MAGIC:
            raise BadMagicError(f"bad magic {blob[:4]!r}")
        version, layer_count = struct.unpack_from("<HB", blob, 4)
        if version != FORMAT_VERSION:
            raise SerializationError(f"unsupported format version {version}")
        if layer_count == 0:
            raise SerializationError("model has no layers")
        off = HEADER_SIZE
        specs: list[LayerSpec] = []
        for i in range(layer_count):
            if off + DESCRIPTOR_SIZE > len(blob):
                raise TruncationError(f"descriptor {i} truncated")
            (kind, pool, act, kernel, padding, shift,
             c_in, c_out, multiplier, out_zp, _res) = _DESCRIPTOR.unpack_from(blob, off)
            off += DESCRIPTOR_SIZE
            try:
                specs.append(LayerSpec(kind=LayerKind(kind), c_in=c_in, c_out=c_out,
                                       kernel=kernel, padding=padding,
                                       pool_mode=PoolMode(pool),
                                       activation=Activation(act),
                                       requant_multiplier=multiplier,
                                       requant_shift=shift, out_zero_point=out_zp))
            except (ValueError, ConfigError) as exc:
                raise SerializationError(f"descriptor {i} invalid: {exc}") from exc
        biases: list[np.ndarray] = []
        for i, spec in enumerate(specs):
            nbytes = 4 * spec.c_out
            if off + nbytes > len(blob):
                raise TruncationError(f"bias table for layer {i} truncated")
            biases.append(np.frombuffer(blob, dtype="<i4", count=spec.c_out,
                                        offset=off).astype(np.int32))
            off += nbytes
        total_words = sum((s.c_out * s.c_in * s.kernel + 1) // 2 for s in specs)
        if off + 2 * total_words > len(blob):
            raise TruncationError("weight image truncated")
        words = np.frombuffer(blob, dtype="<u2", count=total_words,
                              offset=off).astype(np.uint16)
        off += 2 * total_words
        if off != len(blob):
            raise SerializationError(f"{len(blob) - off} trailing bytes")
        bases, addr = [], 0
        for s in specs:
            bases.append(addr)
            addr += (s.c_out * s.c_in * s.kernel + 1) // 2
        return PackedModel(layers=specs, biases=biases, weight_words=words,
                           layer_word_base=bases)

    def param_bytes_int8(self) -> int:
        """Parameter payload in the INT8 format: weight bytes + i32 biases."""
        n_w = sum(s.c_out * s.c_in * s.kernel for s in self.layers)
        n_b = sum(s.c_out for s in self.layers)
        return n_w + 4 * n_b


def param_bytes_fp32(net: NetworkSpec) -> int:
    n_w = sum(s.c_out * s.c_in * s.kernel for s in net.layers)
    n_b = sum(s.c_out for s in net.layers)
    return 4 * (n_w + n_b)


# ---------------------------------------------------------------------------
# Float reference forward (for folding checks and activation calibration)
# ---------------------------------------------------------------------------

def float_layer_forward(spec: LayerSpec, params: FloatLayerParams,
                        x: np.ndarray) -> np.ndarray:
    """Float conv -> (bn) -> pool -> activation, mirroring the integer order."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != spec.c_in:
        raise ShapeError("channel mismatch in float forward")
    w_in = x.shape[1]
    k, pad = spec.kernel, spec.padding
    left, right = pad, max(k - 1 - pad, 0)
    xp = np.zeros((spec.c_in, left + w_in + right))
    xp[:, left:left + w_in] = x
    windows = sliding_window_view(xp, k, axis=1)[:, :w_in, :]
    y = np.einsum("ock,ctk->ot", params.weights, windows) + params.bias[:, np.newaxis]
    if params.bn is not None:
        bn = params.bn
        factor = bn.gamma / np.sqrt(bn.running_var + bn.epsilon)
        y = (y - bn.running_mean[:, np.newaxis]) * factor[:, np.newaxis] \
            + bn.beta[:, np.newaxis]
    if spec.pool_mode == PoolMode.MAXPOOL2:
        if y.shape[1] % 2 != 0:
            raise ConfigError("maxpool needs even length")
        y = np.maximum(y[:, 0::2], y[:, 1::2])
    elif spec.pool_mode == PoolMode.GLOBAL_AVG:
        y = y.mean(axis=1, keepdims=True)
    if spec.activation == Activation.RELU_SATURATE:
        y = np.maximum(y, 0.0)
    return y


def float_forward(fm: FloatModel, x: np.ndarray) -> list[np.ndarray]:
    """Per-layer float activations for a single 1-channel input."""
    outs = []
    cur = np.asarray(x, dtype=np.float64)
    if cur.ndim == 1:
        cur = cur[np.newaxis, :]
    for spec, params in zip(fm.net.layers, fm.layers):
        cur = float_layer_forward(spec, params, cur)
        outs.append(cur)
    return outs


def calibrate_activation_scales(fm: FloatModel, windows: np.ndarray,
                                input_scale: float) -> list[float]:
    """Per-layer activation scales from observed float ranges.

    Returns one scale per layer boundary: index 0 is the input scale, index
    i+1 the output scale of layer i (u8 with zero point 0 after ReLU; the
    final entry is the logit scale taken from the observed logit range).
    """
    scales = [input_scale]
    maxima = np.zeros(len(fm.layers))
    for window in np.atleast_2d(windows):
        z = (window - window.mean()) / (window.std() or 1.0)
        for i, act in enumerate(float_forward(fm, z)):
            maxima[i] = max(maxima[i], float(np.max(np.abs(act))))
    for i, m in enumerate(maxima):
        scales.append(max(m, 1e-12) / 255.0)
    return scales


def quantize_model(fm: FloatModel, input_scale: float = 1.0 / 32.0,
                   act_scales: list[float] | None = None,
                   calib_windows: np.ndarray | None = None) -> PackedModel:
    """Full float-to-device pipeline: fold, quantize, derive requant constants."""
    if act_scales is None:
        if calib_windows is None:
            raise ConfigError("need either act_scales or calibration windows")
        act_scales = calibrate_activation_scales(fm, calib_windows, input_scale)
    if len(act_scales) != len(fm.layers) + 1:
        raise ConfigError("need one scale per layer boundary")
    specs: list[LayerSpec] = []
    q_layers: list[LayerWeights] = []
    for i, (spec, params) in enumerate(zip(fm.net.layers, fm.layers)):
        if params.bn is not None:
            params = fold_batchnorm(params)
        s_in, s_out = act_scales[i], act_scales[i + 1]
        lw, s_w = quantize_weights(params, s_in)
        mult, shift = derive_requant_constants(s_in, s_w, s_out)
        specs.append(LayerSpec(kind=spec.kind, c_in=spec.c_in, c_out=spec.c_out,
                               kernel=spec.kernel, padding=spec.padding,
                               pool_mode=spec.pool_mode, activation=spec.activation,
                               requant_multiplier=mult, requant_shift=shift))
        q_layers.append(lw)
    net = NetworkSpec(layers=tuple(specs), input_length=fm.net.input_length,
                      num_classes=fm.net.num_classes)
    return PackedModel.from_weights(net, WeightSet(layers=q_layers))


# ---------------------------------------------------------------------------
# Random models for equivalence testing
# ---------------------------------------------------------------------------

def random_model(net: NetworkSpec, rng: np.random.Generator,
                 weight_range: int = 64) -> PackedModel:
    """Random INT8 model with requant shifts sized to keep activations lively."""
    specs, q_layers = [], []
    for spec in net.layers:
        n = spec.c_in * spec.kernel
        w = rng.integers(-weight_range, weight_range + 1,
                         size=(spec.c_out, spec.c_in, spec.kernel)).astype(np.int8)
        b = rng.integers(-1000, 1000, size=spec.c_out).astype(np.int32)
        mult = int(rng.integers(1 << 30, 1 << 31))
        # random-walk accumulator sigma ~ sqrt(n) * sigma_w * sigma_x
        sigma = math.sqrt(n) * (weight_range / math.sqrt(3)) * 74.0
        shift = min(max(31 + round(math.log2(max(sigma, 1.0) / 64.0)), 1), 62)
        if spec.activation == Activation.SIGNED_BYPASS:
            shift = max(shift - 4, 1)  # keep logits spread out
        specs.append(LayerSpec(kind=spec.kind, c_in=spec.c_in, c_out=spec.c_out,
                               kernel=spec.kernel, padding=spec.padding,
                               pool_mode=spec.pool_mode, activation=spec.activation,
                               requant_multiplier=mult, requant_shift=shift))
        q_layers.append(LayerWeights(weights=w, biases=b))
    rnet = NetworkSpec(layers=tuple(specs), input_length=net.input_length,
                       num_classes=net.num_classes)
    return PackedModel.from_weights(rnet, WeightSet(layers=q_layers))
