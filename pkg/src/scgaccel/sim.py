"""Cycle-accurate functional simulator of the accelerator.

Models the memory subsystem (banked weight SPRAM, dual-bank input buffer,
ping-pong activation buffers, bias/scale storage), the six-PE systolic
cluster, the staged 32x32 serial multiplier in the requantization engine,
the result packer, and the nested-loop control FSM.

Two execution paths share the same arithmetic definitions:

* ``run_inference`` executes layers with vectorized integer math while
  accounting cycles at loop-nest granularity (7 prime + K compute per
  channel group, 6 cycles per requantized output).  This is the fast path
  used for full-network runs.
* ``start``/``step`` drive a per-clock micro model that walks the same loop
  nest one cycle at a time, emitting a structured trace event per cycle.
  Both paths produce bit-identical outputs and identical cycle splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace

from numpy.lib.stride_tricks import sliding_window_view

import numpy as np

from .cyclemodel import (LayerCycles, PE_COUNT, PRIME_CYCLES,
                         REQUANT_CYCLES_TABLE, array_efficiency,
                         system_efficiency)
from .errors import (CapacityError, ConfigError, MemoryFault, ShapeError,
                     SimFault, StateError)
from .modeltools import PackedModel, unpack_weight_bytes
from .qnn import (GAP_LENGTH, GAP_SHIFT, INT32_MAX, INT32_MIN, Activation,
                  Logits, PoolMode, QuantTensor)

WEIGHT_ADDR_LIMIT = 1 << 15      # 15-bit address space, MSB selects the bank
INPUT_BANKS = 2
INPUT_BANK_WORDS = 256
PINGPONG_WORDS = 16384

REQUANT_MUL_STAGES = 4           # serial multiplier partial products
REQUANT_OVERHEAD = REQUANT_CYCLES_TABLE - REQUANT_MUL_STAGES


# ---------------------------------------------------------------------------
# Serial 32x32 -> 64 multiplier
# ---------------------------------------------------------------------------

def _split_halves(v: int) -> tuple[int, int]:
    """Signed upper half and unsigned lower half of a 32-bit operand."""
    return v >> 16, v & 0xFFFF


def mul64signed(a: int, b: int) -> int:
    """Full signed 64-bit product via the 4-stage sum-of-products decomposition."""
    ah, al = _split_halves(int(a))
    bh, bl = _split_halves(int(b))
    p = al * bl
    p += (al * bh) << 16
    p += (ah * bl) << 16
    p += (ah * bh) << 32
    return p


def mul64signed_array(a: np.ndarray, b) -> np.ndarray:
    """Vectorized mul64signed over int64 arrays holding i32 operands."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    ah, al = a >> 16, a & 0xFFFF
    bh, bl = b >> 16, b & 0xFFFF
    return al * bl + ((al * bh) << 16) + ((ah * bl) << 16) + ((ah * bh) << 32)


class RequantUnit:
    """Staged requantization engine state (one result per 4 multiplier cycles)."""

    def __init__(self):
        self.stage = 0
        self.product_acc = 0
        self.busy = False
        self._ops = (0, 0)

    def start(self, acc: int, multiplier: int):
        if self.busy:
            raise StateError("requant unit busy")
        self.stage = 0
        self.product_acc = 0
        self.busy = True
        self._ops = (int(acc), int(multiplier))

    def step(self) -> bool:
        """Advance one multiplier stage; returns True when the product is done."""
        if not self.busy:
            raise StateError("requant unit idle")
        a, b = self._ops
        ah, al = _split_halves(a)
        bh, bl = _split_halves(b)
        partial = (al * bl, (al * bh) << 16, (ah * bl) << 16, (ah * bh) << 32)
        self.product_acc += partial[self.stage]
        self.stage += 1
        if self.stage == REQUANT_MUL_STAGES:
            self.busy = False
            return True
        return False


def _round_shift(p: int, shift: int) -> int:
    if shift == 0:
        return p
    half = 1 << (shift - 1)
    mag = (abs(p) + half) >> shift
    return -mag if p < 0 else mag


# ---------------------------------------------------------------------------
# Memory subsystem
# ---------------------------------------------------------------------------

class MemorySubsystem:
    def __init__(self):
        self.weight_mem = np.zeros(WEIGHT_ADDR_LIMIT, dtype=np.uint16)
        self.bias_rom: list[np.ndarray] = []
        self.scale_regs: list[tuple[int, int]] = []
        self.input_words = np.zeros(INPUT_BANKS * INPUT_BANK_WORDS, dtype=np.uint16)
        self.ping = np.zeros(PINGPONG_WORDS, dtype=np.uint16)
        self.pong = np.zeros(PINGPONG_WORDS, dtype=np.uint16)
        self.pingpong_toggle = 0

    def read_weight_word(self, addr: int) -> int:
        if not 0 <= addr < WEIGHT_ADDR_LIMIT:
            raise MemoryFault(f"weight address 0x{addr:04X} outside 15-bit space")
        return int(self.weight_mem[addr])

    def weight_region(self, base: int, n_words: int) -> np.ndarray:
        if base < 0 or base + n_words > WEIGHT_ADDR_LIMIT:
            raise MemoryFault(f"weight region [{base}, {base + n_words}) out of range")
        return self.weight_mem[base:base + n_words]

    # Input buffer: even words live in bank 0, odd words in bank 1, so the
    # prime phase can stream two samples per cycle.
    def input_word_index(self, word: int) -> tuple[int, int]:
        return word & 1, word >> 1

    def read_input_byte(self, byte_index: int) -> int:
        word = byte_index >> 1
        if word >= INPUT_BANKS * INPUT_BANK_WORDS:
            raise MemoryFault(f"input buffer byte {byte_index} out of range")
        w = int(self.input_words[word])
        return w & 0xFF if byte_index % 2 == 0 else w >> 8

    @property
    def read_buf(self) -> np.ndarray:
        return self.ping if self.pingpong_toggle == 0 else self.pong

    @property
    def write_buf(self) -> np.ndarray:
        return self.pong if self.pingpong_toggle == 0 else self.ping

    def toggle(self):
        self.pingpong_toggle ^= 1


# ---------------------------------------------------------------------------
# Systolic cluster and packer
# ---------------------------------------------------------------------------

class SystolicCluster:
    def __init__(self):
        self.x_pipe = [0] * PE_COUNT          # u8 samples, X[0..5]
        self.acc = [0] * PE_COUNT             # signed 32-bit accumulators
        self.broadcast_weight = 0
        self.broadcast_bias = 0
        self.phase = "idle"

    def shift_in(self, sample: int):
        self.x_pipe = [sample] + self.x_pipe[:-1]

    def load_bias(self, bias: int):
        self.broadcast_bias = bias
        self.acc = [bias] * PE_COUNT

    def mac_all(self, weight: int, zero_point: int):
        self.broadcast_weight = weight
        # X[j] currently holds the sample for output position j of this batch
        for j in range(PE_COUNT):
            self.acc[j] += (self.x_pipe[j] - zero_point) * weight


class ResultPacker:
    """Adapts the 8-bit result stream to 16-bit buffer words, channel aligned."""

    def __init__(self, target: np.ndarray, base_word: int):
        self.target = target
        self.word_addr = base_word
        self.pending: int | None = None

    def push(self, byte: int):
        if self.pending is None:
            self.pending = byte & 0xFF
        else:
            self._write((byte & 0xFF) << 8 | self.pending)
            self.pending = None

    def flush(self):
        """Channel boundary: emit the half-full word with a zero-pad high byte."""
        if self.pending is not None:
            self._write(self.pending)
            self.pending = None

    def _write(self, word: int):
        if self.word_addr >= self.target.size:
            raise MemoryFault("ping-pong buffer overflow")
        self.target[self.word_addr] = word
        self.word_addr += 1


# ---------------------------------------------------------------------------
# Trace events
# ---------------------------------------------------------------------------

@dataclass
class CycleEvent:
    cycle: int
    state: str          # prime | compute | requant
    layer: int
    c_out: int
    batch: int
    c_in: int
    k: int
    reads: list = field(default_factory=list)
    macs: int = 0
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ---------------------------------------------------------------------------
# Machine
# ---------------------------------------------------------------------------

@dataclass
class _LayerResult:
    """Recorded per-layer output image for debug readback."""
    words: np.ndarray
    c_out: int
    w_out: int
    zero_point: int
    signed: bool


class SimMachine:
    def __init__(self, trace_sink=None):
        self.mem = MemorySubsystem()
        self.cluster = SystolicCluster()
        self.requant_unit = RequantUnit()
        self.cycle_counter = 0
        self.trace_sink = trace_sink
        self.model: PackedModel | None = None
        self.input_len = 0
        self.input_channels = 0
        self.input_zero_point = 0
        self._input_loaded = False
        self._layer_results: list[_LayerResult | None] = []
        self._logits: Logits | None = None
        self._gen = None
        self._run_cycles: list[LayerCycles] = []
        self._mac_count = 0

    # -- loading ------------------------------------------------------------

    def load_model(self, model: PackedModel):
        if model.weight_words.size == 0:
            raise CapacityError("model has an empty weight image")
        if model.weight_words.size > WEIGHT_ADDR_LIMIT:
            raise CapacityError("weight image exceeds the 32K-word address space")
        model.validate()
        self.mem.weight_mem[:] = 0
        self.mem.weight_mem[:model.weight_words.size] = model.weight_words
        self.mem.bias_rom = [b.copy() for b in model.biases]
        self.mem.scale_regs = [(spec.requant_multiplier, spec.requant_shift)
                               for spec in model.layers]
        self.model = model
        self._input_loaded = False
        self._layer_results = [None] * len(model.layers)
        self._logits = None
        self._gen = None

    def load_input(self, x: QuantTensor):
        if self.model is None:
            raise StateError("load a model before the input window")
        if x.channels != self.model.layers[0].c_in:
            raise ShapeError(f"input has {x.channels} channels, "
                             f"model expects {self.model.layers[0].c_in}")
        wpc = (x.length + 1) // 2
        total_words = x.channels * wpc
        if total_words > INPUT_BANKS * INPUT_BANK_WORDS:
            raise ShapeError(f"input needs {total_words} words, buffer has "
                             f"{INPUT_BANKS * INPUT_BANK_WORDS}")
        self.mem.input_words[:] = 0
        flat = np.zeros(2 * total_words, dtype=np.uint8)
        for c in range(x.channels):
            flat[2 * c * wpc:2 * c * wpc + x.length] = x.data[c]
        self.mem.input_words[:total_words] = (
            flat[0::2].astype(np.uint16) | (flat[1::2].astype(np.uint16) << 8))
        self.input_len = x.length
        self.input_channels = x.channels
        self.input_zero_point = x.zero_point
        self._input_loaded = True
        self._logits = None
        self._gen = None

    def read_input_sample(self, channel: int, t: int) -> int:
        wpc = (self.input_len + 1) // 2
        return self.mem.read_input_byte(2 * channel * wpc + t)

    # -- geometry helpers ---------------------------------------------------

    def _layer_lengths(self) -> list[int]:
        lengths, w = [], self.input_len
        for spec in self.model.layers:
            lengths.append(w)
            w = spec.out_length(w)
        return lengths

    def _read_plane(self, li: int, w_in: int, c_in: int) -> tuple[np.ndarray, int]:
        """Input activation plane [c_in, w_in] (int64) and its zero point."""
        if li == 0:
            wpc = (w_in + 1) // 2
            total = c_in * wpc
            flat = np.empty(2 * total, dtype=np.uint8)
            words = self.mem.input_words[:total]
            flat[0::2] = (words & 0xFF).astype(np.uint8)
            flat[1::2] = (words >> 8).astype(np.uint8)
            plane = np.stack([flat[2 * c * wpc:2 * c * wpc + w_in]
                              for c in range(c_in)])
            return plane.astype(np.int64), self.input_zero_point
        prev = self.model.layers[li - 1]
        wpc = (w_in + 1) // 2
        buf = self.mem.read_buf
        plane = np.empty((c_in, w_in), dtype=np.int64)
        for c in range(c_in):
            words = buf[c * wpc:(c + 1) * wpc]
            row = np.empty(2 * wpc, dtype=np.uint8)
            row[0::2] = (words & 0xFF).astype(np.uint8)
            row[1::2] = (words >> 8).astype(np.uint8)
            plane[c] = row[:w_in]
        return plane, prev.out_zero_point

    def _layer_weight_geometry(self, li: int):
        spec = self.model.layers[li]
        base = self.model.layer_word_base[li]
        n = spec.c_out * spec.c_in * spec.kernel
        return spec, base, n

    # -- fast path -----------------------------------------------------------

    def run_inference(self):
        """Execute the layer sequencer end to end.

        Returns (Logits, cycles_this_run, per-layer LayerCycles).
        """
        if self.model is None or not self._input_loaded:
            raise StateError("model and input must be loaded before running")
        self.mem.pingpong_toggle = 0
        self._run_cycles = []
        self._mac_count = 0
        start_cycle = self.cycle_counter
        lengths = self._layer_lengths()
        logits = None
        for li, (spec, w_in) in enumerate(zip(self.model.layers, lengths)):
            logits = self._run_layer_fast(li, spec, w_in)
        if logits is None:
            raise SimFault("network produced no logits")
        self._logits = logits
        return logits, self.cycle_counter - start_cycle, list(self._run_cycles)

    def _run_layer_fast(self, li: int, spec, w_in: int):
        mem = self.mem
        plane, zp = self._read_plane(li, w_in, spec.c_in)
        n_batches = -(-w_in // PE_COUNT)
        t_total = n_batches * PE_COUNT
        k, pad = spec.kernel, spec.padding

        base = self.model.layer_word_base[li]
        n_weights = spec.c_out * spec.c_in * spec.kernel
        words = mem.weight_region(base, (n_weights + 1) // 2)
        w = unpack_weight_bytes(words, n_weights).reshape(
            spec.c_out, spec.c_in, spec.kernel).astype(np.int64)
        bias = mem.bias_rom[li].astype(np.int64)
        multiplier, shift = mem.scale_regs[li]

        # positions t in [0, t_total); taps t + k - pad; out-of-range reads
        # see the zero point (zero after offset subtraction)
        lo = -pad
        hi = t_total - 1 + (k - 1) - pad
        ext = np.zeros((spec.c_in, hi - lo + 1), dtype=np.int64)
        src_lo, src_hi = max(0, lo), min(w_in, hi + 1)
        ext[:, src_lo - lo:src_hi - lo] = plane[:, src_lo:src_hi] - zp
        windows = sliding_window_view(ext, k, axis=1)[:, :t_total, :]
        acc = np.einsum("ock,ctk->ot", w, windows) + bias[:, np.newaxis]
        if acc.min() < INT32_MIN or acc.max() > INT32_MAX:
            raise SimFault(f"layer {li}: 32-bit accumulator overflow at cycle "
                           f"{self.cycle_counter}")
        self._mac_count += spec.c_out * t_total * spec.c_in * spec.kernel

        prime = spec.c_out * n_batches * spec.c_in * PRIME_CYCLES
        compute = spec.c_out * n_batches * spec.c_in * spec.kernel

        signed = spec.activation == Activation.SIGNED_BYPASS
        if spec.pool_mode == PoolMode.MAXPOOL2:
            pooled = np.maximum(acc[:, 0::2], acc[:, 1::2])   # [c_out, t_total/2]
            n_outputs = spec.c_out * (t_total // 2)
            w_out = w_in // 2
            kept = pooled[:, :w_out]
        elif spec.pool_mode == PoolMode.GLOBAL_AVG:
            if w_in != GAP_LENGTH:
                raise ConfigError(f"GAP layer requires input length {GAP_LENGTH}")
            kept = np.sum(acc[:, :GAP_LENGTH] >> GAP_SHIFT, axis=1, keepdims=True)
            pooled = kept
            n_outputs = spec.c_out
            w_out = 1
        else:  # bypass: every valid position flows straight to the requantizer
            pooled = acc[:, :w_in]
            kept = pooled
            n_outputs = spec.c_out * w_in
            w_out = w_in

        # Requantization through the serial-multiplier decomposition (equal to
        # the golden direct product by construction, asserted in tests).
        p = mul64signed_array(pooled, multiplier)
        r = self._round_shift_array(p, shift)
        if signed:
            out = np.clip(r[:, :w_out], INT32_MIN, INT32_MAX).astype(np.int32)
            logits = Logits(out[:, 0])
            self._layer_results[li] = _LayerResult(
                words=np.zeros(0, dtype=np.uint16), c_out=spec.c_out, w_out=w_out,
                zero_point=0, signed=True)
        else:
            out = np.clip(r + spec.out_zero_point, 0, 255).astype(np.uint8)
            out = out[:, :w_out]
            wpc = (w_out + 1) // 2
            img = np.zeros(spec.c_out * wpc, dtype=np.uint16)
            for c in range(spec.c_out):
                row = np.zeros(2 * wpc, dtype=np.uint8)
                row[:w_out] = out[c]
                img[c * wpc:(c + 1) * wpc] = (
                    row[0::2].astype(np.uint16) | (row[1::2].astype(np.uint16) << 8))
            mem.write_buf[:img.size] = img
            self._layer_results[li] = _LayerResult(
                words=img.copy(), c_out=spec.c_out, w_out=w_out,
                zero_point=spec.out_zero_point, signed=False)
            logits = None

        requant = n_outputs * REQUANT_CYCLES_TABLE
        lc = LayerCycles(prime=prime, compute=compute, requant=requant,
                         n_batches=n_batches, n_outputs=n_outputs,
                         array_eff=array_efficiency(spec.kernel), sys_eff=0.0)
        lc.sys_eff = system_efficiency(lc)
        self._run_cycles.append(lc)
        self.cycle_counter += lc.total
        mem.toggle()
        return logits

    @staticmethod
    def _round_shift_array(p: np.ndarray, shift: int) -> np.ndarray:
        if shift == 0:
            return p
        half = np.int64(1) << np.int64(shift - 1)
        mag = (np.abs(p) + half) >> np.int64(shift)
        return np.where(p < 0, -mag, mag)

    # -- micro (per-cycle) path ---------------------------------------------

    def start(self):
        """Arm the per-cycle stepper; each step() then advances one clock."""
        if self.model is None or not self._input_loaded:
            raise StateError("model and input must be loaded before running")
        self.mem.pingpong_toggle = 0
        self._run_cycles = []
        self._mac_count = 0
        self._gen = self._micro_run()

    def step(self) -> CycleEvent:
        if self._gen is None:
            raise StateError("machine is idle; call start() first")
        try:
            event = next(self._gen)
        except StopIteration:
            self._gen = None
            raise StateError("run already complete")
        if self.trace_sink is not None:
            self.trace_sink(event)
        return event

    def run_micro(self):
        """Drain the per-cycle stepper; same results as run_inference."""
        self.start()
        start_cycle = self.cycle_counter
        while True:
            try:
                self.step()
            except StateError:
                break
        return self._logits, self.cycle_counter - start_cycle, list(self._run_cycles)

    def _emit(self, **kw) -> CycleEvent:
        self.cycle_counter += 1
        return CycleEvent(cycle=self.cycle_counter, **kw)

    def _micro_run(self):
        lengths = self._layer_lengths()
        for li, (spec, w_in) in enumerate(zip(self.model.layers, lengths)):
            yield from self._micro_layer(li, spec, w_in)
        if self._logits is None:
            raise SimFault("network produced no logits")

    def _micro_sample(self, li: int, w_in: int, zp: int, c: int, t: int) -> int:
        """Activation read with zero-point padding outside [0, w_in)."""
        if t < 0 or t >= w_in:
            return zp
        if li == 0:
            return self.read_input_sample(c, t)
        wpc = (w_in + 1) // 2
        word = int(self.mem.read_buf[c * wpc + (t >> 1)])
        return word & 0xFF if t % 2 == 0 else word >> 8

    def _micro_layer(self, li: int, spec, w_in: int):
        mem = self.mem
        cluster = self.cluster
        n_batches = -(-w_in // PE_COUNT)
        k, pad = spec.kernel, spec.padding
        base = self.model.layer_word_base[li]
        multiplier, shift = mem.scale_regs[li]
        zp = self.input_zero_point if li == 0 else self.model.layers[li - 1].out_zero_point
        signed = spec.activation == Activation.SIGNED_BYPASS

        prime = compute = requant = 0
        n_outputs = 0
        w_out = spec.out_length(w_in)
        wpc_out = (w_out + 1) // 2
        packer = ResultPacker(mem.write_buf, 0)
        logits = np.zeros(spec.c_out, dtype=np.int64) if signed else None
        out_img_rows = [] if not signed else None

        if spec.pool_mode == PoolMode.GLOBAL_AVG and w_in != GAP_LENGTH:
            raise ConfigError(f"GAP layer requires input length {GAP_LENGTH}")

        for o in range(spec.c_out):
            gap_acc = 0
            channel_bytes = []
            for b in range(n_batches):
                base_t = b * PE_COUNT
                for c in range(spec.c_in):
                    # prime: load bias on a fresh group, then fill the pipe
                    cluster.phase = "prime"
                    if c == 0:
                        cluster.load_bias(int(mem.bias_rom[li][o]))
                    yield self._emit(state="prime", layer=li, c_out=o, batch=b,
                                     c_in=c, k=-1,
                                     note="bias" if c == 0 else "")
                    prime += 1
                    for i in range(PE_COUNT):
                        t = base_t - pad + i
                        sample = self._micro_sample(li, w_in, zp, c, t)
                        cluster.shift_in(sample)
                        yield self._emit(state="prime", layer=li, c_out=o,
                                         batch=b, c_in=c, k=-1,
                                         reads=[{"mem": "act", "t": t}])
                        prime += 1
                    # the pipe now holds x[base_t - pad .. base_t - pad + 5]
                    # in reverse shift order; expose it positionally
                    window = [self._micro_sample(li, w_in, zp, c, base_t - pad + i)
                              for i in range(PE_COUNT)]
                    cluster.x_pipe = list(window)
                    cluster.phase = "compute"
                    for kk in range(k):
                        idx = (o * spec.c_in + c) * k + kk
                        reads = []
                        if idx % 2 == 0 or kk == 0:
                            addr = base + idx // 2
                            mem.read_weight_word(addr)
                            reads.append({"mem": "weight", "addr": addr})
                        weight = int(self._micro_weight(li, spec, idx))
                        cluster.mac_all(weight, zp)
                        self._mac_count += PE_COUNT
                        # shift the next sample in for tap kk+1
                        nxt = self._micro_sample(li, w_in, zp, c,
                                                 base_t - pad + kk + 1 + (PE_COUNT - 1))
                        cluster.x_pipe = cluster.x_pipe[1:] + [nxt]
                        yield self._emit(state="compute", layer=li, c_out=o,
                                         batch=b, c_in=c, k=kk, reads=reads,
                                         macs=PE_COUNT)
                        compute += 1
                # overflow is checked on the completed group, mirroring the
                # final-accumulator check of the golden model and fast path
                if max(cluster.acc) > INT32_MAX or min(cluster.acc) < INT32_MIN:
                    raise SimFault(f"layer {li}: accumulator overflow at "
                                   f"cycle {self.cycle_counter}")
                # group complete for all input channels: pool + requant
                if spec.pool_mode == PoolMode.MAXPOOL2:
                    for m in range(PE_COUNT // 2):
                        pooled = max(cluster.acc[2 * m], cluster.acc[2 * m + 1])
                        value = yield from self._micro_requant(
                            li, o, b, pooled, multiplier, shift, spec, signed=False)
                        requant += REQUANT_CYCLES_TABLE
                        n_outputs += 1
                        if base_t + 2 * m < w_in:   # overhang results are dropped
                            channel_bytes.append(int(value))
                            packer.push(int(value))
                elif spec.pool_mode == PoolMode.GLOBAL_AVG:
                    for j in range(PE_COUNT):
                        if base_t + j < w_in:
                            gap_acc += cluster.acc[j] >> GAP_SHIFT
                else:  # bypass
                    for j in range(PE_COUNT):
                        if base_t + j < w_in:
                            value = yield from self._micro_requant(
                                li, o, b, cluster.acc[j], multiplier, shift,
                                spec, signed=signed)
                            requant += REQUANT_CYCLES_TABLE
                            n_outputs += 1
                            if signed:
                                if base_t + j == 0:   # logit = position 0
                                    logits[o] = value
                            else:
                                channel_bytes.append(int(value))
                                packer.push(int(value))
            if spec.pool_mode == PoolMode.GLOBAL_AVG:
                value = yield from self._micro_requant(
                    li, o, n_batches - 1, gap_acc, multiplier, shift, spec,
                    signed=signed)
                requant += REQUANT_CYCLES_TABLE
                n_outputs += 1
                if signed:
                    logits[o] = value
                else:
                    channel_bytes.append(int(value))
                    packer.push(int(value))
            if not signed:
                packer.flush()
                row = np.zeros(2 * wpc_out, dtype=np.uint8)
                row[:len(channel_bytes)] = channel_bytes
                out_img_rows.append(row)

        lc = LayerCycles(prime=prime, compute=compute, requant=requant,
                         n_batches=n_batches, n_outputs=n_outputs,
                         array_eff=array_efficiency(spec.kernel), sys_eff=0.0)
        lc.sys_eff = system_efficiency(lc)
        self._run_cycles.append(lc)

        if signed:
            self._logits = Logits(np.clip(logits, INT32_MIN, INT32_MAX)
                                  .astype(np.int32))
            self._layer_results[li] = _LayerResult(
                words=np.zeros(0, dtype=np.uint16), c_out=spec.c_out,
                w_out=w_out, zero_point=0, signed=True)
        else:
            flat = np.concatenate(out_img_rows)
            img = (flat[0::2].astype(np.uint16)
                   | (flat[1::2].astype(np.uint16) << 8))
            self._layer_results[li] = _LayerResult(
                words=img.copy(), c_out=spec.c_out, w_out=w_out,
                zero_point=spec.out_zero_point, signed=False)
        mem.toggle()

    def _micro_weight(self, li: int, spec, idx: int) -> int:
        base = self.model.layer_word_base[li]
        word = self.mem.read_weight_word(base + idx // 2)
        byte = word & 0xFF if idx % 2 == 0 else word >> 8
        return byte - 256 if byte >= 128 else byte

    def _micro_requant(self, li, o, b, acc, multiplier, shift, spec, signed):
        """Six requant cycles: four multiplier stages plus two of overhead."""
        self.requant_unit.start(acc, multiplier)
        for _ in range(REQUANT_MUL_STAGES):
            self.requant_unit.step()
            yield self._emit(state="requant", layer=li, c_out=o, batch=b,
                             c_in=-1, k=-1, note="mul-stage")
        p = self.requant_unit.product_acc
        r = _round_shift(p, shift)
        if signed:
            value = max(INT32_MIN, min(INT32_MAX, r))
        else:
            value = max(0, min(255, r + spec.out_zero_point))
        for _ in range(REQUANT_OVERHEAD):
            yield self._emit(state="requant", layer=li, c_out=o, batch=b,
                             c_in=-1, k=-1, note="pack")
        return value

    # -- readback ------------------------------------------------------------

    def read_layer_activation(self, layer: int) -> QuantTensor:
        """Unpack a completed ReLU layer's output image into a QuantTensor."""
        if self.model is None or layer >= len(self._layer_results) \
                or self._layer_results[layer] is None:
            raise StateError(f"layer {layer} has not been executed")
        res = self._layer_results[layer]
        if res.signed:
            raise StateError("signed logit layers have no activation tensor")
        wpc = (res.w_out + 1) // 2
        data = np.empty((res.c_out, res.w_out), dtype=np.uint8)
        for c in range(res.c_out):
            words = res.words[c * wpc:(c + 1) * wpc]
            row = np.empty(2 * wpc, dtype=np.uint8)
            row[0::2] = (words & 0xFF).astype(np.uint8)
            row[1::2] = (words >> 8).astype(np.uint8)
            data[c] = row[:res.w_out]
        return QuantTensor(data, zero_point=res.zero_point)

    @property
    def last_logits(self) -> Logits | None:
        return self._logits

    @property
    def mac_count(self) -> int:
        return self._mac_count

    def export_model(self) -> PackedModel:
        """Reconstruct a PackedModel from live machine memory (for verification)."""
        if self.model is None:
            raise StateError("no model loaded")
        n_words = self.model.weight_words.size
        layers = [replace(spec, requant_multiplier=m, requant_shift=s)
                  for spec, (m, s) in zip(self.model.layers, self.mem.scale_regs)]
        return PackedModel(
            layers=layers,
            biases=[b.copy() for b in self.mem.bias_rom],
            weight_words=self.mem.weight_mem[:n_words].copy(),
            layer_word_base=list(self.model.layer_word_base))
