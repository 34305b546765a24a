"""Cycle-accurate simulator: arithmetic units, memories, and both execution
paths against the golden model."""

import numpy as np
import pytest

from conftest import random_input, random_small_net
from scgaccel.cyclemodel import network_report
from scgaccel.errors import (CapacityError, MemoryFault, ShapeError,
                             StateError)
from scgaccel.modeltools import random_model
from scgaccel.qnn import (INT32_MAX, INT32_MIN, NetworkSpec, QuantTensor,
                          infer_window)
from scgaccel.sim import (RequantUnit, ResultPacker, SimMachine,
                          WEIGHT_ADDR_LIMIT, _round_shift, mul64signed,
                          mul64signed_array)

EDGE_OPERANDS = [0, 1, -1, 1 << 15, -(1 << 15), (1 << 15) - 1, -((1 << 15) - 1),
                 INT32_MAX, INT32_MIN, INT32_MIN + 1, INT32_MAX - 1]


# ---------------------------------------------------------------------------
# Serial multiplier
# ---------------------------------------------------------------------------

def test_mul64signed_million_random_pairs():
    rng = np.random.default_rng(0)
    a = rng.integers(INT32_MIN, INT32_MAX + 1, size=1_000_000, dtype=np.int64)
    b = rng.integers(INT32_MIN, INT32_MAX + 1, size=1_000_000, dtype=np.int64)
    assert np.array_equal(mul64signed_array(a, b), a * b)


def test_mul64signed_edge_cross_product():
    for a in EDGE_OPERANDS:
        for b in EDGE_OPERANDS:
            assert mul64signed(a, b) == a * b, (a, b)


def test_mul64signed_scalar_matches_array():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = int(rng.integers(INT32_MIN, INT32_MAX + 1))
        b = int(rng.integers(INT32_MIN, INT32_MAX + 1))
        assert mul64signed(a, b) == int(mul64signed_array(
            np.array([a]), np.array([b]))[0])


def test_requant_unit_four_stages():
    unit = RequantUnit()
    unit.start(-123456789, (1 << 30) + 12345)
    steps = 0
    while not unit.step():
        steps += 1
    assert steps + 1 == 4
    assert unit.product_acc == -123456789 * ((1 << 30) + 12345)
    with pytest.raises(StateError):
        unit.step()     # idle after completion
    unit.start(5, 7)
    with pytest.raises(StateError):
        unit.start(5, 7)   # busy


def test_round_shift_matches_golden_definition():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        p = int(rng.integers(-(1 << 62), 1 << 62))
        shift = int(rng.integers(0, 63))
        mag = (abs(p) + (1 << (shift - 1))) >> shift if shift else abs(p)
        expect = -mag if (p < 0 and shift) else (mag if shift else p)
        assert _round_shift(p, shift) == expect


# ---------------------------------------------------------------------------
# Memories and packer
# ---------------------------------------------------------------------------

def test_weight_memory_fault_outside_15_bit_space(default_pair):
    _, model, _ = default_pair
    machine = SimMachine()
    machine.load_model(model)
    assert machine.mem.read_weight_word(WEIGHT_ADDR_LIMIT - 1) >= 0
    with pytest.raises(MemoryFault):
        machine.mem.read_weight_word(WEIGHT_ADDR_LIMIT)
    with pytest.raises(MemoryFault):
        machine.mem.read_weight_word(-1)


def test_packer_pairs_bytes_and_flushes_tail():
    target = np.zeros(4, dtype=np.uint16)
    packer = ResultPacker(target, 0)
    for byte in (0x11, 0x22, 0x33):
        packer.push(byte)
    packer.flush()
    assert target.tolist() == [0x2211, 0x0033, 0, 0]
    packer.push(0x44)
    packer.push(0x55)
    assert target.tolist() == [0x2211, 0x0033, 0x5544, 0]


def test_packer_overflow_fault():
    packer = ResultPacker(np.zeros(1, dtype=np.uint16), 0)
    packer.push(1)
    packer.push(2)
    with pytest.raises(MemoryFault):
        packer.push(3)
        packer.push(4)


def test_load_input_validation(default_pair):
    _, model, x = default_pair
    machine = SimMachine()
    with pytest.raises(StateError):
        machine.load_input(x)          # no model yet
    machine.load_model(model)
    with pytest.raises(ShapeError):
        machine.load_input(QuantTensor(np.zeros((2, 512), dtype=np.uint8)))
    big = QuantTensor(np.zeros((1, 2048), dtype=np.uint8))
    with pytest.raises((CapacityError, ShapeError)):
        machine.load_input(big)


def test_input_buffer_round_trip(default_pair):
    _, model, x = default_pair
    machine = SimMachine()
    machine.load_model(model)
    machine.load_input(x)
    got = [machine.read_input_sample(0, t) for t in range(x.length)]
    assert got == x.data[0].tolist()


def test_export_model_round_trip(default_pair):
    _, model, _ = default_pair
    machine = SimMachine()
    machine.load_model(model)
    assert machine.export_model().to_bytes() == model.to_bytes()


# ---------------------------------------------------------------------------
# Fast path vs golden
# ---------------------------------------------------------------------------

def test_fast_path_matches_golden_default_topology(rng):
    net = NetworkSpec.default()
    for _ in range(3):
        model = random_model(net, rng)
        x = random_input(rng, net)
        gold, snaps = infer_window(model.to_network_spec(), model.to_weight_set(), x)
        machine = SimMachine()
        machine.load_model(model)
        machine.load_input(x)
        sim, cycles, _ = machine.run_inference()
        assert np.array_equal(gold.values, sim.values)
        assert cycles == 2_255_250
        for i, snap in enumerate(snaps):
            assert np.array_equal(machine.read_layer_activation(i).data, snap.data)


def test_fast_path_matches_golden_small_geometries(rng):
    for _ in range(30):
        net = random_small_net(rng)
        model = random_model(net, rng)
        x = random_input(rng, net)
        gold, snaps = infer_window(model.to_network_spec(net.input_length),
                                   model.to_weight_set(), x)
        machine = SimMachine()
        machine.load_model(model)
        machine.load_input(x)
        sim, _, _ = machine.run_inference()
        assert np.array_equal(gold.values, sim.values)
        for i, snap in enumerate(snaps):
            assert np.array_equal(machine.read_layer_activation(i).data, snap.data)


def test_fast_cycles_match_analytical_model(rng):
    for _ in range(10):
        net = random_small_net(rng)
        model = random_model(net, rng)
        machine = SimMachine()
        machine.load_model(model)
        machine.load_input(random_input(rng, net))
        _, cycles, per_layer = machine.run_inference()
        report = network_report(net, avg_power_mw=None)
        assert cycles == report.total_cycles
        for got, want in zip(per_layer, report.layers):
            assert (got.prime, got.compute, got.requant) \
                == (want.prime, want.compute, want.requant)


def test_rerun_is_deterministic(default_pair):
    _, model, x = default_pair
    machine = SimMachine()
    machine.load_model(model)
    machine.load_input(x)
    first, cycles_a, _ = machine.run_inference()
    second, cycles_b, _ = machine.run_inference()
    assert np.array_equal(first.values, second.values)
    assert cycles_a == cycles_b


# ---------------------------------------------------------------------------
# Micro (per-cycle) path
# ---------------------------------------------------------------------------

def test_micro_path_matches_fast_path(rng):
    for _ in range(6):
        net = random_small_net(rng, max_channels=6, max_length=24)
        model = random_model(net, rng)
        x = random_input(rng, net)
        fast = SimMachine()
        fast.load_model(model)
        fast.load_input(x)
        fl, fc, fsplit = fast.run_inference()
        micro = SimMachine()
        micro.load_model(model)
        micro.load_input(x)
        ml, mc, msplit = micro.run_micro()
        assert np.array_equal(fl.values, ml.values)
        assert fc == mc
        assert [(a.prime, a.compute, a.requant) for a in fsplit] \
            == [(b.prime, b.compute, b.requant) for b in msplit]
        for i in range(len(net.layers) - 1):
            assert np.array_equal(fast.read_layer_activation(i).data,
                                  micro.read_layer_activation(i).data)


def test_micro_mac_count_is_six_per_compute_cycle(rng):
    net = random_small_net(rng, max_channels=4, max_length=12)
    model = random_model(net, rng)
    machine = SimMachine()
    machine.load_model(model)
    machine.load_input(random_input(rng, net))
    _, _, split = machine.run_micro()
    assert machine.mac_count == 6 * sum(lc.compute for lc in split)
    # the vectorized path accounts identically
    machine.run_inference()
    assert machine.mac_count == 6 * sum(lc.compute for lc in split)


def test_trace_is_reproducible(rng):
    net = random_small_net(rng, max_channels=4, max_length=12)
    model = random_model(net, rng)
    x = random_input(rng, net)
    traces = []
    for _ in range(2):
        machine = SimMachine()
        machine.load_model(model)
        machine.load_input(x)
        machine.start()
        traces.append([machine.step().to_json() for _ in range(100)])
    assert traces[0] == traces[1]
    # events carry monotonically increasing cycle numbers
    cycles = [__import__("json").loads(e)["cycle"] for e in traces[0]]
    assert cycles == list(range(cycles[0], cycles[0] + 100))


def test_step_requires_start(default_pair):
    _, model, x = default_pair
    machine = SimMachine()
    machine.load_model(model)
    machine.load_input(x)
    with pytest.raises(StateError):
        machine.step()


def test_read_layer_activation_errors(default_pair):
    _, model, x = default_pair
    machine = SimMachine()
    machine.load_model(model)
    machine.load_input(x)
    with pytest.raises(StateError):
        machine.read_layer_activation(0)   # nothing executed yet
    machine.run_inference()
    with pytest.raises(StateError):
        machine.read_layer_activation(4)   # signed output layer
    with pytest.raises(StateError):
        machine.read_layer_activation(9)


def test_run_requires_model_and_input():
    machine = SimMachine()
    with pytest.raises(StateError):
        machine.run_inference()
