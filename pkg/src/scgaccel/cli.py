"""Command-line surface tying the modules together.

Commands are thin orchestration over the library: `analyze` (cycle model),
`infer`/`trace` (golden model and simulator), `pack` (float -> deployable
model), `serve`/`load`/`run` (device link), `synth`/`eval` (dataset and
metrics), and `selftest` (equivalence sweep plus published-number checks).

Signal files are raw little-endian float32 samples; quantized windows are
raw u8.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys

import numpy as np

from .cyclemodel import (DEFAULT_CLOCK_HZ, DEFAULT_POWER_MW, RequantConvention,
                         network_report)
from .errors import AccelError
from .link import DeviceEmulator, HostClient, SocketTransport
from .metrics import evaluate, synth_windows
from .modeltools import (BatchNorm, FloatLayerParams, FloatModel, PackedModel,
                         quantize_model, random_model)
from .pipeline import INPUT_SCALE, INPUT_ZERO_POINT, golden_predict
from .qnn import (Activation, LayerKind, LayerSpec, NetworkSpec, PoolMode,
                  QuantTensor, infer_window, zscore_quantize)
from .sim import SimMachine


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    """Key=value defaults file; unknown keys are rejected."""
    cfg = {"clock_hz": float(DEFAULT_CLOCK_HZ), "power_mw": DEFAULT_POWER_MW,
           "requant_convention": "table1"}
    if path is None:
        return cfg
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in cfg:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        cfg[key] = value if key == "requant_convention" else float(value)
    return cfg


def _read_model(path: str) -> PackedModel:
    try:
        return PackedModel.from_bytes(open(path, "rb").read())
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc}")


def _read_window(path: str, fmt: str, c_in: int, zero_point: int) -> QuantTensor:
    """Raw f32 window (z-scored and quantized) or already-quantized u8."""
    try:
        blob = sys.stdin.buffer.read() if path == "-" else open(path, "rb").read()
    except OSError as exc:
        raise UsageError(f"cannot read input {path}: {exc}")
    if fmt == "f32":
        samples = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        if samples.size == 0 or samples.size % c_in != 0:
            raise UsageError(f"f32 input length {samples.size} not divisible by "
                             f"{c_in} channels")
        if c_in != 1:
            raise UsageError("raw f32 input supports single-channel models only")
        return zscore_quantize(samples, INPUT_ZERO_POINT, INPUT_SCALE)
    samples = np.frombuffer(blob, dtype=np.uint8)
    if samples.size == 0 or samples.size % c_in != 0:
        raise UsageError(f"u8 input length {samples.size} not divisible by "
                         f"{c_in} channels")
    return QuantTensor(samples.reshape(c_in, -1).copy(), zero_point=zero_point)


def _connect(addr: str) -> HostClient:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"address must be host:port, got {addr!r}")
    try:
        sock = socket.create_connection((host, int(port)), timeout=10.0)
    except OSError as exc:
        raise UsageError(f"cannot connect to {addr}: {exc}")
    return HostClient(SocketTransport(sock), timeout=30.0)


def _emit(text: str, out: str | None):
    if out is None or out == "-":
        print(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    clock = args.clock_hz or cfg["clock_hz"]
    power = cfg["power_mw"] if args.power_mw is None else args.power_mw
    convention = RequantConvention(args.requant_convention
                                   or cfg["requant_convention"])
    if args.model:
        net = _read_model(args.model).to_network_spec(args.input_length)
    else:
        net = NetworkSpec.default()
    report = network_report(net, clock_hz=clock, avg_power_mw=power,
                            measured_latency_s=args.measured_latency_s,
                            convention=convention)
    print(report.to_json() if args.json else report.to_text())
    return 0


# ---------------------------------------------------------------------------
# infer / trace
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    model = _read_model(args.model)
    x = _read_window(args.input, args.format, model.layers[0].c_in,
                     args.zero_point)
    mode = args.mode or "both"
    out: dict = {"mode": mode}
    if mode in ("golden", "both"):
        logits, _ = infer_window(model.to_network_spec(x.length),
                                 model.to_weight_set(), x)
        out["golden_logits"] = [int(v) for v in logits.values]
        out["predicted_class"] = int(logits.predicted_class)
    if mode in ("sim", "both"):
        machine = SimMachine()
        machine.load_model(model)
        machine.load_input(x)
        logits, cycles, _ = machine.run_inference()
        out["sim_logits"] = [int(v) for v in logits.values]
        out["predicted_class"] = int(logits.predicted_class)
        out["cycles"] = cycles
    if mode == "both":
        match = out["golden_logits"] == out["sim_logits"]
        out["match"] = match
        if args.json:
            print(json.dumps(out))
        else:
            verdict = "EXACT MATCH" if match else "MISMATCH"
            print(f"{verdict}: logits {out['golden_logits']} "
                  f"class {out['predicted_class']} cycles {out['cycles']:,}")
        if not match:
            print("golden and simulator disagree", file=sys.stderr)
            return 1
    else:
        key = f"{mode}_logits"
        print(json.dumps(out) if args.json else
              f"logits {out[key]} class {out['predicted_class']}"
              + (f" cycles {out['cycles']:,}" if "cycles" in out else ""))
    return 0


def cmd_trace(args) -> int:
    model = _read_model(args.model)
    x = _read_window(args.input, args.format, model.layers[0].c_in,
                     args.zero_point)
    machine = SimMachine()
    machine.load_model(model)
    machine.load_input(x)
    machine.start()
    lines = []
    for _ in range(args.cycles):
        try:
            lines.append(machine.step().to_json())
        except AccelError:
            break
    _emit("\n".join(lines), args.out)
    return 0


# ---------------------------------------------------------------------------
# pack
# ---------------------------------------------------------------------------

def _float_model_from_npz(path: str) -> tuple[FloatModel, np.ndarray | None]:
    """Float parameters from an .npz archive.

    Expected keys: per-layer `w{i}` [c_out, c_in, K] and `b{i}` [c_out],
    optional `bn{i}_gamma/beta/mean/var`, optional `calib` [n, input_length]
    calibration windows, optional scalar `input_length`.  Geometry comes from
    the default topology unless a `layout` JSON string overrides it.
    """
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read float model {path}: {exc}")
    n_layers = sum(1 for key in archive.files if key.startswith("w")
                   and key[1:].isdigit())
    if n_layers == 0:
        raise UsageError(f"{path}: no w0..wN weight arrays found")
    input_length = int(archive["input_length"]) if "input_length" in archive \
        else 512
    if "layout" in archive:
        layout = json.loads(str(archive["layout"]))
        specs = tuple(LayerSpec(kind=LayerKind[d["kind"]],
                                c_in=d["c_in"], c_out=d["c_out"],
                                kernel=d["kernel"], padding=d["padding"],
                                pool_mode=PoolMode[d["pool"]],
                                activation=Activation[d["activation"]])
                      for d in layout)
        net = NetworkSpec(layers=specs, input_length=input_length,
                          num_classes=specs[-1].c_out)
    else:
        w3 = archive.get("w3")
        l3_width = w3.shape[0] if w3 is not None else 128
        net = NetworkSpec.default(l3_width=l3_width)
    if len(net.layers) != n_layers:
        raise UsageError(f"{path}: {n_layers} weight arrays for "
                         f"{len(net.layers)} layers")
    params = []
    for i in range(n_layers):
        bn = None
        if f"bn{i}_gamma" in archive:
            bn = BatchNorm(gamma=archive[f"bn{i}_gamma"],
                           beta=archive[f"bn{i}_beta"],
                           running_mean=archive[f"bn{i}_mean"],
                           running_var=archive[f"bn{i}_var"])
        params.append(FloatLayerParams(weights=archive[f"w{i}"],
                                       bias=archive[f"b{i}"], bn=bn))
    calib = archive["calib"] if "calib" in archive else None
    return FloatModel(net=net, layers=params), calib


def cmd_pack(args) -> int:
    fm, calib = _float_model_from_npz(args.from_float)
    if calib is None:
        calib = synth_windows(64, seed=args.seed,
                              window_len=fm.net.input_length).windows
    model = quantize_model(fm, input_scale=INPUT_SCALE, calib_windows=calib)
    blob = model.to_bytes()
    with open(args.out, "wb") as fh:
        fh.write(blob)
    print(f"packed {len(model.layers)} layers, "
          f"{model.weight_words.size} weight words, {len(blob)} bytes "
          f"-> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# serve / load / run
# ---------------------------------------------------------------------------

class _StdioTransport:
    """Byte-stream transport over this process's stdin/stdout."""

    def send(self, data: bytes):
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()

    def recv(self, timeout=None) -> bytes:
        return sys.stdin.buffer.read1(65536)

    def close(self):
        pass


def cmd_serve(args) -> int:
    device = DeviceEmulator()
    if args.transport == "stdio":
        device.serve(_StdioTransport())
        return 0
    host, _, port = args.transport.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError("serve needs --transport stdio or host:port")
    with socket.create_server((host, int(port))) as server:
        print(f"listening on {host}:{port}", file=sys.stderr)
        while True:
            conn, peer = server.accept()
            print(f"session from {peer[0]}:{peer[1]}", file=sys.stderr)
            device.serve(SocketTransport(conn))
            if args.once:
                return 0


def cmd_load(args) -> int:
    model = _read_model(args.model)
    client = _connect(args.connect)
    try:
        client.load_model(model)
    finally:
        client.close()
    print("model loaded and verified")
    return 0


def cmd_run(args) -> int:
    client = _connect(args.connect)
    try:
        x = _read_window(args.input, args.format, args.channels, args.zero_point)
        logits, cycles = client.run(x)
    finally:
        client.close()
    print(f"logits {[int(v) for v in logits.values]} "
          f"class {logits.predicted_class} cycles {cycles:,}")
    return 0


# ---------------------------------------------------------------------------
# synth / eval
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    ds = synth_windows(args.n, noise=args.noise, seed=args.seed)
    np.savez(args.out, windows=ds.windows, labels=ds.labels)
    counts = np.bincount(ds.labels, minlength=3).tolist()
    print(f"wrote {len(ds)} windows (class counts {counts}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _read_model(args.model)
    try:
        archive = np.load(args.data, allow_pickle=False)
        windows, labels = archive["windows"], archive["labels"]
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {args.data}: {exc}")
    logits, probs, preds = golden_predict(model, windows, args.logit_scale)
    summary = evaluate(labels, probs=probs)
    if args.dump:
        rows = [{"label": int(t), "pred": int(p),
                 "logits": [int(v) for v in l]}
                for t, p, l in zip(labels, preds, logits)]
        with open(args.dump, "w", encoding="utf-8") as fh:
            json.dump(rows, fh)
    _emit(json.dumps(summary.to_dict(), indent=2), args.out)
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _check(name: str, ok: bool, detail: str = "") -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
    return ok


def cmd_selftest(args) -> int:
    rng = np.random.default_rng(args.seed)
    ok = True
    report = network_report(NetworkSpec.default())
    table = [(lc.prime, lc.compute, lc.requant) for lc in report.layers]
    expect = [(9632, 12384, 24768), (154112, 198144, 24768),
              (315392, 405504, 25344), (630784, 450560, 768), (2688, 384, 18)]
    ok &= _check("layer cycle table", table == expect
                 and report.total_cycles == 2_255_250,
                 f"total {report.total_cycles:,} cycles")
    ok &= _check("latency/FPS", abs(report.latency_s * 1e3 - 93.97) < 0.01
                 and abs(report.fps - 10.64) < 0.01,
                 f"{report.latency_s * 1e3:.2f} ms, {report.fps:.2f} FPS")
    measured = network_report(NetworkSpec.default(), measured_latency_s=0.0955)
    ok &= _check("throughput/energy", abs(measured.mmacs_per_s - 67.0) < 0.5
                 and abs(measured.energy_uj - 816.5) < 0.1,
                 f"{measured.mmacs_per_s:.1f} MMAC/s, "
                 f"{measured.energy_uj:.1f} uJ")
    effs = [round(lc.sys_eff * 100, 1) for lc in report.layers[:3]]
    ok &= _check("efficiency formulas", effs[:2] == [26.5, 52.6]
                 and abs(effs[2] - 54.3) < 0.05,
                 f"system {effs} (published table lists 53 for the third "
                 "layer; computed 54.3 — known discrepancy)")

    mismatches = 0
    for trial in range(args.sweeps):
        net = NetworkSpec.default() if trial % 4 == 0 else _random_small_net(rng)
        model = random_model(net, rng)
        x = QuantTensor(rng.integers(0, 256, size=(net.layers[0].c_in,
                                                   net.input_length),
                                     dtype=np.uint8).astype(np.uint8),
                        zero_point=int(rng.integers(0, 256)))
        gold, _ = infer_window(model.to_network_spec(net.input_length),
                               model.to_weight_set(), x)
        machine = SimMachine()
        machine.load_model(model)
        machine.load_input(x)
        sim, _, _ = machine.run_inference()
        if not np.array_equal(gold.values, sim.values):
            mismatches += 1
    ok &= _check("golden vs simulator", mismatches == 0,
                 f"{args.sweeps} random pairs, {mismatches} mismatches")

    from .link import serve_in_thread
    device = DeviceEmulator()
    host_end, _ = serve_in_thread(device)
    client = HostClient(host_end, timeout=30.0)
    net = NetworkSpec.default()
    model = random_model(net, rng)
    x = QuantTensor(rng.integers(0, 256, size=(1, 512), dtype=np.uint8),
                    zero_point=128)
    try:
        client.load_model(model)
        remote, _ = client.run(x)
    finally:
        client.close()
    gold, _ = infer_window(model.to_network_spec(), model.to_weight_set(), x)
    ok &= _check("protocol round trip", np.array_equal(remote.values, gold.values),
                 f"logits {[int(v) for v in remote.values]}")

    published = [[9469, 39, 383], [55, 9914, 125], [44, 45, 9926]]
    labels = np.repeat([0, 1, 2], [sum(row) for row in published])
    summary = evaluate(labels, pred_classes=_expand_confusion(published))
    recalls = [round(r * 100, 2) for r in summary.recall]
    ok &= _check("metrics reproduction", abs(summary.accuracy - 0.9770) < 1e-4
                 and recalls == [95.73, 98.22, 99.11],
                 f"accuracy {summary.accuracy:.2%}, recalls {recalls}")
    print("selftest", "PASSED" if ok else "FAILED")
    return 0 if ok else 1


def _random_small_net(rng) -> NetworkSpec:
    depth = int(rng.integers(1, 4))
    layers = []
    c_in = int(rng.integers(1, 5))
    length = int(rng.integers(2, 9)) * (2 ** depth)
    length = min(length, 48)
    length -= length % (2 ** depth)
    length = max(length, 2 ** depth)
    for _ in range(depth):
        c_out = int(rng.integers(1, 9))
        k = int(rng.choice([1, 3, 5, 9]))
        layers.append(LayerSpec(kind=LayerKind.CONV1D, c_in=c_in, c_out=c_out,
                                kernel=k, padding=k // 2,
                                pool_mode=PoolMode.MAXPOOL2,
                                activation=Activation.RELU_SATURATE))
        c_in = c_out
    layers.append(LayerSpec(kind=LayerKind.FULLY_CONNECTED, c_in=c_in, c_out=3,
                            kernel=1, padding=0, pool_mode=PoolMode.BYPASS,
                            activation=Activation.SIGNED_BYPASS))
    return NetworkSpec(layers=tuple(layers), input_length=length, num_classes=3)


def _expand_confusion(cm) -> np.ndarray:
    preds = []
    for row in cm:
        for pred, count in enumerate(row):
            preds.extend([pred] * count)
    return np.asarray(preds)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scgaccel", description="Accelerator software twin toolkit")
    parser.add_argument("--config", help="key=value defaults file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analytical cycle/throughput report")
    p.add_argument("--model", help="packed model file (default topology if omitted)")
    p.add_argument("--input-length", type=int, default=512)
    p.add_argument("--clock-hz", type=float)
    p.add_argument("--power-mw", type=float)
    p.add_argument("--measured-latency-s", type=float)
    p.add_argument("--requant-convention", choices=["table1", "formula"])
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("infer", help="run one window through golden model/simulator")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="signal file or - for stdin")
    p.add_argument("--format", choices=["f32", "u8"], default="f32")
    p.add_argument("--zero-point", type=int, default=INPUT_ZERO_POINT)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--golden", dest="mode", action="store_const",
                       const="golden")
    group.add_argument("--sim", dest="mode", action="store_const", const="sim")
    group.add_argument("--both", dest="mode", action="store_const", const="both")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer, mode=None)

    p = sub.add_parser("trace", help="per-cycle simulator trace prefix")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["f32", "u8"], default="f32")
    p.add_argument("--zero-point", type=int, default=INPUT_ZERO_POINT)
    p.add_argument("--cycles", type=int, required=True)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("pack", help="quantize a float model into the binary format")
    p.add_argument("--from-float", required=True, help=".npz float parameters")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0,
                   help="seed for fallback calibration windows")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("serve", help="run the device emulator")
    p.add_argument("--transport", required=True, help="stdio or host:port")
    p.add_argument("--once", action="store_true", help="exit after one session")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("load", help="upload and verify a model on a device")
    p.add_argument("--connect", required=True, help="host:port")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("run", help="run one window on a remote device")
    p.add_argument("--connect", required=True, help="host:port")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["f32", "u8"], default="f32")
    p.add_argument("--zero-point", type=int, default=INPUT_ZERO_POINT)
    p.add_argument("--channels", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--out", required=True, help=".npz output")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="evaluate a model on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help=".npz with windows/labels")
    p.add_argument("--logit-scale", type=float, default=1.0,
                   help="scale applied to integer logits before softmax")
    p.add_argument("--out", help="summary JSON (default stdout)")
    p.add_argument("--dump", help="per-window prediction dump JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="equivalence sweep and published-number checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweeps", type=int, default=12)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AccelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
