"""A complete host/device protocol session over the in-memory transport.

Shows the chunked weight upload with digest verification, an inference
round trip, and how the stop-and-wait link recovers when a frame is
corrupted in transit.
"""

import numpy as np

from scgaccel.link import (DeviceEmulator, HostClient, Transport,
                           model_digest, serve_in_thread)
from scgaccel.modeltools import random_model
from scgaccel.qnn import NetworkSpec, QuantTensor, infer_window

rng = np.random.default_rng(21)
net = NetworkSpec.default()
model = random_model(net, rng)
x = QuantTensor(rng.integers(0, 256, size=(1, 512), dtype=np.uint8),
                zero_point=128)

print("=== Clean session ===")
host_end, _ = serve_in_thread(DeviceEmulator())
client = HostClient(host_end, timeout=30.0)
blob = model.to_bytes()
print(f"model image: {len(blob):,} bytes -> {-(-len(blob) // 4096)} chunks")
client.load_model(model)
print(f"upload verified, digest {model_digest(model).hex()[:16]}...")
logits, cycles = client.run(x)
print(f"device result: logits {logits.values.tolist()} "
      f"class {logits.predicted_class} in {cycles:,} cycles")
client.close()

gold, _ = infer_window(model.to_network_spec(), model.to_weight_set(), x)
assert np.array_equal(logits.values, gold.values)
print("matches the local golden model exactly")


class FlakyTransport(Transport):
    """Corrupts one byte of the 3rd outgoing frame to simulate line noise."""

    def __init__(self, inner):
        self.inner = inner
        self.sends = 0

    def send(self, data):
        self.sends += 1
        if self.sends == 3:
            data = bytearray(data)
            data[len(data) // 2] ^= 0x10
            data = bytes(data)
            print("  (corrupting outgoing frame 3)")
        self.inner.send(data)

    def recv(self, timeout=None):
        return self.inner.recv(timeout)

    def close(self):
        self.inner.close()


print("\n=== Session over a noisy line ===")
host_end, _ = serve_in_thread(DeviceEmulator())
client = HostClient(FlakyTransport(host_end), timeout=30.0)
client.load_model(model)   # the NACKed chunk is retransmitted transparently
print("upload still verified after CRC-triggered retransmission")
logits, _ = client.run(x)
assert np.array_equal(logits.values, gold.values)
print(f"result unchanged: logits {logits.values.tolist()}")
client.close()
