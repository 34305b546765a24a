"""End-to-end pipeline glue: window quantization, batch inference, and a
constructed (not trained) reference model for the synthetic dataset.

The reference model uses a fixed filter bank tuned to the two burst
frequencies plus random projections for the deeper layers; the classifier
head is a nearest-class-mean discriminant computed in closed form from
calibration features.  No gradient training is involved.
"""

from __future__ import annotations

import numpy as np

from .metrics import (DIA_FREQ_HZS, LabeledWindowSet, SAMPLE_RATE_HZ,
                      SYS_FREQ_HZ, softmax)
from .modeltools import (FloatLayerParams, FloatModel, PackedModel,
                         calibrate_activation_scales, float_forward,
                         quantize_model)
from .qnn import NetworkSpec, QuantTensor, infer_window, zscore_quantize

INPUT_ZERO_POINT = 128
INPUT_SCALE = 1.0 / 32.0


def quantize_windows(windows: np.ndarray) -> list[QuantTensor]:
    return [zscore_quantize(w, INPUT_ZERO_POINT, INPUT_SCALE) for w in windows]


def golden_predict(model: PackedModel, windows: np.ndarray,
                   logit_scale: float = 1.0):
    """Golden-model logits, probabilities, and classes for raw float windows."""
    net = model.to_network_spec(input_length=windows.shape[1])
    ws = model.to_weight_set()
    logits = np.zeros((len(windows), net.num_classes), dtype=np.int64)
    for i, window in enumerate(windows):
        x = zscore_quantize(window, INPUT_ZERO_POINT, INPUT_SCALE)
        out, _ = infer_window(net, ws, x)
        logits[i] = out.values
    probs = softmax(logits, scale=logit_scale)
    return logits, probs, probs.argmax(axis=1)


def _matched_kernel(freq_hz: float, taps: int, phase: float = 0.0) -> np.ndarray:
    t = (np.arange(taps) - (taps - 1) / 2) / SAMPLE_RATE_HZ
    k = np.sin(2 * np.pi * freq_hz * t + phase)
    return k / np.linalg.norm(k)


def _front_end_bank(c_out: int, taps: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed analysis filters: band-matched, derivative, smoothing, random."""
    bank = []
    for phase in (0.0, np.pi / 2):
        bank.append(_matched_kernel(SYS_FREQ_HZ, taps, phase))
        bank.append(_matched_kernel(DIA_FREQ_HZS, taps, phase))
    diff = np.zeros(taps)
    diff[0], diff[-1] = -1.0, 1.0
    bank.append(diff / np.linalg.norm(diff))
    bank.append(np.ones(taps) / np.sqrt(taps))
    while len(bank) < c_out:
        k = rng.normal(size=taps)
        bank.append(k / np.linalg.norm(k))
    w = np.stack(bank[:c_out])
    # both signs so ReLU keeps the full waveform energy
    w[1::2] *= -1.0
    return w[:, np.newaxis, :]


def build_reference_model(calib: LabeledWindowSet, seed: int = 7,
                          l3_width: int = 128):
    """Construct a quantized model for the synthetic task.

    Returns (PackedModel, logit_scale); accuracy comes from the fixed filter
    bank plus a closed-form nearest-class-mean head, not from training.
    """
    rng = np.random.default_rng(seed)
    net = NetworkSpec.default(l3_width=l3_width)
    params: list[FloatLayerParams] = []
    for i, spec in enumerate(net.layers[:-1]):
        if i == 0:
            w = _front_end_bank(spec.c_out, spec.kernel, rng)
        else:
            w = rng.normal(scale=1.0 / np.sqrt(spec.c_in * spec.kernel),
                           size=(spec.c_out, spec.c_in, spec.kernel))
        params.append(FloatLayerParams(weights=w, bias=np.zeros(spec.c_out)))

    # provisional zero head, replaced by the class-mean discriminant below
    head_spec = net.layers[-1]
    params.append(FloatLayerParams(
        weights=np.zeros((head_spec.c_out, head_spec.c_in, 1)),
        bias=np.zeros(head_spec.c_out)))
    fm = FloatModel(net=net, layers=params)

    feats = np.zeros((len(calib), l3_width))
    for i, window in enumerate(calib.windows):
        z = (window - window.mean()) / (window.std() or 1.0)
        feats[i] = float_forward(fm, z)[-2][:, 0]
    mus = np.stack([feats[calib.labels == c].mean(axis=0) for c in range(3)])
    # argmax of f.mu_c - |mu_c|^2/2 is unchanged by subtracting the common f.mu_bar
    head_w = mus - mus.mean(axis=0)
    head_b = -0.5 * (mus ** 2).sum(axis=1)
    params[-1] = FloatLayerParams(weights=head_w[:, :, np.newaxis], bias=head_b)
    fm = FloatModel(net=net, layers=params)

    scales = calibrate_activation_scales(fm, calib.windows[:64], INPUT_SCALE)
    model = quantize_model(fm, input_scale=INPUT_SCALE, act_scales=scales)
    logit_scale = scales[-1]
    return model, logit_scale
