"""Post-training quantization of the float CNN to the uint8 contract.

Per-tensor asymmetric uint8 for weights and activations (ranges widened to
include zero so the zero point is representable), int32 biases in the
accumulator domain, calibration by min/max over a fixed batch set. No
retraining anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .train import TinyConvNet


@dataclass(frozen=True)
class QParams:
    scale: float
    zero_point: int


def qparams_from_range(low: float, high: float) -> QParams:
    low = min(0.0, float(low))
    high = max(0.0, float(high))
    if high == low:
        return QParams(scale=1.0, zero_point=0)
    scale = (high - low) / 255.0
    zero_point = int(np.clip(round(-low / scale), 0, 255))
    return QParams(scale=scale, zero_point=zero_point)


def quantize_array(values: np.ndarray, qp: QParams) -> np.ndarray:
    q = np.round(values / qp.scale) + qp.zero_point
    return np.clip(q, 0, 255).astype(np.uint8)


def quantize_bias(bias: np.ndarray, input_scale: float, weight_scale: float) -> np.ndarray:
    return np.round(bias / (input_scale * weight_scale)).astype(np.int32)


@dataclass
class QuantizedLayer:
    weights: np.ndarray      # uint8
    weight_qp: QParams
    bias: np.ndarray         # int32
    out_qp: QParams


@dataclass
class QuantizedNet:
    input_qp: QParams
    conv1: QuantizedLayer
    conv2: QuantizedLayer
    fc1: QuantizedLayer
    fc2: QuantizedLayer


def calibrate_ranges(model: TinyConvNet, images: np.ndarray,
                     batch_count: int = 10, batch_size: int = 64) -> dict[str, tuple[float, float]]:
    """Min/max of every requantized tensor over the calibration batches."""
    ranges: dict[str, tuple[float, float]] = {}
    model.eval()
    with torch.no_grad():
        for b in range(batch_count):
            chunk = images[b * batch_size:(b + 1) * batch_size]
            if chunk.shape[0] == 0:
                break
            x = torch.from_numpy(chunk.astype(np.float32) / 255.0)
            for name, tensor in model.intermediates(x).items():
                low = float(tensor.min())
                high = float(tensor.max())
                if name in ranges:
                    low = min(low, ranges[name][0])
                    high = max(high, ranges[name][1])
                ranges[name] = (low, high)
    return ranges


def quantize_network(model: TinyConvNet, calibration_images: np.ndarray,
                     calibration_batches: int = 10) -> QuantizedNet:
    ranges = calibrate_ranges(model, calibration_images, calibration_batches)
    input_qp = QParams(scale=1.0 / 255.0, zero_point=0)  # raw pixels over 255

    def quantize_layer(module, name: str, in_scale: float,
                       relu_after: bool) -> QuantizedLayer:
        w = module.weight.detach().numpy()
        b = module.bias.detach().numpy()
        wqp = qparams_from_range(w.min(), w.max())
        low, high = ranges[name]
        if relu_after:
            # the following relu discards negatives; spend all codes on [0, max]
            low = max(0.0, low)
        oqp = qparams_from_range(low, high)
        return QuantizedLayer(
            weights=quantize_array(w, wqp),
            weight_qp=wqp,
            bias=quantize_bias(b, in_scale, wqp.scale),
            out_qp=oqp,
        )

    conv1 = quantize_layer(model.conv1, "conv1", input_qp.scale, relu_after=True)
    conv2 = quantize_layer(model.conv2, "conv2", conv1.out_qp.scale, relu_after=True)
    fc1 = quantize_layer(model.fc1, "fc1", conv2.out_qp.scale, relu_after=True)
    fc2 = quantize_layer(model.fc2, "fc2", fc1.out_qp.scale, relu_after=False)
    return QuantizedNet(input_qp=input_qp, conv1=conv1, conv2=conv2, fc1=fc1, fc2=fc2)
