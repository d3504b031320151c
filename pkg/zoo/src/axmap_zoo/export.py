"""Train, quantize, and export the desk-scale reference models.

Outputs per architecture: a model in AXQM, a 2,500-image evaluation subset
in AXDS (25 batches of 100), and the full corpus in IDX containers. Export
refuses to ship a model whose exact-quantized accuracy on the evaluation
subset falls below the 95% floor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .glyphs import make_corpus, write_idx_images, write_idx_labels
from .quantize import QuantizedLayer, QuantizedNet, quantize_network
from .reference import forward_layers, parse_model
from .train import ARCHITECTURES, build_model, float_accuracy, train_model

EVAL_COUNT = 2500
TRAIN_COUNT = 6000
ACCURACY_FLOOR = 0.95


@dataclass(frozen=True)
class ExportSpec:
    architecture: str = "lenet-mnist"
    epochs: int = 12
    calibration_batches: int = 10
    seed: int = 0
    out_dir: Path = Path("export")

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.calibration_batches < 1:
            raise ValueError("calibration_batches must be positive")


def _manifest_layer(kind: str, **fields) -> dict:
    entry = {"kind": kind}
    entry.update(fields)
    return entry


def build_axqm(net: QuantizedNet, arch: str, input_shape: tuple[int, ...]) -> bytes:
    """Serialize the quantized network in the AXQM container."""
    blobs = bytearray()

    def add_weights(layer: QuantizedLayer) -> dict:
        spec = {
            "shape": list(layer.weights.shape),
            "scale": layer.weight_qp.scale,
            "zero_point": layer.weight_qp.zero_point,
            "offset": len(blobs),
        }
        blobs.extend(layer.weights.tobytes())
        return spec

    def add_bias(layer: QuantizedLayer) -> dict:
        spec = {"offset": len(blobs), "count": int(layer.bias.size)}
        blobs.extend(layer.bias.astype("<i4").tobytes())
        return spec

    def bearing(kind: str, layer: QuantizedLayer) -> dict:
        weights = add_weights(layer)
        bias = add_bias(layer)
        return _manifest_layer(
            kind, stride=1, padding=0, approx=True,
            out_scale=layer.out_qp.scale, out_zero_point=layer.out_qp.zero_point,
            weights=weights, bias=bias)

    layers = [
        bearing("conv2d", net.conv1),
        _manifest_layer("relu"),
        _manifest_layer("maxpool2d", kernel=2, stride=2, padding=0),
        bearing("conv2d", net.conv2),
        _manifest_layer("relu"),
        _manifest_layer("maxpool2d", kernel=2, stride=2, padding=0),
        _manifest_layer("flatten"),
        bearing("dense", net.fc1),
        _manifest_layer("relu"),
        bearing("dense", net.fc2),
    ]
    manifest = {
        "name": arch,
        "input": {
            "shape": list(input_shape),
            "scale": net.input_qp.scale,
            "zero_point": net.input_qp.zero_point,
        },
        "class_count": 10,
        "layers": layers,
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"AXQM" + struct.pack("<II", 1, len(body)) + body + bytes(blobs)


def build_axds(images: np.ndarray, labels: np.ndarray, class_count: int = 10) -> bytes:
    flat = images.reshape(images.shape[0], -1)
    header = b"AXDS" + struct.pack("<III", flat.shape[0], flat.shape[1], class_count)
    return header + flat.astype(np.uint8).tobytes() + labels.astype(np.uint8).tobytes()


@dataclass
class ExportResult:
    model_path: Path
    dataset_path: Path
    float_accuracy: float
    quantized_accuracy: float


def train_and_export(spec: ExportSpec) -> ExportResult:
    channels_side = {"lenet-mnist": (1, 28), "convnet-cifar10": (3, 32)}
    channels, side = channels_side[spec.architecture]

    train_images, train_labels = make_corpus(TRAIN_COUNT, spec.seed, side, channels)
    eval_images, eval_labels = make_corpus(EVAL_COUNT, spec.seed + 1, side, channels)

    model, _, _ = build_model(spec.architecture, seed=spec.seed)
    train_model(model, train_images, train_labels, epochs=spec.epochs, seed=spec.seed)
    float_acc = float_accuracy(model, eval_images, eval_labels)

    net = quantize_network(model, train_images, spec.calibration_batches)
    axqm = build_axqm(net, spec.architecture, (channels, side, side))
    axds = build_axds(eval_images, eval_labels)

    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.axqm"
    dataset_path = out / "eval.axds"
    model_path.write_bytes(axqm)
    dataset_path.write_bytes(axds)

    # exact-quantized accuracy gate on the evaluation subset
    parsed = parse_model(model_path)
    logits = forward_layers(parsed, eval_images.reshape(EVAL_COUNT, -1), None)[-1]
    quant_acc = float(np.mean(logits.argmax(axis=1) == eval_labels))
    if quant_acc < ACCURACY_FLOOR:
        model_path.unlink()
        dataset_path.unlink()
        raise ValueError(
            f"quantized accuracy {quant_acc:.4f} below the {ACCURACY_FLOOR:.0%} floor; "
            "export refused")

    # IDX keeps a grayscale view (first channel) of the corpus
    write_idx_images(train_images[:, 0], out / "train-images-idx3-ubyte")
    write_idx_labels(train_labels, out / "train-labels-idx1-ubyte")
    write_idx_images(eval_images[:, 0], out / "eval-images-idx3-ubyte")
    write_idx_labels(eval_labels, out / "eval-labels-idx1-ubyte")

    return ExportResult(model_path=model_path, dataset_path=dataset_path,
                        float_accuracy=float_acc, quantized_accuracy=quant_acc)
