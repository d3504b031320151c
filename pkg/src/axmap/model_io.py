"""Binary file formats for models (AXQM) and datasets (AXDS, IDX).

AXQM layout: magic ``AXQM``, version u32 LE, manifest length u32 LE, UTF-8
JSON manifest, then a raw blob section (uint8 weights, int32 LE biases) at
the offsets named by the manifest.

AXDS layout: magic ``AXDS``, count u32 LE, per-image byte size u32 LE,
class_count u32 LE, then ``count`` raw uint8 images followed by ``count``
uint8 labels.

IDX is the classic big-endian MNIST container; only reading is supported
here.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Batch, Layer, QuantModel, QuantTensor
from .errors import FormatError, ValidationError

_AXQM_MAGIC = b"AXQM"
_AXQM_VERSION = 1
_AXDS_MAGIC = b"AXDS"


def serialize_model(model: QuantModel) -> bytes:
    """Canonical AXQM bytes for a model; identical models serialize identically."""
    blobs = bytearray()
    layer_entries = []
    for layer in model.layers:
        entry: dict = {"kind": layer.kind}
        if layer.kind in ("conv2d", "dense"):
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
            entry["approx"] = layer.approx
            entry["out_scale"] = layer.out_scale
            entry["out_zero_point"] = layer.out_zero_point
            w = layer.weights
            entry["weights"] = {
                "shape": list(w.shape),
                "scale": w.scale,
                "zero_point": w.zero_point,
                "offset": len(blobs),
            }
            blobs += w.values.tobytes()
            if layer.bias is not None:
                entry["bias"] = {"offset": len(blobs), "count": int(layer.bias.size)}
                blobs += layer.bias.astype("<i4").tobytes()
        elif layer.kind in ("maxpool2d", "avgpool2d"):
            entry["kernel"] = layer.kernel
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
        layer_entries.append(entry)
    manifest = {
        "name": model.name,
        "input": {
            "shape": list(model.input_shape),
            "scale": model.input_scale,
            "zero_point": model.input_zero_point,
        },
        "class_count": model.class_count,
        "layers": layer_entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _AXQM_MAGIC + struct.pack("<II", _AXQM_VERSION, len(manifest_bytes))
    return header + manifest_bytes + bytes(blobs)


def save_model(model: QuantModel, path: str | Path) -> str:
    """Write an AXQM file; returns its sha256 hex digest."""
    data = serialize_model(model)
    Path(path).write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    model.sha256 = digest
    return digest


def load_model(path: str | Path) -> QuantModel:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != _AXQM_MAGIC:
        raise FormatError(f"{path}: not an AXQM file")
    version, manifest_len = struct.unpack_from("<II", data, 4)
    if version != _AXQM_VERSION:
        raise FormatError(f"{path}: unsupported AXQM version {version}")
    manifest_end = 12 + manifest_len
    if manifest_end > len(data):
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[12:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from exc
    blob = data[manifest_end:]

    def take(offset: int, nbytes: int) -> bytes:
        if offset < 0 or offset + nbytes > len(blob):
            raise FormatError(f"{path}: blob reference out of range")
        return blob[offset:offset + nbytes]

    layers = []
    for entry in manifest["layers"]:
        kind = entry["kind"]
        if kind in ("conv2d", "dense"):
            wspec = entry["weights"]
            shape = tuple(int(d) for d in wspec["shape"])
            nbytes = int(np.prod(shape))
            values = np.frombuffer(take(wspec["offset"], nbytes), dtype=np.uint8)
            weights = QuantTensor(values.reshape(shape).copy(),
                                  float(wspec["scale"]), int(wspec["zero_point"]))
            bias = None
            if "bias" in entry:
                bspec = entry["bias"]
                bias = np.frombuffer(take(bspec["offset"], bspec["count"] * 4),
                                     dtype="<i4").astype(np.int32)
            layers.append(Layer(
                kind=kind, weights=weights, bias=bias,
                stride=int(entry.get("stride", 1)), padding=int(entry.get("padding", 0)),
                out_scale=float(entry["out_scale"]),
                out_zero_point=int(entry["out_zero_point"]),
                approx=bool(entry.get("approx", True)),
            ))
        elif kind in ("maxpool2d", "avgpool2d"):
            layers.append(Layer(kind=kind, kernel=int(entry["kernel"]),
                                stride=int(entry.get("stride", 0)),
                                padding=int(entry.get("padding", 0))))
        elif kind in ("relu", "flatten"):
            layers.append(Layer(kind=kind))
        else:
            raise FormatError(f"{path}: unknown layer kind {kind!r}")

    inp = manifest["input"]
    model = QuantModel(
        layers=layers,
        input_shape=tuple(int(d) for d in inp["shape"]),
        input_scale=float(inp["scale"]),
        input_zero_point=int(inp["zero_point"]),
        class_count=int(manifest["class_count"]),
        name=str(manifest.get("name", path.stem)),
    )
    model.sha256 = hashlib.sha256(data).hexdigest()
    return model


@dataclass
class Dataset:
    """Raw uint8 images (flattened) with integer labels."""

    images: np.ndarray  # (count, image_nbytes) uint8
    labels: np.ndarray  # (count,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError("images and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError("labels outside [0, class_count)")

    @property
    def count(self) -> int:
        return int(self.images.shape[0])


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    if dataset.class_count > 256:
        raise ValidationError("AXDS stores labels as single bytes (class_count <= 256)")
    with open(path, "wb") as fh:
        fh.write(_AXDS_MAGIC)
        fh.write(struct.pack("<III", dataset.count, dataset.images.shape[1],
                             dataset.class_count))
        fh.write(dataset.images.tobytes())
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != _AXDS_MAGIC:
        raise FormatError(f"{path}: not an AXDS file")
    count, image_nbytes, class_count = struct.unpack_from("<III", data, 4)
    expected = 16 + count * image_nbytes + count
    if len(data) != expected:
        raise FormatError(f"{path}: bad AXDS length {len(data)}, expected {expected}")
    images = np.frombuffer(data, dtype=np.uint8, count=count * image_nbytes, offset=16)
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=16 + count * image_nbytes)
    return Dataset(images.reshape(count, image_nbytes).copy(),
                   labels.astype(np.int64), int(class_count))


def load_idx_images(path: str | Path) -> np.ndarray:
    """Read an IDX image file; returns (count, rows*cols) uint8."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated IDX file")
    magic, count, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != 0x803:
        raise FormatError(f"{path}: bad IDX image magic {magic:#x}")
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: bad IDX length {len(data)}, expected {expected}")
    images = np.frombuffer(data, dtype=np.uint8, offset=16)
    return images.reshape(count, rows * cols).copy()


def load_idx_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX file")
    magic, count = struct.unpack_from(">II", data, 0)
    if magic != 0x801:
        raise FormatError(f"{path}: bad IDX label magic {magic:#x}")
    if len(data) != 8 + count:
        raise FormatError(f"{path}: bad IDX length")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx_pair(images_path: str | Path, labels_path: str | Path,
                  class_count: int | None = None) -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 2
    return Dataset(images, labels, class_count)


def load_any_dataset(spec: str) -> Dataset:
    """Resolve a CLI dataset spec: an ``.axds`` path or ``images:labels`` IDX pair."""
    if ":" in spec and not Path(spec).exists():
        img, _, lbl = spec.partition(":")
        if not Path(img).exists() or not Path(lbl).exists():
            raise ValidationError(f"dataset files not found: {spec}")
        return load_idx_pair(img, lbl)
    path = Path(spec)
    if not path.exists():
        raise ValidationError(f"dataset file not found: {spec}")
    return load_dataset(path)


def batches_for(model: QuantModel, dataset: Dataset, batch_size: int) -> list[Batch]:
    """Split a dataset into batches quantized with the model's input parameters.

    A short trailing batch is kept; accuracy is averaged per batch.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be at least 1")
    nbytes = int(np.prod(model.input_shape))
    if dataset.images.shape[1] != nbytes:
        raise ValidationError(
            f"dataset images have {dataset.images.shape[1]} bytes, "
            f"model input needs {nbytes}"
        )
    if dataset.class_count > model.class_count:
        raise ValidationError(
            f"dataset has {dataset.class_count} classes, model only {model.class_count}"
        )
    batches = []
    for start in range(0, dataset.count, batch_size):
        stop = min(dataset.count, start + batch_size)
        images = dataset.images[start:stop].reshape(stop - start, *model.input_shape)
        batches.append(Batch(
            images=QuantTensor(images, model.input_scale, model.input_zero_point),
            labels=dataset.labels[start:stop],
        ))
    return batches
