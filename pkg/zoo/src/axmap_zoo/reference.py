"""Independent integer interpreter for exported models.

This is the cross-implementation oracle: it parses the AXQM/AXDS/AXMAP/AXLU
artifacts with its own code and runs inference with a different
decomposition (kernel-position accumulation instead of im2col gathers) under
the same arithmetic contract: int accumulation, requantization with
``in_scale * w_scale / out_scale`` in float64, half-away-from-zero rounding,
saturation to [0, 255]. Agreement with the main engine is checked bit for
bit in the acceptance suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ReferenceError(Exception):
    pass


# ---------------------------------------------------------------------------
# artifact parsing (independent of the main package)


@dataclass
class RefLayer:
    kind: str
    weights: np.ndarray | None = None
    weight_scale: float = 0.0
    weight_zp: int = 0
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    kernel: int = 0
    out_scale: float = 0.0
    out_zp: int = 0
    mul_index: int = -1


@dataclass
class RefModel:
    layers: list[RefLayer]
    input_shape: tuple[int, ...]
    input_scale: float
    input_zp: int
    class_count: int


def parse_model(path: str | Path) -> RefModel:
    data = Path(path).read_bytes()
    if data[:4] != b"AXQM":
        raise ReferenceError(f"{path}: missing AXQM magic")
    version, manifest_len = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ReferenceError(f"{path}: unsupported version {version}")
    manifest = json.loads(data[12:12 + manifest_len].decode("utf-8"))
    blob = data[12 + manifest_len:]
    layers = []
    mul_index = 0
    for entry in manifest["layers"]:
        kind = entry["kind"]
        layer = RefLayer(kind=kind)
        if kind in ("conv2d", "dense"):
            wspec = entry["weights"]
            shape = tuple(wspec["shape"])
            size = int(np.prod(shape))
            layer.weights = np.frombuffer(
                blob, dtype=np.uint8, count=size, offset=wspec["offset"]
            ).reshape(shape)
            layer.weight_scale = float(wspec["scale"])
            layer.weight_zp = int(wspec["zero_point"])
            if "bias" in entry:
                bspec = entry["bias"]
                layer.bias = np.frombuffer(
                    blob, dtype="<i4", count=bspec["count"], offset=bspec["offset"]
                ).astype(np.int64)
            layer.stride = int(entry.get("stride", 1))
            layer.padding = int(entry.get("padding", 0))
            layer.out_scale = float(entry["out_scale"])
            layer.out_zp = int(entry["out_zero_point"])
            layer.mul_index = mul_index
            mul_index += 1
        elif kind in ("maxpool2d", "avgpool2d"):
            layer.kernel = int(entry["kernel"])
            layer.stride = int(entry.get("stride", 0)) or layer.kernel
            layer.padding = int(entry.get("padding", 0))
        layers.append(layer)
    inp = manifest["input"]
    return RefModel(
        layers=layers,
        input_shape=tuple(inp["shape"]),
        input_scale=float(inp["scale"]),
        input_zp=int(inp["zero_point"]),
        class_count=int(manifest["class_count"]),
    )


def parse_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    data = Path(path).read_bytes()
    if data[:4] != b"AXDS":
        raise ReferenceError(f"{path}: missing AXDS magic")
    count, nbytes, classes = struct.unpack_from("<III", data, 4)
    images = np.frombuffer(data, dtype=np.uint8, count=count * nbytes, offset=16)
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=16 + count * nbytes)
    return images.reshape(count, nbytes), labels.astype(np.int64), int(classes)


def parse_lut(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"AXLU":
        raise ReferenceError(f"{path}: missing AXLU magic")
    (name_len,) = struct.unpack_from("<H", data, 16)
    table = np.frombuffer(data, dtype="<u2", count=65536, offset=18 + name_len)
    return table.reshape(256, 256).astype(np.int64)


def _truncation_table(k: int) -> np.ndarray:
    mask = (0xFF << k) & 0xFF
    ops = np.arange(256, dtype=np.int64) & mask
    return np.multiply.outer(ops, ops)


def tables_from_sources(sources: list[str]) -> list[np.ndarray]:
    tables = []
    for source in sources:
        if source.startswith("trunc:"):
            tables.append(_truncation_table(int(source.split(":", 1)[1])))
        elif source.startswith("lut:"):
            tables.append(parse_lut(source.split(":", 1)[1]))
        else:
            raise ReferenceError(f"cannot rebuild multiplier from source {source!r}")
    return tables


@dataclass
class RefMapping:
    """Per-layer weight-value -> mode lookup plus the mode product tables."""

    mode_of: list[np.ndarray]       # (256,) int per mul layer
    tables: list[np.ndarray]        # three (256, 256) int64 tables


def parse_mapping(path: str | Path) -> RefMapping:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "AXMAP":
        raise ReferenceError(f"{path}: not an AXMAP file")
    mode_of = []
    for layer in doc["layers"]:
        modes = np.zeros(256, dtype=np.int64)
        if layer["m1"] is not None:
            lo, hi = layer["m1"]
            modes[lo:hi + 1] = 1
        if layer["m2"] is not None:
            lo, hi = layer["m2"]
            modes[lo:hi + 1] = 2
        mode_of.append(modes)
    sources = [m["source"] for m in doc["multiplier"]]
    return RefMapping(mode_of=mode_of, tables=tables_from_sources(sources))


# ---------------------------------------------------------------------------
# integer inference


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.where(values >= 0, np.floor(values + 0.5), np.ceil(values - 0.5))


def _requant(acc: np.ndarray, multiplier: float, out_zp: int) -> np.ndarray:
    out = _round_half_away(acc.astype(np.float64) * multiplier) + out_zp
    return np.clip(out, 0, 255).astype(np.uint8)


def _layer_table(layer: RefLayer, mapping: RefMapping | None) -> np.ndarray | None:
    """Weight-row product table for one layer; None means exact products."""
    if mapping is None:
        return None
    modes = mapping.mode_of[layer.mul_index]
    table = mapping.tables[0].copy()
    for mode in (1, 2):
        rows = modes == mode
        if rows.any():
            table[rows] = mapping.tables[mode][rows]
    return table


def _conv(x: np.ndarray, layer: RefLayer, in_zp: int, table: np.ndarray | None) -> np.ndarray:
    n = x.shape[0]
    c_out, c_in, kh, kw = layer.weights.shape
    stride, pad = layer.stride, layer.padding
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=in_zp)
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    x64 = x.astype(np.int64)
    acc = np.zeros((n, c_out, oh, ow), dtype=np.int64)
    for co in range(c_out):
        for ci in range(c_in):
            for dy in range(kh):
                for dx in range(kw):
                    w = int(layer.weights[co, ci, dy, dx])
                    patch = x64[:, ci, dy:dy + stride * oh:stride,
                                dx:dx + stride * ow:stride]
                    if table is None:
                        products = w * patch
                    else:
                        products = table[w][patch]
                    acc[:, co] += products
                    acc[:, co] -= layer.weight_zp * patch
                    acc[:, co] -= in_zp * w
                    acc[:, co] += layer.weight_zp * in_zp
        if layer.bias is not None:
            acc[:, co] += int(layer.bias[co])
    return acc


def _dense(x: np.ndarray, layer: RefLayer, in_zp: int, table: np.ndarray | None) -> np.ndarray:
    f_out, f_in = layer.weights.shape
    x64 = x.astype(np.int64)
    acc = np.zeros((x.shape[0], f_out), dtype=np.int64)
    for o in range(f_out):
        row = layer.weights[o].astype(np.int64)
        if table is None:
            products = x64 * row[None, :]
        else:
            products = table[row[None, :], x64]
        acc[:, o] = products.sum(axis=1)
        acc[:, o] -= layer.weight_zp * x64.sum(axis=1)
        acc[:, o] -= in_zp * int(row.sum())
        acc[:, o] += f_in * layer.weight_zp * in_zp
        if layer.bias is not None:
            acc[:, o] += int(layer.bias[o])
    return acc


def _pool(x: np.ndarray, layer: RefLayer, in_zp: int, take_max: bool) -> np.ndarray:
    k, stride, pad = layer.kernel, layer.stride, layer.padding
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=in_zp)
    oh = (x.shape[2] - k) // stride + 1
    ow = (x.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], x.shape[1], oh, ow),
                   dtype=np.int64 if not take_max else x.dtype)
    for dy in range(k):
        for dx in range(k):
            piece = x[:, :, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride]
            if take_max:
                out = np.maximum(out, piece)
            else:
                out = out + piece
    if take_max:
        return out.astype(np.uint8)
    count = k * k
    quotient, remainder = np.divmod(out, count)
    return (quotient + (2 * remainder >= count)).astype(np.uint8)


def forward_layers(model: RefModel, images: np.ndarray,
                   mapping: RefMapping | None) -> list[np.ndarray]:
    """All intermediate activations (one entry per layer)."""
    x = images.reshape(images.shape[0], *model.input_shape)
    zp = model.input_zp
    scale = model.input_scale
    outputs = []
    for layer in model.layers:
        if layer.kind == "conv2d":
            acc = _conv(x, layer, zp, _layer_table(layer, mapping))
            x = _requant(acc, scale * layer.weight_scale / layer.out_scale, layer.out_zp)
            scale, zp = layer.out_scale, layer.out_zp
        elif layer.kind == "dense":
            acc = _dense(x, layer, zp, _layer_table(layer, mapping))
            x = _requant(acc, scale * layer.weight_scale / layer.out_scale, layer.out_zp)
            scale, zp = layer.out_scale, layer.out_zp
        elif layer.kind == "relu":
            x = np.maximum(x, np.uint8(zp))
        elif layer.kind == "maxpool2d":
            x = _pool(x, layer, zp, take_max=True)
        elif layer.kind == "avgpool2d":
            x = _pool(x, layer, zp, take_max=False)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        else:
            raise ReferenceError(f"unknown layer kind {layer.kind!r}")
        outputs.append(x)
    return outputs


def reference_infer(model_path: str | Path, dataset_path: str | Path,
                    mapping_path: str | Path | None = None,
                    batch_size: int = 100) -> np.ndarray:
    """Per-batch accuracies (fractions in [0, 1]) of the exported model."""
    model = parse_model(model_path)
    images, labels, _ = parse_dataset(dataset_path)
    mapping = parse_mapping(mapping_path) if mapping_path is not None else None
    accuracies = []
    for start in range(0, images.shape[0], batch_size):
        stop = min(images.shape[0], start + batch_size)
        logits = forward_layers(model, images[start:stop], mapping)[-1]
        predictions = logits.argmax(axis=1)
        accuracies.append(float(np.mean(predictions == labels[start:stop])))
    return np.array(accuracies)


@dataclass
class Divergence:
    layer: int
    kind: str
    flat_index: int
    value_a: int
    value_b: int

    def __str__(self) -> str:
        return (f"first divergence at layer {self.layer} ({self.kind}), "
                f"flat index {self.flat_index}: {self.value_a} != {self.value_b}")


def first_divergence(model_a_path: str | Path, model_b_path: str | Path,
                     dataset_path: str | Path, sample: int = 16) -> Divergence | None:
    """Layer-by-layer comparison of two exported models on shared inputs."""
    model_a = parse_model(model_a_path)
    model_b = parse_model(model_b_path)
    images, _, _ = parse_dataset(dataset_path)
    images = images[:sample]
    outs_a = forward_layers(model_a, images, None)
    outs_b = forward_layers(model_b, images, None)
    for pos, (a, b) in enumerate(zip(outs_a, outs_b)):
        if not np.array_equal(a, b):
            flat_a = a.ravel()
            flat_b = b.ravel()
            idx = int(np.flatnonzero(flat_a != flat_b)[0])
            return Divergence(layer=pos, kind=model_a.layers[pos].kind,
                              flat_index=idx, value_a=int(flat_a[idx]),
                              value_b=int(flat_b[idx]))
    return None
