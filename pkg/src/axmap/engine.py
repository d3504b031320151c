"""Deterministic uint8 quantized inference for small feed-forward CNNs.

Arithmetic contract: per-tensor asymmetric uint8 quantization, 32-bit signed
accumulation, half-away-from-zero rounding on requantization, saturation to
[0, 255]. Every weight*activation product in conv2d/dense layers is obtained
exclusively through an injectable multiplier, so approximate multiplier
behavior can be swapped in without touching the engine.

Multipliers are supplied either as objects exposing
``table_for(layer_index) -> (256, 256) uint16 array`` or as plain callables
``(weight, activation, layer_index) -> product``; callables are probed once
into per-layer tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError
from .multipliers import AxMode, builtin_truncation

MUL_BEARING_KINDS = ("conv2d", "dense")
LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool2d", "avgpool2d", "flatten")

# Cap on elements gathered at once in the conv/dense product stage; larger
# workloads are processed in chunks along the batch axis.
_GATHER_CHUNK_ELEMENTS = 1 << 25


@dataclass
class QuantTensor:
    """A uint8 tensor with per-tensor asymmetric quantization parameters."""

    values: np.ndarray
    scale: float
    zero_point: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.dtype != np.uint8:
            raise ValidationError(f"quantized values must be uint8, got {values.dtype}")
        self.values = values
        if not (self.scale > 0):
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero_point <= 255:
            raise ValidationError(f"zero_point must be in [0, 255], got {self.zero_point}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class Layer:
    """One model layer.

    ``conv2d`` and ``dense`` layers carry weights (and optionally a 32-bit
    bias in the accumulator domain) plus output requantization parameters;
    activation and pool layers carry none. ``approx=False`` opts a layer out
    of approximate products: it is always served exact multiplications.
    ``layer_index`` is assigned by the owning model and counts only
    multiplier-bearing layers.
    """

    kind: str
    weights: QuantTensor | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    kernel: int = 0
    out_scale: float = 0.0
    out_zero_point: int = 0
    approx: bool = True
    layer_index: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        bearing = self.kind in MUL_BEARING_KINDS
        if bearing and self.weights is None:
            raise ValidationError(f"{self.kind} layer must carry weights")
        if not bearing and self.weights is not None:
            raise ValidationError(f"{self.kind} layer must not carry weights")
        if self.bias is not None:
            bias = np.asarray(self.bias)
            if bias.dtype != np.int32:
                raise ValidationError(f"bias must be int32, got {bias.dtype}")
            if not bearing:
                raise ValidationError(f"{self.kind} layer must not carry a bias")
            self.bias = bias
        if self.stride < 0 or self.padding < 0:
            raise ValidationError("stride and padding must be non-negative")
        if bearing:
            if not (self.out_scale > 0):
                raise ValidationError(f"{self.kind} layer needs a positive out_scale")
            if not 0 <= self.out_zero_point <= 255:
                raise ValidationError("out_zero_point must be in [0, 255]")


@dataclass
class _LayerInfo:
    out_shape: tuple[int, ...]
    mul_count: int = 0            # multiplications per image (bearing layers)
    products_per_weight: int = 0  # products each stored weight participates in


@dataclass
class QuantModel:
    """An ordered stack of layers with a fixed input quantization.

    Validation runs on construction: shapes must compose layer to layer, the
    final output must be a flat vector of ``class_count`` logits, and every
    multiplier-bearing layer must fit the 32-bit accumulator contract.
    """

    layers: list[Layer]
    input_shape: tuple[int, ...]
    input_scale: float
    input_zero_point: int
    class_count: int
    name: str = "model"
    sha256: str | None = None
    _infos: list[_LayerInfo] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.class_count < 2:
            raise ValidationError("class_count must be at least 2")
        if not (self.input_scale > 0) or not 0 <= self.input_zero_point <= 255:
            raise ValidationError("bad input quantization parameters")
        self._infos = _propagate_shapes(self)

    @property
    def mul_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.kind in MUL_BEARING_KINDS]

    @property
    def mul_layer_count(self) -> int:
        return len(self.mul_layers)

    def layer_info(self, pos: int) -> _LayerInfo:
        return self._infos[pos]


@dataclass
class Batch:
    """A batch of quantized images with integer class labels."""

    images: QuantTensor
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != self.images.shape[0]:
            raise ValidationError(
                f"label count {labels.shape} does not match image count "
                f"{self.images.shape[0]}"
            )
        self.labels = labels.astype(np.int64)


def _conv_out_dim(size: int, kernel: int, stride: int, padding: int) -> int:
    padded = size + 2 * padding
    if kernel > padded:
        raise ValidationError(f"kernel {kernel} larger than padded input {padded}")
    if stride < 1:
        raise ValidationError("stride must be at least 1 for conv/pool layers")
    return (padded - kernel) // stride + 1


def _propagate_shapes(model: QuantModel) -> list[_LayerInfo]:
    shape: tuple[int, ...] = model.input_shape
    infos: list[_LayerInfo] = []
    next_index = 0
    for pos, layer in enumerate(model.layers):
        where = f"layer {pos} ({layer.kind})"
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise ValidationError(f"{where}: expects (C, H, W) input, got {shape}")
            c_out, c_in, kh, kw = layer.weights.shape
            if c_in != shape[0]:
                raise ValidationError(
                    f"{where}: weight input channels {c_in} != activation channels {shape[0]}"
                )
            oh = _conv_out_dim(shape[1], kh, layer.stride, layer.padding)
            ow = _conv_out_dim(shape[2], kw, layer.stride, layer.padding)
            if layer.bias is not None and layer.bias.shape != (c_out,):
                raise ValidationError(f"{where}: bias shape {layer.bias.shape} != ({c_out},)")
            shape = (c_out, oh, ow)
            info = _LayerInfo(shape, mul_count=kh * kw * c_in * c_out * oh * ow,
                              products_per_weight=oh * ow)
            layer.layer_index = next_index
            next_index += 1
            _check_accumulator(layer, kh * kw * c_in, where)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ValidationError(
                    f"{where}: expects a flat input (flatten first), got {shape}"
                )
            f_out, f_in = layer.weights.shape
            if f_in != shape[0]:
                raise ValidationError(f"{where}: weight width {f_in} != input width {shape[0]}")
            if layer.bias is not None and layer.bias.shape != (f_out,):
                raise ValidationError(f"{where}: bias shape {layer.bias.shape} != ({f_out},)")
            shape = (f_out,)
            info = _LayerInfo(shape, mul_count=f_in * f_out, products_per_weight=1)
            layer.layer_index = next_index
            next_index += 1
            _check_accumulator(layer, f_in, where)
        elif layer.kind == "relu":
            info = _LayerInfo(shape)
        elif layer.kind in ("maxpool2d", "avgpool2d"):
            if len(shape) != 3:
                raise ValidationError(f"{where}: expects (C, H, W) input, got {shape}")
            if layer.kernel < 1:
                raise ValidationError(f"{where}: pool kernel must be at least 1")
            stride = layer.stride if layer.stride else layer.kernel
            oh = _conv_out_dim(shape[1], layer.kernel, stride, layer.padding)
            ow = _conv_out_dim(shape[2], layer.kernel, stride, layer.padding)
            shape = (shape[0], oh, ow)
            info = _LayerInfo(shape)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
            info = _LayerInfo(shape)
        else:  # pragma: no cover - guarded by Layer validation
            raise ValidationError(f"{where}: unknown kind")
        infos.append(info)
    if shape != (model.class_count,):
        raise ValidationError(
            f"final output shape {shape} != ({model.class_count},): "
            "model must end in class logits"
        )
    return infos


def _check_accumulator(layer: Layer, terms: int, where: str) -> None:
    """Reject layers whose worst-case accumulation leaves 32-bit range."""
    worst_products = terms * 65535
    worst_corrections = 3 * terms * 65025
    worst_bias = int(np.abs(layer.bias).max()) if layer.bias is not None and layer.bias.size else 0
    if worst_products + worst_corrections + worst_bias >= 2 ** 31:
        raise ValidationError(
            f"{where}: worst-case accumulation exceeds the 32-bit contract"
        )


# ---------------------------------------------------------------------------
# multiplier plumbing


class UniformMul:
    """Multiplier that applies a single mode to every layer."""

    def __init__(self, mode: AxMode):
        self.mode = mode

    def table_for(self, layer_index: int) -> np.ndarray:
        return self.mode.table

    def __call__(self, w: int, a: int, layer_index: int) -> int:
        return int(self.mode.table[w, a])


def exact_mul() -> UniformMul:
    return UniformMul(builtin_truncation(0))


class TableMul:
    """Multiplier backed by one explicit table per multiplier-bearing layer."""

    def __init__(self, tables: Sequence[np.ndarray]):
        self.tables = [np.asarray(t, dtype=np.uint16).reshape(256, 256) for t in tables]

    def table_for(self, layer_index: int) -> np.ndarray:
        return self.tables[layer_index]

    def __call__(self, w: int, a: int, layer_index: int) -> int:
        return int(self.tables[layer_index][w, a])


def as_mul(mul, layer_count: int):
    """Coerce a multiplier argument to the table-provider interface.

    Plain callables are probed over all 65536 operand pairs per layer, which
    keeps the engine vectorized while accepting arbitrary product functions.
    """
    if hasattr(mul, "table_for"):
        return mul
    if callable(mul):
        tables = []
        for li in range(layer_count):
            table = np.empty((256, 256), dtype=np.uint16)
            for w in range(256):
                for a in range(256):
                    table[w, a] = mul(w, a, li)
            tables.append(table)
        return TableMul(tables)
    raise ValidationError("mul must expose table_for() or be callable")


# ---------------------------------------------------------------------------
# layer arithmetic


def _requantize(acc: np.ndarray, multiplier: float, out_zero_point: int) -> np.ndarray:
    scaled = acc.astype(np.float64) * multiplier
    rounded = np.trunc(scaled + np.copysign(0.5, scaled))  # half away from zero
    return np.clip(rounded + out_zero_point, 0, 255).astype(np.uint8)


def _gather_accumulate(table: np.ndarray, ops_w: np.ndarray, ops_a: np.ndarray) -> np.ndarray:
    """Sum table[w, a] products over the trailing axis.

    ``ops_w`` has shape (..., units, K) or broadcastable against ``ops_a``
    (..., 1, K); returns int32 of shape (..., units).
    """
    prod = table[ops_w, ops_a]
    return prod.sum(axis=-1, dtype=np.int32)


def conv2d_q(x: QuantTensor, layer: Layer, mul) -> QuantTensor:
    """Quantized 2-D convolution with every product routed through ``mul``.

    Accepts a single image (C, H, W) or a batch (N, C, H, W).
    """
    if layer.kind != "conv2d":
        raise ValidationError(f"conv2d_q called on {layer.kind} layer")
    table = as_mul(mul, (layer.layer_index or 0) + 1).table_for(layer.layer_index or 0)
    single = x.values.ndim == 3
    values = x.values[None] if single else x.values
    out = _conv2d_forward(values, x.scale, x.zero_point, layer, table)
    return QuantTensor(out[0] if single else out, layer.out_scale, layer.out_zero_point)


def _conv2d_forward(x: np.ndarray, in_scale: float, in_zp: int,
                    layer: Layer, table: np.ndarray) -> np.ndarray:
    w = layer.weights
    c_out, c_in, kh, kw = w.shape
    stride = layer.stride
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ValidationError(
            f"conv2d input shape {x.shape} incompatible with weights {w.shape}"
        )
    if layer.padding:
        pad = layer.padding
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                   constant_values=in_zp)
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ValidationError("kernel larger than padded input")
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, _, oh, ow = windows.shape[:4]
    k = c_in * kh * kw
    # (N, OH, OW, C_in*KH*KW)
    patches = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, k)
    wk = w.values.reshape(c_out, k)

    acc = np.empty((n, oh, ow, c_out), dtype=np.int32)
    chunk = max(1, _GATHER_CHUNK_ELEMENTS // max(1, oh * ow * c_out * k))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        acc[start:stop] = _gather_accumulate(
            table, wk[None, None, None, :, :], patches[start:stop, :, :, None, :]
        )

    sum_a = patches.sum(axis=-1, dtype=np.int32)
    sum_w = wk.sum(axis=1, dtype=np.int32)
    zw, zx = w.zero_point, in_zp
    acc -= zw * sum_a[..., None]
    acc -= zx * sum_w
    acc += k * zw * zx
    if layer.bias is not None:
        acc += layer.bias
    out = _requantize(acc, in_scale * w.scale / layer.out_scale, layer.out_zero_point)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def dense_q(x: QuantTensor, layer: Layer, mul) -> QuantTensor:
    """Quantized fully-connected layer; input shape (F,) or (N, F)."""
    if layer.kind != "dense":
        raise ValidationError(f"dense_q called on {layer.kind} layer")
    table = as_mul(mul, (layer.layer_index or 0) + 1).table_for(layer.layer_index or 0)
    single = x.values.ndim == 1
    values = x.values[None] if single else x.values
    out = _dense_forward(values, x.scale, x.zero_point, layer, table)
    return QuantTensor(out[0] if single else out, layer.out_scale, layer.out_zero_point)


def _dense_forward(x: np.ndarray, in_scale: float, in_zp: int,
                   layer: Layer, table: np.ndarray) -> np.ndarray:
    w = layer.weights
    f_out, f_in = w.shape
    if x.ndim != 2 or x.shape[1] != f_in:
        raise ValidationError(f"dense input shape {x.shape} incompatible with weights {w.shape}")
    n = x.shape[0]
    acc = np.empty((n, f_out), dtype=np.int32)
    chunk = max(1, _GATHER_CHUNK_ELEMENTS // max(1, f_out * f_in))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        acc[start:stop] = _gather_accumulate(
            table, w.values[None, :, :], x[start:stop, None, :]
        )
    zw, zx = w.zero_point, in_zp
    acc -= zw * x.sum(axis=1, dtype=np.int32)[:, None]
    acc -= zx * w.values.sum(axis=1, dtype=np.int32)[None, :]
    acc += f_in * zw * zx
    if layer.bias is not None:
        acc += layer.bias
    return _requantize(acc, in_scale * w.scale / layer.out_scale, layer.out_zero_point)


def _pool_windows(x: np.ndarray, layer: Layer, in_zp: int) -> np.ndarray:
    stride = layer.stride if layer.stride else layer.kernel
    if layer.padding:
        pad = layer.padding
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=in_zp)
    windows = sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _maxpool_forward(x: np.ndarray, layer: Layer, in_zp: int) -> np.ndarray:
    return _pool_windows(x, layer, in_zp).max(axis=(-2, -1))


def _avgpool_forward(x: np.ndarray, layer: Layer, in_zp: int) -> np.ndarray:
    windows = _pool_windows(x, layer, in_zp)
    count = layer.kernel * layer.kernel
    total = windows.sum(axis=(-2, -1), dtype=np.int32)
    # values are non-negative, so half-up equals half-away-from-zero
    return ((2 * total + count) // (2 * count)).astype(np.uint8)


def forward(model: QuantModel, images: np.ndarray, mul) -> np.ndarray:
    """Run the full stack on a uint8 image batch; returns uint8 logits."""
    mul = as_mul(mul, model.mul_layer_count)
    x = np.asarray(images)
    if x.dtype != np.uint8:
        raise ValidationError(f"images must be uint8, got {x.dtype}")
    if x.shape[1:] != model.input_shape:
        raise ValidationError(
            f"image shape {x.shape[1:]} does not match model input {model.input_shape}"
        )
    scale, zp = model.input_scale, model.input_zero_point
    for layer in model.layers:
        if layer.kind == "conv2d":
            x = _conv2d_forward(x, scale, zp, layer, mul.table_for(layer.layer_index))
            scale, zp = layer.out_scale, layer.out_zero_point
        elif layer.kind == "dense":
            x = _dense_forward(x, scale, zp, layer, mul.table_for(layer.layer_index))
            scale, zp = layer.out_scale, layer.out_zero_point
        elif layer.kind == "relu":
            x = np.maximum(x, np.uint8(zp))
        elif layer.kind == "maxpool2d":
            x = _maxpool_forward(x, layer, zp)
        elif layer.kind == "avgpool2d":
            x = _avgpool_forward(x, layer, zp)
        elif layer.kind == "flatten":
            x = np.ascontiguousarray(x).reshape(x.shape[0], -1)
    return x


def infer_batch(model: QuantModel, batch: Batch, mul) -> float:
    """Fraction of correctly classified images in the batch.

    Bit-deterministic for fixed inputs: integer accumulation, fixed
    requantization rounding, and argmax tie-breaking toward the lowest class.
    """
    if batch.images.shape[1:] != model.input_shape:
        raise ValidationError(
            f"batch image shape {batch.images.shape[1:]} != model input {model.input_shape}"
        )
    if abs(batch.images.scale - model.input_scale) > 1e-12 or \
            batch.images.zero_point != model.input_zero_point:
        raise ValidationError("batch quantization parameters differ from the model's input")
    if batch.labels.min() < 0 or batch.labels.max() >= model.class_count:
        raise ValidationError("labels outside [0, class_count)")
    logits = forward(model, batch.images.values, mul)
    predictions = logits.argmax(axis=1)
    return float(np.mean(predictions == batch.labels))


def count_multiplications(model: QuantModel) -> np.ndarray:
    """Exact weight*activation multiplications per multiplier-bearing layer,
    for one input image."""
    return np.array(
        [model.layer_info(pos).mul_count
         for pos, layer in enumerate(model.layers) if layer.kind in MUL_BEARING_KINDS],
        dtype=np.int64,
    )


def products_per_weight(model: QuantModel) -> np.ndarray:
    """How many products each stored weight participates in, per layer."""
    return np.array(
        [model.layer_info(pos).products_per_weight
         for pos, layer in enumerate(model.layers) if layer.kind in MUL_BEARING_KINDS],
        dtype=np.int64,
    )
