"""Translate per-layer mode fractions into nested weight-value ranges.

Each multiplier-bearing layer gets a pair (v1, v2): the fraction of the
layer's multiplications to route to modes M1 and M2. Fractions are measured
in multiplication-weighted mass (a conv weight counts once per output
position it touches), so they directly express shares of the layer's
multiplications. The M2 range is a contiguous weight-value interval around the
layer's multiplication-weighted median; the M1 range extends it outward.
Weights inside M2 use mode 2, weights inside M1 but outside M2 use mode 1,
everything else stays exact.

Range construction is greedy on mass: starting from the median bin, the
interval repeatedly extends toward the side whose nearest occupied bin holds
more mass (ties extend toward lower values), then a trim pass removes
endpoint bins that are not needed to reach the requested mass. The result
always contains the median, meets the requested fraction, and is minimal at
bin granularity: dropping either endpoint bin falls below the request.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import MUL_BEARING_KINDS, Layer, QuantModel, TableMul, products_per_weight
from .errors import FormatError, ValidationError
from .multipliers import AxMultiplier

# Relative slack when comparing integer mass against fractional requests,
# so that e.g. v=0.1 of a 70-mass histogram asks for 7, not 7+1ulp.
_MASS_EPS = 1e-9


@dataclass(frozen=True)
class FractionVectors:
    """Per-layer (v1, v2) fraction pairs; v1 + v2 <= 1 elementwise."""

    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        v1 = np.array(self.v1, dtype=np.float64)
        v2 = np.array(self.v2, dtype=np.float64)
        if v1.shape != v2.shape or v1.ndim != 1:
            raise ValidationError("v1 and v2 must be equal-length vectors")
        if np.any(v1 < 0) or np.any(v2 < 0) or np.any(v1 + v2 > 1 + 1e-9):
            raise ValidationError("fractions must satisfy v1, v2 >= 0 and v1 + v2 <= 1")
        v1.setflags(write=False)
        v2.setflags(write=False)
        object.__setattr__(self, "v1", v1)
        object.__setattr__(self, "v2", v2)

    def __len__(self) -> int:
        return int(self.v1.shape[0])

    @classmethod
    def zeros(cls, layer_count: int) -> "FractionVectors":
        return cls(np.zeros(layer_count), np.zeros(layer_count))


@dataclass(frozen=True)
class WeightHistogram:
    """Multiplication-weighted weight-value histogram of one layer."""

    counts: np.ndarray  # (256,) int64
    median_bin: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def layer_histogram(layer: Layer, per_weight_mul_count: int) -> WeightHistogram:
    """Histogram of weight values, each weight counted once per product it feeds."""
    if layer.weights is None:
        raise ValueError(f"{layer.kind} layer carries no weights")
    if per_weight_mul_count < 1:
        raise ValueError("per_weight_mul_count must be positive")
    counts = np.bincount(layer.weights.values.ravel(), minlength=256).astype(np.int64)
    counts *= per_weight_mul_count
    total = int(counts.sum())
    cumulative = counts.cumsum()
    median_bin = int(np.searchsorted(cumulative, total / 2, side="left"))
    return WeightHistogram(counts=counts, median_bin=median_bin)


def model_histograms(model: QuantModel) -> list[WeightHistogram]:
    multiplicity = products_per_weight(model)
    return [layer_histogram(layer, int(multiplicity[layer.layer_index]))
            for layer in model.mul_layers]


@dataclass(frozen=True)
class LayerRanges:
    """Nested inclusive weight-value intervals for modes M1 and M2.

    ``m1`` covers the combined M1+M2 region; ``m2`` (when present) is nested
    inside it. ``None`` marks an empty range. Achieved fractions are the
    realized multiplication-mass shares of each interval (``achieved_m1``
    includes the nested M2 mass).
    """

    m1: tuple[int, int] | None
    m2: tuple[int, int] | None
    achieved_m1: float
    achieved_m2: float

    def __post_init__(self):
        if self.m2 is not None:
            if self.m1 is None:
                raise ValidationError("M2 range cannot exist without an M1 range")
            if not (self.m1[0] <= self.m2[0] and self.m2[1] <= self.m1[1]):
                raise ValidationError(f"M2 range {self.m2} not nested in M1 range {self.m1}")


def _grow_interval(counts: np.ndarray, occupied: np.ndarray, lo: int, hi: int,
                   target: float, floor_lo: int, floor_hi: int) -> tuple[int, int]:
    """Greedy mass growth plus endpoint trim.

    ``occupied`` is the sorted list of non-empty bins; the interval may only
    shrink down to [floor_lo, floor_hi] (the median bin, or the inner M2
    interval when growing M1).
    """
    cumulative = np.concatenate(([0], counts.cumsum()))

    def mass(a: int, b: int) -> int:
        return int(cumulative[b + 1] - cumulative[a])

    slack = _MASS_EPS * max(1.0, float(cumulative[-1]))
    while mass(lo, hi) + slack < target:
        below_idx = np.searchsorted(occupied, lo) - 1
        above_idx = np.searchsorted(occupied, hi, side="right")
        below = int(occupied[below_idx]) if below_idx >= 0 else None
        above = int(occupied[above_idx]) if above_idx < occupied.size else None
        if below is None and above is None:
            break
        if above is None:
            lo = below
        elif below is None:
            hi = above
        elif counts[below] >= counts[above]:  # ties extend toward lower values
            lo = below
        else:
            hi = above
    # trim: drop endpoint bins that are not needed for the requested mass
    trimmed = True
    while trimmed:
        trimmed = False
        if lo < floor_lo:
            idx = np.searchsorted(occupied, lo, side="right")
            new_lo = int(occupied[idx]) if idx < occupied.size else floor_lo
            new_lo = min(new_lo, floor_lo)
            if mass(new_lo, hi) + slack >= target:
                lo = new_lo
                trimmed = True
        if hi > floor_hi:
            idx = np.searchsorted(occupied, hi) - 1
            new_hi = int(occupied[idx]) if idx >= 0 else floor_hi
            new_hi = max(new_hi, floor_hi)
            if mass(lo, new_hi) + slack >= target:
                hi = new_hi
                trimmed = True
    return lo, hi


def ranges_from_fractions(hist: WeightHistogram, v1: float, v2: float) -> LayerRanges:
    """Build the nested (M1, M2) intervals realizing the requested fractions."""
    if v1 < 0 or v2 < 0 or v1 + v2 > 1 + 1e-9:
        raise ValueError(f"fractions out of range: v1={v1}, v2={v2}")
    total = hist.total
    if total <= 0:
        raise ValueError("histogram has no mass")
    counts = hist.counts
    occupied = np.flatnonzero(counts)
    median = hist.median_bin

    m2 = None
    mass2 = 0
    if v2 > 0:
        m2 = _grow_interval(counts, occupied, median, median, v2 * total, median, median)
        mass2 = int(counts[m2[0]:m2[1] + 1].sum())

    m1 = None
    mass1 = 0
    if v1 + v2 > 0:
        start = m2 if m2 is not None else (median, median)
        combined = min(v1 + v2, 1.0) * total
        m1 = _grow_interval(counts, occupied, start[0], start[1], combined,
                            start[0], start[1])
        mass1 = int(counts[m1[0]:m1[1] + 1].sum())

    return LayerRanges(
        m1=m1, m2=m2,
        achieved_m1=mass1 / total if m1 is not None else 0.0,
        achieved_m2=mass2 / total if m2 is not None else 0.0,
    )


def mode_for_weight(w: int, ranges: LayerRanges) -> int:
    """Mode index for one weight value: M2 wins over M1 wins over exact."""
    if ranges.m2 is not None and ranges.m2[0] <= w <= ranges.m2[1]:
        return 2
    if ranges.m1 is not None and ranges.m1[0] <= w <= ranges.m1[1]:
        return 1
    return 0


def mode_vector(ranges: LayerRanges) -> np.ndarray:
    """Mode index for every possible weight value, shape (256,)."""
    modes = np.zeros(256, dtype=np.int8)
    if ranges.m1 is not None:
        modes[ranges.m1[0]:ranges.m1[1] + 1] = 1
    if ranges.m2 is not None:
        modes[ranges.m2[0]:ranges.m2[1] + 1] = 2
    return modes


def model_ranges(model: QuantModel, fv: FractionVectors) -> list[LayerRanges]:
    """Per-layer ranges; layers with ``approx=False`` get empty ranges."""
    if len(fv) != model.mul_layer_count:
        raise ValueError(
            f"fraction vectors have {len(fv)} layers, model has {model.mul_layer_count}"
        )
    ranges = []
    for hist, layer, v1, v2 in zip(model_histograms(model), model.mul_layers,
                                   fv.v1, fv.v2):
        if not layer.approx:
            ranges.append(LayerRanges(m1=None, m2=None, achieved_m1=0.0, achieved_m2=0.0))
        else:
            ranges.append(ranges_from_fractions(hist, float(v1), float(v2)))
    return ranges


@dataclass(frozen=True)
class Utilization:
    """Multiplications per image routed to each mode."""

    ops_m0: int
    ops_m1: int
    ops_m2: int

    @property
    def total(self) -> int:
        return self.ops_m0 + self.ops_m1 + self.ops_m2

    def shares(self) -> tuple[float, float, float]:
        total = self.total
        if total == 0:
            raise ValueError("no multiplications to account")
        return (self.ops_m0 / total, self.ops_m1 / total, self.ops_m2 / total)


def utilization_by_layer(model: QuantModel, fv: FractionVectors,
                         ranges: list[LayerRanges] | None = None) -> list[Utilization]:
    if ranges is None:
        ranges = model_ranges(model, fv)
    out = []
    for hist, layer_ranges in zip(model_histograms(model), ranges):
        modes = mode_vector(layer_ranges)
        counts = hist.counts
        ops_m1 = int(counts[modes == 1].sum())
        ops_m2 = int(counts[modes == 2].sum())
        out.append(Utilization(ops_m0=hist.total - ops_m1 - ops_m2,
                               ops_m1=ops_m1, ops_m2=ops_m2))
    return out


def utilization(model: QuantModel, fv: FractionVectors) -> Utilization:
    """Aggregate mode usage across all multiplier-bearing layers."""
    per_layer = utilization_by_layer(model, fv)
    return Utilization(
        ops_m0=sum(u.ops_m0 for u in per_layer),
        ops_m1=sum(u.ops_m1 for u in per_layer),
        ops_m2=sum(u.ops_m2 for u in per_layer),
    )


def energy_gain(util: Utilization, mult: AxMultiplier) -> float:
    """Relative energy saved vs running every multiplication exactly."""
    total = util.total
    if total == 0:
        raise ValueError("energy gain undefined for zero multiplications")
    e0, e1, e2 = mult.energies
    spent = util.ops_m0 * e0 + util.ops_m1 * e1 + util.ops_m2 * e2
    return 1.0 - spent / (total * e0)


def mapped_multiplier(fv: FractionVectors, model: QuantModel,
                      mult: AxMultiplier) -> TableMul:
    """Multiplier whose per-layer tables dispatch each weight row to its mode."""
    tables = []
    for layer_ranges in model_ranges(model, fv):
        modes = mode_vector(layer_ranges)
        table = mult.modes[0].table.copy()
        for mode_idx in (1, 2):
            rows = modes == mode_idx
            if rows.any():
                table[rows] = mult.modes[mode_idx].table[rows]
        tables.append(table)
    return TableMul(tables)


# ---------------------------------------------------------------------------
# AXMAP artifact


def write_mapping(path: str | Path, model: QuantModel, fv: FractionVectors,
                  mult: AxMultiplier) -> None:
    """Write the AXMAP JSON artifact for a mapping on a given model."""
    ranges = model_ranges(model, fv)
    per_layer = utilization_by_layer(model, fv, ranges)
    total = Utilization(
        ops_m0=sum(u.ops_m0 for u in per_layer),
        ops_m1=sum(u.ops_m1 for u in per_layer),
        ops_m2=sum(u.ops_m2 for u in per_layer),
    )
    doc = {
        "format": "AXMAP",
        "version": 1,
        "model_sha256": model.sha256,
        "multiplier": mult.describe(),
        "layers": [
            {
                "layer_index": i,
                "v1": float(fv.v1[i]),
                "v2": float(fv.v2[i]),
                "m1": list(r.m1) if r.m1 is not None else None,
                "m2": list(r.m2) if r.m2 is not None else None,
                "achieved_m1": r.achieved_m1,
                "achieved_m2": r.achieved_m2,
                "ops_m0": per_layer[i].ops_m0,
                "ops_m1": per_layer[i].ops_m1,
                "ops_m2": per_layer[i].ops_m2,
            }
            for i, r in enumerate(ranges)
        ],
        "utilization": {"m0": total.ops_m0, "m1": total.ops_m1, "m2": total.ops_m2},
        "energy_gain": energy_gain(total, mult),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


@dataclass(frozen=True)
class MappingFile:
    fv: FractionVectors
    ranges: list[LayerRanges]
    per_layer_utilization: list[Utilization]
    utilization: Utilization
    energy_gain: float
    model_sha256: str | None
    multiplier: list[dict]


def read_mapping(path: str | Path) -> MappingFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable AXMAP: {exc}") from exc
    if doc.get("format") != "AXMAP" or doc.get("version") != 1:
        raise FormatError(f"{path}: not an AXMAP v1 file")
    layers = doc["layers"]
    fv = FractionVectors(
        np.array([l["v1"] for l in layers]),
        np.array([l["v2"] for l in layers]),
    )
    ranges = [
        LayerRanges(
            m1=tuple(l["m1"]) if l["m1"] is not None else None,
            m2=tuple(l["m2"]) if l["m2"] is not None else None,
            achieved_m1=float(l["achieved_m1"]),
            achieved_m2=float(l["achieved_m2"]),
        )
        for l in layers
    ]
    per_layer = [Utilization(l["ops_m0"], l["ops_m1"], l["ops_m2"]) for l in layers]
    util = Utilization(**{f"ops_{k}": int(v) for k, v in doc["utilization"].items()})
    return MappingFile(
        fv=fv, ranges=ranges, per_layer_utilization=per_layer, utilization=util,
        energy_gain=float(doc["energy_gain"]),
        model_sha256=doc.get("model_sha256"),
        multiplier=list(doc.get("multiplier", [])),
    )
