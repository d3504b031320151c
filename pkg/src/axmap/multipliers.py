"""Behavioral models of reconfigurable approximate 8x8 multipliers.

A mode is an exhaustive 256x256 product table over unsigned 8-bit operands
plus an energy-per-operation figure; a reconfigurable multiplier bundles
three modes ordered from exact (M0) to most aggressive (M2). Any published
approximate multiplier can be expressed this way by enumerating its outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

TABLE_ENTRIES = 65536

_AXLU_MAGIC = b"AXLU"
_AXLU_VERSION = 1


def exact_table() -> np.ndarray:
    """256x256 table of exact products, indexed ``[weight, activation]``."""
    ops = np.arange(256, dtype=np.uint16)
    return np.multiply.outer(ops, ops)  # max 255*255 = 65025, fits uint16


@dataclass(frozen=True)
class ErrorProfile:
    """Exhaustive error statistics of a mode against exact products."""

    mean_error: float
    mean_absolute_error: float
    max_absolute_error: int


@dataclass(frozen=True)
class AxMode:
    """One multiplier operating mode.

    ``table`` is indexed ``[weight, activation]`` and holds the full
    behavioral response; ``source`` records how the mode was obtained
    (``trunc:<k>`` for built-ins, ``lut:<path>`` for loaded files) so a
    mapping artifact can name its multiplier reproducibly.
    """

    name: str
    table: np.ndarray
    energy_per_op: float
    source: str = ""

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.uint16)
        if table.size != TABLE_ENTRIES:
            raise ValidationError(
                f"mode table must have {TABLE_ENTRIES} entries, got {table.size}"
            )
        table = table.reshape(256, 256)
        table.setflags(write=False)
        object.__setattr__(self, "table", table)
        if not (self.energy_per_op > 0):
            raise ValidationError("energy_per_op must be positive")

    def profile(self) -> ErrorProfile:
        return error_profile(self)


def builtin_truncation(k: int, energy_per_op: float = 1.0) -> AxMode:
    """Mode that zeroes the low ``k`` bits of both operands before multiplying.

    ``k = 0`` is the exact mode. Stands in for published reconfigurable
    multiplier circuits, which ship as gate-level designs rather than tables.
    """
    if not isinstance(k, int) or not 0 <= k <= 8:
        raise ValueError(f"truncation width must be an integer in [0, 8], got {k!r}")
    mask = (0xFF << k) & 0xFF
    ops = (np.arange(256, dtype=np.uint16) & mask)
    table = np.multiply.outer(ops, ops)
    name = "exact" if k == 0 else f"trunc{k}"
    return AxMode(name=name, table=table, energy_per_op=energy_per_op, source=f"trunc:{k}")


def error_profile(mode: AxMode) -> ErrorProfile:
    """Exhaustive statistics over all 65536 operand pairs vs exact products."""
    err = mode.table.astype(np.int64) - exact_table().astype(np.int64)
    return ErrorProfile(
        mean_error=float(err.mean()),
        mean_absolute_error=float(np.abs(err).mean()),
        max_absolute_error=int(np.abs(err).max()),
    )


@dataclass(frozen=True)
class AxMultiplier:
    """Exactly three modes ordered (M0, M1, M2).

    Construction rejects triples that break the contract: M0 must be the
    exact product table, energies must strictly decrease from M0 to M2, and
    mean absolute error must be non-decreasing.
    """

    modes: tuple[AxMode, AxMode, AxMode]

    def __post_init__(self):
        if len(self.modes) != 3:
            raise ValidationError(f"expected exactly 3 modes, got {len(self.modes)}")
        m0, m1, m2 = self.modes
        if not np.array_equal(m0.table, exact_table()):
            raise ValidationError("M0 table must be the exact product table")
        if not (m0.energy_per_op > m1.energy_per_op > m2.energy_per_op):
            raise ValidationError(
                "energy ordering violated: need energy(M0) > energy(M1) > energy(M2), got "
                f"({m0.energy_per_op}, {m1.energy_per_op}, {m2.energy_per_op})"
            )
        mae1 = error_profile(m1).mean_absolute_error
        mae2 = error_profile(m2).mean_absolute_error
        if mae1 > mae2:
            raise ValidationError(
                f"error ordering violated: MAE(M1)={mae1} exceeds MAE(M2)={mae2}"
            )

    @property
    def energies(self) -> tuple[float, float, float]:
        return tuple(m.energy_per_op for m in self.modes)

    def describe(self) -> list[dict]:
        """JSON-ready mode descriptors for mapping artifacts."""
        return [
            {"name": m.name, "energy_per_op": m.energy_per_op, "source": m.source}
            for m in self.modes
        ]


def default_multiplier(energies: tuple[float, float, float] = (1.0, 0.8, 0.6)) -> AxMultiplier:
    """Shipped default triple: exact, truncate-1, truncate-2.

    Truncating raw offset-binary operands is much harsher per bit than the
    reconfigurable multiplier circuits this stands in for, so the default
    modes stay at the mild end; anything else is one --mult flag away.
    Energy figures are relative configuration defaults, not measurements.
    """
    return AxMultiplier(
        modes=(
            builtin_truncation(0, energies[0]),
            builtin_truncation(1, energies[1]),
            builtin_truncation(2, energies[2]),
        )
    )


def save_lut(mode: AxMode, path: str | Path) -> None:
    """Write a mode as an AXLU file (see ``load_lut`` for the layout)."""
    name_bytes = mode.name.encode("utf-8")
    if len(name_bytes) > 0xFFFF:
        raise ValidationError("mode name too long for AXLU")
    with open(path, "wb") as fh:
        fh.write(_AXLU_MAGIC)
        fh.write(struct.pack("<I", _AXLU_VERSION))
        fh.write(struct.pack("<d", mode.energy_per_op))
        fh.write(struct.pack("<H", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(mode.table.astype("<u2").tobytes())


def load_lut(path: str | Path) -> AxMode:
    """Read an AXLU file.

    Layout: magic ``AXLU``, version u32 LE, energy f64 LE, name length u16 LE,
    UTF-8 name, then 65536 u16 LE products in weight-major order.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 18 or data[:4] != _AXLU_MAGIC:
        raise FormatError(f"{path}: not an AXLU file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _AXLU_VERSION:
        raise FormatError(f"{path}: unsupported AXLU version {version}")
    (energy,) = struct.unpack_from("<d", data, 8)
    (name_len,) = struct.unpack_from("<H", data, 16)
    body_start = 18 + name_len
    expected = body_start + TABLE_ENTRIES * 2
    if len(data) != expected:
        raise FormatError(
            f"{path}: bad AXLU length {len(data)}, expected {expected}"
        )
    name = data[18:body_start].decode("utf-8")
    if not energy > 0:
        raise ValidationError(f"{path}: energy_per_op must be positive, got {energy}")
    table = np.frombuffer(data[body_start:], dtype="<u2").astype(np.uint16)
    return AxMode(name=name, table=table, energy_per_op=energy, source=f"lut:{path}")
