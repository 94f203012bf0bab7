"""Domain types and the LSTC raster container.

An LSTC file is::

    bytes 0-5        b"LSTC1\\n"
    bytes 6-13       header length H, uint64 little-endian
    bytes 14..14+H   UTF-8 JSON header
    remainder        float32 little-endian payload, plane-major then row-major

Invalid observations are stored as NaN in the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"LSTC1\n"
_LEN = struct.Struct("<Q")
DTYPE = "f32le"
ORDER = "day-major,row-major"

T_MIN, T_MAX = 180.0, 360.0


class DelagError(Exception):
    """Base class for all package errors."""


class ContainerFormatError(DelagError):
    pass


class TruncationError(ContainerFormatError):
    def __init__(self, expected: int, actual: int, what: str = "payload"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} truncated: expected {expected} bytes, got {actual}")


class ValidationError(DelagError):
    """Invariant violation.

    ``reason`` is a short machine-readable code, ``index`` the offending
    position (flat index, day index, ...) when there is one.
    """

    def __init__(self, reason: str, message: str, index: Any = None):
        self.reason = reason
        self.index = index
        loc = f" at index {index}" if index is not None else ""
        super().__init__(f"{reason}: {message}{loc}")


@dataclass(frozen=True)
class GridShape:
    n_days: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("n_days", "height", "width"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ValidationError("nonpositive_dim", f"{name}={v} must be a positive integer")
        if self.n_days > 366:
            raise ValidationError("too_many_days", f"n_days={self.n_days} exceeds 366")

    @property
    def n_pixels(self) -> int:
        return self.height * self.width


def _check_days(days: np.ndarray) -> None:
    if days.ndim != 1:
        raise ValidationError("bad_days", "days must be one-dimensional")
    bad = np.flatnonzero((days < 1) | (days > 366))
    if bad.size:
        raise ValidationError("day_out_of_range", f"day {int(days[bad[0]])} not in [1, 366]", int(bad[0]))
    dec = np.flatnonzero(np.diff(days) <= 0)
    if dec.size:
        raise ValidationError("days_not_increasing", "days must be strictly increasing", int(dec[0]) + 1)


@dataclass(frozen=True)
class SceneStack:
    """Observed temperature cube, shape (n_days, height, width), kelvin, NaN = unobserved."""

    days: np.ndarray
    temps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        days = np.asarray(self.days)
        if days.dtype.kind not in "iu":
            if not np.all(np.asarray(days) == np.round(days)):
                raise ValidationError("bad_days", "days must be integers")
        days = days.astype(np.int64)
        temps = np.asarray(self.temps, dtype=np.float32)
        if temps.ndim != 3:
            raise ValidationError("bad_shape", f"temps must be 3-D, got {temps.ndim}-D")
        GridShape(*temps.shape)
        if days.shape[0] != temps.shape[0]:
            raise ValidationError(
                "length_mismatch", f"{days.shape[0]} days but {temps.shape[0]} planes"
            )
        _check_days(days)
        flat = temps.ravel()
        finite = np.isfinite(flat)
        bad = np.flatnonzero(finite & ((flat < T_MIN) | (flat > T_MAX)))
        if bad.size:
            raise ValidationError(
                "temperature_out_of_range",
                f"temperature {float(flat[bad[0]])} K outside [{T_MIN}, {T_MAX}]",
                int(bad[0]),
            )
        bad = np.flatnonzero(np.isinf(flat))
        if bad.size:
            raise ValidationError("infinite_temperature", "infinite value", int(bad[0]))
        temps.setflags(write=False)
        days.setflags(write=False)
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "temps", temps)

    @property
    def shape(self) -> GridShape:
        return GridShape(*self.temps.shape)

    def day_index(self, day: int) -> int | None:
        i = int(np.searchsorted(self.days, day))
        if i < len(self.days) and self.days[i] == day:
            return i
        return None

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.temps)

    def subset_days(self, keep: np.ndarray) -> "SceneStack":
        keep = np.asarray(keep, dtype=bool)
        return SceneStack(self.days[keep], self.temps[keep], dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, SceneStack):
            return NotImplemented
        return (
            np.array_equal(self.days, other.days)
            and self.temps.shape == other.temps.shape
            and self.temps.tobytes() == other.temps.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class Era5Series:
    """Gap-free coarse skin temperature.

    ``values`` has shape (n_days, n_cells); ``cell_map`` gives, for every pixel of
    an (height, width) grid, the index of its nearest coarse cell.
    """

    days: np.ndarray
    values: np.ndarray
    cell_map: np.ndarray

    def __post_init__(self):
        days = np.asarray(self.days).astype(np.int64)
        values = np.asarray(self.values, dtype=np.float32)
        cell_map = np.asarray(self.cell_map).astype(np.int64)
        _check_days(days)
        if values.ndim != 2 or values.shape[0] != days.shape[0]:
            raise ValidationError("bad_shape", "values must be (n_days, n_cells)")
        if not np.all(np.isfinite(values)):
            raise ValidationError("missing_era5", "reanalysis must be gap-free",
                                  int(np.flatnonzero(~np.isfinite(values.ravel()))[0]))
        bad = np.flatnonzero((values.ravel() < T_MIN) | (values.ravel() > T_MAX))
        if bad.size:
            raise ValidationError("temperature_out_of_range", "ERA5 value outside [180, 360] K", int(bad[0]))
        if cell_map.ndim != 2:
            raise ValidationError("bad_shape", "cell_map must be (height, width)")
        bad = np.flatnonzero((cell_map.ravel() < 0) | (cell_map.ravel() >= values.shape[1]))
        if bad.size:
            raise ValidationError("bad_cell_index", "cell_map index out of range", int(bad[0]))
        for a in (days, values, cell_map):
            a.setflags(write=False)
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "cell_map", cell_map)

    def rows_for(self, days) -> np.ndarray:
        """Row index into ``values`` for each requested day; raises if any is absent."""
        days = np.atleast_1d(np.asarray(days, dtype=np.int64))
        idx = np.searchsorted(self.days, days)
        idx = np.clip(idx, 0, len(self.days) - 1)
        missing = self.days[idx] != days
        if np.any(missing):
            raise ValidationError(
                "era5_day_missing", f"ERA5 has no value for day {int(days[missing][0])}",
                int(np.flatnonzero(missing)[0]),
            )
        return idx

    def pixel_values(self, days) -> np.ndarray:
        """ERA5 value for each pixel on each day, shape (len(days), height, width), float64."""
        rows = self.rows_for(days)
        v = self.values[rows].astype(np.float64)
        return v[:, self.cell_map]


@dataclass(frozen=True)
class FeatureRaster:
    """Per-pixel GP features, shape (F, height, width)."""

    values: np.ndarray
    names: tuple = ("red", "green", "blue", "nir", "x", "y")

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ValidationError("bad_shape", "features must be (F, height, width)")
        if not np.all(np.isfinite(values)):
            raise ValidationError("nan_feature", "features must not contain NaN",
                                  int(np.flatnonzero(~np.isfinite(values.ravel()))[0]))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if len(self.names) != values.shape[0]:
            object.__setattr__(self, "names", tuple(f"f{i}" for i in range(values.shape[0])))

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    def matrix(self) -> np.ndarray:
        """(n_pixels, F) float64 design matrix in row-major pixel order."""
        return self.values.reshape(self.values.shape[0], -1).T.astype(np.float64)


@dataclass
class Metrics:
    mae: float
    rmse: float
    r2: float | None
    bias: float
    n: int
    cov95: float | None = None
    r2_note: str | None = None

    def to_dict(self) -> dict:
        d = {"MAE": self.mae, "RMSE": self.rmse, "R2": self.r2, "Bias": self.bias, "n": self.n}
        if self.cov95 is not None:
            d["Cov95"] = self.cov95
        if self.r2_note:
            d["R2_note"] = self.r2_note
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(mae=d["MAE"], rmse=d["RMSE"], r2=d["R2"], bias=d["Bias"], n=d["n"],
                   cov95=d.get("Cov95"), r2_note=d.get("R2_note"))


def valid_fraction(stack: SceneStack, day_index: int) -> float:
    """Fraction of finite cells on one day of the stack."""
    if not 0 <= day_index < stack.temps.shape[0]:
        raise IndexError(f"day_index {day_index} out of range [0, {stack.temps.shape[0]})")
    plane = stack.temps[day_index]
    return float(np.count_nonzero(np.isfinite(plane))) / plane.size


def fold_mask(stack: SceneStack, mask: np.ndarray) -> SceneStack:
    """Apply a validity mask (True = valid) to a stack; masked cells become NaN."""
    mask = np.asarray(mask)
    if mask.shape != stack.temps.shape:
        raise ValidationError("shape_mismatch", f"mask {mask.shape} vs stack {stack.temps.shape}")
    temps = np.where(mask.astype(bool), stack.temps, np.float32(np.nan))
    return SceneStack(stack.days, temps, dict(stack.meta))


# -- container ---------------------------------------------------------------

def write_container(path, array: np.ndarray, days, meta: dict | None = None) -> None:
    """Write a 3-D float array as an LSTC container. Output is byte-deterministic."""
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValidationError("bad_shape", "container payload must be 3-D")
    header = {
        "dims": [int(n) for n in arr.shape],
        "days": [int(d) for d in days],
        "dtype": DTYPE,
        "order": ORDER,
    }
    if len(header["days"]) != arr.shape[0]:
        raise ValidationError("length_mismatch", "days length must equal dims[0]")
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_container(path) -> tuple[dict, np.ndarray]:
    """Read an LSTC container, returning (header, float32 array)."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    if len(data) < 14:
        raise TruncationError(14, len(data), "header length field")
    (hlen,) = _LEN.unpack_from(data, 6)
    if len(data) < 14 + hlen:
        raise TruncationError(hlen, len(data) - 14, "header")
    try:
        header = json.loads(data[14 : 14 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: unreadable header ({exc})") from exc
    for key in ("dims", "days", "dtype", "order"):
        if key not in header:
            raise ContainerFormatError(f"{path}: header missing required key {key!r}")
    if header["dtype"] != DTYPE:
        raise ContainerFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    if header["order"] != ORDER:
        raise ContainerFormatError(f"{path}: unsupported order {header['order']!r}")
    dims = [int(n) for n in header["dims"]]
    if len(dims) != 3:
        raise ContainerFormatError(f"{path}: dims must have 3 entries")
    expected = 4 * int(np.prod(dims))
    actual = len(data) - 14 - hlen
    if actual != expected:
        raise TruncationError(expected, actual)
    arr = np.frombuffer(data, dtype="<f4", offset=14 + hlen).reshape(dims).astype(np.float32)
    return header, arr


def save_stack(stack: SceneStack, path) -> None:
    if not isinstance(stack, SceneStack):
        raise TypeError("save_stack expects a SceneStack")
    # revalidate: a caller may have built the instance with object.__new__
    SceneStack(stack.days, stack.temps)
    meta = {"kind": "stack", **stack.meta}
    write_container(path, stack.temps, stack.days, meta)


def load_stack(path, mask_path=None) -> SceneStack:
    header, arr = read_container(path)
    meta = dict(header.get("meta") or {})
    meta.pop("kind", None)
    stack = SceneStack(np.asarray(header["days"]), arr, meta)
    if mask_path is not None:
        _, mask = read_container(mask_path)
        stack = fold_mask(stack, np.isfinite(mask) & (mask != 0))
    return stack


def save_era5(era5: Era5Series, path) -> None:
    n_days, n_cells = era5.values.shape
    meta = {
        "kind": "era5",
        "cell_map": era5.cell_map.ravel().tolist(),
        "grid": list(era5.cell_map.shape),
    }
    write_container(path, era5.values.reshape(n_days, 1, n_cells), era5.days, meta)


def load_era5(path) -> Era5Series:
    header, arr = read_container(path)
    meta = header.get("meta") or {}
    if meta.get("kind") != "era5":
        raise ContainerFormatError(f"{path}: not an era5 container")
    grid = meta["grid"]
    cell_map = np.asarray(meta["cell_map"], dtype=np.int64).reshape(grid)
    return Era5Series(np.asarray(header["days"]), arr[:, 0, :], cell_map)


def save_features(features: FeatureRaster, path) -> None:
    meta = {"kind": "features", "names": list(features.names)}
    write_container(path, features.values, range(features.n_features), meta)


def load_features(path) -> FeatureRaster:
    header, arr = read_container(path)
    meta = header.get("meta") or {}
    if meta.get("kind") != "features":
        raise ContainerFormatError(f"{path}: not a features container")
    return FeatureRaster(arr, tuple(meta.get("names", ())))
