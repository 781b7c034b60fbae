"""Shared domain types: world coordinates, the region grid, detections and dataframes."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

# meters per degree used by the local equirectangular projection
M_PER_DEG_LON = 111320.0
M_PER_DEG_LAT = 110540.0


class OutOfRegionError(ValueError):
    """A world point fell outside the region grid; callers clamp or drop it."""


@dataclass(frozen=True)
class WorldCoord:
    x: float  # meters east of region origin
    y: float  # meters north of region origin
    h: float = 0.0  # meters above ground plane

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.h)):
            raise ValueError(f"non-finite world coordinate {self}")
        if not -1000.0 <= self.h <= 10000.0:
            raise ValueError(f"height {self.h} outside sanity bound [-1000, 10000]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.h], dtype=float)


@dataclass(frozen=True)
class RegionConfig:
    origin_lon: float
    origin_lat: float
    width_m: float
    height_m: float
    cell_size_m: float

    def __post_init__(self):
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")
        for name in ("width_m", "height_m"):
            n = getattr(self, name) / self.cell_size_m
            if getattr(self, name) <= 0 or abs(n - round(n)) > 1e-9:
                raise ValueError(f"{name}={getattr(self, name)} is not a positive multiple "
                                 f"of cell_size_m={self.cell_size_m}")

    @property
    def nx(self) -> int:
        return int(round(self.width_m / self.cell_size_m))

    @property
    def ny(self) -> int:
        return int(round(self.height_m / self.cell_size_m))

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def with_cell_size(self, cell_size_m: float) -> "RegionConfig":
        return RegionConfig(self.origin_lon, self.origin_lat, self.width_m, self.height_m,
                            float(cell_size_m))

    def cells(self) -> Iterator["CellId"]:
        for cx in range(self.nx):
            for cy in range(self.ny):
                yield CellId(cx, cy)

    def cell_center(self, cell: "CellId") -> tuple[float, float]:
        return ((cell.cx + 0.5) * self.cell_size_m, (cell.cy + 0.5) * self.cell_size_m)

    def cell_index(self, cell: "CellId") -> int:
        return cell.cx * self.ny + cell.cy

    def cell_from_index(self, idx: int) -> "CellId":
        return CellId(idx // self.ny, idx % self.ny)

    def contains_cell(self, cell: "CellId") -> bool:
        return 0 <= cell.cx < self.nx and 0 <= cell.cy < self.ny


def load_region(path: str | Path) -> RegionConfig:
    """Read a ``key=value`` region file."""
    values: dict[str, float] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = float(val)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: value for {key!r} is not a number") from None
    required = ("origin_lon", "origin_lat", "width_m", "height_m", "cell_size_m")
    missing = [k for k in required if k not in values]
    if missing:
        raise ValueError(f"{path}: missing keys {missing}")
    return RegionConfig(**{k: values[k] for k in required})


def dump_region(region: RegionConfig) -> str:
    return "".join(f"{k}={getattr(region, k)!r}\n" for k in
                   ("origin_lon", "origin_lat", "width_m", "height_m", "cell_size_m"))


@dataclass(frozen=True, order=True)
class CellId:
    cx: int
    cy: int

    def __post_init__(self):
        if self.cx < 0 or self.cy < 0:
            raise ValueError(f"negative cell index {self.cx, self.cy}")


def lonlat_to_world(lon: float, lat: float, region: RegionConfig) -> WorldCoord:
    x = (lon - region.origin_lon) * math.cos(math.radians(region.origin_lat)) * M_PER_DEG_LON
    y = (lat - region.origin_lat) * M_PER_DEG_LAT
    return WorldCoord(x, y, 0.0)


def world_to_lonlat(p: WorldCoord, region: RegionConfig) -> tuple[float, float]:
    lon = region.origin_lon + p.x / (math.cos(math.radians(region.origin_lat)) * M_PER_DEG_LON)
    lat = region.origin_lat + p.y / M_PER_DEG_LAT
    return lon, lat


def world_to_cell(p: WorldCoord, region: RegionConfig) -> CellId:
    return xy_to_cell(p.x, p.y, region)


def xy_to_cell(x: float, y: float, region: RegionConfig) -> CellId:
    if not (0 <= x < region.width_m and 0 <= y < region.height_m):
        raise OutOfRegionError(f"point ({x}, {y}) outside region "
                               f"[0, {region.width_m}) x [0, {region.height_m})")
    return CellId(int(math.floor(x / region.cell_size_m)), int(math.floor(y / region.cell_size_m)))


def try_cell(x: float, y: float, region: RegionConfig) -> Optional[CellId]:
    try:
        return xy_to_cell(x, y, region)
    except OutOfRegionError:
        return None


@dataclass(frozen=True)
class BBox:
    cx_m: float
    cy_m: float
    w_m: float
    h_m: float

    def __post_init__(self):
        if not (self.w_m > 0 and self.h_m > 0):
            raise ValueError(f"bbox extents must be positive, got {self.w_m} x {self.h_m}")

    @property
    def min_x(self) -> float:
        return self.cx_m - self.w_m / 2

    @property
    def max_x(self) -> float:
        return self.cx_m + self.w_m / 2

    @property
    def min_y(self) -> float:
        return self.cy_m - self.h_m / 2

    @property
    def max_y(self) -> float:
        return self.cy_m + self.h_m / 2

    def area(self) -> float:
        return self.w_m * self.h_m

    def intersection(self, other: "BBox") -> float:
        ix = min(self.max_x, other.max_x) - max(self.min_x, other.min_x)
        iy = min(self.max_y, other.max_y) - max(self.min_y, other.min_y)
        if ix <= 0 or iy <= 0:
            return 0.0
        return ix * iy

    def iou(self, other: "BBox") -> float:
        inter = self.intersection(other)
        if inter == 0.0:
            return 0.0
        return inter / (self.area() + other.area() - inter)

    def overlaps(self, other: "BBox") -> bool:
        return self.intersection(other) > 0.0

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.cx_m + dx, self.cy_m + dy, self.w_m, self.h_m)


@dataclass(frozen=True)
class Detection:
    id: int
    time: int  # ms since stream epoch
    bounds: BBox
    class_name: str = "object"
    score: float = 1.0
    appearance: Optional[tuple[float, ...]] = None
    frame: Optional[int] = None  # source frame id, when known

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection {self.id}: score {self.score} outside [0, 1]")
        if self.time < 0:
            raise ValueError(f"detection {self.id}: negative timestamp")


@dataclass
class Sequence:
    id: int
    detections: list[Detection]

    def __post_init__(self):
        if not self.detections:
            raise ValueError(f"sequence {self.id} is empty")
        times = [d.time for d in self.detections]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"sequence {self.id}: detection times not strictly increasing")

    @property
    def first(self) -> Detection:
        return self.detections[0]

    @property
    def last(self) -> Detection:
        return self.detections[-1]

    def __len__(self) -> int:
        return len(self.detections)


@dataclass
class DetectionFrame:
    rows: list[Detection] = field(default_factory=list)

    def __post_init__(self):
        ids = [d.id for d in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("detection ids must be unique within a dataframe")

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.rows)


@dataclass
class SequenceFrame:
    rows: list[Sequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[Sequence]:
        return iter(self.rows)

    def ids(self) -> list[int]:
        return [s.id for s in self.rows]


@dataclass
class MatrixFrame:
    """Sparse spatio-temporal grid.

    ``rows`` maps ``(cell, t_ms)`` to a value.  A static matrix keeps every
    row at the sentinel time 0 and broadcasts across all times.  ``default``
    is the value of cells that were never observed.
    """

    region: RegionConfig
    rows: dict[tuple[CellId, int], float] = field(default_factory=dict)
    static: bool = False
    default: float = 0.0

    def __post_init__(self):
        if self.static and any(t != 0 for _, t in self.rows):
            raise ValueError("static matrix rows must carry time 0")

    def __len__(self) -> int:
        return len(self.rows)

    def set(self, cell: CellId, t: int, value: float) -> None:
        self.rows[(cell, 0 if self.static else int(t))] = float(value)

    def times(self) -> list[int]:
        return sorted({t for _, t in self.rows})

    def cells(self) -> list[CellId]:
        return sorted({c for c, _ in self.rows})

    def sorted_rows(self) -> list[tuple[CellId, int, float]]:
        return [(c, t, v) for (c, t), v in
                sorted(self.rows.items(), key=lambda kv: (kv[0][1], kv[0][0]))]

    def series(self) -> dict[CellId, list[tuple[int, float]]]:
        """Per-cell time-ordered observations."""
        out: dict[CellId, list[tuple[int, float]]] = {}
        for (c, t), v in sorted(self.rows.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            out.setdefault(c, []).append((t, v))
        return out

    def value_at(self, cell: CellId, t: int) -> float:
        """Value at ``cell`` as of time ``t``: the most recent prior observation, else default."""
        if self.static:
            return self.rows.get((cell, 0), self.default)
        return self.lookup().value_at(cell, t)

    def lookup(self) -> "MatrixLookup":
        return MatrixLookup(self)

    def collapse_max(self) -> "MatrixFrame":
        """Static matrix holding each cell's maximum over time."""
        out = MatrixFrame(self.region, static=True, default=self.default)
        for (c, _), v in self.rows.items():
            key = (c, 0)
            if key not in out.rows or v > out.rows[key]:
                out.rows[key] = v
        return out


class MatrixLookup:
    """Last-observation-carried-forward access to a matrix, built once."""

    def __init__(self, m: MatrixFrame):
        self.static = m.static
        self.default = m.default
        self._series: dict[CellId, tuple[list[int], list[float]]] = {}
        for c, obs in m.series().items():
            self._series[c] = ([t for t, _ in obs], [v for _, v in obs])

    def value_at(self, cell: CellId, t: int) -> float:
        s = self._series.get(cell)
        if s is None:
            return self.default
        times, values = s
        if self.static:
            return values[0]
        i = bisect.bisect_right(times, t)
        return values[i - 1] if i else self.default

    def ever_nonzero(self, cell: CellId) -> bool:
        s = self._series.get(cell)
        if s is None:
            return self.default != 0
        return any(v != 0 for v in s[1])


def iter_times_sorted(rows: Iterable[Detection]) -> list[Detection]:
    return sorted(rows, key=lambda d: (d.time, d.id))
