"""Closed-loop fleet simulation over a parking-event trace.

Drones take off from a depot, fly best-insertion routes between cell
centers, observe the cells they stop at, recharge and ask for a new route
built from the current priorities.  The estimate a policy holds for each
cell is scored against ground truth every few simulated minutes.

Routing only depends on observations made before the planning instant, so
observations are applied to the rate banks in batches just before each
plan.  Estimates depend only on a cell's own observation history and are
reconstructed after the run from the observation log.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import CellId, RegionConfig, WorldCoord, lonlat_to_world, world_to_lonlat
from .routing import solve_indices, travel_matrix
from .scheduling import VARIANCE_FLOOR, ForecastBank, PriorityBank, TTLBank

OBJECTIVES = ("counts", "open", "total")
POLICIES = ("ConstFreq", "PredictOnly", "ForecastRates")
_KEY = np.int64(1) << np.int64(40)  # cell stride in combined (cell, ms) keys
WEEK_MS = 7 * 24 * 3600 * 1000
HOUR_MS = 3600 * 1000


class SimConfigError(ValueError):
    pass


class SimulationError(RuntimeError):
    """An internal invariant (battery, conservation) was violated."""


# ---------------------------------------------------------------- trace

@dataclass(frozen=True)
class ParkingEvent:
    event_id: int
    start: int  # ms
    end: int  # ms
    location: WorldCoord

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"parking event {self.event_id}: start must precede end")


@dataclass
class Trace:
    """Columnar parking events plus the observed window ``[0, duration_ms)``."""

    event_id: np.ndarray
    start: np.ndarray
    end: np.ndarray
    x: np.ndarray
    y: np.ndarray
    duration_ms: int

    def __post_init__(self):
        self.event_id = np.asarray(self.event_id, dtype=np.int64)
        self.start = np.asarray(self.start, dtype=np.int64)
        self.end = np.asarray(self.end, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if np.any(self.start >= self.end):
            bad = int(self.event_id[np.argmax(self.start >= self.end)])
            raise ValueError(f"parking event {bad}: start must precede end")

    def __len__(self) -> int:
        return len(self.event_id)

    @classmethod
    def from_events(cls, events: Iterable[ParkingEvent], duration_ms: Optional[int] = None) -> "Trace":
        ev = list(events)
        dur = duration_ms if duration_ms is not None else max((e.end for e in ev), default=0)
        return cls(np.array([e.event_id for e in ev], dtype=np.int64),
                   np.array([e.start for e in ev], dtype=np.int64),
                   np.array([e.end for e in ev], dtype=np.int64),
                   np.array([e.location.x for e in ev], dtype=float),
                   np.array([e.location.y for e in ev], dtype=float), int(dur))

    def events(self) -> list[ParkingEvent]:
        return [ParkingEvent(int(i), int(s), int(e), WorldCoord(float(x), float(y)))
                for i, s, e, x, y in zip(self.event_id, self.start, self.end, self.x, self.y)]

    def cell_index(self, region: RegionConfig) -> np.ndarray:
        """Flat cell index per event, -1 outside the region."""
        cx = np.floor(self.x / region.cell_size_m).astype(np.int64)
        cy = np.floor(self.y / region.cell_size_m).astype(np.int64)
        inside = (cx >= 0) & (cx < region.nx) & (cy >= 0) & (cy < region.ny)
        return np.where(inside, cx * region.ny + cy, -1)


def write_trace_csv(path: Union[str, Path], trace: Trace, region: RegionConfig) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["event_id", "start_ms", "end_ms", "lon", "lat"])
        for i, s, e, x, y in zip(trace.event_id, trace.start, trace.end, trace.x, trace.y):
            lon, lat = world_to_lonlat(WorldCoord(float(x), float(y)), region)
            w.writerow([int(i), int(s), int(e), repr(lon), repr(lat)])


def read_trace_csv(path: Union[str, Path], region: RegionConfig,
                   duration_ms: Optional[int] = None) -> Trace:
    """Read ``event_id,start_ms,end_ms,lon,lat``; the window defaults to the last end time."""
    ids, starts, ends, xs, ys = [], [], [], [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (lineno == 1 and row[0].strip() == "event_id"):
                continue
            try:
                i, s, e, lon, lat = row
                p = lonlat_to_world(float(lon), float(lat), region)
                ids.append(int(i))
                starts.append(int(s))
                ends.append(int(e))
                xs.append(p.x)
                ys.append(p.y)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad trace row {row} ({exc})") from None
            if starts[-1] >= ends[-1]:
                raise ValueError(f"{path}:{lineno}: start_ms must be below end_ms")
    dur = duration_ms if duration_ms is not None else max(ends, default=0)
    return Trace(np.array(ids), np.array(starts), np.array(ends), np.array(xs), np.array(ys), int(dur))


# ---------------------------------------------------------------- ground truth

class GroundTruth:
    """Vectorized step-function lookups of counts, open and total per cell."""

    def __init__(self, trace: Trace, region: RegionConfig):
        self.region = region
        n = region.n_cells
        cell = trace.cell_index(region)
        keep = cell >= 0
        cell, start, end = cell[keep], trace.start[keep], trace.end[keep]
        # every event adds and removes one car in the same cell, so a running
        # sum over (cell, time)-sorted changes restarts at 0 for each cell
        # departures come first at equal keys so a same-instant swap never counts double
        keys = np.concatenate([cell * _KEY + end, cell * _KEY + start])
        delta = np.concatenate([-np.ones(len(cell), np.int64), np.ones(len(cell), np.int64)])
        order = np.argsort(keys, kind="stable")
        self._c_keys = keys[order]
        self._c_vals = np.cumsum(delta[order])
        self.capacity = np.zeros(n)
        if len(self._c_keys):
            np.maximum.at(self.capacity, self._c_keys // _KEY, self._c_vals)
        skeys = np.sort(cell * _KEY + start)
        first = np.searchsorted(skeys, (skeys // _KEY) * _KEY, side="left")
        self._t_keys = skeys
        self._t_vals = np.arange(1, len(skeys) + 1) - first
        self.duration_ms = trace.duration_ms

    @staticmethod
    def _lookup(keys, vals, idx, t) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        q = idx * _KEY + np.asarray(t, dtype=np.int64)
        pos = np.searchsorted(keys, q, side="right") - 1
        ok = pos >= 0
        posc = np.where(ok, pos, 0)
        ok &= (keys[posc] // _KEY) == idx if len(keys) else np.zeros_like(ok)
        return np.where(ok, vals[posc] if len(vals) else 0, 0).astype(float)

    def counts(self, idx, t) -> np.ndarray:
        return self._lookup(self._c_keys, self._c_vals, idx, t)

    def total(self, idx, t) -> np.ndarray:
        return self._lookup(self._t_keys, self._t_vals, idx, t)

    def open(self, idx, t) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        return (self.counts(idx, t) <= self.capacity[idx] / 2).astype(float)

    def value(self, objective: str, idx, t) -> np.ndarray:
        if objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {objective!r}")
        return getattr(self, objective)(idx, t)


def ground_truth(trace: Trace, objective: str, cell: CellId, t: int, region: RegionConfig) -> float:
    gt = GroundTruth(trace, region)
    return float(gt.value(objective, [region.cell_index(cell)], [t])[0])


# ---------------------------------------------------------------- synthetic traces

@dataclass(frozen=True)
class CellRegime:
    """Arrival process of one kind of cell.

    With ``arrival="poisson"`` arrivals are Poisson with hourly rate
    ``arrivals_per_h`` scaled by a daily sinusoid and by ``burst_factor``
    inside bursts.  With ``arrival="periodic"`` they come on a fixed cadence
    of ``1 / arrivals_per_h`` hours, each shifted uniformly by up to
    ``jitter`` periods either way.  Stays are exponential or fixed with mean ``mean_stay_h``.
    Arrivals start ``lead_h`` hours before the window (default five stays).
    """

    arrivals_per_h: float
    mean_stay_h: float
    daily_amplitude: float = 0.0
    bursts_per_week: float = 0.0
    burst_factor: float = 1.0
    burst_hours: float = 0.0
    arrival: str = "poisson"
    stay: str = "exponential"
    lead_h: Optional[float] = None
    jitter: float = 0.5

    def __post_init__(self) -> None:
        if self.arrival not in ("poisson", "periodic"):
            raise ValueError(f"unknown arrival process: {self.arrival}")
        if self.stay not in ("exponential", "fixed"):
            raise ValueError(f"unknown stay distribution: {self.stay}")


@dataclass(frozen=True)
class TraceProfile:
    cells_x: int
    cells_y: int
    cell_size_m: float
    weeks: float
    regimes: Mapping[str, CellRegime]
    shares: Mapping[str, float]  # fraction of cells per regime; the rest stay empty
    bin_minutes: float = 15.0

    def region(self) -> RegionConfig:
        return RegionConfig(0.0, 0.0, self.cells_x * self.cell_size_m, self.cells_y * self.cell_size_m,
                            self.cell_size_m)

    @property
    def duration_ms(self) -> int:
        return int(round(self.weeks * WEEK_MS))


def two_regime_profile(weeks: float = 8.0) -> TraceProfile:
    """16x16 grid of 512 m cells with predictable and volatile lots.

    Predictable cells get cars on a fixed cadence: "periodic" lots hold a
    constant occupancy (every departure meets an arrival) and "filling"
    lots gain two cars an hour with nobody leaving.  "volatile" lots take
    bursty Poisson arrivals with short exponential stays.
    """
    return TraceProfile(
        cells_x=16, cells_y=16, cell_size_m=512.0, weeks=weeks,
        regimes={
            "periodic": CellRegime(arrivals_per_h=0.5, mean_stay_h=24.0, arrival="periodic", stay="fixed",
                                   jitter=0.0, lead_h=48.0),
            "volatile": CellRegime(arrivals_per_h=5.0, mean_stay_h=6.0, daily_amplitude=0.5,
                                   bursts_per_week=3.0, burst_factor=3.0, burst_hours=4.0),
            "filling": CellRegime(arrivals_per_h=2.0, mean_stay_h=4000.0, arrival="periodic", stay="fixed",
                                  jitter=0.0, lead_h=24.0),
        },
        shares={"periodic": 0.55, "volatile": 0.3, "filling": 0.15},
    )


def generate_synthetic_trace(seed: int, profile: Optional[TraceProfile] = None) -> Trace:
    """Seeded parking events; cells are assigned to regimes by a seeded shuffle.

    Arrivals start before time 0 so lots are already occupied when the
    window opens; pre-window events are kept only if still parked at time 0.
    """
    profile = profile or two_regime_profile()
    rng = np.random.default_rng(seed)
    labels = _assign_regimes(rng, profile)
    duration = profile.duration_ms
    bin_ms = int(profile.bin_minutes * 60_000)
    parts = []
    for r, (name, reg) in enumerate(profile.regimes.items()):
        cells = np.nonzero(labels == r)[0]
        if len(cells) == 0 or reg.arrivals_per_h <= 0:
            continue
        lead_h = 5 * reg.mean_stay_h if reg.lead_h is None else reg.lead_h
        lead = int(lead_h * HOUR_MS)
        edges = np.arange(-lead, duration, bin_ms, dtype=np.int64)
        mid_h = (edges + bin_ms / 2) / HOUR_MS
        for c in cells:
            if reg.arrival == "periodic":
                period = HOUR_MS / reg.arrivals_per_h
                grid = np.arange(-lead + rng.uniform(0, period), duration, period)
                starts = np.round(grid + rng.uniform(-reg.jitter, reg.jitter, len(grid)) * period).astype(np.int64)
            else:
                starts = _poisson_starts(rng, reg, edges, mid_h, bin_ms, lead, duration)
            if reg.stay == "fixed":
                stays = np.full(len(starts), max(round(reg.mean_stay_h * HOUR_MS), 1))
            else:
                stays = np.maximum(np.round(rng.exponential(reg.mean_stay_h * HOUR_MS, len(starts))), 1)
            ends = starts + stays.astype(np.int64)
            keep = (ends > 0) & (starts < duration)
            starts, ends = np.maximum(starts[keep], 0), ends[keep]
            ends = np.maximum(ends, starts + 1)
            cx, cy = divmod(int(c), profile.cells_y)
            jitter = rng.uniform(-0.3, 0.3, (len(starts), 2)) * profile.cell_size_m
            parts.append((starts, ends, (cx + 0.5) * profile.cell_size_m + jitter[:, 0],
                          (cy + 0.5) * profile.cell_size_m + jitter[:, 1]))
    if parts:
        start = np.concatenate([p[0] for p in parts])
        end = np.concatenate([p[1] for p in parts])
        x = np.concatenate([p[2] for p in parts])
        y = np.concatenate([p[3] for p in parts])
        order = np.lexsort((y, x, start))
        start, end, x, y = start[order], end[order], x[order], y[order]
    else:
        start = end = np.zeros(0, np.int64)
        x = y = np.zeros(0)
    return Trace(np.arange(len(start)), start, end, x, y, duration)


def _poisson_starts(rng, reg: CellRegime, edges, mid_h, bin_ms: int, lead: int, duration: int) -> np.ndarray:
    phase = rng.uniform(0, 2 * np.pi)
    lam = reg.arrivals_per_h * np.maximum(
        1 + reg.daily_amplitude * np.sin(2 * np.pi * mid_h / 24.0 + phase), 0.0)
    if reg.bursts_per_week > 0 and reg.burst_hours > 0:
        n_b = rng.poisson(reg.bursts_per_week * (duration + lead) / WEEK_MS)
        b0 = rng.uniform(-lead, duration, n_b) / HOUR_MS
        in_burst = ((mid_h[:, None] >= b0) & (mid_h[:, None] < b0 + reg.burst_hours)).any(axis=1)
        lam = np.where(in_burst, lam * reg.burst_factor, lam)
    k = rng.poisson(lam * bin_ms / HOUR_MS)
    return np.repeat(edges, k) + rng.integers(0, bin_ms, k.sum())


def _assign_regimes(rng: np.random.Generator, profile: TraceProfile) -> np.ndarray:
    n = profile.cells_x * profile.cells_y
    counts = [int(round(profile.shares.get(name, 0.0) * n)) for name in profile.regimes]
    if sum(counts) > n:
        raise ValueError("regime shares exceed the number of cells")
    labels = np.full(n, -1)
    labels[:sum(counts)] = np.repeat(np.arange(len(counts)), counts)
    return rng.permutation(labels)


def regime_labels(seed: int, profile: Optional[TraceProfile] = None) -> np.ndarray:
    """Regime index per flat cell index (-1 empty) used by ``generate_synthetic_trace``."""
    return _assign_regimes(np.random.default_rng(seed), profile or two_regime_profile())


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class SimConfig:
    n_drones: int
    policy: str = "ForecastRates"
    objective: str = "counts"
    speed: float = 17.88  # m/s, 40 mph
    battery_s: float = 3600.0
    fov_m: float = 256.0
    cell_size_m: float = 512.0
    recharge_s: float = 1800.0
    seed: int = 0
    ttl: int = 3
    sample_interval_s: float = 300.0
    warmup_fraction: float = 0.05
    retry_s: float = 300.0  # wait before re-planning after an empty route
    depot: Optional[tuple[float, float]] = None  # meters; default region center
    variance_floor: float = VARIANCE_FLOOR
    # routing trusts a forecast only once it has a variance estimate (two differences);
    # a single difference has variance 0 and would park the cell at the floor for good
    forecast_min_obs: int = 3

    def __post_init__(self):
        if not isinstance(self.n_drones, (int, np.integer)) or self.n_drones < 1:
            raise SimConfigError("n_drones must be an integer >= 1")
        if self.policy not in POLICIES:
            raise SimConfigError(f"policy must be one of {POLICIES}")
        if self.objective not in OBJECTIVES:
            raise SimConfigError(f"objective must be one of {OBJECTIVES}")
        # speed 0 is allowed: the fleet never leaves the depot
        if not (self.speed >= 0 and math.isfinite(self.speed)):
            raise SimConfigError("speed must be finite and non-negative")
        for name in ("battery_s", "fov_m", "cell_size_m", "sample_interval_s", "retry_s"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise SimConfigError(f"{name} must be positive")
        if not self.recharge_s >= 0:
            raise SimConfigError("recharge_s must be non-negative")
        if self.ttl < 1:
            raise SimConfigError("ttl must be at least 1")
        if not 0 <= self.warmup_fraction < 1:
            raise SimConfigError("warmup_fraction must lie in [0, 1)")

    @property
    def routing(self) -> str:
        return "forecast" if self.policy == "ForecastRates" else "ttl"


# ---------------------------------------------------------------- fleet loop

@dataclass
class FleetLog:
    """Everything a run observed, in application order."""

    times: np.ndarray  # ms
    cells: np.ndarray
    counts: np.ndarray
    objective: np.ndarray
    drones: np.ndarray
    sorties: list[tuple[int, int, float, list[int]]]  # (drone, takeoff ms, seconds, stop cells)
    flight_s: float
    visits: np.ndarray  # per cell


@dataclass
class _Pending:
    times: np.ndarray
    cells: np.ndarray
    counts: np.ndarray
    objective: np.ndarray
    ptr: int = 0


def _coverage_lists(region: RegionConfig, fov_m: float) -> list[np.ndarray]:
    """Cells whose centers lie inside the square footprint centered on each cell center."""
    cx, cy = np.divmod(np.arange(region.n_cells), region.ny)
    half = fov_m / 2 / region.cell_size_m
    out = []
    for i in range(region.n_cells):
        near = (np.abs(cx - cx[i]) <= half + 1e-12) & (np.abs(cy - cy[i]) <= half + 1e-12)
        out.append(np.nonzero(near)[0])
    return out


def simulate_fleet(gt: GroundTruth, cfg: SimConfig) -> FleetLog:
    region = gt.region
    n = region.n_cells
    duration = gt.duration_ms
    cx, cy = np.divmod(np.arange(n), region.ny)
    centers = np.stack([(cx + 0.5) * region.cell_size_m, (cy + 0.5) * region.cell_size_m], axis=1)
    depot = cfg.depot if cfg.depot is not None else (region.width_m / 2, region.height_m / 2)
    tm = travel_matrix(np.vstack([np.asarray(depot, float)[None, :], centers]), cfg.speed)
    nodes = np.arange(1, n + 1)
    cover = _coverage_lists(region, cfg.fov_m)
    single = all(len(c) == 1 for c in cover)

    ttl = TTLBank(n, cfg.ttl)
    fbank = ForecastBank(n)
    pbank = PriorityBank(n)
    use_forecast = cfg.routing == "forecast"
    pending: list[Optional[_Pending]] = [None] * cfg.n_drones
    log_t, log_c, log_n, log_o, log_d = [], [], [], [], []
    sorties = []
    flight_s = 0.0
    cycle_ms = (cfg.battery_s + cfg.recharge_s) * 1000.0
    heap = [(int(round(i * cycle_ms / cfg.n_drones)), i) for i in range(cfg.n_drones)]
    heapq.heapify(heap)

    def apply(until: int) -> None:
        parts = []
        for d, p in enumerate(pending):
            if p is None or p.ptr >= len(p.times):
                continue
            stop = int(np.searchsorted(p.times, until, side="right"))
            if stop > p.ptr:
                sl = slice(p.ptr, stop)
                parts.append((p.times[sl], p.cells[sl], p.counts[sl], p.objective[sl],
                              np.full(stop - p.ptr, d)))
                p.ptr = stop
        if not parts:
            return
        t, c, v, o, d = (np.concatenate(x) for x in zip(*parts))
        order = np.argsort(t, kind="stable")
        t, c, v, o, d = t[order], c[order], v[order], o[order], d[order]
        log_t.append(t)
        log_c.append(c)
        log_n.append(v)
        log_o.append(o)
        log_d.append(d)
        # a cell seen twice in one batch is applied in rounds, earliest first
        _, first, inv = np.unique(c, return_index=True, return_inverse=True)
        if len(first) == len(c):
            rounds = [np.arange(len(c))]
        else:
            rank = np.zeros(len(c), dtype=np.int64)
            seen: dict[int, int] = {}
            for j, cell in enumerate(c.tolist()):
                rank[j] = seen.get(cell, 0)
                seen[cell] = rank[j] + 1
            rounds = [np.nonzero(rank == r)[0] for r in range(rank.max() + 1)]
        for sel in rounds:
            if use_forecast:
                fbank.observe_many(c[sel], t[sel], o[sel])
            else:
                ttl.observe_many(c[sel], v[sel])
            pbank.reset(c[sel], t[sel].astype(float))

    while heap:
        now, d = heapq.heappop(heap)
        if now >= duration:
            break
        apply(now)
        rates = fbank.rates(now, cfg.variance_floor, cfg.forecast_min_obs) if use_forecast else ttl.rates()
        pbank.set_rates(now, rates)
        prio = pbank.priority
        avail = prio > 0
        for e, p in enumerate(pending):
            if e != d and p is not None and p.ptr < len(p.cells):
                avail[p.cells[p.ptr:]] = False
        route, total = solve_indices(tm, 0, nodes[avail], prio[avail], cfg.battery_s)
        if len(route) <= 2:
            pending[d] = None
            heapq.heappush(heap, (now + int(round(cfg.retry_s * 1000)), d))
            continue
        if not total <= cfg.battery_s * (1 + 1e-12):
            raise SimulationError(f"route of {total:.3f} s exceeds battery {cfg.battery_s} s")
        legs = tm[route[:-1], route[1:]]
        eta = np.cumsum(legs)[:-1]
        stops = route[1:-1] - 1
        times = now + np.round(eta * 1000).astype(np.int64)
        if not single:
            reps = np.array([len(cover[s]) for s in stops])
            times = np.repeat(times, reps)
            stops = np.concatenate([cover[s] for s in stops])
        counts = gt.counts(stops, times)
        obj = counts if cfg.objective == "counts" else gt.value(cfg.objective, stops, times)
        pending[d] = _Pending(times, stops.astype(np.int64), counts, obj)
        sorties.append((d, now, float(total), stops.tolist()))
        flight_s += float(total)
        heapq.heappush(heap, (now + int(round((total + cfg.recharge_s) * 1000)), d))
    apply(duration - 1)

    def cat(parts, dtype):
        return np.concatenate(parts) if parts else np.zeros(0, dtype)

    cells = cat(log_c, np.int64)
    return FleetLog(cat(log_t, np.int64), cells, cat(log_n, float), cat(log_o, float),
                    cat(log_d, np.int64), sorties, flight_s,
                    np.bincount(cells, minlength=n).astype(np.int64))


# ---------------------------------------------------------------- estimates and scoring

def sample_times(duration_ms: int, cfg: SimConfig) -> np.ndarray:
    step = int(round(cfg.sample_interval_s * 1000))
    start = int(math.ceil(cfg.warmup_fraction * duration_ms / step)) * step
    times = np.arange(start, duration_ms, step, dtype=np.int64)
    if len(times) == 0:
        raise SimConfigError(f"trace of {duration_ms} ms has no sample time after the "
                             f"{cfg.warmup_fraction:.0%} warmup")
    return times


def estimate_matrix(log: FleetLog, n_cells: int, times: np.ndarray, method: str) -> np.ndarray:
    """Estimates, shape (len(times), n_cells), from each cell's observations before each time.

    ``last`` carries the last observed value forward (0 before any
    observation).  ``forecast`` extrapolates the random walk with drift
    fitted to all earlier observations, matching ``ForecastBank.predict``.
    """
    order = np.lexsort((np.arange(len(log.times)), log.times, log.cells))
    c, t, v = log.cells[order], log.times[order], log.objective[order]
    keys = c * _KEY + t
    cell_grid = np.arange(n_cells, dtype=np.int64)[None, :]
    q = cell_grid * _KEY + times[:, None]
    pos = np.searchsorted(keys, q, side="right") - 1
    ok = pos >= 0
    posc = np.where(ok, pos, 0)
    if len(keys):
        ok &= c[posc] == cell_grid
    else:
        return np.zeros(q.shape)
    if method == "last":
        return np.where(ok, v[posc], 0.0)
    if method != "forecast":
        raise ValueError(f"unknown estimate method {method!r}")
    first = np.searchsorted(keys, c * _KEY, side="left")
    n_obs = np.arange(len(c)) - first + 1
    steps = np.maximum(n_obs - 1, 1)
    # Welford over the differences, in observation order, as the online bank does
    mean_d = _running_mean_diff(c, v)
    gap = (t - t[first]) / steps
    k = np.where(gap[posc] > 0, (times[:, None] - t[posc]) / np.where(gap[posc] > 0, gap[posc], 1.0), 0.0)
    k = np.maximum(k, 0.0)
    pred = v[posc] + np.where(n_obs[posc] >= 2, mean_d[posc] * k, 0.0)
    return np.where(ok, pred, 0.0)


def _running_mean_diff(cells: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Running mean of within-cell differences, updated exactly like ``ForecastBank``."""
    out = np.zeros(len(values))
    mean, last, nd, prev_cell = 0.0, 0.0, 0, -1
    for j, (cell, val) in enumerate(zip(cells.tolist(), values.tolist())):
        if cell != prev_cell:
            mean, nd, prev_cell = 0.0, 0, cell
        else:
            nd += 1
            mean += ((val - last) - mean) / nd
        last = val
        out[j] = mean
    return out


@dataclass
class SimMetrics:
    policy: str
    n_drones: int
    objective: str
    mae: float
    flight_hours: float
    visits: np.ndarray
    n_sorties: int
    n_observations: int
    seed: int = 0
    error_by_cell: Optional[np.ndarray] = field(default=None, repr=False)


class Experiment:
    """Shares the ground truth, sample grid and TTL-routed fleet logs across policies."""

    def __init__(self, trace: Trace, region: RegionConfig, base: SimConfig):
        self.trace = trace
        self.region = region
        self.base = base
        self.gt = GroundTruth(trace, region)
        self.times = sample_times(trace.duration_ms, base)
        self._truth: dict[str, np.ndarray] = {}
        self._logs: dict[tuple, FleetLog] = {}

    def truth(self, objective: str) -> np.ndarray:
        if objective not in self._truth:
            n = self.region.n_cells
            idx = np.broadcast_to(np.arange(n)[None, :], (len(self.times), n))
            tt = np.broadcast_to(self.times[:, None], idx.shape)
            self._truth[objective] = self.gt.value(objective, idx.ravel(), tt.ravel()).reshape(idx.shape)
        return self._truth[objective]

    def fleet_log(self, cfg: SimConfig) -> FleetLog:
        # TTL routing ignores the objective, so both TTL-routed policies share one run
        key = (cfg.routing, cfg.n_drones, cfg.objective if cfg.routing == "forecast" else None,
               replace(cfg, policy="ForecastRates", objective="counts", n_drones=1, seed=0))
        if key not in self._logs:
            self._logs[key] = simulate_fleet(self.gt, cfg)
        return self._logs[key]

    def run(self, policy: str, n_drones: int, objective: Optional[str] = None) -> SimMetrics:
        cfg = replace(self.base, policy=policy, n_drones=n_drones,
                      objective=objective or self.base.objective)
        log = self.fleet_log(cfg)
        if cfg.routing == "ttl" and cfg.objective != "counts" and len(log.times):
            # the shared log stores counts; re-read the objective at the same instants
            log = replace(log, objective=self.gt.value(cfg.objective, log.cells, log.times))
        est = estimate_matrix(log, self.region.n_cells, self.times,
                              "last" if policy == "ConstFreq" else "forecast")
        err = np.abs(est - self.truth(cfg.objective))
        return SimMetrics(policy, n_drones, cfg.objective, float(err.mean()), log.flight_s / 3600.0,
                          log.visits, len(log.sorties), len(log.times), cfg.seed, err.mean(axis=0))


def run_experiment(trace: Trace, config: SimConfig, program=None,
                   region: Optional[RegionConfig] = None) -> SimMetrics:
    """One policy and fleet size; ``program`` must export the configured objective."""
    if program is not None:
        from .dsl import Program, parse
        prog = program if isinstance(program, Program) else parse(program)
        if config.objective not in prog.exports:
            raise SimConfigError(f"program does not export the {config.objective!r} objective")
    region = region or RegionConfig(0.0, 0.0, 16 * config.cell_size_m, 16 * config.cell_size_m,
                                    config.cell_size_m)
    return Experiment(trace, region, config).run(config.policy, config.n_drones)


def run_sweep(trace: Trace, region: RegionConfig, base: SimConfig, drone_counts: Sequence[int],
              policies: Sequence[str] = POLICIES, objectives: Sequence[str] = ("counts",)
              ) -> list[SimMetrics]:
    exp = Experiment(trace, region, base)
    out = []
    for obj in objectives:
        for n in drone_counts:
            for pol in policies:
                out.append(exp.run(pol, n, obj))
    return out


def drones_needed(drone_counts: Sequence[int], maes: Sequence[float], target: float) -> float:
    """Fractional fleet size reaching ``target`` MAE, by linear interpolation.

    MAE is treated as a non-increasing function of fleet size (running
    minimum).  Targets already met by the smallest fleet return that size;
    unreachable targets return infinity.
    """
    n = np.asarray(drone_counts, dtype=float)
    m = np.minimum.accumulate(np.asarray(maes, dtype=float))
    if target >= m[0]:
        return float(n[0])
    for i in range(1, len(n)):
        if m[i] <= target:
            if m[i - 1] == m[i]:
                return float(n[i])
            return float(n[i - 1] + (m[i - 1] - target) / (m[i - 1] - m[i]) * (n[i] - n[i - 1]))
    return math.inf


def drone_savings(drone_counts: Sequence[int], baseline_maes: Sequence[float],
                  improved_maes: Sequence[float]) -> list[tuple[int, float, float, float]]:
    """For each baseline fleet beyond the smallest, the fleet the improved policy
    needs for the same MAE and the ratio of the two.

    Needs below the smallest simulated fleet are clamped to it, which can
    only understate the ratio.  Rows are ``(n, target, needed, ratio)``.
    """
    counts = list(drone_counts)
    out = []
    for i, n in enumerate(counts[1:], 1):
        target = float(baseline_maes[i])
        need = max(drones_needed(counts, improved_maes, target), float(counts[0]))
        out.append((int(n), target, need, n / need))
    return out


def write_metrics_csv(path: Union[str, Path], metrics: Iterable[SimMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "n_drones", "objective", "mae", "flight_hours"])
        for m in metrics:
            w.writerow([m.policy, m.n_drones, m.objective, f"{m.mae:.6f}", f"{m.flight_hours:.4f}"])


def write_visits_csv(path: Union[str, Path], metrics: Iterable[SimMetrics], region: RegionConfig) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "n_drones", "objective", "cell_x", "cell_y", "visits"])
        for m in metrics:
            for i, v in enumerate(m.visits):
                c = region.cell_from_index(i)
                w.writerow([m.policy, m.n_drones, m.objective, c.cx, c.cy, int(v)])
