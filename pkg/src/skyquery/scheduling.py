"""Priority-rate operators, the SimpleGaussian forecaster and priority accumulation.

Rates are priority units per second and piecewise constant in time; a
cell's priority is the integral of its rate since the cell was last
observed.  Every per-cell rule has a vectorized ``*Bank`` twin operating on
flat cell-index arrays, used by the simulator and by the batch operators.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .core import CellId, MatrixFrame, RegionConfig

VARIANCE_FLOOR = 1e-3
# forecast rates fall back to 1 until a cell has this many observations
MIN_RATE_OBSERVATIONS = 2


@dataclass
class RateMatrix(MatrixFrame):
    """Piecewise-constant rates: a row ``(cell, t) -> r`` holds from ``t`` until
    the cell's next row; cells without rows use ``default``.

    ``observations`` lists the (cell, time) observation events of the
    source matrix, which reset priorities.
    """

    default: float = 1.0
    observations: list[tuple[CellId, int]] = field(default_factory=list)

    def __post_init__(self):
        super().__post_init__()
        self._cache: Optional[dict[CellId, tuple[list[int], list[tuple[int, float]]]]] = None

    def set(self, cell: CellId, t: int, value: float) -> None:
        self._cache = None
        super().set(cell, t, value)

    def _series_of(self, cell: CellId) -> tuple[list[int], list[tuple[int, float]]]:
        if self._cache is None:
            self._cache = {c: ([t for t, _ in obs], obs) for c, obs in self.series().items()}
        return self._cache.get(cell, ([], []))

    def rate(self, cell: CellId, t: int) -> float:
        times, series = self._series_of(cell)
        i = bisect.bisect_right(times, t)
        return series[i - 1][1] if i else self.default

    def integrate(self, cell: CellId, t0: int, t1: int) -> float:
        """Integral of the rate over ``[t0, t1]`` (ms bounds, result in rate-seconds)."""
        if t1 <= t0:
            return 0.0
        times, series = self._series_of(cell)
        i = bisect.bisect_right(times, t0)
        cur = series[i - 1][1] if i else self.default
        total = 0.0
        t = t0
        for tc, v in series[i:]:
            if tc >= t1:
                break
            total += cur * (tc - t) / 1000.0
            t, cur = tc, v
        return total + cur * (t1 - t) / 1000.0


def const_rates(region: RegionConfig) -> RateMatrix:
    return RateMatrix(region, default=1.0)


# ---------------------------------------------------------------- TTL

class TTLBank:
    """Per-cell TTL state: undecided cells rate 1, dead cells 0, active cells 1 forever."""

    UNDECIDED, ACTIVE, DEAD = 0, 1, -1

    def __init__(self, n: int, ttl: int):
        if ttl < 1:
            raise ValueError("ttl must be at least 1")
        self.ttl = ttl
        self.state = np.zeros(n, dtype=np.int8)
        self.zero_run = np.zeros(n, dtype=np.int64)

    def observe(self, idx: int, value: float) -> None:
        if self.state[idx] != self.UNDECIDED:
            return
        if value > 0:
            self.state[idx] = self.ACTIVE
        else:
            self.zero_run[idx] += 1
            if self.zero_run[idx] >= self.ttl:
                self.state[idx] = self.DEAD

    def observe_many(self, idx: np.ndarray, values: np.ndarray) -> None:
        """Vectorized observe; ``idx`` must not repeat."""
        und = self.state[idx] == self.UNDECIDED
        idx, values = idx[und], values[und]
        pos = values > 0
        self.state[idx[pos]] = self.ACTIVE
        z = idx[~pos]
        self.zero_run[z] += 1
        self.state[z[self.zero_run[z] >= self.ttl]] = self.DEAD

    def rates(self) -> np.ndarray:
        return np.where(self.state == self.DEAD, 0.0, 1.0)


def ttl_rates(observations: MatrixFrame, ttl: int) -> RateMatrix:
    """Rate 1 until ``ttl`` zero observations in a row; any positive value first keeps it 1."""
    region = observations.region
    bank = TTLBank(region.n_cells, ttl)
    out = RateMatrix(region, default=1.0)
    for c, t, v in observations.sorted_rows():
        i = region.cell_index(c)
        bank.observe(i, v)
        out.set(c, t, 0.0 if bank.state[i] == TTLBank.DEAD else 1.0)
        out.observations.append((c, t))
    return out


# ---------------------------------------------------------------- forecasting

@dataclass(frozen=True)
class ForecastCell:
    mu: float  # mean difference per observation step
    var: float  # unbiased sample variance of differences
    last_value: float
    last_time: int
    mean_gap: float  # ms between observations
    n_obs: int


def fit_forecast(observations: Iterable[tuple[int, float]]) -> Optional[ForecastCell]:
    """Random walk with drift fitted to the differenced series; None below 2 observations."""
    obs = sorted(observations)
    if len(obs) < 2:
        return None
    diffs = np.diff([v for _, v in obs])
    mu = float(diffs.mean())
    var = float(diffs.var(ddof=1)) if len(diffs) >= 2 else 0.0
    gap = (obs[-1][0] - obs[0][0]) / (len(obs) - 1)
    return ForecastCell(mu, var, float(obs[-1][1]), int(obs[-1][0]), float(gap), len(obs))


def forecast(model: ForecastCell, now: int) -> tuple[float, float]:
    """Predicted value and variance ``k`` steps past the last observation."""
    k = (now - model.last_time) / model.mean_gap if model.mean_gap > 0 else 0.0
    k = max(k, 0.0)
    return model.last_value + model.mu * k, model.var * k


class ForecastBank:
    """Online per-cell random-walk-with-drift models (Welford over differences)."""

    def __init__(self, n: int):
        self.n_obs = np.zeros(n, dtype=np.int64)
        self.first_t = np.zeros(n, dtype=np.float64)
        self.last_t = np.zeros(n, dtype=np.float64)
        self.last_v = np.zeros(n, dtype=np.float64)
        self.mean_d = np.zeros(n, dtype=np.float64)
        self.m2 = np.zeros(n, dtype=np.float64)

    def observe_many(self, idx: np.ndarray, t: np.ndarray, values: np.ndarray) -> None:
        """Vectorized update; ``idx`` must not repeat."""
        idx = np.asarray(idx)
        t = np.asarray(t, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        n = self.n_obs[idx]
        first = n == 0
        self.first_t[idx[first]] = t[first]
        has = ~first
        j = idx[has]
        d = values[has] - self.last_v[j]
        k = n[has]  # differences after this one
        delta = d - self.mean_d[j]
        self.mean_d[j] += delta / k
        self.m2[j] += delta * (d - self.mean_d[j])
        self.n_obs[idx] = n + 1
        self.last_t[idx] = t
        self.last_v[idx] = values

    def observe(self, idx: int, t: int, value: float) -> None:
        self.observe_many(np.array([idx]), np.array([t]), np.array([value]))

    def cell(self, idx: int) -> Optional[ForecastCell]:
        n = int(self.n_obs[idx])
        if n < 2:
            return None
        var = float(self.m2[idx] / (n - 2)) if n >= 3 else 0.0
        gap = (self.last_t[idx] - self.first_t[idx]) / (n - 1)
        return ForecastCell(float(self.mean_d[idx]), var, float(self.last_v[idx]),
                            int(self.last_t[idx]), float(gap), n)

    def predict(self, now: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(value, variance, defined) for every cell at ``now``.

        Cells with one observation predict their last value; cells with
        none predict 0.  ``defined`` marks cells with a fitted model.
        """
        n = self.n_obs
        defined = n >= 2
        gap = np.where(defined, (self.last_t - self.first_t) / np.maximum(n - 1, 1), 0.0)
        k = np.where(gap > 0, (now - self.last_t) / np.where(gap > 0, gap, 1.0), 0.0)
        k = np.maximum(k, 0.0)
        var = np.where(n >= 3, self.m2 / np.maximum(n - 2, 1), 0.0)
        value = np.where(defined, self.last_v + self.mean_d * k, self.last_v)
        return value, np.where(defined, var * k, 0.0), defined

    def rates(self, now: float, floor: float = VARIANCE_FLOOR,
              min_obs: int = MIN_RATE_OBSERVATIONS) -> np.ndarray:
        _, var, defined = self.predict(now)
        trusted = defined & (self.n_obs >= min_obs)
        return np.where(trusted, np.maximum(var, floor), 1.0)


def forecast_rates(observations: MatrixFrame, region: Optional[RegionConfig] = None,
                   floor: float = VARIANCE_FLOOR, cadence_ms: Optional[int] = None
                   ) -> tuple[RateMatrix, MatrixFrame]:
    """Forecast-variance rates plus the predicted-value matrix.

    Both outputs are re-evaluated at every distinct observation time
    (or, with ``cadence_ms``, at most once per cadence interval) for all
    cells seen so far.
    """
    region = region or observations.region
    bank = ForecastBank(region.n_cells)
    rates = RateMatrix(region, default=1.0)
    predicted = MatrixFrame(region)
    by_time: dict[int, list[tuple[CellId, float]]] = {}
    for c, t, v in observations.sorted_rows():
        by_time.setdefault(t, []).append((c, v))
    last_emit: Optional[int] = None
    for t in sorted(by_time):
        batch = by_time[t]
        idx = np.array([region.cell_index(c) for c, _ in batch])
        bank.observe_many(idx, np.full(len(batch), t), np.array([v for _, v in batch]))
        rates.observations.extend((c, t) for c, _ in batch)
        if cadence_ms is not None and last_emit is not None and t - last_emit < cadence_ms:
            continue
        last_emit = t
        value, var, defined = bank.predict(t)
        r = np.where(defined, np.maximum(var, floor), 1.0)
        for i in np.nonzero(bank.n_obs > 0)[0]:
            cell = region.cell_from_index(int(i))
            predicted.set(cell, t, float(value[i]))
            if defined[i]:
                rates.set(cell, t, float(r[i]))
    return rates, predicted


# ---------------------------------------------------------------- priorities

@dataclass
class PriorityState:
    priority: float = 0.0
    last_observed: int = 0
    last_rate_change: int = 0


class PriorityAccumulator:
    """Integrates a rate matrix per cell, resetting a cell whenever it is observed."""

    def __init__(self, rates: RateMatrix, start: int = 0):
        self.rates = rates
        self.start = start
        self.last_observed: dict[CellId, int] = {}

    def priority(self, cell: CellId, t: int) -> float:
        t0 = self.last_observed.get(cell, self.start)
        return self.rates.integrate(cell, t0, t)

    def observe(self, cell: CellId, t: int) -> float:
        """Read the priority at ``t`` then reset the cell; returns the value read."""
        p = self.priority(cell, t)
        self.last_observed[cell] = t
        return p

    def state(self, cell: CellId, t: int) -> PriorityState:
        times, _ = self.rates._series_of(cell)
        i = bisect.bisect_right(times, t)
        return PriorityState(self.priority(cell, t), self.last_observed.get(cell, self.start),
                             times[i - 1] if i else self.start)


def priority_accumulate(rates: RateMatrix, visits: Iterable[tuple[CellId, int]], at: int,
                        cells: Optional[Iterable[CellId]] = None) -> dict[CellId, PriorityState]:
    acc = PriorityAccumulator(rates)
    for cell, t in sorted(visits, key=lambda v: (v[1], v[0])):
        if t > at:
            break
        acc.observe(cell, t)
    cells = list(cells) if cells is not None else list(rates.region.cells())
    return {c: acc.state(c, at) for c in cells}


class PriorityBank:
    """Vectorized priorities under piecewise-constant rates."""

    def __init__(self, n: int, start: float = 0.0):
        self.priority = np.zeros(n)
        self.t_upd = np.full(n, float(start))
        self.rate = np.ones(n)

    def accrue(self, now: float) -> np.ndarray:
        self.priority += self.rate * (now - self.t_upd) / 1000.0
        self.t_upd[:] = now
        return self.priority

    def set_rates(self, now: float, rates: np.ndarray) -> None:
        self.accrue(now)
        self.rate = np.asarray(rates, dtype=float).copy()

    def reset(self, idx: np.ndarray, t: np.ndarray) -> None:
        self.priority[idx] = 0.0
        self.t_upd[idx] = t


def aggregate_priority(rates: RateMatrix) -> MatrixFrame:
    """Priority of every cell re-emitted at each rate change or observation time."""
    region = rates.region
    events = sorted({t for _, t in rates.rows} | {t for _, t in rates.observations})
    obs_at: dict[int, list[CellId]] = {}
    for c, t in rates.observations:
        obs_at.setdefault(t, []).append(c)
    acc = PriorityAccumulator(rates)
    out = MatrixFrame(region)
    for t in events:
        for c in obs_at.get(t, ()):
            acc.observe(c, t)
        for c in region.cells():
            out.set(c, t, acc.priority(c, t))
    return out
