from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from skyquery.core import CellId, MatrixFrame, RegionConfig
from skyquery.scheduling import (VARIANCE_FLOOR, ForecastBank, ForecastCell, PriorityAccumulator, PriorityBank,
                                 RateMatrix, TTLBank, aggregate_priority, const_rates, fit_forecast, forecast,
                                 forecast_rates, priority_accumulate, ttl_rates)

REGION = RegionConfig(0.0, 0.0, 128.0, 128.0, 64.0)
C = CellId(0, 0)


def _obs(values, cell=C, step=1000):
    m = MatrixFrame(REGION)
    for i, v in enumerate(values):
        m.set(cell, i * step, v)
    return m


# ---------------------------------------------------------------- const

def test_const_rate_everywhere():
    r = const_rates(REGION)
    assert all(r.rate(c, t) == 1.0 for c in REGION.cells() for t in (0, 10**9))


def test_const_rate_integral():
    assert PriorityAccumulator(const_rates(REGION)).priority(C, 60_000) == pytest.approx(60.0)


def test_const_rates_equal_priorities_without_visits():
    pri = priority_accumulate(const_rates(REGION), [], 12_345)
    assert len({s.priority for s in pri.values()}) == 1


# ---------------------------------------------------------------- TTL

def test_ttl_two_zeros_kill():
    r = ttl_rates(_obs([0, 0]), 2)
    assert r.rate(C, 10**9) == 0.0


def test_ttl_positive_keeps_alive():
    r = ttl_rates(_obs([0, 3, 0, 0, 0, 0]), 2)
    assert r.rate(C, 10**9) == 1.0


def test_ttl_unobserved_cell():
    assert ttl_rates(_obs([0, 0]), 2).rate(CellId(1, 1), 5000) == 1.0


def test_ttl_rejects_zero():
    with pytest.raises(ValueError):
        TTLBank(4, 0)


@given(st.lists(st.sampled_from([0.0, 0.0, 1.0, 2.0]), max_size=12), st.integers(1, 4))
def test_ttl_matches_oracle_and_is_monotone(values, ttl):
    r = ttl_rates(_obs(values), ttl)
    got = [r.rate(C, i * 1000) for i in range(len(values))]
    assert got == oracles.ttl_oracle(values, ttl)
    if 0.0 in got:
        first = got.index(0.0)
        assert all(v == 0.0 for v in got[first:])
    bank = TTLBank(1, ttl)
    for v in values:
        bank.observe(0, v)
    assert bank.rates()[0] == (got[-1] if got else 1.0)


# ---------------------------------------------------------------- forecasting

def test_constant_series():
    m = fit_forecast([(i * 1000, 5.0) for i in range(4)])
    assert (m.mu, m.var) == (0.0, 0.0)


def test_alternating_differences():
    vals = np.cumsum([0, 1, -1, 1, -1])
    m = fit_forecast([(i * 1000, float(v)) for i, v in enumerate(vals)])
    assert m.mu == pytest.approx(0.0) and m.var == pytest.approx(4 / 3)


def test_single_difference():
    m = fit_forecast([(0, 2.0), (1000, 4.0)])
    assert (m.mu, m.var) == (2.0, 0.0)


def test_too_few_observations():
    assert fit_forecast([(0, 1.0)]) is None


def test_forecast_at_last_observation():
    m = ForecastCell(mu=1.5, var=2.0, last_value=7.0, last_time=5000, mean_gap=1000.0, n_obs=5)
    assert forecast(m, 5000) == (7.0, 0.0)


def test_variance_grows_linearly():
    m = ForecastCell(0.0, 1.0, 0.0, 0, 1000.0, 5)
    assert forecast(m, 4000)[1] == pytest.approx(4.0)


def test_drift_extrapolation():
    m = ForecastCell(2.0, 0.0, 10.0, 0, 1000.0, 5)
    assert forecast(m, 3000)[0] == pytest.approx(16.0)


def test_volatile_versus_calm_rate_ratio():
    k_ms = 7000
    volatile = ForecastCell(0.0, 4.0, 0.0, 0, 1000.0, 9)
    calm = ForecastCell(0.0, 0.1, 0.0, 0, 1000.0, 9)
    assert forecast(volatile, k_ms)[1] / forecast(calm, k_ms)[1] == pytest.approx(40.0)


def test_constant_cell_rate_is_floor():
    rates, predicted = forecast_rates(_obs([3.0] * 6))
    assert rates.rate(C, 5000) == VARIANCE_FLOOR
    assert predicted.value_at(C, 5000) == 3.0
    assert rates.rate(CellId(1, 1), 5000) == 1.0


@given(st.lists(st.tuples(st.integers(1, 5000), st.integers(-5, 5)), min_size=0, max_size=15),
       st.integers(0, 20_000))
def test_online_bank_matches_batch_fit(steps, extra):
    obs, t = [], 0
    for gap, v in steps:
        t += gap
        obs.append((t, float(v)))
    bank = ForecastBank(1)
    for tt, v in obs:
        bank.observe(0, tt, v)
    batch = fit_forecast(obs)
    online = bank.cell(0)
    if batch is None:
        assert online is None
        return
    assert online.mu == pytest.approx(batch.mu, abs=1e-9)
    assert online.var == pytest.approx(batch.var, abs=1e-9)
    assert online.mean_gap == pytest.approx(batch.mean_gap)
    value, var, defined = bank.predict(t + extra)
    want = forecast(batch, t + extra)
    assert defined[0] and value[0] == pytest.approx(want[0], abs=1e-6)
    assert var[0] == pytest.approx(want[1], abs=1e-6)
    assert bank.predict(t)[1][0] == 0.0  # zero variance at k = 0


# ---------------------------------------------------------------- priorities

def test_rate_times_elapsed():
    r = RateMatrix(REGION, default=2.0)
    assert priority_accumulate(r, [(C, 0)], 5000)[C].priority == pytest.approx(10.0)


def test_reset_on_observation():
    r = RateMatrix(REGION, default=2.0)
    assert priority_accumulate(r, [(C, 0), (C, 5000)], 5000)[C].priority == 0.0


def test_piecewise_integral():
    r = RateMatrix(REGION, default=1.0)
    r.set(C, 4000, 3.0)
    assert priority_accumulate(r, [(C, 0)], 10_000)[C].priority == pytest.approx(22.0)


@given(st.lists(st.tuples(st.integers(0, 20), st.floats(0, 10)), max_size=8),
       st.lists(st.integers(0, 20), max_size=6), st.integers(0, 20))
def test_priority_is_piecewise_integral(changes, visits, at):
    r = RateMatrix(REGION, default=1.0)
    for t, v in changes:
        r.set(C, t * 1000, v)
    state = priority_accumulate(r, [(C, t * 1000) for t in visits], at * 1000)[C]
    last = max([t for t in visits if t <= at], default=0)
    # step-by-step integral over whole seconds; rows are whole seconds so this is exact
    want = sum(r.rate(C, s * 1000) for s in range(last, at))
    assert state.priority == pytest.approx(want, abs=1e-9)
    assert state.priority >= 0
    if at in visits:
        assert state.priority == 0.0


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 50), st.booleans()), max_size=20))
def test_bank_matches_accumulator(events):
    n = REGION.n_cells
    bank = PriorityBank(n)
    r = RateMatrix(REGION, default=1.0)
    visits = []
    t = 0
    for cell, dt, is_visit in events:
        t += dt * 100
        c = REGION.cell_from_index(cell)
        if is_visit:
            bank.accrue(t)
            bank.reset(np.array([cell]), np.array([t]))
            visits.append((c, t))
        else:
            rates = bank.rate.copy()
            rates[cell] = dt / 10
            bank.set_rates(t, rates)
            r.set(c, t, dt / 10)
    got = bank.accrue(t + 500)
    want = priority_accumulate(r, visits, t + 500)
    for i in range(n):
        assert got[i] == pytest.approx(want[REGION.cell_from_index(i)].priority, abs=1e-9)


def test_aggregate_priority_emits_every_cell():
    rates, _ = forecast_rates(_obs([1.0, 3.0, 2.0, 6.0]))
    pri = aggregate_priority(rates)
    times = sorted({t for _, t in pri.rows})
    assert times == [0, 1000, 2000, 3000]
    assert all(len([k for k in pri.rows if k[1] == t]) == REGION.n_cells for t in times)
    assert pri.value_at(C, 3000) == 0.0  # observed then
    assert pri.value_at(CellId(1, 1), 3000) == pytest.approx(3.0)
