"""Dataframe operators over detections, sequences and matrices."""

from __future__ import annotations

import enum
import logging
import math
import operator
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from ..core import (CellId, DetectionFrame, MatrixFrame, RegionConfig, Sequence, SequenceFrame,
                    try_cell)
from .io import CoverageLog, read_detection_log
from .thinning import zhang_suen

log = logging.getLogger(__name__)


class OperatorError(ValueError):
    pass


class Aggregator(enum.Enum):
    COUNT = "Count"
    COUNT_NEW = "CountNew"
    COUNT_SUM = "CountSum"
    SUM = "Sum"
    MAX = "Max"
    PRIORITY = "Priority"

    @classmethod
    def parse(cls, name: str) -> "Aggregator":
        for a in cls:
            if a.value.lower() == name.lower():
                return a
        raise OperatorError(f"unknown aggregator {name!r}")


SELECT_ATTRIBUTES = ("length", "displacement", "duration")
COMPARATORS: dict[str, Callable[[float, float], bool]] = {
    "<": operator.lt, ">": operator.gt, "<=": operator.le, ">=": operator.ge,
    "≤": operator.le, "≥": operator.ge, "=": operator.eq, "==": operator.eq,
}


@dataclass(frozen=True)
class SelectPredicate:
    attribute: str
    comparator: str
    threshold: float

    def __post_init__(self):
        if self.attribute not in SELECT_ATTRIBUTES:
            raise OperatorError(f"unknown select attribute {self.attribute!r}")
        if self.comparator not in COMPARATORS:
            raise OperatorError(f"unknown comparator {self.comparator!r}")

    def __str__(self) -> str:
        return f"{self.attribute} {self.comparator} {self.threshold:g}"


def sequence_attribute(s: Sequence, attribute: str) -> float:
    if attribute == "length":
        return float(len(s.detections))
    if attribute == "displacement":
        a, b = s.first.bounds, s.last.bounds
        return math.hypot(b.cx_m - a.cx_m, b.cy_m - a.cy_m)
    if attribute == "duration":
        return (s.last.time - s.first.time) / 1000.0
    raise OperatorError(f"unknown select attribute {attribute!r}")


def object_detection_ingest(source, class_filter: Optional[str] = None) -> DetectionFrame:
    return read_detection_log(source, class_filter)


def select(seqs: SequenceFrame, pred: SelectPredicate) -> SequenceFrame:
    cmp = COMPARATORS[pred.comparator]
    return SequenceFrame([s for s in seqs if cmp(sequence_attribute(s, pred.attribute), pred.threshold)])


# ---------------------------------------------------------------- merge

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def merge(seqs: SequenceFrame, coverage: Optional[CoverageLog] = None,
          sim_threshold: float = 0.8) -> SequenceFrame:
    """Merge sequences of the same stationary object across flights.

    Streaming over sequences by first-detection time, a candidate joins the
    most recently updated output sequence whose last detection overlaps the
    candidate's first, precedes it in time, was not re-imaged by the camera
    in between (per ``coverage``), and looks alike (cosine similarity of
    appearance descriptors at least ``sim_threshold``).
    """
    coverage = coverage or CoverageLog()
    ordered = sorted(seqs, key=lambda s: (s.first.time, s.id))
    out: list[tuple[int, list]] = []  # (id, detections)
    stamp: list[int] = []
    clock = 0
    for s2 in ordered:
        d2 = s2.first
        if sim_threshold > 0 and d2.appearance is None:
            raise OperatorError(f"sequence {s2.id} lacks appearance descriptors needed for merge")
        target = None
        for k in sorted(range(len(out)), key=lambda k: -stamp[k]):
            d1 = out[k][1][-1]
            if not d1.bounds.overlaps(d2.bounds):
                continue
            if not d2.time > d1.time:
                continue
            if any(fp.contains(d1.bounds) for fp in coverage.between(d1.time, d2.time)):
                continue
            if sim_threshold > 0:
                if d1.appearance is None:
                    raise OperatorError("detection lacks appearance descriptor needed for merge")
                if cosine_similarity(d1.appearance, d2.appearance) < sim_threshold:
                    continue
            target = k
            break
        clock += 1
        if target is None:
            out.append((s2.id, list(s2.detections)))
            stamp.append(clock)
        else:
            out[target][1].extend(s2.detections)
            stamp[target] = clock
    return SequenceFrame([Sequence(sid, dets) for sid, dets in out])


# ---------------------------------------------------------------- matrices

def to_matrix(seqs: SequenceFrame, agg: Union[Aggregator, str], region: RegionConfig,
              coverage: Optional[CoverageLog] = None) -> MatrixFrame:
    """Rasterize sequences into a time-varying matrix.

    Rows are emitted for every (cell, time) where a detection center falls;
    with a coverage log, cells whose centers were imaged at a footprint time
    also get rows (zero if nothing was detected there).
    """
    agg = Aggregator.parse(agg) if isinstance(agg, str) else agg
    if agg not in (Aggregator.COUNT, Aggregator.COUNT_NEW, Aggregator.COUNT_SUM):
        raise OperatorError(f"ToMatrix does not support aggregator {agg.value}")
    distinct: dict[tuple[CellId, int], set[int]] = {}
    new: dict[tuple[CellId, int], set[int]] = {}
    total: dict[tuple[CellId, int], int] = {}
    for s in seqs:
        for i, d in enumerate(s.detections):
            cell = try_cell(d.bounds.cx_m, d.bounds.cy_m, region)
            if cell is None:
                continue
            key = (cell, d.time)
            distinct.setdefault(key, set()).add(s.id)
            total[key] = total.get(key, 0) + 1
            if i == 0:
                new.setdefault(key, set()).add(s.id)
    m = MatrixFrame(region)
    if coverage is not None:
        for fp in coverage.records:
            for cell in region.cells():
                if fp.contains_point(*region.cell_center(cell)):
                    m.set(cell, fp.t_ms, 0.0)
    for key in distinct:
        if agg is Aggregator.COUNT:
            v = len(distinct[key])
        elif agg is Aggregator.COUNT_NEW:
            v = len(new.get(key, ()))
        else:
            v = total[key]
        m.set(key[0], key[1], v)
    return m


def aggregate(m: MatrixFrame, agg: Union[Aggregator, str]) -> MatrixFrame:
    """Per-cell running fold, re-emitted at every input observation."""
    agg = Aggregator.parse(agg) if isinstance(agg, str) else agg
    if agg is Aggregator.PRIORITY:
        from ..scheduling import RateMatrix, aggregate_priority
        if not isinstance(m, RateMatrix):
            raise OperatorError("Priority aggregation needs a rate matrix")
        return aggregate_priority(m)
    if agg not in (Aggregator.SUM, Aggregator.MAX):
        raise OperatorError(f"Aggregate does not support aggregator {agg.value}")
    out = MatrixFrame(m.region, static=m.static)
    acc: dict[CellId, float] = {}
    for c, t, v in m.sorted_rows():
        if c not in acc:
            acc[c] = v
        elif agg is Aggregator.SUM:
            acc[c] += v
        else:
            acc[c] = max(acc[c], v)
        out.set(c, t, acc[c])
    return out


def join(seqs: SequenceFrame, m: MatrixFrame) -> SequenceFrame:
    """Keep sequences with a detection whose cell is non-zero at the detection's time."""
    look = m.lookup()
    keep = []
    for s in seqs:
        for d in s.detections:
            cell = try_cell(d.bounds.cx_m, d.bounds.cy_m, m.region)
            if cell is not None and look.value_at(cell, d.time) != 0:
                keep.append(s)
                break
    return SequenceFrame(keep)


def matrix_to_array(m: MatrixFrame) -> np.ndarray:
    """Static matrix as a (nx, ny) array indexed [cx, cy]."""
    arr = np.full((m.region.nx, m.region.ny), m.default, dtype=float)
    for (c, _), v in m.rows.items():
        arr[c.cx, c.cy] = v
    return arr


def thin(m: MatrixFrame) -> MatrixFrame:
    """Skeletonize the non-zero cells of a matrix after collapsing time by max."""
    mask = matrix_to_array(m.collapse_max() if not m.static else m) != 0
    skel = zhang_suen(mask)
    out = MatrixFrame(m.region, static=True)
    for cx, cy in zip(*np.nonzero(skel)):
        out.set(CellId(int(cx), int(cy)), 0, 1.0)
    return out


# ---------------------------------------------------------------- algebra

Operand = Union[MatrixFrame, float, int]

BINARY_OPS: dict[str, Callable[[float, float], float]] = {
    "+": operator.add, "-": operator.sub, "*": operator.mul,
    "<": lambda a, b: float(a < b), ">": lambda a, b: float(a > b),
    "<=": lambda a, b: float(a <= b), ">=": lambda a, b: float(a >= b),
}


class AlgebraStats:
    def __init__(self):
        self.div_by_zero = 0


def _divide(stats: AlgebraStats):
    def div(a: float, b: float) -> float:
        if b == 0:
            stats.div_by_zero += 1
            return 0.0
        return a / b
    return div


def matrix_binary(op: str, left: Operand, right: Operand, stats: Optional[AlgebraStats] = None
                  ) -> Operand:
    """Elementwise binary operation with static broadcast and carry-forward.

    A static result is evaluated over every grid cell and keeps only
    non-zero values.  A time-varying result has a row at each (cell, time)
    observed by a time-varying operand; the other operand contributes its
    most recent prior value there (default if never observed).
    """
    stats = stats if stats is not None else AlgebraStats()
    fn = _divide(stats) if op == "/" else BINARY_OPS.get(op)
    if fn is None:
        raise OperatorError(f"unknown matrix operator {op!r}")
    lm = isinstance(left, MatrixFrame)
    rm = isinstance(right, MatrixFrame)
    if not lm and not rm:
        before = stats.div_by_zero
        out = fn(float(left), float(right))
        _warn(stats, before)
        return out
    mats = [x for x in (left, right) if isinstance(x, MatrixFrame)]
    region = mats[0].region
    if any(x.region != region for x in mats):
        raise OperatorError("matrix operands must share a region grid")
    before = stats.div_by_zero

    def val(x: Operand, look, cell, t):
        return float(x) if look is None else look.value_at(cell, t)

    ll = left.lookup() if lm else None
    rl = right.lookup() if rm else None
    dfn = _divide(AlgebraStats()) if op == "/" else fn
    default = dfn(float(left.default) if lm else float(left), float(right.default) if rm else float(right))
    if all(x.static for x in mats):
        out = MatrixFrame(region, static=True)
        for cell in region.cells():
            v = fn(val(left, ll, cell, 0), val(right, rl, cell, 0))
            if v != 0:
                out.set(cell, 0, v)
    else:
        out = MatrixFrame(region, static=False, default=default)
        keys = sorted({k for x in mats if not x.static for k in x.rows}, key=lambda k: (k[1], k[0]))
        for cell, t in keys:
            out.set(cell, t, fn(val(left, ll, cell, t), val(right, rl, cell, t)))
    _warn(stats, before)
    return out


def _warn(stats: AlgebraStats, before: int) -> None:
    if stats.div_by_zero > before:
        log.warning("matrix division by zero in %d cells; value defined as 0",
                    stats.div_by_zero - before)


def matrix_negate(x: Operand) -> Operand:
    return matrix_binary("-", 0.0, x)
