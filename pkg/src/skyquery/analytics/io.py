"""Readers and writers for detection logs, coverage logs, rasters and dataframe outputs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from ..core import BBox, CellId, Detection, DetectionFrame, MatrixFrame, RegionConfig, Sequence, SequenceFrame


class InputFormatError(ValueError):
    def __init__(self, source: str, lineno: int, msg: str):
        super().__init__(f"{source}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Footprint:
    t_ms: int
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def contains(self, b: BBox) -> bool:
        return (self.min_x <= b.min_x and b.max_x <= self.max_x
                and self.min_y <= b.min_y and b.max_y <= self.max_y)

    def contains_point(self, x: float, y: float) -> bool:
        return self.min_x <= x <= self.max_x and self.min_y <= y <= self.max_y


class CoverageLog:
    """Camera ground footprints over time."""

    def __init__(self, records: Iterable[Footprint] = ()):
        self.records = list(records)
        for a, b in zip(self.records, self.records[1:]):
            if b.t_ms < a.t_ms:
                raise ValueError("coverage log times must be non-decreasing")

    def __len__(self) -> int:
        return len(self.records)

    def between(self, t0: int, t1: int) -> list[Footprint]:
        """Footprints with ``t0 < t < t1``."""
        return [r for r in self.records if t0 < r.t_ms < t1]


_DET_FIELDS = ("t_ms", "frame_id", "class", "score", "cx_m", "cy_m", "w_m", "h_m")


def read_detection_log(path: str | Path, class_filter: Optional[str] = None) -> DetectionFrame:
    """Parse a JSON-lines detection log.

    Each record carries ``t_ms, frame_id, class, score, cx_m, cy_m, w_m, h_m``
    and optionally ``appearance``; detection ids follow line order.
    """
    rows: list[Detection] = []
    last_t = -1
    src = str(path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                missing = [k for k in _DET_FIELDS if k not in rec]
                if missing:
                    raise ValueError(f"missing fields {missing}")
                t = int(rec["t_ms"])
                app = rec.get("appearance")
                det = Detection(
                    id=lineno, time=t,
                    bounds=BBox(float(rec["cx_m"]), float(rec["cy_m"]), float(rec["w_m"]), float(rec["h_m"])),
                    class_name=str(rec["class"]), score=float(rec["score"]),
                    appearance=None if app is None else tuple(float(v) for v in app),
                    frame=int(rec["frame_id"]))
            except (ValueError, TypeError, json.JSONDecodeError) as e:
                raise InputFormatError(src, lineno, f"malformed detection record ({e})") from None
            if t < last_t:
                raise InputFormatError(src, lineno, f"time {t} precedes previous record time {last_t}")
            last_t = t
            if class_filter is None or det.class_name == class_filter:
                rows.append(det)
    return DetectionFrame(rows)


def write_detection_log(path: str | Path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            rec = {"t_ms": d.time, "frame_id": d.frame if d.frame is not None else d.time,
                   "class": d.class_name, "score": d.score, "cx_m": d.bounds.cx_m,
                   "cy_m": d.bounds.cy_m, "w_m": d.bounds.w_m, "h_m": d.bounds.h_m}
            if d.appearance is not None:
                rec["appearance"] = list(d.appearance)
            fh.write(json.dumps(rec) + "\n")


def read_coverage_log(path: str | Path) -> CoverageLog:
    recs = []
    src = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, 1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "t_ms":
                continue
            try:
                t, x0, y0, x1, y1 = row
                recs.append(Footprint(int(t), float(x0), float(y0), float(x1), float(y1)))
            except ValueError:
                raise InputFormatError(src, lineno, f"expected t_ms,min_x,min_y,max_x,max_y, got {row}") from None
    try:
        return CoverageLog(recs)
    except ValueError as e:
        raise InputFormatError(src, 0, str(e)) from None


def write_coverage_log(path: str | Path, cov: CoverageLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms", "min_x", "min_y", "max_x", "max_y"])
        for r in cov.records:
            w.writerow([r.t_ms, r.min_x, r.min_y, r.max_x, r.max_y])


def import_raster(path: str | Path, region: RegionConfig) -> MatrixFrame:
    """Static binary matrix from a grayscale raster; raster row 0 is the northernmost cell row."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("I"))
    return raster_to_matrix(arr, region)


def raster_to_matrix(arr: np.ndarray, region: RegionConfig) -> MatrixFrame:
    if arr.shape != (region.ny, region.nx):
        raise ValueError(f"raster shape {arr.shape[1]}x{arr.shape[0]} does not match grid "
                         f"{region.nx}x{region.ny} (width x height)")
    m = MatrixFrame(region, static=True)
    for r, c in zip(*np.nonzero(arr > 0)):
        m.set(CellId(int(c), region.ny - 1 - int(r)), 0, 1.0)
    return m


def write_pgm(path: str | Path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path, format="PPM")


def matrix_to_csv(m: MatrixFrame) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_x", "cell_y", "t_ms", "value"])
    for c, t, v in m.sorted_rows():
        w.writerow([c.cx, c.cy, t, repr(float(v))])
    return buf.getvalue()


def write_matrix_csv(path: str | Path, m: MatrixFrame) -> None:
    Path(path).write_text(matrix_to_csv(m))


def read_matrix_csv(path: str | Path, region: RegionConfig, static: Optional[bool] = None) -> MatrixFrame:
    rows = []
    src = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["cell_x", "cell_y", "t_ms", "value"]:
            raise InputFormatError(src, 1, "expected header cell_x,cell_y,t_ms,value")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                cx, cy, t, v = row
                rows.append((CellId(int(cx), int(cy)), int(t), float(v)))
            except ValueError:
                raise InputFormatError(src, lineno, f"bad matrix row {row}") from None
    if static is None:
        static = all(t == 0 for _, t, _ in rows)
    m = MatrixFrame(region, static=static)
    for c, t, v in rows:
        m.set(c, t, v)
    return m


def sequences_to_jsonl(seqs: SequenceFrame) -> str:
    lines = []
    for s in seqs:
        lines.append(json.dumps({
            "id": s.id,
            "detections": [{"id": d.id, "t_ms": d.time, "class": d.class_name, "score": d.score,
                            "cx_m": d.bounds.cx_m, "cy_m": d.bounds.cy_m,
                            "w_m": d.bounds.w_m, "h_m": d.bounds.h_m} for d in s.detections],
        }, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def write_sequences(path: str | Path, seqs: SequenceFrame) -> None:
    Path(path).write_text(sequences_to_jsonl(seqs))


def read_sequences(path: str | Path) -> SequenceFrame:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        dets = [Detection(d["id"], d["t_ms"], BBox(d["cx_m"], d["cy_m"], d["w_m"], d["h_m"]),
                          d["class"], d["score"]) for d in rec["detections"]]
        out.append(Sequence(rec["id"], dets))
    return SequenceFrame(out)
