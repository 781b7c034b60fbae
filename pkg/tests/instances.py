"""Random small instances shared by the oracle tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from skyquery.analytics.io import CoverageLog, Footprint
from skyquery.core import BBox, CellId, Detection, MatrixFrame, RegionConfig, Sequence, SequenceFrame

GRID = RegionConfig(0.0, 0.0, 40.0, 40.0, 10.0)  # 4 x 4 = 16 cells
N_TIMES = 20


def random_sequences(rng: np.random.Generator, max_seqs: int = 6) -> SequenceFrame:
    protos = rng.normal(size=(2, 4))
    spots = rng.uniform(0, 40, (3, 2))  # shared spots so that sequences overlap and merge
    seqs = []
    did = 1
    for sid in range(1, int(rng.integers(0, max_seqs + 1)) + 1):
        k = int(rng.integers(1, 5))
        times = np.sort(rng.choice(N_TIMES, size=k, replace=False)) * 1000
        x, y = np.clip(spots[int(rng.integers(0, 3))] + rng.normal(0, 1, 2), 0, 39.9)
        proto = protos[int(rng.integers(0, 2))]
        dets = []
        for t in times:
            # mostly stationary with occasional jumps, so merges and cell moves both occur
            if rng.random() < 0.3:
                x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(1, 8, 2)
            app = tuple(float(v) for v in proto + rng.normal(0, 0.3, 4))
            dets.append(Detection(did, int(t), BBox(float(x), float(y), float(w), float(h)), appearance=app))
            did += 1
        seqs.append(Sequence(sid, dets))
    return SequenceFrame(seqs)


def random_coverage(rng: np.random.Generator, max_records: int = 4) -> CoverageLog:
    recs = []
    for t in np.sort(rng.integers(0, N_TIMES, int(rng.integers(0, max_records + 1)))):
        x0, y0 = rng.uniform(-5, 30, 2)
        w, h = rng.uniform(5, 30, 2)
        recs.append(Footprint(int(t) * 1000, float(x0), float(y0), float(x0 + w), float(y0 + h)))
    return CoverageLog(recs)


def random_matrix(rng: np.random.Generator, static: bool = False, integer: bool = True) -> MatrixFrame:
    m = MatrixFrame(GRID, static=static)
    for _ in range(int(rng.integers(0, 24))):
        c = CellId(int(rng.integers(0, GRID.nx)), int(rng.integers(0, GRID.ny)))
        t = 0 if static else int(rng.integers(0, N_TIMES)) * 1000
        v = float(rng.integers(-2, 5)) if integer else float(rng.normal(0, 2))
        m.set(c, t, v)
    return m


def run_bundled(name: str):
    """Run a shipped program on the bundled sample data."""
    from skyquery.analytics.io import read_coverage_log
    from skyquery.core import load_region
    from skyquery.dsl import ExecutionContext, parse_file, plan_and_execute
    from skyquery.samples import SAMPLE_FILES, bundled_data_dir, program_path

    d = bundled_data_dir()
    binds = {k: d / v for k, v in SAMPLE_FILES.items() if k != "region"}
    ctx = ExecutionContext(load_region(d / SAMPLE_FILES["region"]), binds, read_coverage_log(binds["coverage"]))
    return plan_and_execute(parse_file(program_path(name)), ctx)
