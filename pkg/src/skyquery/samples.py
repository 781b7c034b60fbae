"""Small synthetic detection logs and rasters for running the shipped programs.

The scene is a 1024 m square at 32 m cells, imaged by four 20-second
flights five minutes apart with a footprint covering the whole region,
logged every five seconds.
It contains parked cars (some leaving between flights), slow traffic on
two roads, pedestrians crossing one road at and away from a crosswalk, and
one car stopped for six seconds in a cycling lane.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .analytics.io import CoverageLog, Footprint, write_coverage_log, write_detection_log, write_pgm
from .core import BBox, Detection, RegionConfig, dump_region

SAMPLE_REGION = RegionConfig(origin_lon=-117.16, origin_lat=32.72, width_m=1024.0, height_m=1024.0,
                             cell_size_m=32.0)
FLIGHT_STARTS_S = (0, 300, 600, 900)
FRAMES_PER_FLIGHT = 20
ROAD_Y = 496.0  # east-west road centerline, cell row 15
ROAD_X = 304.0  # north-south road centerline, cell column 9
LANE_X = 688.0  # cycling lane, cell column 21
CROSSWALK_X = 208.0  # crosswalk on the east-west road, cell column 6
APPEARANCE_DIM = 8


@dataclass
class SampleData:
    region: RegionConfig
    cars: list[Detection]
    peds: list[Detection]
    coverage: CoverageLog
    crosswalks: np.ndarray  # raster, row 0 north
    lanes: np.ndarray


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=APPEARANCE_DIM)
    return v / np.linalg.norm(v)


def make_sample_data(seed: int = 0) -> SampleData:
    rng = np.random.default_rng(seed)
    region = SAMPLE_REGION
    frames = [(f * FRAMES_PER_FLIGHT + k, (start + k) * 1000)
              for f, start in enumerate(FLIGHT_STARTS_S) for k in range(FRAMES_PER_FLIGHT)]
    by_frame: dict[int, list[tuple]] = {fid: [] for fid, _ in frames}

    # parked cars: (x, y, first flight, last flight)
    lots = [(128.0 + 6 * i, 800.0, 0, 3) for i in range(6)]
    lots += [(820.0, 160.0 + 6 * i, 0, 1) for i in range(4)]
    lots += [(820.0, 160.0 + 6 * i, 2, 3) for i in range(2)]
    lots += [(560.0 + 6 * i, 880.0, 1, 2) for i in range(3)]
    for x, y, f0, f1 in lots:
        app = _unit(rng)
        for fid, t in frames:
            if f0 <= fid // FRAMES_PER_FLIGHT <= f1:
                jitter = rng.normal(0, 0.1, 2)
                by_frame[fid].append(("car", x + jitter[0], y + jitter[1], 4.5, 2.0,
                                      app + rng.normal(0, 0.02, APPEARANCE_DIM)))

    # slow traffic, 2 m/s along the roads in both directions
    for flight in range(len(FLIGHT_STARTS_S)):
        for j in range(12):
            app = _unit(rng)
            along = 40.0 + 128.0 * (j % 8) + 32.0 * flight
            sign = 1 if j % 2 == 0 else -1
            horizontal = j < 8
            for k in range(FRAMES_PER_FLIGHT):
                fid = flight * FRAMES_PER_FLIGHT + k
                pos = along + sign * 2.0 * k
                if horizontal:
                    x, y, w, h = pos, ROAD_Y + sign * 3.0, 4.5, 2.0
                else:
                    x, y, w, h = ROAD_X + sign * 3.0, pos, 2.0, 4.5
                by_frame[fid].append(("car", x, y, w, h, app))

    # the cycling-lane hazard (6 s) and a brief 3 s stop that is not one
    app = _unit(rng)
    for k in range(3, 10):
        by_frame[FRAMES_PER_FLIGHT + k].append(("car", LANE_X, 300.0, 2.0, 4.5, app))
    app = _unit(rng)
    for k in range(12, 16):
        by_frame[2 * FRAMES_PER_FLIGHT + k].append(("car", LANE_X, 620.0, 2.0, 4.5, app))

    # pedestrians walking north at 1 m/s: one through the crosswalk, one elsewhere,
    # plus strollers away from roads and a two-frame false positive
    walkers = [(CROSSWALK_X, ROAD_Y - 12.0, 0, 0), (440.0, ROAD_Y - 12.0, 1, 0),
               (600.0, 700.0, 2, 5), (150.0, 300.0, 3, 2)]
    peds_by_frame: dict[int, list[tuple]] = {fid: [] for fid, _ in frames}
    for x, y0, flight, k0 in walkers:
        for k in range(k0, FRAMES_PER_FLIGHT):
            peds_by_frame[flight * FRAMES_PER_FLIGHT + k].append(("pedestrian", x, y0 + (k - k0), 2.0, 2.0, None))
    for k in (4, 5):
        peds_by_frame[k].append(("pedestrian", 900.0, 40.0, 2.0, 2.0, None))

    def emit(table) -> list[Detection]:
        out = []
        for fid, t in frames:
            for cls, x, y, w, h, app in table[fid]:
                out.append(Detection(len(out) + 1, t, BBox(round(float(x), 3), round(float(y), 3), w, h),
                                     cls, 0.9, None if app is None else tuple(round(float(v), 4) for v in app),
                                     fid))
        return out

    # footprints are logged every five frames
    coverage = CoverageLog(Footprint(t, 0.0, 0.0, region.width_m, region.height_m)
                           for fid, t in frames if fid % 5 == 0)
    crosswalks = np.zeros((region.ny, region.nx), dtype=np.uint8)
    lanes = np.zeros_like(crosswalks)
    row = region.ny - 1 - int(ROAD_Y // region.cell_size_m)
    crosswalks[row, int(CROSSWALK_X // region.cell_size_m)] = 255
    lanes[:, int(LANE_X // region.cell_size_m)] = 255
    return SampleData(region, emit(by_frame), emit(peds_by_frame), coverage, crosswalks, lanes)


SAMPLE_FILES = {
    "region": "region.cfg", "car_model": "cars.jsonl", "ped_model": "peds.jsonl",
    "coverage": "coverage.csv", "crosswalks.png": "crosswalks.pgm",
    "cycling-lanes.png": "cycling-lanes.pgm",
}


def write_sample_data(out_dir: Union[str, Path], seed: int = 0) -> dict[str, Path]:
    """Write the sample scene; returns source name to path (usable as program bindings)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = make_sample_data(seed)
    paths = {k: out / v for k, v in SAMPLE_FILES.items()}
    paths["region"].write_text(dump_region(data.region))
    write_detection_log(paths["car_model"], data.cars)
    write_detection_log(paths["ped_model"], data.peds)
    write_coverage_log(paths["coverage"], data.coverage)
    write_pgm(paths["crosswalks.png"], data.crosswalks)
    write_pgm(paths["cycling-lanes.png"], data.lanes)
    return paths


def bundled_data_dir() -> Path:
    return Path(__file__).parent / "data"


def program_path(name: str) -> Path:
    """Path of a shipped program: parking, pedestrians, hazards or parking_eval."""
    return Path(__file__).parent / "programs" / f"{name}.sq"
