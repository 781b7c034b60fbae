from __future__ import annotations

import pytest

from instances import run_bundled
from skyquery.dsl import SequenceFrame
from skyquery.samples import LANE_X, SAMPLE_FILES, bundled_data_dir, make_sample_data, write_sample_data


def test_make_sample_data_is_deterministic():
    a, b = make_sample_data(0), make_sample_data(0)
    assert a.cars == b.cars and a.peds == b.peds
    assert (a.crosswalks == b.crosswalks).all() and (a.lanes == b.lanes).all()
    assert make_sample_data(1).cars != a.cars


def test_bundled_files_match_generator(tmp_path):
    paths = write_sample_data(tmp_path)
    for key, name in SAMPLE_FILES.items():
        assert paths[key].read_bytes() == (bundled_data_dir() / name).read_bytes(), name


@pytest.mark.parametrize("name,exports", [
    ("parking", {"counts", "spots", "priorities"}),
    ("pedestrians", {"activity", "ped_road"}),
    ("hazards", {"hazards"}),
    ("parking_eval", {"counts", "open", "total", "priorities"}),
])
def test_shipped_program_runs_on_bundled_data(name, exports):
    out = run_bundled(name)
    assert set(out) == exports
    assert all(len(v.rows) > 0 for v in out.values())


def test_bundled_hazard_is_the_long_stop():
    hazards = run_bundled("hazards")["hazards"]
    assert isinstance(hazards, SequenceFrame) and len(hazards) == 1
    dets = hazards.rows[0].detections
    assert {d.bounds.cx_m for d in dets} == {LANE_X}
    assert all(d.bounds.cy_m == 300.0 for d in dets)  # not the brief stop at 620 m


def test_bundled_jaywalker_only():
    ped_road = run_bundled("pedestrians")["ped_road"]
    assert len(ped_road) == 1
    assert {d.bounds.cx_m for d in ped_road.rows[0].detections} == {440.0}
