from __future__ import annotations

import hashlib
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from skyquery.analytics.io import write_detection_log, write_pgm
from skyquery.core import BBox, Detection, MatrixFrame, RegionConfig, SequenceFrame
from skyquery.dsl import (ExecutionContext, ProgramError, parse, parse_file, plan_and_execute, render, sources,
                          typecheck, write_dataframe)
from skyquery.samples import program_path

REGION = RegionConfig(0.0, 0.0, 256.0, 256.0, 64.0)


def test_parking_program_shape():
    p = parse_file(program_path("parking"))
    assert len(p.statements) == 8
    assert p.has_priorities
    assert p.exports == {"spots", "counts"}


def test_eval_program_exports():
    assert parse_file(program_path("parking_eval")).exports == {"counts", "open", "total"}


@pytest.mark.parametrize("name", ["parking", "pedestrians", "hazards", "parking_eval"])
def test_shipped_programs_typecheck(name):
    p = parse_file(program_path(name))
    types = typecheck(p)
    assert set(types) == set(p.defined())


def test_undefined_name_at_line_one():
    with pytest.raises(ProgramError) as exc:
        parse("x = Select(y, bogus < 1)")
    assert exc.value.line == 1 and "undefined" in str(exc.value)


@pytest.mark.parametrize("src,kind", [
    ("a = ObjectDetection(Video, 'm')\nb = Select(a, length > 1)\n", "type error"),
    ("a = Import('x.png')\nb = Merge(a)\n", "type error"),
    ("a = Import('x.png')\na = Import('y.png')\n", "duplicate definition"),
    ("a, b = Import('x.png')\n", "wrong arity"),
    ("a = Import('x.png'\n", "syntax error"),
    ("a = Frobnicate(Video)\n", "unknown operator"),
])
def test_error_kinds_are_located(src, kind):
    with pytest.raises(ProgramError) as exc:
        typecheck(parse(src))
    assert exc.value.kind == kind
    assert str(exc.value).startswith(f"line {exc.value.line}, col {exc.value.col}:")


def test_refinement_rebinding_allowed():
    p = parse("a = ObjectTracking(ObjectDetection(Video, 'm'))\na = Select(a, length > 2)\n")
    assert p.defined() == ["a"]


def test_unicode_comparators_and_quotes():
    p = parse("s = Select(ObjectTracking(ObjectDetection(Video, ‘m’)), length ≥ 3)")
    assert "length >= 3" in render(p)


# ---------------------------------------------------------------- round trip

def _random_program(seed: int) -> str:
    rnd = random.Random(seed)
    pool = {"D": [], "S": [], "M": []}
    lines = []

    def pick(kind):
        return rnd.choice(pool[kind]) if pool[kind] else None

    def matrix_expr(depth=0):
        if depth < 2 and rnd.random() < 0.4:
            op = rnd.choice(["+", "-", "*", "/", "<", ">", "<=", ">="])
            left = matrix_expr(depth + 1)
            right = rnd.choice([matrix_expr(depth + 1), str(rnd.randint(0, 9))])
            # comparisons do not chain, so nested operations are parenthesized
            return f"({left} {op} {right})" if depth else f"{left} {op} {right}"
        if rnd.random() < 0.2:
            return f"-{pick('M')}" if pool["M"] else "ConstRates()"
        return pick("M") or "ConstRates()"

    for i in range(rnd.randint(1, 8)):
        name = f"v{i}"
        star = "*" if rnd.random() < 0.3 else ""
        choice = rnd.choice(["D", "S", "S", "M", "M", "F"])
        if choice == "D" or (choice == "S" and not pool["D"] and not pool["S"]):
            lines.append(f"{star}{name} = ObjectDetection(Video, 'model{rnd.randint(0, 3)}')")
            pool["D"].append(name)
            continue
        if choice == "S":
            src = pick("S") or f"ObjectTracking({pick('D')})"
            op = rnd.choice(["track", "select", "merge", "join"]) if pool["S"] else "track"
            if op == "track" and pool["D"]:
                expr = f"ObjectTracking({pick('D')})"
            elif op == "select":
                attr = rnd.choice(["length", "displacement", "duration"])
                expr = f"Select({src}, {attr} {rnd.choice(['<', '>', '<=', '>='])} {rnd.randint(0, 200)})"
            elif op == "join":
                expr = f"Join({src}, {matrix_expr()})" if pool["M"] else f"Merge({src})"
            else:
                expr = f"Merge({src})"
            lines.append(f"{star}{name} = {expr}")
            pool["S"].append(name)
            continue
        if choice == "F":
            src = pick("M") or "ConstRates()"
            lines.append(f"{name}_r, {star}{name}_p = ForecastRates({src}, SimpleGaussian)")
            pool["M"] += [f"{name}_r", f"{name}_p"]
            continue
        kinds = ["import", "const", "arith"] + (["tomatrix"] if pool["S"] else [])
        kinds += ["agg", "thin", "ttl"] if pool["M"] else []
        k = rnd.choice(kinds)
        if k == "import":
            expr = f"Import('r{rnd.randint(0, 3)}.png')"
        elif k == "const":
            expr = "ConstRates()"
        elif k == "tomatrix":
            agg = rnd.choice(["Count", "CountNew", "CountSum"])
            size = f", {rnd.choice([32, 64, 128])}" if rnd.random() < 0.3 else ""
            expr = f"ToMatrix({pick('S')}, {agg}{size})"
        elif k == "agg":
            expr = f"Aggregate({pick('M')}, {rnd.choice(['Sum', 'Max'])})"
        elif k == "thin":
            expr = f"Thin({matrix_expr()})"
        elif k == "ttl":
            expr = f"TTLRates({pick('M')}, {rnd.randint(1, 5)})"
        else:
            expr = matrix_expr()
        lines.append(f"{star}{name} = {expr}")
        pool["M"].append(name)
    return "\n".join(lines) + "\n"


@given(st.integers(0, 1_000_000))
def test_parse_render_roundtrip(seed):
    src = _random_program(seed)
    p = parse(src)
    typecheck(p)
    text = render(p)
    assert parse(text) == p
    assert render(parse(text)) == text


def test_roundtrip_shipped_programs():
    for name in ("parking", "pedestrians", "hazards", "parking_eval"):
        p = parse_file(program_path(name))
        assert parse(render(p)) == p


# ---------------------------------------------------------------- execution

def test_import_all_zero_raster(tmp_path):
    path = tmp_path / "m.pgm"
    write_pgm(path, np.zeros((REGION.ny, REGION.nx)))
    out = plan_and_execute(parse("*a = Import('m.pgm')"), ExecutionContext(REGION, {"m.pgm": path}))
    assert isinstance(out["a"], MatrixFrame) and len(out["a"]) == 0


def test_unbound_source_reported_before_execution():
    with pytest.raises(ProgramError) as exc:
        plan_and_execute(parse("*a = Import('m.pgm')"), ExecutionContext(REGION, {}))
    assert exc.value.kind == "unbound source"


def _hazard_inputs(tmp_path):
    # one car stopped 6 s inside the lane cell (1, 1); a second car drives through without stopping
    dets = []
    did = 1
    for k in range(7):
        dets.append(Detection(did, k * 1000, BBox(96.0, 96.0, 4.0, 2.0), "car", 0.9, frame=k))
        did += 1
        dets.append(Detection(did, k * 1000, BBox(70.0 + 10 * k, 100.0, 4.0, 2.0), "car", 0.9, frame=k))
        did += 1
    log = tmp_path / "cars.jsonl"
    write_detection_log(log, dets)
    lanes = np.zeros((REGION.ny, REGION.nx), np.uint8)
    lanes[REGION.ny - 1 - 1, 1] = 255
    raster = tmp_path / "lanes.pgm"
    write_pgm(raster, lanes)
    return {"car_model": log, "cycling-lanes.png": raster}


def test_hazard_instance_detected(tmp_path):
    ctx = ExecutionContext(REGION, _hazard_inputs(tmp_path))
    out = plan_and_execute(parse_file(program_path("hazards")), ctx)
    hazards = out["hazards"]
    assert isinstance(hazards, SequenceFrame) and len(hazards) == 1
    assert {d.bounds.cx_m for d in hazards.rows[0].detections} == {96.0}


def test_rerun_is_byte_identical(tmp_path):
    ctx = ExecutionContext(REGION, _hazard_inputs(tmp_path))
    p = parse_file(program_path("hazards"))
    digests = []
    for run in range(2):
        out = plan_and_execute(p, ctx)
        (tmp_path / f"run{run}").mkdir()
        path = write_dataframe(tmp_path / f"run{run}" / "hazards", out["hazards"])
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_only_needed_statements_run(tmp_path):
    # the unused detection source is never bound, yet the requested export still runs
    p = parse("*a = Import('m.pgm')\nb = ObjectDetection(Video, 'unbound')\n")
    path = tmp_path / "m.pgm"
    write_pgm(path, np.zeros((REGION.ny, REGION.nx)))
    out = plan_and_execute(p, ExecutionContext(REGION, {"m.pgm": path}), want={"a"})
    assert set(out) == {"a"}


def test_sources_listed():
    p = parse_file(program_path("hazards"))
    assert sources(p) == [("ObjectDetection", "car_model"), ("Import", "cycling-lanes.png")]
