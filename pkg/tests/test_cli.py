import csv
import json
import re
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import torch

from dyfn.alignment import solve_affine_frame
from dyfn.cli import schema
from dyfn.geometry import Prediction, load_sequence, write_sequence
from dyfn.presets import preset
from dyfn.simulator import simulate
from dyfn.tensor_core import write_tensor

from conftest import cli

SCHEMA_FOR = {
    "run.json": "run_manifest",
    "manifest.json": "manifest",
    "metrics.json": "metrics",
    "summary.json": "sweep_summary",
    "pipeline.json": "pipeline",
    "poses.json": "poses",
    "simulation.json": "simulation",
    "train_summary.json": "train_summary",
}


def check_outputs(d: Path):
    assert len(list(d.glob("run.json"))) == 1
    run = json.loads((d / "run.json").read_text())
    assert re.fullmatch(r"[0-9a-f]{64}", run["config_hash"])
    for name, sch in SCHEMA_FOR.items():
        if (d / name).is_file():
            jsonschema.validate(json.loads((d / name).read_text()), schema(sch))
    return run


@pytest.fixture(scope="module")
def drift(tmp_path_factory):
    root = tmp_path_factory.mktemp("drift")
    assert cli("simulate", "--preset", "drift50", "--out", root / "data") == 0
    assert cli("pipeline", "--data", root / "data", "--out", root / "raw") == 0
    return root


def test_simulate_outputs(drift):
    run = check_outputs(drift / "data")
    assert run["command"] == "simulate"
    assert len(list((drift / "data/features").glob("*.ntf"))) == 50


def test_simulate_from_spec(tmp_path):
    spec = preset("tiny").to_json()
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert cli("simulate", "--spec", tmp_path / "spec.json", "--out", tmp_path / "d", "--seed", 3) == 0
    assert json.loads((tmp_path / "d/simulation.json").read_text())["seed"] == 3


def test_sweep(drift, tmp_path):
    assert cli("sweep", "--data", drift / "data", "--out", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "sweep.csv").open()))
    assert rows[0] == ["alpha", "beta", "scale", "shift", "abs_rel"]
    assert len(rows) == 50
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["abs_rel_spread"] < 1e-9 and summary["scale_ratio"] >= 2
    check_outputs(tmp_path)


def test_sweep_missing_decoder(drift, tmp_path):
    assert cli("sweep", "--data", drift / "data", "--decoder", tmp_path / "nope.json", "--out", tmp_path / "o") == 2


def test_bad_arguments(tmp_path):
    with pytest.raises(SystemExit) as ei:
        cli("train", "--data", tmp_path)
    assert ei.value.code == 2
    assert cli("eval", "--data", tmp_path / "missing", "--out", tmp_path / "o") == 2


def test_corrupt_tensor_is_io_error(tmp_path):
    assert cli("simulate", "--preset", "tiny", "--out", tmp_path / "d") == 0
    (tmp_path / "d/features/feat_00001.ntf").write_bytes(b"garbage")
    assert cli("pipeline", "--data", tmp_path / "d", "--out", tmp_path / "p") == 3


def test_eval_without_predictions_is_io_error(drift, tmp_path):
    assert cli("eval", "--data", drift / "data", "--out", tmp_path) == 3


def test_pipeline_raw_carries_planted_drift(drift):
    check_outputs(drift / "raw")
    seq = load_sequence(drift / "raw")
    trace = json.loads((drift / "data/trace.json").read_text())
    for j in (0, 17, 49):
        s = seq.samples[j]
        fit = solve_affine_frame(s.depth, seq.predictions[j].depth, s.valid_mask)
        assert abs(fit.s - trace["scale"][j]) < 1e-5 * trace["scale"][j]


def test_pipeline_deterministic(drift):
    # a sibling directory keeps the relative ground-truth paths identical
    again = drift / "raw_again"
    assert cli("pipeline", "--data", drift / "data", "--out", again) == 0
    for f in ["manifest.json", *[p.relative_to(drift / "raw") for p in (drift / "raw").rglob("*.ntf")]]:
        assert (again / f).read_bytes() == (drift / "raw" / f).read_bytes()


def test_pipeline_checkpoint_mismatch(drift, tmp_path):
    assert cli("simulate", "--preset", "tiny", "--out", tmp_path / "tiny") == 0
    assert cli("train", "--data", tmp_path / "tiny", "--out", tmp_path / "t", "--steps", 0, "--clip-len", 2) == 0
    assert cli("pipeline", "--data", drift / "data", "--stabilizer", tmp_path / "t/checkpoint", "--out", tmp_path / "p") == 2


def test_eval_protocols_and_intervals(drift, tmp_path):
    assert cli("eval", "--data", drift / "raw", "--intervals", "10,20,30,40,50", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())["protocols"]
    assert doc["video"]["pooled"]["delta1"] < doc["image"]["pooled"]["delta1"]
    assert len(doc["video"]["intervals"]) == 5
    assert "global_alignment" in doc["video"]
    check_outputs(tmp_path)


def test_eval_perfect(tmp_path):
    sim = simulate(preset("static"))
    seq = sim.sequence.with_predictions([Prediction(s.point_map, s.depth, s.valid_mask) for s in sim.sequence.samples])
    write_sequence(seq, tmp_path / "m")
    assert cli("eval", "--data", tmp_path / "m", "--out", tmp_path / "e") == 0
    doc = json.loads((tmp_path / "e/metrics.json").read_text())["protocols"]
    for p in ("metric", "video", "image"):
        assert doc[p]["pooled"]["abs_rel"] == 0.0


def test_train_outputs(tmp_path):
    assert cli("simulate", "--preset", "tiny", "--out", tmp_path / "d") == 0
    for extra in ([], ["--cell", "gru"], ["--strategy", "global"]):
        out = tmp_path / ("t" + "".join(extra))
        assert cli("train", "--data", tmp_path / "d", "--out", out, "--steps", 2, "--clip-len", 2, "--stride-max", 1, *extra) == 0
        check_outputs(out)
        assert len((out / "train_log.jsonl").read_text().splitlines()) == 2


def test_train_bad_config(tmp_path):
    assert cli("simulate", "--preset", "tiny", "--out", tmp_path / "d") == 0
    assert cli("train", "--data", tmp_path / "d", "--out", tmp_path / "t", "--hidden", 64) == 2
    assert cli("train", "--data", tmp_path / "d", "--out", tmp_path / "t", "--lr", -1) == 2


def test_reconstruct(drift, tmp_path):
    assert cli("reconstruct", "--data", drift / "raw", "--out", tmp_path / "r", "--outlier-fraction", 0.3) == 0
    doc = json.loads((tmp_path / "r/poses.json").read_text())
    check_outputs(tmp_path / "r")
    assert doc["solved_fraction"] >= 0.9
    assert (tmp_path / "r/cloud.ply").read_bytes().startswith(b"ply\n")


def test_reconstruct_without_enough_correspondences(tmp_path):
    assert cli("simulate", "--preset", "static", "--out", tmp_path / "d") == 0
    assert cli("pipeline", "--data", tmp_path / "d", "--out", tmp_path / "p") == 0
    assert cli("reconstruct", "--data", tmp_path / "p", "--out", tmp_path / "r", "--n-per-ref", 1) == 4
