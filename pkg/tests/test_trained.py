"""Properties of the model trained in the shared 2000-step run."""

import json

import numpy as np
import torch

from conftest import cli
from dyfn.geometry import load_sequence
from dyfn.simulator import load_simulation
from dyfn.stabilizer import load_checkpoint, run_stream
from dyfn.trainer import trailing_mean


def log(run):
    lines = (run["root"] / "train/train_log.jsonl").read_text().splitlines()
    return [json.loads(x) for x in lines]


def test_align_loss_drops_tenfold(standard_run):
    entries = log(standard_run)
    assert len(entries) == 2000
    align = [e["loss"]["components"]["align"] for e in entries]
    # single clips are noisy, so the end point is the trailing-100 mean
    assert trailing_mean(align, 2000) * 10 <= align[0]


def test_trailing_total_halves(standard_run):
    total = [e["loss"]["total"] for e in log(standard_run)]
    assert trailing_mean(total, 2000) < 0.5 * trailing_mean(total, 100)


def test_decoder_unchanged(standard_run):
    root = standard_run["root"]
    doc = json.loads((root / "train/checkpoint/params.json").read_text())
    _, _, decoder = load_simulation(root / "data")
    assert doc["decoder_checksum"] == decoder.checksum()


def test_hidden_state_settles_on_constant_input(standard_run):
    root = standard_run["root"]
    params, cfg = load_checkpoint(root / "train/checkpoint")
    _, feats, _ = load_simulation(root / "data")
    for i in (0, 80, 159):
        outs = run_stream(params, [feats[i]] * 20, cfg)
        hs = [torch.zeros_like(outs[0].state.hidden)] + [o.state.hidden for o in outs]
        d = [float((b - a).norm()) for a, b in zip(hs, hs[1:])]
        assert all(b < a for a, b in zip(d[3:], d[4:])), d


def test_stabilized_poses_more_accurate(standard_run, tmp_path):
    root = standard_run["root"]
    seq = load_sequence(root / "data/manifest.json")
    err = {}
    for name in ("raw", "stab"):
        assert cli("reconstruct", "--data", root / name, "--out", tmp_path / name) == 0
        frames = json.loads((tmp_path / name / "poses.json").read_text())["frames"]
        err[name] = np.mean([np.linalg.norm(np.array(f["t"]) - seq.poses[f["index"]].translation) for f in frames])
    assert err["stab"] < err["raw"]
