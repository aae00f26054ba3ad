"""``dyfn`` command line: simulate, sweep, pipeline, train, eval, reconstruct.

Exit codes: 0 success, 2 bad arguments or configuration, 3 input/output
failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import torch

from . import __version__
from .alignment import PROTOCOLS, evaluate_sequence
from .errors import DyfnError, NTFParseError, NumericError, RejectedInputError, SequenceError
from .geometry import load_sequence, write_json_atomic, write_sequence
from .losses import LossWeights, STRATEGIES
from .modulation import default_grid, run_sweep, summarize_sweep
from .pose import RansacConfig, ReconConfig, reconstruct, write_reconstruction
from .presets import PRESETS, preset
from .simulator import SimulationSpec, derive_seed, load_simulation, simulate, write_simulation
from .stabilizer import DyfnConfig, load_checkpoint, param_count, run_stream
from .tensor_core import configure_threads
from .trainer import TrainConfig, TrainingData, train

log = logging.getLogger("dyfn")

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SOLVED_FRACTION_REQUIRED = 0.9


class UsageError(Exception):
    pass


# --- helpers -------------------------------------------------------------------------


def schema(name: str) -> dict:
    return json.loads(resources.files("dyfn.schemas").joinpath(f"{name}.json").read_text())


def validated(name: str, doc: dict) -> dict:
    jsonschema.validate(doc, schema(name))
    return doc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_run_manifest(out_dir: Path, command: str, cfg: dict, seed, inputs: dict, outputs: list[str], started: str) -> None:
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "tool_version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "started": started,
        "finished": _now(),
    }
    write_json_atomic(out_dir / "run.json", validated("run_manifest", doc))


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _intervals(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --intervals value {text!r}") from exc


# --- commands ------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = _now()
    if args.spec:
        spec_path = _existing(args.spec, "spec file")
        doc = json.loads(spec_path.read_text())
        if args.seed is not None:
            doc["seed"] = args.seed
        spec = SimulationSpec.from_json(doc)
        inputs = {"spec": spec_path}
    else:
        spec = preset(args.preset, args.seed or 0)
        inputs = {"preset": args.preset}
    validated("simulation", spec.to_json())
    out = _out_dir(args.out)
    write_simulation(simulate(spec), out)
    write_run_manifest(out, "simulate", spec.to_json(), spec.seed, inputs, ["manifest.json", "simulation.json", "trace.json", "decoder.json"], started)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = _now()
    data = _existing(args.data, "data directory")
    decoder = _existing(args.decoder, "decoder description")
    seq, feats, dec = load_simulation(data, decoder)
    if not 0 <= args.frame < len(seq):
        raise UsageError(f"--frame must lie in [0, {len(seq)})")
    grid = default_grid(args.grid)
    records = run_sweep(feats[args.frame], dec.for_frame(args.frame), seq.samples[args.frame], grid)
    out = _out_dir(args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "beta", "scale", "shift", "abs_rel"])
    for r in records:
        w.writerow([f"{v:.9g}" for v in (r.alpha, r.beta, r.fitted_scale, r.fitted_shift, r.aligned_abs_rel)])
    tmp = out / "sweep.csv.tmp"
    tmp.write_text(buf.getvalue())
    tmp.replace(out / "sweep.csv")
    summary = {"frame": args.frame, **summarize_sweep(records)}
    write_json_atomic(out / "summary.json", validated("sweep_summary", summary))
    cfg = {"frame": args.frame, "grid": args.grid}
    write_run_manifest(out, "sweep", cfg, None, {"data": data, "decoder": decoder or data / "decoder.json"}, ["sweep.csv", "summary.json"], started)
    return EXIT_OK if summary["n_failed"] < summary["n_points"] else EXIT_NUMERIC


def cmd_pipeline(args) -> int:
    started = _now()
    data = _existing(args.data, "data directory")
    seq, feats, dec = load_simulation(data)
    if args.stabilizer == "none":
        stream = feats
        label = "none"
    else:
        ckpt = _existing(args.stabilizer, "stabilizer checkpoint")
        params, cfg = load_checkpoint(ckpt)
        if cfg.channels != feats[0].shape[0]:
            raise UsageError(f"checkpoint expects {cfg.channels} channels, features have {feats[0].shape[0]}")
        with torch.no_grad():
            stream = [o.f_consistent for o in run_stream(params, feats, cfg)]
        label = str(ckpt)
    with torch.no_grad():
        preds = [dec.decode(f, i) for i, f in enumerate(stream)]
    out = _out_dir(args.out)
    write_sequence(seq.with_predictions(preds), out, gt_from=data)
    info = {"stabilizer": label if label == "none" else "checkpoint", "length": len(seq), "decoder_checksum": dec.checksum()}
    write_json_atomic(out / "pipeline.json", validated("pipeline", info))
    write_run_manifest(out, "pipeline", {"stabilizer": label}, None, {"data": data}, ["manifest.json", "pipeline.json"], started)
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    data_dir = _existing(args.data, "data directory")
    seq, feats, dec = load_simulation(data_dir)
    c = feats[0].shape[0]
    dyfn = DyfnConfig(channels=c, hidden_channels=args.hidden or c, cell=args.cell, head_init=args.head_init, raw_input=not args.normalized_input)
    cfg = TrainConfig(
        clip_length=args.clip_len,
        stride_min=args.stride_min,
        stride_max=args.stride_max,
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        weights=LossWeights(w_align=args.w_align, w_temp=args.w_temp),
        strategy=args.strategy,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        dyfn=dyfn,
    )
    cfg.validate()
    out = _out_dir(args.out)
    res = train(TrainingData(seq, feats, dec), cfg, out)
    summary = {
        "steps": cfg.steps,
        "config": cfg.to_json(),
        "initial": res.log[0].report.to_json() if res.log else None,
        "final": res.log[-1].report.to_json() if res.log else None,
        "decoder_checksum": res.decoder_checksum,
        "n_params": param_count(res.params),
    }
    write_json_atomic(out / "train_summary.json", validated("train_summary", summary))
    write_run_manifest(out, "train", cfg.to_json(), args.seed, {"data": data_dir}, ["checkpoint", "train_log.jsonl", "train_summary.json"], started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    data = _existing(args.data, "prediction manifest")
    seq = load_sequence(data)
    seq.require_predictions()
    intervals = _intervals(args.intervals)
    protocols = PROTOCOLS if args.protocol == "all" else (args.protocol,)
    doc = {"protocols": {p: evaluate_sequence(seq, p, intervals, args.mode).to_json() for p in protocols}}
    out = _out_dir(args.out)
    write_json_atomic(out / "metrics.json", validated("metrics", doc))
    cfg = {"protocol": args.protocol, "intervals": intervals, "mode": args.mode}
    write_run_manifest(out, "eval", cfg, None, {"data": data}, ["metrics.json"], started)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    started = _now()
    data = _existing(args.data, "prediction manifest")
    seq = load_sequence(data)
    seq.require_predictions()
    if seq.poses is None:
        raise UsageError("reconstruction needs a manifest with ground-truth poses")
    cfg = ReconConfig(
        RansacConfig(args.max_iterations, args.threshold, seed=derive_seed(args.seed, "ransac")),
        args.reference_mode,
        args.n_per_ref,
        args.outlier_fraction,
        args.seed,
    )
    rec = reconstruct(seq, cfg)
    out = _out_dir(args.out)
    validated("poses", rec.poses_json())
    write_reconstruction(rec, out)
    cfg_doc = {"ransac": asdict(cfg.ransac), "reference_mode": cfg.reference_mode, "n_per_ref": cfg.n_per_ref, "outlier_fraction": cfg.outlier_fraction}
    write_run_manifest(out, "reconstruct", cfg_doc, args.seed, {"data": data}, ["cloud.ply", "poses.json"], started)
    if rec.solved_fraction < SOLVED_FRACTION_REQUIRED:
        log.error("only %.0f%% of frames were solved", 100 * rec.solved_fraction)
        return EXIT_NUMERIC
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyfn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic scene, drifting features and decoder")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="simulation spec JSON")
    g.add_argument("--preset", choices=PRESETS)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("sweep", help="statistic modulation sweep on one frame")
    s.add_argument("--data", required=True)
    s.add_argument("--decoder", help="decoder.json (default: inside --data)")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--grid", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("pipeline", help="encode, optionally stabilise, decode")
    s.add_argument("--data", required=True)
    s.add_argument("--stabilizer", default="none", help="'none' or a checkpoint directory")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("train", help="train the stabiliser")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--clip-len", type=int, default=12)
    s.add_argument("--stride-min", type=int, default=1)
    s.add_argument("--stride-max", type=int, default=5)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--strategy", choices=STRATEGIES, default="first_frame")
    s.add_argument("--cell", choices=("convgru", "gru"), default="convgru")
    s.add_argument("--hidden", type=int)
    s.add_argument("--head-init", choices=("zero", "uniform"), default="uniform")
    s.add_argument("--normalized-input", action="store_true", help="feed the normalised feature to the recurrent cell")
    s.add_argument("--w-align", type=float, default=1.0)
    s.add_argument("--w-temp", type=float, default=0.1)
    s.add_argument("--checkpoint-every", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="depth metrics under an alignment protocol")
    s.add_argument("--data", required=True, help="prediction manifest or its directory")
    s.add_argument("--protocol", choices=(*PROTOCOLS, "all"), default="all")
    s.add_argument("--intervals", help="comma-separated prefix lengths")
    s.add_argument("--mode", choices=("l2", "l1"), default="l2")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("reconstruct", help="solve poses and fuse a point cloud")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--outlier-fraction", type=float, default=0.0)
    s.add_argument("--threshold", type=float, help="inlier threshold (default 0.02 × median depth)")
    s.add_argument("--max-iterations", type=int, default=1000)
    s.add_argument("--n-per-ref", type=int, default=100)
    s.add_argument("--reference-mode", choices=("eval", "odometry"), default="eval")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_reconstruct)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        return args.fn(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_ARGS
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except RejectedInputError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_ARGS
    except (SequenceError, NTFParseError, OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        log.error("input/output failure: %s", exc)
        return EXIT_IO
    except DyfnError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
