"""Rigid pose recovery from 3D-3D correspondences and fusion of posed point
maps into one world-frame cloud."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .alignment import AffineAlignment, solve_affine_global
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    EmptyCorrespondenceError,
    NoConsensusError,
    NumericError,
)
from .geometry import PoseSE3, Prediction, Sequence, write_json_atomic
from .simulator import CorrespondenceSet, derive_seed, generate_correspondences

log = logging.getLogger(__name__)

REFERENCE_OFFSETS = (1, 5, 21)
MIN_SAMPLE = 3
RANK_TOL = 1e-10


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 1000
    inlier_threshold: float | None = None  # None: 0.02 × median depth of the frame
    threshold_factor: float = 0.02
    confidence: float = 0.999
    min_sample: int = MIN_SAMPLE
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ConfigError("inlier threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must lie in (0, 1)")
        if self.max_iterations < 1 or self.min_sample != MIN_SAMPLE:
            raise ConfigError("need >= 1 iteration and a minimal sample of 3")

    def threshold_for(self, median_depth: float) -> float:
        if self.inlier_threshold is not None:
            return self.inlier_threshold
        return self.threshold_factor * median_depth


@dataclass
class RansacStats:
    iterations: int
    n_inliers: int
    n_degenerate_samples: int
    threshold: float
    rmse: float

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "n_inliers": self.n_inliers,
            "n_degenerate_samples": self.n_degenerate_samples,
            "threshold": self.threshold,
            "rmse": self.rmse,
        }


def procrustes_objective(pose: PoseSE3, c: CorrespondenceSet) -> float:
    r = pose.rotation @ c.src + pose.translation[:, None] - c.dst
    w = np.ones(len(c)) if c.weights is None else c.weights
    return float((w * (r * r).sum(axis=0)).sum())


def solve_procrustes(c: CorrespondenceSet, use_weights: bool = False) -> PoseSE3:
    """Least-squares rigid transform ``dst ≈ R src + t`` (Kabsch with a
    determinant correction, so reflections are never returned)."""
    n = len(c)
    if n < MIN_SAMPLE:
        raise DegenerateGeometryError(f"need at least {MIN_SAMPLE} correspondences, got {n}")
    w = c.weights if (use_weights and c.weights is not None) else np.ones(n)
    w = w / w.sum()
    ms = c.src @ w
    md = c.dst @ w
    S = c.src - ms[:, None]
    D = c.dst - md[:, None]
    sv = np.linalg.svd(S, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= RANK_TOL * sv[0]:
        raise DegenerateGeometryError("source points are coincident or collinear")
    H = (S * w) @ D.T
    U, _, Vt = np.linalg.svd(H)
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return PoseSE3(R, md - R @ ms)


def residuals(pose: PoseSE3, c: CorrespondenceSet) -> np.ndarray:
    return np.linalg.norm(pose.rotation @ c.src + pose.translation[:, None] - c.dst, axis=0)


def solve_pose_ransac(c: CorrespondenceSet, cfg: RansacConfig, median_depth: float | None = None):
    """Hypothesise from random 3-point samples, keep the model with the most
    inliers (earliest wins ties), stop once the confidence bound is met, then
    refit on all inliers. Returns ``(pose, inlier_mask, stats)``."""
    n = len(c)
    if n < MIN_SAMPLE:
        raise NoConsensusError(f"need at least {MIN_SAMPLE} correspondences, got {n}")
    if median_depth is None:
        median_depth = float(np.median(np.abs(c.src[2])))
    thr = cfg.threshold_for(median_depth)
    rng = np.random.default_rng(derive_seed(cfg.seed, "ransac"))
    best_mask, best_count = None, 0
    needed = cfg.max_iterations
    degenerate = 0
    it = 0
    while it < min(needed, cfg.max_iterations):
        sample = rng.choice(n, size=MIN_SAMPLE, replace=False)
        it += 1
        try:
            model = solve_procrustes(c.subset(sample))
        except DegenerateGeometryError:
            degenerate += 1
            continue
        mask = residuals(model, c) < thr
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            ratio = count / n
            if ratio >= 1.0:
                needed = it
            else:
                needed = math.ceil(math.log(1 - cfg.confidence) / math.log(1 - ratio**MIN_SAMPLE))
    if best_mask is None:
        if degenerate == it:
            raise DegenerateGeometryError("every minimal sample was degenerate")
        raise NoConsensusError("no hypothesis produced any inlier")
    if best_count < MIN_SAMPLE:
        raise NoConsensusError(f"best model has only {best_count} inliers")
    pose = solve_procrustes(c.subset(np.flatnonzero(best_mask)))
    # one re-scoring pass with the refined model
    mask = residuals(pose, c) < thr
    if int(mask.sum()) >= best_count:
        best_mask = mask
        pose = solve_procrustes(c.subset(np.flatnonzero(mask)))
    res = residuals(pose, c)[best_mask]
    stats = RansacStats(it, int(best_mask.sum()), degenerate, thr, float(np.sqrt(np.mean(res * res))))
    return pose, best_mask, stats


def build_references(j: int, offsets=REFERENCE_OFFSETS) -> list[int]:
    """Reference frame indices for frame *j*; negative indices are dropped.
    Frame 0 is the world anchor and has none."""
    if j < 0:
        raise ConfigError("frame index must be non-negative")
    return [j - k for k in offsets if j - k >= 0]


def reference_world_points(seq: Sequence, refs: list[int], poses: dict[int, PoseSE3]) -> dict[int, np.ndarray]:
    """Valid reference prediction points lifted to world by their poses."""
    preds = seq.require_predictions()
    out = {}
    for k in refs:
        pm = preds[k].point_map.detach().numpy().reshape(3, -1)
        valid = preds[k].binary_mask().numpy().reshape(-1) > 0
        pose = poses[k]
        out[k] = pose.rotation @ pm[:, valid] + pose.translation[:, None]
    return out


def align_predictions(seq: Sequence, alignment: AffineAlignment | None = None) -> tuple[Sequence, AffineAlignment]:
    """Map predictions through one sequence-level (s, t); t shifts depth only."""
    a = alignment or solve_affine_global(seq)
    preds = []
    for p in seq.require_predictions():
        pm = p.point_map.detach().clone() * a.s
        pm[2] = pm[2] + a.t
        pm = pm * (p.mask_logits > 0.5)
        preds.append(Prediction(pm, pm[2], p.mask_logits))
    return seq.with_predictions(preds), a


@dataclass(frozen=True)
class ReconConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    reference_mode: str = "eval"  # eval: GT reference poses; odometry: solved poses
    n_per_ref: int = 100
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.reference_mode not in ("eval", "odometry"):
            raise ConfigError("reference mode must be 'eval' or 'odometry'")


@dataclass
class FrameResult:
    index: int
    pose: PoseSE3 | None
    status: str
    n_correspondences: int = 0
    n_inliers: int = 0
    inlier_agreement: float | None = None
    message: str = ""


@dataclass
class Reconstruction:
    points: np.ndarray  # 3×M world points
    pixels: np.ndarray  # 2×M (u, v)
    frames: list[FrameResult]
    alignment: AffineAlignment

    @property
    def solved_fraction(self) -> float:
        return sum(f.pose is not None for f in self.frames) / len(self.frames)

    def poses_json(self) -> dict:
        frames = []
        for f in self.frames:
            d = {"index": f.index, "status": f.status, "n_correspondences": f.n_correspondences, "n_inliers": f.n_inliers}
            if f.pose is not None:
                d.update(f.pose.to_json())
            if f.inlier_agreement is not None:
                d["inlier_agreement"] = f.inlier_agreement
            if f.message:
                d["message"] = f.message
            frames.append(d)
        return {"alignment": self.alignment.to_json(), "frames": frames, "solved_fraction": self.solved_fraction}


CorrespondenceProvider = Callable[[int, list[int], dict[int, PoseSE3]], tuple[CorrespondenceSet, np.ndarray | None]]


def simulator_provider(seq: Sequence, cfg: ReconConfig) -> CorrespondenceProvider:
    def provide(j, refs, ref_poses):
        return generate_correspondences(seq, j, refs, ref_poses, cfg.n_per_ref, cfg.outlier_fraction, derive_seed(cfg.seed, "corr"))

    return provide


def fuse_stream(seq: Sequence, provider: CorrespondenceProvider, cfg: ReconConfig) -> Reconstruction:
    """Solve frame poses in order and accumulate posed prediction points.

    *seq* should already carry aligned predictions. Frames whose solve fails
    are logged and skipped; in odometry mode they also stop serving as
    references.
    """
    preds = seq.require_predictions()
    if cfg.reference_mode == "eval" and seq.poses is None:
        raise ConfigError("evaluation mode needs ground-truth poses")
    solved: dict[int, PoseSE3] = {0: PoseSE3.identity()}
    frames = [FrameResult(0, solved[0], "anchor")]
    for j in range(1, len(seq)):
        refs = build_references(j)
        if cfg.reference_mode == "eval":
            ref_poses = {k: seq.poses[k] for k in refs}
        else:
            refs = [k for k in refs if k in solved]
            ref_poses = {k: solved[k] for k in refs}
        if not refs:
            frames.append(FrameResult(j, None, "skipped", message="no posed reference frames"))
            log.warning("frame %d skipped: no posed reference frames", j)
            continue
        try:
            corr, planted = provider(j, refs, ref_poses)
            med = float(np.median(seq.samples[j].depth[seq.samples[j].valid_mask > 0.5].numpy()))
            rcfg = RansacConfig(
                cfg.ransac.max_iterations,
                cfg.ransac.inlier_threshold,
                cfg.ransac.threshold_factor,
                cfg.ransac.confidence,
                MIN_SAMPLE,
                derive_seed(cfg.ransac.seed, "frame", j),
            )
            pose, mask, stats = solve_pose_ransac(corr, rcfg, med)
        except (NumericError, EmptyCorrespondenceError) as exc:
            frames.append(FrameResult(j, None, "skipped", message=str(exc)))
            log.warning("frame %d skipped: %s", j, exc)
            continue
        agree = None if planted is None else float(np.mean(mask == planted))
        solved[j] = pose
        frames.append(FrameResult(j, pose, "solved", len(corr), stats.n_inliers, agree))
    pts, pix = [], []
    h, w = seq.hw
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for fr in frames:
        if fr.pose is None:
            continue
        p = preds[fr.index]
        valid = p.binary_mask().numpy().reshape(-1) > 0
        pm = p.point_map.detach().numpy().reshape(3, -1)[:, valid]
        pts.append(fr.pose.rotation @ pm + fr.pose.translation[:, None])
        pix.append(np.stack([uu.reshape(-1)[valid], vv.reshape(-1)[valid]]))
    points = np.concatenate(pts, axis=1) if pts else np.zeros((3, 0))
    pixels = np.concatenate(pix, axis=1) if pix else np.zeros((2, 0), dtype=int)
    return Reconstruction(points, pixels, frames, IDENTITY_ALIGN)


IDENTITY_ALIGN = AffineAlignment(1.0, 0.0)


def reconstruct(seq: Sequence, cfg: ReconConfig | None = None) -> Reconstruction:
    """Align predictions globally, then fuse with simulator correspondences."""
    cfg = cfg or ReconConfig()
    aligned, a = align_predictions(seq)
    rec = fuse_stream(aligned, simulator_provider(aligned, cfg), cfg)
    rec.alignment = a
    return rec


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, from the chord length (stable near 0)."""
    chord = np.linalg.norm(Ra - Rb) / (2.0 * math.sqrt(2.0))
    return float(2.0 * math.asin(min(1.0, chord)))


def pose_errors(frames: list[FrameResult], gt: list[PoseSE3]) -> dict:
    """Mean translation (scene units) and rotation (radians) error over solved frames."""
    te, re = [], []
    for f in frames:
        if f.pose is None:
            continue
        g = gt[f.index]
        te.append(float(np.linalg.norm(f.pose.translation - g.translation)))
        re.append(rotation_angle(g.rotation, f.pose.rotation))
    return {"mean_translation_error": float(np.mean(te)), "mean_rotation_error": float(np.mean(re)), "n_frames": len(te)}


def write_ply(path, points: np.ndarray, pixels: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 x, y, z and optional uint16 u, v."""
    path = Path(path)
    n = points.shape[1]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {a}" for a in "xyz"]
    dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if pixels is not None:
        header += ["property ushort u", "property ushort v"]
        dtype += [("u", "<u2"), ("v", "<u2")]
    header.append("end_header")
    rec = np.empty(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = points.astype(np.float32)
    if pixels is not None:
        rec["u"], rec["v"] = pixels.astype(np.uint16)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    tmp.replace(path)


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    has_uv = any(l.endswith(" u") for l in lines)
    dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + ([("u", "<u2"), ("v", "<u2")] if has_uv else [])
    rec = np.frombuffer(data[end:], dtype=dtype, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    return pts, (np.stack([rec["u"], rec["v"]]) if has_uv else None)


def write_reconstruction(rec: Reconstruction, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ply = out_dir / "cloud.ply"
    write_ply(ply, rec.points, rec.pixels)
    pj = out_dir / "poses.json"
    write_json_atomic(pj, rec.poses_json())
    return ply, pj
