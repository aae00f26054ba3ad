"""Per-frame and per-sequence containers for ground truth, predictions and
camera data, plus the on-disk sequence manifest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import (
    FrameShapeError,
    GeometryValidationError,
    MaskValidationError,
    MissingFileError,
    RejectedInputError,
    SequenceError,
)
from .tensor_core import DTYPE, read_tensor, write_tensor

MASK_THRESHOLD = 0.5


@dataclass(frozen=True)
class Intrinsics:
    f: float
    cx: float
    cy: float

    def to_json(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy}


@dataclass
class FrameSample:
    """Ground truth for one frame. Point maps are camera-frame, +z forward;
    invalid pixels hold 0 in every channel."""

    point_map: torch.Tensor  # 3×H×W
    depth: torch.Tensor  # H×W
    valid_mask: torch.Tensor  # H×W, {0,1}
    intrinsics: Intrinsics

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.depth.shape)

    @property
    def infinity_mask(self) -> torch.Tensor:
        return 1.0 - self.valid_mask

    def validate(self) -> None:
        if self.point_map.dim() != 3 or self.point_map.shape[0] != 3:
            raise FrameShapeError(f"point map must be 3×H×W, got {tuple(self.point_map.shape)}")
        if self.depth.shape != self.point_map.shape[1:] or self.valid_mask.shape != self.depth.shape:
            raise FrameShapeError("point map, depth and mask disagree on H×W")
        m = self.valid_mask
        if not bool(((m == 0) | (m == 1)).all()):
            raise MaskValidationError("valid mask must be strictly binary")
        valid = m > 0
        if not bool(torch.isfinite(self.point_map).all() and torch.isfinite(self.depth).all()):
            raise GeometryValidationError("non-finite ground truth")
        if bool((self.depth[valid] <= 0).any()):
            raise GeometryValidationError("valid pixels must have positive depth")
        z = self.point_map[2][valid]
        d = self.depth[valid]
        if bool(((z - d).abs() > 1e-6 * d.abs().clamp(min=1.0)).any()):
            raise GeometryValidationError("depth disagrees with point-map z channel")


@dataclass
class Prediction:
    point_map: torch.Tensor  # 3×H×W
    depth: torch.Tensor  # H×W
    mask_logits: torch.Tensor  # H×W in [0,1]

    @classmethod
    def from_point_map(cls, point_map: torch.Tensor, mask: torch.Tensor) -> "Prediction":
        return cls(point_map, point_map[2], mask)

    def binary_mask(self) -> torch.Tensor:
        return (self.mask_logits > MASK_THRESHOLD).to(DTYPE)

    def validate(self, hw: tuple[int, int]) -> None:
        if tuple(self.point_map.shape) != (3, *hw) or tuple(self.depth.shape) != hw:
            raise FrameShapeError("prediction shape differs from ground truth")
        if tuple(self.mask_logits.shape) != hw:
            raise FrameShapeError("prediction mask shape differs from ground truth")
        for t in (self.point_map, self.depth, self.mask_logits):
            if not bool(torch.isfinite(t).all()):
                raise GeometryValidationError("non-finite prediction")


@dataclass(frozen=True)
class PoseSE3:
    """Camera-to-world rigid transform: x_world = R x_cam + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def check(self, tol: float = 1e-9) -> None:
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise RejectedInputError("rotation is not a proper orthonormal matrix")

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other (apply *other* first)."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def to_json(self) -> dict:
        return {"R": self.rotation.reshape(-1).tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PoseSE3":
        return cls(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


def apply_pose(points, pose: PoseSE3):
    """Map 3×N points through *pose*; returns the input's array type."""
    if isinstance(points, torch.Tensor):
        if points.dim() != 2 or points.shape[0] != 3:
            raise RejectedInputError("points must be 3×N")
        R = torch.as_tensor(pose.rotation, dtype=points.dtype)
        t = torch.as_tensor(pose.translation, dtype=points.dtype)
        return R @ points + t[:, None]
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] != 3:
        raise RejectedInputError("points must be 3×N")
    return pose.rotation @ points + pose.translation[:, None]


@dataclass
class Sequence:
    samples: list[FrameSample]
    predictions: list[Prediction] | None = None
    stride: int = 1
    poses: list[PoseSE3] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise SequenceError("a sequence needs at least one frame")
        if self.predictions is not None and len(self.predictions) != len(self.samples):
            raise SequenceError("prediction count differs from frame count")
        if self.poses is not None and len(self.poses) != len(self.samples):
            raise SequenceError("pose count differs from frame count")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def hw(self) -> tuple[int, int]:
        return self.samples[0].hw

    @property
    def intrinsics(self) -> Intrinsics:
        return self.samples[0].intrinsics

    @property
    def frames(self) -> list[tuple[FrameSample, Prediction | None]]:
        preds = self.predictions or [None] * len(self.samples)
        return list(zip(self.samples, preds))

    def validate(self, training: bool = False) -> None:
        hw = self.hw
        for i, s in enumerate(self.samples):
            if s.hw != hw:
                raise FrameShapeError(f"frame {i} has shape {s.hw}, expected {hw}")
            s.validate()
            if self.predictions is not None:
                self.predictions[i].validate(hw)
        if training and not 1 <= self.stride <= 5:
            raise SequenceError(f"training stride must lie in [1, 5], got {self.stride}")

    def with_predictions(self, predictions: list[Prediction]) -> "Sequence":
        return replace(self, predictions=list(predictions))

    def prefix(self, n: int) -> "Sequence":
        return Sequence(
            self.samples[:n],
            None if self.predictions is None else self.predictions[:n],
            self.stride,
            None if self.poses is None else self.poses[:n],
            dict(self.meta),
        )

    def require_predictions(self) -> list[Prediction]:
        if self.predictions is None:
            raise SequenceError("sequence carries no predictions")
        return self.predictions


# --- manifest I/O -------------------------------------------------------------------


def _load(base: Path, rel: str) -> torch.Tensor:
    p = base / rel
    if not p.is_file():
        raise MissingFileError(f"missing tensor file {p}")
    return read_tensor(p)


def load_sequence(manifest_path) -> Sequence:
    """Read and fully validate a sequence manifest (``manifest.json``)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.is_file():
        raise MissingFileError(f"missing manifest {manifest_path}")
    base = manifest_path.parent
    doc = json.loads(manifest_path.read_text())
    intr = Intrinsics(**{k: float(doc["intrinsics"][k]) for k in ("f", "cx", "cy")})
    frames = doc["frames"]
    if int(doc["length"]) != len(frames):
        raise SequenceError(f"manifest length {doc['length']} but {len(frames)} frame entries")
    samples, preds, poses = [], [], []
    hw = None
    for i, fr in enumerate(frames):
        pm, depth, mask = _load(base, fr["point_map"]), _load(base, fr["depth"]), _load(base, fr["mask"])
        if hw is None:
            hw = tuple(depth.shape)
        for t, expect in ((depth, hw), (mask, hw), (pm, (3, *hw))):
            if tuple(t.shape) != expect:
                raise FrameShapeError(f"frame {i}: tensor shape {tuple(t.shape)}, expected {expect}")
        samples.append(FrameSample(pm, depth, mask, intr))
        if "pred_point_map" in fr:
            ppm = _load(base, fr["pred_point_map"])
            pmask = _load(base, fr["pred_mask"]) if "pred_mask" in fr else mask.clone()
            preds.append(Prediction(ppm, ppm[2].clone(), pmask))
        if "pose" in fr:
            poses.append(PoseSE3.from_json(fr["pose"]))
    if preds and len(preds) != len(samples):
        raise SequenceError("predictions present for only some frames")
    if poses and len(poses) != len(samples):
        raise SequenceError("poses present for only some frames")
    seq = Sequence(samples, preds or None, int(doc.get("stride", 1)), poses or None, dict(doc.get("meta", {})))
    seq.validate()
    return seq


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def write_sequence(seq: Sequence, out_dir, gt_from: Path | None = None) -> Path:
    """Write *seq* as NTF tensors plus ``manifest.json`` under *out_dir*.

    When *gt_from* names an existing sequence directory its ground-truth files
    are referenced by relative path instead of being copied.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (s, p) in enumerate(seq.frames):
        if gt_from is not None:
            rel = os.path.relpath(Path(gt_from), out_dir)
            entry = {
                "point_map": f"{rel}/gt/point_map_{i:05d}.ntf",
                "depth": f"{rel}/gt/depth_{i:05d}.ntf",
                "mask": f"{rel}/gt/mask_{i:05d}.ntf",
            }
        else:
            (out_dir / "gt").mkdir(exist_ok=True)
            write_tensor(out_dir / f"gt/point_map_{i:05d}.ntf", "point_map", s.point_map)
            write_tensor(out_dir / f"gt/depth_{i:05d}.ntf", "depth", s.depth)
            write_tensor(out_dir / f"gt/mask_{i:05d}.ntf", "mask", s.valid_mask)
            entry = {
                "point_map": f"gt/point_map_{i:05d}.ntf",
                "depth": f"gt/depth_{i:05d}.ntf",
                "mask": f"gt/mask_{i:05d}.ntf",
            }
        if p is not None:
            (out_dir / "pred").mkdir(exist_ok=True)
            write_tensor(out_dir / f"pred/point_map_{i:05d}.ntf", "pred_point_map", p.point_map.detach())
            write_tensor(out_dir / f"pred/mask_{i:05d}.ntf", "pred_mask", p.mask_logits.detach())
            entry["pred_point_map"] = f"pred/point_map_{i:05d}.ntf"
            entry["pred_mask"] = f"pred/mask_{i:05d}.ntf"
        if seq.poses is not None:
            entry["pose"] = seq.poses[i].to_json()
        frames.append(entry)
    doc = {
        "length": len(seq),
        "stride": seq.stride,
        "intrinsics": seq.intrinsics.to_json(),
        "frames": frames,
    }
    if seq.meta:
        doc["meta"] = seq.meta
    write_json_atomic(out_dir / "manifest.json", doc)
    return out_dir / "manifest.json"
