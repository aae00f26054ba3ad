"""Affine (scale, shift) depth alignment and the AbsRel / delta1 metrics
under the metric, video (one global fit) and image (per-frame fit) protocols.

The default solver minimises the inverse-depth-weighted squared residual
``sum_i (1/d_i) (s*p_i + t - d_i)^2`` in closed form. ``mode="l1"`` runs ten
rounds of iteratively reweighted least squares toward the weighted L1 objective.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
import torch

from .errors import DegenerateFitError, InsufficientDataError, RejectedInputError
from .geometry import Sequence

DELTA1_THRESHOLD = 1.25
IRLS_ITERATIONS = 10
IRLS_FLOOR = 1e-6
PROTOCOLS = ("metric", "video", "image")


@dataclass(frozen=True)
class AffineAlignment:
    s: float
    t: float

    def apply(self, depth):
        return self.s * depth + self.t

    def to_json(self) -> dict:
        return {"s": self.s, "t": self.t}


IDENTITY = AffineAlignment(1.0, 0.0)


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    delta1: float
    n_valid: int

    def to_json(self) -> dict:
        return asdict(self)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


def _masked(pred, gt, mask) -> tuple[np.ndarray, np.ndarray]:
    pred, gt, mask = _np(pred), _np(gt), _np(mask)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise RejectedInputError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    sel = mask > 0.5
    return pred[sel], gt[sel]


def weighted_objective(s: float, t: float, p: np.ndarray, d: np.ndarray, mode: str = "l2") -> float:
    r = s * p + t - d
    if mode == "l1":
        return float(np.sum(np.abs(r) / d))
    return float(np.sum(r * r / d))


def _wls(p: np.ndarray, d: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    sw = w.sum()
    pm = (w * p).sum() / sw
    dm = (w * d).sum() / sw
    dp = p - pm
    spp = (w * dp * dp).sum()
    if not spp > 1e-20 * max(1.0, float((w * p * p).sum())):
        raise DegenerateFitError("all predicted values are equal; scale is undetermined")
    s = (w * dp * (d - dm)).sum() / spp
    return float(s), float(dm - s * pm)


def fit_affine(p: np.ndarray, d: np.ndarray, mode: str = "l2") -> AffineAlignment:
    """Fit ``s*p + t ≈ d`` on already-masked 1-d arrays, weights ``1/d``."""
    if p.size < 2:
        raise InsufficientDataError(f"need at least 2 valid pixels, got {p.size}")
    if mode not in ("l2", "l1"):
        raise RejectedInputError(f"unknown alignment mode {mode!r}")
    w = 1.0 / d
    s, t = _wls(p, d, w)
    if mode == "l1":
        for _ in range(IRLS_ITERATIONS):
            r = np.abs(s * p + t - d)
            s, t = _wls(p, d, w / np.maximum(r, IRLS_FLOOR))
    if not s > 0:
        raise DegenerateFitError(f"fitted scale {s:.6g} is not positive")
    return AffineAlignment(s, t)


def solve_affine_frame(pred_depth, gt_depth, mask, mode: str = "l2") -> AffineAlignment:
    p, d = _masked(pred_depth, gt_depth, mask)
    return fit_affine(p, d, mode)


def _pooled(seq: Sequence, frames: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    preds = seq.require_predictions()
    idx = range(len(seq)) if frames is None else frames
    ps, ds = [], []
    for j in idx:
        p, d = _masked(preds[j].depth, seq.samples[j].depth, seq.samples[j].valid_mask)
        ps.append(p)
        ds.append(d)
    return np.concatenate(ps), np.concatenate(ds)


def solve_affine_global(seq: Sequence, mode: str = "l2") -> AffineAlignment:
    return fit_affine(*_pooled(seq), mode)


def solve_affine_firstframe(seq: Sequence, mode: str = "l2") -> AffineAlignment:
    return fit_affine(*_pooled(seq, [0]), mode)


def _metrics(p: np.ndarray, d: np.ndarray) -> DepthMetrics:
    if p.size == 0:
        raise InsufficientDataError("no valid pixels")
    abs_rel = float(np.mean(np.abs(d - p) / d))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d / p, p / d)
    ok = (p > 0) & (ratio < DELTA1_THRESHOLD)
    return DepthMetrics(abs_rel, float(np.mean(ok)), int(p.size))


def compute_metrics(pred_depth, gt_depth, mask, align: AffineAlignment | None = None) -> DepthMetrics:
    """AbsRel and delta1 over valid pixels, after ``align`` when given.
    Aligned depths <= 0 always fail delta1."""
    p, d = _masked(pred_depth, gt_depth, mask)
    if align is not None:
        p = align.apply(p)
    return _metrics(p, d)


@dataclass
class SequenceEvaluation:
    protocol: str
    per_frame: list[DepthMetrics]
    pooled: DepthMetrics
    global_alignment: AffineAlignment | None = None
    frame_alignments: list[AffineAlignment] | None = None
    intervals: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {
            "protocol": self.protocol,
            "per_frame": [{"abs_rel": m.abs_rel, "delta1": m.delta1} for m in self.per_frame],
            "pooled": self.pooled.to_json(),
            "intervals": self.intervals,
        }
        if self.global_alignment is not None:
            out["global_alignment"] = self.global_alignment.to_json()
        return out


def _aligned_frames(seq: Sequence, protocol: str, mode: str, n: int):
    """Per-frame (aligned pred, gt) arrays for the first *n* frames."""
    if protocol == "video":
        g = fit_affine(*_pooled(seq, range(n)), mode)
        aligns = [g] * n
    elif protocol == "image":
        g = None
        aligns = [fit_affine(*_pooled(seq, [j]), mode) for j in range(n)]
    elif protocol == "metric":
        g = None
        aligns = [IDENTITY] * n
    else:
        raise RejectedInputError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    preds = seq.require_predictions()
    pairs = []
    for j in range(n):
        p, d = _masked(preds[j].depth, seq.samples[j].depth, seq.samples[j].valid_mask)
        pairs.append((aligns[j].apply(p), d))
    return g, aligns, pairs


def evaluate_sequence(
    seq: Sequence,
    protocol: str,
    intervals: Iterable[int] | None = None,
    mode: str = "l2",
) -> SequenceEvaluation:
    """Per-frame and pixel-pooled metrics under *protocol*.

    ``intervals`` lists prefix lengths; the video alignment is re-solved on
    every prefix before its pooled metrics are computed.
    """
    g, aligns, pairs = _aligned_frames(seq, protocol, mode, len(seq))
    per_frame = [_metrics(p, d) for p, d in pairs]
    pooled = _metrics(np.concatenate([p for p, _ in pairs]), np.concatenate([d for _, d in pairs]))
    records = []
    for n in intervals or []:
        n = int(n)
        if not 1 <= n <= len(seq):
            raise RejectedInputError(f"interval prefix {n} outside [1, {len(seq)}]")
        gp, _, sub = _aligned_frames(seq, protocol, mode, n)
        m = _metrics(np.concatenate([p for p, _ in sub]), np.concatenate([d for _, d in sub]))
        rec = {"prefix": n, "abs_rel": m.abs_rel, "delta1": m.delta1, "n_valid": m.n_valid}
        if gp is not None:
            rec["s"], rec["t"] = gp.s, gp.t
        records.append(rec)
    return SequenceEvaluation(
        protocol,
        per_frame,
        pooled,
        global_alignment=g,
        frame_alignments=aligns if protocol == "image" else None,
        intervals=records,
    )
