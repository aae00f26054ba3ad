"""Training objective: sequence alignment loss, multi-window temporal loss and
the three per-frame geometry terms (local, normal, mask).

All terms are sums of inverse-depth weighted L1 residuals over valid pixels,
except the mask term, which is a per-frame mean squared error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import AffineAlignment, solve_affine_firstframe, solve_affine_global
from .errors import ConfigError, InsufficientDataError, LossComponentError, RejectedInputError
from .geometry import FrameSample, Prediction, Sequence
from .simulator import derive_seed
from .tensor_core import DTYPE

log = logging.getLogger(__name__)

STRATEGIES = ("first_frame", "global")
SHIFT_MODES = ("depth", "uniform")
COMPONENTS = ("align", "temp", "local", "normal", "mask")
DEGENERATE_CROSS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w_align: float = 1.0
    w_temp: float = 0.1
    windows: tuple[int, ...] = (1, 2, 4)
    local_scales: tuple[float, ...] = (1 / 4, 1 / 16, 1 / 32)
    local_neighborhood_cap: int = 64

    def __post_init__(self):
        if self.w_align < 0 or self.w_temp < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.windows or any(int(k) < 1 for k in self.windows):
            raise ConfigError("temporal windows must be positive integers")
        if any(not 0 < a < 1 for a in self.local_scales):
            raise ConfigError("local scales must lie in (0, 1)")
        if self.local_neighborhood_cap < 1:
            raise ConfigError("anchor cap must be positive")

    def to_json(self) -> dict:
        return {
            "w_align": self.w_align,
            "w_temp": self.w_temp,
            "windows": list(self.windows),
            "local_scales": list(self.local_scales),
            "local_neighborhood_cap": self.local_neighborhood_cap,
        }


@dataclass
class LossReport:
    total: float
    components: dict[str, float]
    alignment_used: AffineAlignment
    flags: list[str] = field(default_factory=list)
    value: torch.Tensor | None = None  # differentiable total

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "components": dict(self.components),
            "alignment": self.alignment_used.to_json(),
            "flags": list(self.flags),
        }


def _shifted(pm: torch.Tensor, a: AffineAlignment, shift_mode: str) -> torch.Tensor:
    if shift_mode == "uniform":
        return a.s * pm + a.t
    if shift_mode != "depth":
        raise ConfigError(f"shift mode must be one of {SHIFT_MODES}")
    return torch.cat([a.s * pm[:2], (a.s * pm[2] + a.t)[None]], dim=0)


def _inv_depth(gt: FrameSample) -> tuple[torch.Tensor, torch.Tensor]:
    valid = gt.valid_mask > 0.5
    inv = torch.where(valid, 1.0 / torch.where(valid, gt.depth, torch.ones_like(gt.depth)), torch.zeros_like(gt.depth))
    return valid, inv


def fit_sequence_alignment(seq: Sequence, strategy: str = "first_frame") -> AffineAlignment:
    if strategy == "first_frame":
        return solve_affine_firstframe(seq)
    if strategy == "global":
        return solve_affine_global(seq)
    raise ConfigError(f"strategy must be one of {STRATEGIES}")


def loss_align(
    seq: Sequence,
    strategy: str = "first_frame",
    alignment: AffineAlignment | None = None,
    shift_mode: str = "depth",
) -> tuple[torch.Tensor, AffineAlignment]:
    """Residual of every frame under one sequence-level (s, t).

    The fit is computed on depths and held constant for differentiation.
    """
    preds = seq.require_predictions()
    a = alignment if alignment is not None else fit_sequence_alignment(seq, strategy)
    total = torch.zeros((), dtype=DTYPE)
    for gt, pred in zip(seq.samples, preds):
        _, inv = _inv_depth(gt)
        r = (_shifted(pred.point_map, a, shift_mode) - gt.point_map).abs().sum(dim=0)
        total = total + (inv * r).sum()
    return total, a


def loss_temp(
    seq: Sequence,
    alignment: AffineAlignment,
    windows=(1, 2, 4),
) -> tuple[torch.Tensor, bool]:
    """Match the size of frame-to-frame changes in prediction and ground truth.

    Returns ``(value, empty)``; ``empty`` is set when the sequence is too
    short for any window, in which case the value is 0.
    """
    preds = seq.require_predictions()
    n = len(seq)
    total = torch.zeros((), dtype=DTYPE)
    if n <= min(windows):
        log.warning("sequence of length %d is too short for temporal windows %s", n, list(windows))
        return total, True
    for k in sorted(windows):
        for j in range(n - k):
            a, b = seq.samples[j], seq.samples[j + k]
            both = (a.valid_mask > 0.5) & (b.valid_mask > 0.5)
            _, inv = _inv_depth(a)
            inv = torch.where(both, inv, torch.zeros_like(inv))
            d_hat = (preds[j].point_map - preds[j + k].point_map).abs().sum(dim=0)
            d = (a.point_map - b.point_map).abs().sum(dim=0)
            total = total + (inv * (alignment.s * d_hat - d).abs()).sum()
    return total, False


def sample_anchors(valid_idx: np.ndarray, scale: float, cap: int, seed: int) -> np.ndarray:
    n = min(math.ceil(scale * valid_idx.size), cap, valid_idx.size)
    rng = np.random.default_rng(derive_seed(seed, "local-anchors", float(scale)))
    return np.sort(rng.choice(valid_idx, size=n, replace=False))


def local_radius(scale: float, z: torch.Tensor, hw: tuple[int, int], focal: float) -> torch.Tensor:
    h, w = hw
    return scale * z * math.sqrt(w * w + h * h) / (2.0 * focal)


def loss_local(
    pred: Prediction,
    gt: FrameSample,
    scales=(1 / 4, 1 / 16, 1 / 32),
    seed: int = 0,
    cap: int = 64,
    strict: bool = True,
) -> torch.Tensor:
    """Per-neighbourhood affine-invariant point loss at several radii.

    Each anchor's neighbourhood (ground-truth points within its depth-adaptive
    radius) gets its own scale and uniform shift, fitted by inverse-depth
    weighted least squares; the fit stays inside the graph. Anchors whose
    neighbourhood cannot determine a scale are skipped.
    """
    valid = (gt.valid_mask > 0.5).reshape(-1)
    valid_idx = torch.nonzero(valid).reshape(-1).numpy()
    if valid_idx.size == 0:
        if strict:
            raise InsufficientDataError("no valid anchor pixels")
        return (pred.point_map * 0.0).sum()
    P = gt.point_map.reshape(3, -1)[:, valid_idx].T  # N×3
    Q = pred.point_map.reshape(3, -1)[:, valid_idx].T
    w_pt = 1.0 / P[:, 2]
    total = torch.zeros((), dtype=DTYPE)
    pos = {int(v): i for i, v in enumerate(valid_idx)}
    for alpha in scales:
        anchors = [pos[int(a)] for a in sample_anchors(valid_idx, alpha, cap, seed)]
        A = P[anchors]
        r = local_radius(alpha, A[:, 2], gt.hw, gt.intrinsics.f)
        member = (torch.cdist(A, P) <= r[:, None]).to(DTYPE)  # anchors×N
        W = member * w_pt[None, :]
        sw = 3.0 * W.sum(dim=1)
        qm = (W @ Q.sum(dim=1)) / sw
        pm = (W @ P.sum(dim=1)) / sw
        dq = Q[None, :, :] - qm[:, None, None]
        dp = P[None, :, :] - pm[:, None, None]
        sqq = (W * (dq * dq).sum(dim=2)).sum(dim=1)
        sqp = (W * (dq * dp).sum(dim=2)).sum(dim=1)
        scale_ref = (W * (Q * Q).sum(dim=1)[None, :]).sum(dim=1).detach()
        ok = sqq.detach() > 1e-20 * scale_ref.clamp(min=1.0)
        if not bool(ok.any()):
            continue
        s = sqp[ok] / sqq[ok]
        t = pm[ok] - s * qm[ok]
        res = (s[:, None, None] * Q[None] + t[:, None, None] - P[None]).abs().sum(dim=2)
        total = total + (W[ok] * res).sum()
    return total


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(dim=0)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def grid_normals(pm: torch.Tensor) -> torch.Tensor:
    """Unnormalised normals (p_right - p) × (p_down - p), shape 3×(H-1)×(W-1)."""
    p = pm[:, :-1, :-1]
    return torch.linalg.cross(pm[:, :-1, 1:] - p, pm[:, 1:, :-1] - p, dim=0)


def loss_normal(pred: Prediction, gt: FrameSample) -> torch.Tensor:
    """Sum of angles between predicted and ground-truth grid normals."""
    h, w = gt.hw
    if h < 2 or w < 2:
        raise RejectedInputError("normals need at least a 2×2 grid")
    m = gt.valid_mask > 0.5
    ok = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1]
    n_hat = grid_normals(pred.point_map)
    n = grid_normals(gt.point_map)
    ok = ok & (_safe_norm(n_hat).detach() >= DEGENERATE_CROSS) & (_safe_norm(n).detach() >= DEGENERATE_CROSS)
    cross = _safe_norm(torch.linalg.cross(n_hat, n, dim=0))
    dot = (n_hat * n).sum(dim=0)
    ang = torch.atan2(cross, dot)
    return torch.where(ok, ang, torch.zeros_like(ang)).sum()


def loss_mask(mask_pred: torch.Tensor, infinity_mask: torch.Tensor) -> torch.Tensor:
    if mask_pred.shape != infinity_mask.shape:
        raise RejectedInputError("mask shapes differ")
    return ((mask_pred - (1.0 - infinity_mask)) ** 2).mean()


def loss_total(
    seq: Sequence,
    weights: LossWeights | None = None,
    strategy: str = "first_frame",
    alignment: AffineAlignment | None = None,
    seed: int = 0,
    shift_mode: str = "depth",
    strict: bool = True,
) -> LossReport:
    """Weighted objective ``local + normal + mask + w_align*align + w_temp*temp``.

    Pass *alignment* to freeze the sequence fit (used by gradient checks).
    """
    weights = weights or LossWeights()
    preds = seq.require_predictions()
    flags: list[str] = []
    parts: dict[str, torch.Tensor] = {}

    def run(name, fn):
        try:
            return fn()
        except LossComponentError:
            raise
        except Exception as exc:
            raise LossComponentError(name, exc) from exc

    align_val, a = run("align", lambda: loss_align(seq, strategy, alignment, shift_mode))
    parts["align"] = align_val
    temp_val, empty = run("temp", lambda: loss_temp(seq, a, weights.windows))
    if empty:
        flags.append("temp_empty_window")
    parts["temp"] = temp_val
    zero = torch.zeros((), dtype=DTYPE)
    local, normal, mask = zero, zero, zero
    for j, (gt, pred) in enumerate(zip(seq.samples, preds)):
        s = derive_seed(seed, "frame", j)
        local = local + run(
            "local",
            lambda: loss_local(pred, gt, weights.local_scales, s, weights.local_neighborhood_cap, strict),
        )
        normal = normal + run("normal", lambda: loss_normal(pred, gt))
        mask = mask + run("mask", lambda: loss_mask(pred.mask_logits, gt.infinity_mask))
    parts.update(local=local, normal=normal, mask=mask)
    value = parts["local"] + parts["normal"] + parts["mask"] + weights.w_align * parts["align"] + weights.w_temp * parts["temp"]
    comps = {k: float(parts[k].detach()) for k in COMPONENTS}
    for k, v in comps.items():
        if not math.isfinite(v):
            raise LossComponentError(k, FloatingPointError(f"{k} loss is not finite"))
    return LossReport(float(value.detach()), comps, a, flags, value)
