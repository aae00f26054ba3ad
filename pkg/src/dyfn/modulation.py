"""Feature-statistic modulation and the (alpha, beta) sweep study.

A feature map is standardised channel-wise, then rebuilt with its mean scaled
by ``alpha`` and its standard deviation scaled by ``beta``. Feeding the rebuilt
features through a frozen decoder and fitting the decoded depth against ground
truth shows how strongly the statistics drive output scale and shift.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence as Seq

import numpy as np
import torch

from .alignment import AffineAlignment, compute_metrics, solve_affine_frame
from .errors import NumericError, RejectedInputError
from .geometry import FrameSample, Prediction
from .tensor_core import channel_stats

log = logging.getLogger(__name__)

EPSILON = 1e-6
SWEEP_RANGE = (0.5, 2.0)


class Decoder(Protocol):
    def __call__(self, features: torch.Tensor) -> Prediction: ...


@dataclass(frozen=True)
class ModulationParams:
    alpha: float = 1.0
    beta: float = 1.0
    epsilon: float = EPSILON

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise RejectedInputError("alpha and beta must be positive")
        if not self.epsilon > 0:
            raise RejectedInputError("epsilon must be positive")


@dataclass(frozen=True)
class SweepRecord:
    alpha: float
    beta: float
    fitted_scale: float
    fitted_shift: float
    aligned_abs_rel: float
    error: str | None = None


def normalize(f: torch.Tensor, epsilon: float = EPSILON):
    """Return ``(f_norm, mu, sigma)`` with ``f_norm = (f - mu) / (sigma + eps)``."""
    mu, sigma = channel_stats(f)
    f_norm = (f - mu[:, None, None]) / (sigma[:, None, None] + epsilon)
    return f_norm, mu, sigma


def modulate(f_norm: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, params: ModulationParams) -> torch.Tensor:
    if f_norm.dim() != 3 or mu.shape != (f_norm.shape[0],) or sigma.shape != mu.shape:
        raise RejectedInputError("statistics must hold one value per feature channel")
    return f_norm * (params.beta * sigma)[:, None, None] + (params.alpha * mu)[:, None, None]


def default_grid(n: int = 7, lo: float = SWEEP_RANGE[0], hi: float = SWEEP_RANGE[1]) -> list[tuple[float, float]]:
    vals = np.linspace(lo, hi, n)
    return [(float(a), float(b)) for a in vals for b in vals]


def run_sweep(
    f: torch.Tensor,
    decoder: Decoder,
    gt: FrameSample,
    grid: Seq[tuple[float, float]],
    epsilon: float = EPSILON,
) -> list[SweepRecord]:
    """Decode every modulated copy of *f* and fit its depth against *gt*.

    ``fitted_scale``/``fitted_shift`` describe the decoded depth in terms of
    the ground truth (``pred ≈ s*gt + t``); ``aligned_abs_rel`` is the AbsRel
    after mapping the prediction back through that fit.
    """
    f_norm, mu, sigma = normalize(f, epsilon)
    records = []
    for alpha, beta in grid:
        try:
            pred = decoder(modulate(f_norm, mu, sigma, ModulationParams(alpha, beta, epsilon)))
            fit = solve_affine_frame(gt.depth, pred.depth, gt.valid_mask)
            back = AffineAlignment(1.0 / fit.s, -fit.t / fit.s)
            m = compute_metrics(pred.depth, gt.depth, gt.valid_mask, back)
            records.append(SweepRecord(alpha, beta, fit.s, fit.t, m.abs_rel))
        except NumericError as exc:
            log.warning("sweep point (%.3f, %.3f) failed: %s", alpha, beta, exc)
            nan = float("nan")
            records.append(SweepRecord(alpha, beta, nan, nan, nan, error=str(exc)))
    return records


def summarize_sweep(records: list[SweepRecord]) -> dict:
    ok = [r for r in records if r.error is None]
    if not ok:
        return {"n_points": len(records), "n_failed": len(records)}
    scales = [r.fitted_scale for r in ok]
    shifts = [r.fitted_shift for r in ok]
    rels = [r.aligned_abs_rel for r in ok]
    return {
        "n_points": len(records),
        "n_failed": len(records) - len(ok),
        "scale_range": [min(scales), max(scales)],
        "shift_range": [min(shifts), max(shifts)],
        "scale_ratio": max(scales) / min(scales),
        "abs_rel_range": [min(rels), max(rels)],
        "abs_rel_spread": max(rels) - min(rels),
    }
