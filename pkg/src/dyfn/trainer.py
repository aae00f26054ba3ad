"""Fine-tuning loop: only the stabiliser's parameters are optimised; the
synthetic encoder features and decoder stay frozen."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .alignment import AffineAlignment
from .errors import ConfigError, LossComponentError, NonFiniteError, SequenceError
from .geometry import Sequence, write_json_atomic
from .losses import STRATEGIES, LossReport, LossWeights, loss_total
from .simulator import (
    DecoderConstants,
    DriftSpec,
    SceneSpec,
    SimulationSpec,
    SyntheticDecoder,
    derive_seed,
    simulate,
)
from .stabilizer import DyfnConfig, DyfnState, init_params, run_stream, save_checkpoint
from .tensor_core import DTYPE, fd_noise_floor, finite_difference_grad, relative_error, write_tensor

log = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
LENGTH_GRID = (8, 12, 16, 24)


@dataclass(frozen=True)
class TrainConfig:
    clip_length: int = 12
    stride_min: int = 1
    stride_max: int = 5
    steps: int = 2000
    batch: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    strategy: str = "first_frame"
    shift_mode: str = "depth"
    seed: int = 0
    checkpoint_every: int = 500
    dyfn: DyfnConfig = field(default_factory=DyfnConfig)

    def validate(self) -> None:
        if self.clip_length < 2:
            raise ConfigError("clip length must be at least 2")
        if not 1 <= self.stride_min <= self.stride_max <= 5:
            raise ConfigError("stride range must lie within [1, 5]")
        if self.steps < 0 or self.batch < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps must be >= 0, batch and checkpoint interval >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        self.dyfn.validate()

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_json()
        return d


@dataclass
class TrainingData:
    sequence: Sequence
    features: list[torch.Tensor]
    decoder: SyntheticDecoder

    def __len__(self) -> int:
        return len(self.sequence)


@dataclass
class TrainLogEntry:
    step: int
    report: LossReport
    grad_norm: float
    wall_ms: float
    clip: list[int]

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "loss": self.report.to_json(),
            "grad_norm": self.grad_norm,
            "wall_ms": self.wall_ms,
            "clip": self.clip,
        }


@dataclass
class TrainResult:
    params: dict[str, torch.Tensor]
    log: list[TrainLogEntry]
    decoder_checksum: str


def admissible_clips(n_frames: int, cfg: TrainConfig) -> list[tuple[int, int]]:
    """Every (start, stride) whose strided clip fits inside the sequence."""
    out = []
    for stride in range(cfg.stride_min, cfg.stride_max + 1):
        span = (cfg.clip_length - 1) * stride
        out.extend((start, stride) for start in range(n_frames - span))
    return out


def sample_clip(n_frames: int, cfg: TrainConfig, step_seed: int) -> list[int] | None:
    """Frame indices of one clip drawn uniformly over admissible (start, stride)
    pairs, or None (logged) when the sequence is too short."""
    if n_frames < cfg.clip_length * cfg.stride_max:
        log.warning("sequence of %d frames too short for clip %d at stride %d; skipped", n_frames, cfg.clip_length, cfg.stride_max)
        return None
    pairs = admissible_clips(n_frames, cfg)
    rng = np.random.default_rng(step_seed)
    start, stride = pairs[int(rng.integers(len(pairs)))]
    return [start + i * stride for i in range(cfg.clip_length)]


def forward_clip(
    params: dict[str, torch.Tensor],
    data: TrainingData,
    idx: list[int],
    cfg: TrainConfig,
    loss_seed: int,
    alignment: AffineAlignment | None = None,
    strict: bool = True,
) -> LossReport:
    """Stabilise, decode and score one clip from a zero hidden state."""
    outs = run_stream(params, [data.features[i] for i in idx], cfg.dyfn)
    preds = [data.decoder.decode(o.f_consistent, i) for o, i in zip(outs, idx)]
    clip = Sequence([data.sequence.samples[i] for i in idx], preds)
    return loss_total(clip, cfg.weights, cfg.strategy, alignment, loss_seed, cfg.shift_mode, strict)


def _dump_diagnostic(out_dir: Path | None, step: int, idx: list[int], data: TrainingData, params, reason: str) -> None:
    if out_dir is None:
        return
    d = out_dir / "diagnostic"
    d.mkdir(parents=True, exist_ok=True)
    for i in idx:
        write_tensor(d / f"feat_{i:05d}.ntf", "feature", data.features[i])
    for name, t in params.items():
        write_tensor(d / f"param_{name}.ntf", name, t.detach())
    write_json_atomic(d / "diagnostic.json", {"step": step, "clip": idx, "reason": reason})


def train(data: TrainingData, cfg: TrainConfig, out_dir=None, init: dict[str, torch.Tensor] | None = None) -> TrainResult:
    """Adam on the total loss. Checkpoints go to ``out_dir/checkpoints/step_N``
    and the final parameters to ``out_dir/checkpoint``; the log is JSON lines."""
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    checksum = data.decoder.checksum()
    params = {k: v.clone() for k, v in (init or init_params(cfg.dyfn, derive_seed(cfg.seed, "init"))).items()}
    for t in params.values():
        t.requires_grad_(True)
    names = sorted(params)
    opt = torch.optim.Adam([params[k] for k in names], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    entries: list[TrainLogEntry] = []
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
    try:
        for step in range(cfg.steps):
            t0 = time.perf_counter()
            opt.zero_grad()
            reports, clips = [], []
            for b in range(cfg.batch):
                idx = sample_clip(len(data), cfg, derive_seed(cfg.seed, "clip", step, b))
                if idx is None:
                    raise SequenceError("training sequence is too short for the configured clip")
                try:
                    rep = forward_clip(params, data, idx, cfg, derive_seed(cfg.seed, "anchors", step, b))
                except LossComponentError as exc:
                    _dump_diagnostic(out_dir, step, idx, data, params, str(exc))
                    raise
                (rep.value / cfg.batch).backward()
                rep.value = None  # release the graph
                reports.append(rep)
                clips.extend(idx)
            grads = [params[k].grad for k in names]
            gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
            total = sum(r.total for r in reports) / cfg.batch
            if not (math.isfinite(total) and math.isfinite(gnorm)):
                _dump_diagnostic(out_dir, step, clips, data, params, "non-finite loss or gradient")
                raise NonFiniteError(f"non-finite loss ({total}) or gradient norm ({gnorm}) at step {step}")
            opt.step()
            rep = reports[0] if cfg.batch == 1 else _mean_report(reports)
            entry = TrainLogEntry(step, rep, gnorm, (time.perf_counter() - t0) * 1e3, clips)
            entries.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
            if out_dir is not None and (step + 1) % cfg.checkpoint_every == 0:
                _verify_frozen(data, checksum)
                save_checkpoint(out_dir / "checkpoints" / f"step_{step + 1:06d}", params, cfg.dyfn, cfg.seed, {"step": step + 1})
    finally:
        if log_fh is not None:
            log_fh.close()
    _verify_frozen(data, checksum)
    final = {k: v.detach().clone() for k, v in params.items()}
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", final, cfg.dyfn, cfg.seed, {"step": cfg.steps, "decoder_checksum": checksum})
    return TrainResult(final, entries, checksum)


def _mean_report(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    comps = {k: sum(r.components[k] for r in reports) / n for k in reports[0].components}
    flags = sorted({f for r in reports for f in r.flags})
    return LossReport(sum(r.total for r in reports) / n, comps, reports[0].alignment_used, flags)


def _verify_frozen(data: TrainingData, checksum: str) -> None:
    now = data.decoder.checksum()
    if now != checksum:
        raise ConfigError(f"decoder changed during training ({checksum[:12]} -> {now[:12]})")


def trailing_mean(values: list[float], end: int, window: int = 100) -> float:
    chunk = values[max(0, end - window) : end]
    return float(np.mean(chunk))


# --- gradient check -----------------------------------------------------------------


def tiny_fixture(channels: int = 4, hw: int = 8, length: int = 3, seed: int = 0, noise: float = 0.05) -> TrainingData:
    spec = SimulationSpec(
        SceneSpec(kind="plane-room", height=hw, width=hw, length=length, seed=seed),
        DriftSpec(scale_volatility=0.05, shift_volatility=0.02, feature_noise=noise, channels=channels),
        DecoderConstants(),
        seed,
    )
    sim = simulate(spec)
    return TrainingData(sim.sequence, sim.stream.features, sim.decoder)


def random_params(cfg: DyfnConfig, seed: int, bias_scale: float = 0.3) -> dict[str, torch.Tensor]:
    """Uniform random weights *and* biases, so no parameter sits at a special value."""
    p = init_params(replace(cfg, head_init="uniform"), seed)
    g = torch.Generator().manual_seed(derive_seed(seed, "biases") % (2**63))
    for k in p:
        if k.startswith("b_"):
            p[k] = p[k] + bias_scale * (torch.rand(p[k].shape, generator=g, dtype=DTYPE) * 2 - 1)
    return p


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    max_rel_err: float
    analytic_norms: dict[str, float]
    floor: float = 0.0

    @property
    def ok(self) -> bool:
        return self.max_rel_err < GRAD_TOLERANCE

    def to_json(self) -> dict:
        return {"per_tensor": self.per_tensor, "max_rel_err": self.max_rel_err, "analytic_norms": self.analytic_norms, "floor": self.floor, "ok": self.ok}


def grad_check(
    data: TrainingData | None = None,
    cfg: TrainConfig | None = None,
    params: dict[str, torch.Tensor] | None = None,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """End-to-end autograd vs central differences for every parameter tensor.

    The sequence alignment is solved once at the base point and then held
    fixed, matching how the training graph treats it. Gradient entries below
    the central-difference roundoff level ``10*eps*|L|/(step*tol)`` are
    compared against that level instead of their own magnitude.
    """
    data = data or tiny_fixture()
    c = data.features[0].shape[0]
    cfg = cfg or TrainConfig(clip_length=len(data), dyfn=DyfnConfig(channels=c, hidden_channels=c))
    params = params or random_params(cfg.dyfn, 7)
    idx = list(range(len(data)))
    base = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    rep = forward_clip(base, data, idx, cfg, 0, strict=False)
    align = rep.alignment_used
    rep.value.backward()
    floor = max(floor, fd_noise_floor(rep.total, step, GRAD_TOLERANCE))
    per, norms = {}, {}
    for name in sorted(base):
        analytic = base[name].grad if base[name].grad is not None else torch.zeros_like(base[name])

        def fn(x, name=name):
            p = {k: v.detach() for k, v in base.items()}
            p[name] = x
            return forward_clip(p, data, idx, cfg, 0, align, strict=False).value

        numeric = finite_difference_grad(fn, base[name].detach(), step)
        per[name] = relative_error(analytic, numeric, floor)
        norms[name] = float(analytic.norm())
    return GradCheckReport(per, max(per.values()), norms, floor)
