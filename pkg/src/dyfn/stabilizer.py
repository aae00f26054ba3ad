"""Dynamic feature normalisation: a recurrent stabiliser for streaming features.

Each frame's features are standardised channel-wise. A ConvGRU (or, for the
ablation, a plain GRU over spatially pooled features) carries a hidden state
across frames; two 1×1 heads turn that state into spatial maps ``sigma_hat``
and ``mu_hat`` which replace the frame's own statistics:

    F_consistent = sigma_hat * F_norm + mu_hat
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError, RejectedInputError
from .geometry import write_json_atomic
from .modulation import EPSILON, normalize
from .simulator import NOMINAL_BACKBONE_PARAMS
from .tensor_core import DTYPE, conv2d, read_named_tensor, write_tensor

SIGMA_FLOOR = 1e-4
BUDGET_FRACTION = 0.02
CELL_KINDS = ("convgru", "gru")
GATES = ("z", "r", "h")
HEAD_INITS = ("zero", "uniform")


@dataclass(frozen=True)
class DyfnConfig:
    channels: int = 8
    hidden_channels: int = 8
    kernel_size: int = 3
    cell: str = "convgru"
    raw_input: bool = True  # the recurrent cell sees F_t rather than F_norm
    head_init: str = "zero"
    epsilon: float = EPSILON
    backbone_params: int = NOMINAL_BACKBONE_PARAMS

    def validate(self) -> None:
        if self.channels < 1 or self.hidden_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"cell must be one of {CELL_KINDS}")
        if self.head_init not in HEAD_INITS:
            raise ConfigError(f"head_init must be one of {HEAD_INITS}")
        n = count_params(self)
        if n > BUDGET_FRACTION * self.backbone_params:
            raise ConfigError(
                f"{n} trainable parameters exceed {BUDGET_FRACTION:.0%} of the "
                f"{self.backbone_params}-parameter backbone"
            )


def count_params(cfg: DyfnConfig) -> int:
    c, ch, k = cfg.channels, cfg.hidden_channels, cfg.kernel_size
    if cfg.cell == "convgru":
        gates = 3 * (ch * (c + ch) * k * k + ch)
    else:
        gates = 3 * (ch * (c + ch) + ch)
    return gates + 2 * (c * ch + c)


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def positivity(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x) + SIGMA_FLOOR


def init_params(cfg: DyfnConfig, seed: int) -> dict[str, torch.Tensor]:
    """Deterministic initial parameters.

    Gate weights are uniform in ±sqrt(1/fan_in); the update-gate bias is -1 so
    the state moves slowly at first. The sigma head's bias makes
    ``sigma_hat = 1`` and the mu head's bias is 0; head weights are zero
    (``head_init="zero"``) or uniform like the gates.
    """
    cfg.validate()
    g = torch.Generator().manual_seed(int(seed))
    c, ch, k = cfg.channels, cfg.hidden_channels, cfg.kernel_size

    def uniform(shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return (torch.rand(shape, generator=g, dtype=DTYPE) * 2 - 1) * bound

    p = {}
    for gate in GATES:
        if cfg.cell == "convgru":
            p[f"W_{gate}"] = uniform((ch, c + ch, k, k), (c + ch) * k * k)
        else:
            p[f"W_{gate}"] = uniform((ch, c + ch), c + ch)
        p[f"b_{gate}"] = torch.full((ch,), -1.0 if gate == "z" else 0.0, dtype=DTYPE)
    for head in ("sigma", "mu"):
        if cfg.head_init == "zero":
            p[f"W_{head}"] = torch.zeros((c, ch, 1, 1), dtype=DTYPE)
        else:
            p[f"W_{head}"] = uniform((c, ch, 1, 1), ch)
    p["b_sigma"] = torch.full((c,), _softplus_inv(1.0 - SIGMA_FLOOR), dtype=DTYPE)
    p["b_mu"] = torch.zeros((c,), dtype=DTYPE)
    return p


def param_count(params: dict[str, torch.Tensor]) -> int:
    return sum(t.numel() for t in params.values())


@dataclass
class DyfnState:
    hidden: torch.Tensor
    step: int = 0

    @classmethod
    def zeros(cls, cfg: DyfnConfig, hw: tuple[int, int]) -> "DyfnState":
        if cfg.cell == "convgru":
            return cls(torch.zeros((cfg.hidden_channels, *hw), dtype=DTYPE), 0)
        return cls(torch.zeros((cfg.hidden_channels,), dtype=DTYPE), 0)


@dataclass
class DyfnOutput:
    f_consistent: torch.Tensor
    mu_hat: torch.Tensor
    sigma_hat: torch.Tensor
    state: DyfnState


def _check(cfg: DyfnConfig, f: torch.Tensor, state: DyfnState) -> None:
    if f.dim() != 3 or f.shape[0] != cfg.channels:
        raise RejectedInputError(f"feature must be {cfg.channels}×H×W, got {tuple(f.shape)}")
    expect = (cfg.hidden_channels, *f.shape[1:]) if cfg.cell == "convgru" else (cfg.hidden_channels,)
    if tuple(state.hidden.shape) != expect:
        raise RejectedInputError(f"hidden state {tuple(state.hidden.shape)} does not match {expect}")


def _heads(params, h_map: torch.Tensor, f_norm: torch.Tensor):
    sigma_hat = positivity(conv2d(h_map, params["W_sigma"], params["b_sigma"]))
    mu_hat = conv2d(h_map, params["W_mu"], params["b_mu"])
    return sigma_hat * f_norm + mu_hat, mu_hat, sigma_hat


def step(params, f_t: torch.Tensor, state: DyfnState, cfg: DyfnConfig) -> DyfnOutput:
    """One ConvGRU step followed by re-modulation of the normalised feature."""
    if cfg.cell == "gru":
        return step_gru(params, f_t, state, cfg)
    _check(cfg, f_t, state)
    f_norm, _, _ = normalize(f_t, cfg.epsilon)
    x = f_t if cfg.raw_input else f_norm
    h = state.hidden
    xh = torch.cat([x, h], dim=0)
    z = torch.sigmoid(conv2d(xh, params["W_z"], params["b_z"]))
    r = torch.sigmoid(conv2d(xh, params["W_r"], params["b_r"]))
    cand = torch.tanh(conv2d(torch.cat([x, r * h], dim=0), params["W_h"], params["b_h"]))
    h_new = (1 - z) * h + z * cand
    f_cons, mu_hat, sigma_hat = _heads(params, h_new, f_norm)
    return DyfnOutput(f_cons, mu_hat, sigma_hat, DyfnState(h_new, state.step + 1))


def step_gru(params, f_t: torch.Tensor, state: DyfnState, cfg: DyfnConfig) -> DyfnOutput:
    """GRU ablation: gates act on the spatially averaged feature and a vector
    hidden state, which is broadcast over H×W before the heads."""
    _check(cfg, f_t, state)
    f_norm, _, _ = normalize(f_t, cfg.epsilon)
    x = (f_t if cfg.raw_input else f_norm).mean(dim=(1, 2))
    h = state.hidden
    xh = torch.cat([x, h])
    z = torch.sigmoid(params["W_z"] @ xh + params["b_z"])
    r = torch.sigmoid(params["W_r"] @ xh + params["b_r"])
    cand = torch.tanh(params["W_h"] @ torch.cat([x, r * h]) + params["b_h"])
    h_new = (1 - z) * h + z * cand
    h_map = h_new[:, None, None].expand(-1, *f_t.shape[1:])
    f_cons, mu_hat, sigma_hat = _heads(params, h_map, f_norm)
    return DyfnOutput(f_cons, mu_hat, sigma_hat, DyfnState(h_new, state.step + 1))


def run_stream(params, features: list[torch.Tensor], cfg: DyfnConfig, state: DyfnState | None = None) -> list[DyfnOutput]:
    if not features:
        raise RejectedInputError("empty feature stream")
    state = state or DyfnState.zeros(cfg, tuple(features[0].shape[1:]))
    outs = []
    for f in features:
        out = step(params, f, state, cfg)
        outs.append(out)
        state = out.state
    return outs


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(out_dir, params: dict[str, torch.Tensor], cfg: DyfnConfig, seed: int, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, t in sorted(params.items()):
        write_tensor(out_dir / f"{name}.ntf", name, t.detach())
    doc = {"config": asdict(cfg), "seed": int(seed), "tensors": sorted(params), "n_params": param_count(params)}
    if extra:
        doc.update(extra)
    write_json_atomic(out_dir / "params.json", doc)
    return out_dir


def load_checkpoint(ckpt_dir) -> tuple[dict[str, torch.Tensor], DyfnConfig]:
    ckpt_dir = Path(ckpt_dir)
    doc = json.loads((ckpt_dir / "params.json").read_text())
    cfg = DyfnConfig(**doc["config"])
    cfg.validate()
    expected = init_params(cfg, 0)
    params = {}
    for name in doc["tensors"]:
        tname, t = read_named_tensor(ckpt_dir / f"{name}.ntf")
        if name not in expected or tuple(t.shape) != tuple(expected[name].shape):
            raise ConfigError(f"checkpoint tensor {name} does not match config")
        params[name] = t
    if set(params) != set(expected):
        raise ConfigError("checkpoint is missing parameter tensors")
    return params, cfg
