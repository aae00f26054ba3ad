"""Dense float64 tensors, the handful of differentiable primitives the
stabilizer needs, and the NTF tensor container format.

Tensors are plain ``torch.Tensor`` objects in float64. Reverse-mode gradients
come from torch autograd: every primitive here is define-by-run, so the graph
recorded while a loss is evaluated is the tape that ``backward`` replays.

Reductions run on the CPU with the thread count fixed by
:func:`configure_threads`; for a fixed thread count torch reduces in a fixed
order, so repeated runs are bit-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    MalformedHeaderError,
    PayloadSizeError,
    RejectedInputError,
    TruncatedPayloadError,
)

DTYPE = torch.float64
NTF_MAGIC = b"NTF1"

_ELEMENTWISE = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "max": torch.maximum,
    "min": torch.minimum,
}


def configure_threads(n: int | None = None) -> int:
    """Pin torch's intra-op thread count (``DYFN_THREADS`` when *n* is None)."""
    if n is None:
        env = os.environ.get("DYFN_THREADS")
        n = int(env) if env else (os.cpu_count() or 1)
    n = max(1, int(n))
    torch.set_num_threads(n)
    return n


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def elementwise(op: str, a: torch.Tensor, b) -> torch.Tensor:
    """Apply a binary op; *b* must match *a*'s shape or be a scalar."""
    if op not in _ELEMENTWISE:
        raise RejectedInputError(f"unknown elementwise op {op!r}")
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        b = torch.tensor(float(b), dtype=DTYPE)
    else:
        b = as_tensor(b)
    if b.numel() == 1 and b.dim() <= 1:
        b = b.reshape(())
    elif tuple(b.shape) != tuple(a.shape):
        raise RejectedInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _ELEMENTWISE[op](a, b)


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Same-padded cross-correlation of a ``C_in×H×W`` map with a
    ``C_out×C_in×k×k`` kernel (k odd)."""
    if x.dim() != 3 or kernel.dim() != 4:
        raise RejectedInputError("conv2d expects C×H×W input and 4-d kernel")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise RejectedInputError(f"kernel must be square with odd size, got {tuple(kernel.shape[-2:])}")
    if kernel.shape[1] != x.shape[0]:
        raise RejectedInputError(f"channel mismatch: input has {x.shape[0]}, kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise RejectedInputError("bias must have one entry per output channel")
    return F.conv2d(x.unsqueeze(0), kernel, bias, padding=k // 2)[0]


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # sqrt(0) has an infinite derivative; constant channels get sigma 0 and grad 0
    pos = v > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, v, torch.ones_like(v))), torch.zeros_like(v))


def channel_stats(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and population standard deviation over H×W."""
    if f.dim() != 3:
        raise RejectedInputError("channel_stats expects a C×H×W tensor")
    flat = f.reshape(f.shape[0], -1)
    mu = flat.mean(dim=1)
    var = ((flat - mu[:, None]) ** 2).mean(dim=1)
    return mu, _safe_sqrt(var)


# --- finite differences ---------------------------------------------------------


def finite_difference_grad(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn`` at ``x`` (no autograd)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(fn(x))
            flat[i] = orig - step
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a-n| / max(|a|,|n|, floor), elementwise, reduced by max."""
    a = analytic.detach().reshape(-1)
    n = numeric.detach().reshape(-1)
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def fd_noise_floor(value: float, step: float, tol: float) -> float:
    """Smallest gradient magnitude a central difference resolves to relative
    accuracy *tol*: roundoff in ``f`` is about ``eps*|f|``, divided by ``step``."""
    return 10.0 * float(np.finfo(np.float64).eps) * abs(value) / (step * tol)


def gradient_error(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> float:
    """Autograd vs central differences for scalar ``fn`` at ``x``, as a
    :func:`relative_error` whose floor is raised to the difference noise level."""
    xa = x.detach().clone().requires_grad_(True)
    out = fn(xa)
    (grad,) = torch.autograd.grad(out, xa, allow_unused=True)
    grad = torch.zeros_like(xa) if grad is None else grad
    numeric = finite_difference_grad(fn, x, step)
    return relative_error(grad, numeric, max(floor, fd_noise_floor(float(out.detach()), step, tol)))


# --- NTF container ----------------------------------------------------------------


def encode_tensor(name: str, t) -> bytes:
    arr = np.asarray(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype=np.float64)
    header = json.dumps({"name": name, "dtype": "f32", "shape": [int(s) for s in arr.shape]}).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return NTF_MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_tensor(buf: bytes) -> tuple[str, torch.Tensor]:
    if len(buf) < 8 or buf[:4] != NTF_MAGIC:
        raise MalformedHeaderError("missing NTF1 magic")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if 8 + hlen > len(buf):
        raise TruncatedPayloadError(f"header length {hlen} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("dtype") != "f32":
        raise MalformedHeaderError("header must be an object with dtype 'f32'")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
        raise MalformedHeaderError(f"invalid shape {shape!r}")
    name = header.get("name")
    if not isinstance(name, str):
        raise MalformedHeaderError("name must be a string")
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    payload = buf[8 + hlen :]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, shape {shape} needs {expected}")
    if len(payload) > expected:
        raise PayloadSizeError(f"payload has {len(payload)} bytes, shape {shape} needs {expected}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    return name, torch.from_numpy(arr.copy())


def write_tensor(path, name: str, t) -> None:
    """Write *t* as NTF (float32 payload); the file appears atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensor(name, t))
    os.replace(tmp, path)


def read_named_tensor(path) -> tuple[str, torch.Tensor]:
    return decode_tensor(Path(path).read_bytes())


def read_tensor(path) -> torch.Tensor:
    return read_named_tensor(path)[1]
