"""Desk-scale stand-in for a frozen geometry backbone and its datasets.

* ``generate_scene`` ray-casts parametric scenes along a camera path.
* ``encode_with_drift`` synthesises latent features whose channel statistics
  follow random walks, so decoded predictions drift in scale and shift.
* ``SyntheticDecoder`` maps features back to point maps with an exact
  statistics-to-(scale, shift) coupling.
* ``generate_correspondences`` pairs frame pixels with reference-frame world
  points, planting a known fraction of outliers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .alignment import solve_affine_frame
from .errors import ConfigError, EmptyCorrespondenceError
from .geometry import FrameSample, Intrinsics, PoseSE3, Prediction, Sequence, write_json_atomic, write_sequence
from .tensor_core import DTYPE, channel_stats, read_tensor, write_tensor

SCENE_KINDS = ("plane-room", "sine-terrain", "sphere-field")
MIN_VALID_FRACTION = 0.3
# nominal parameter count of the simulated frozen encoder+decoder
NOMINAL_BACKBONE_PARAMS = 250_000


def derive_seed(seed: int, *purpose) -> int:
    """Stable sub-seed from a master seed and a purpose tag."""
    h = hashlib.sha256(json.dumps([int(seed), *map(str, purpose)]).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def _rng(seed: int, *purpose) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))


# --- scenes --------------------------------------------------------------------------


@dataclass
class SceneSpec:
    kind: str = "plane-room"
    extent: float = 4.0
    height: int = 24
    width: int = 24
    fov_deg: float = 60.0
    length: int = 16
    velocity: tuple[float, float, float] = (0.02, 0.0, 0.03)
    yaw_rate: float = 0.01
    n_objects: int = 3
    seed: int = 0
    focal: float | None = None

    def intrinsics(self) -> Intrinsics:
        f = self.focal if self.focal is not None else (self.width / 2) / math.tan(math.radians(self.fov_deg) / 2)
        return Intrinsics(float(f), (self.width - 1) / 2, (self.height - 1) / 2)

    def validate(self) -> None:
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"unknown scene kind {self.kind!r}")
        if self.length < 1:
            raise ConfigError("camera path must have at least one frame")
        if self.height < 2 or self.width < 2 or self.extent <= 0:
            raise ConfigError("resolution must be at least 2×2 and extent positive")
        vals = [*self.velocity, self.yaw_rate, self.extent, self.fov_deg]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("camera path parameters must be finite")

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "velocity" in d:
            d["velocity"] = tuple(float(v) for v in d["velocity"])
        return cls(**d)


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def camera_poses(spec: SceneSpec) -> list[PoseSE3]:
    """Camera-to-world poses; frame 0 is the world frame."""
    v = np.asarray(spec.velocity, dtype=np.float64)
    return [PoseSE3(_rot_y(spec.yaw_rate * t), v * t) for t in range(spec.length)]


def _ray_box(o, d, lo, hi, inside: bool):
    """Slab intersection; returns the exit distance when the origin is inside
    the box, otherwise the entry distance (inf on a miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    if inside:
        return np.where(tmax > 0, tmax, np.inf)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


class _Scene:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        e = spec.extent
        rng = _rng(spec.seed, "scene")
        self.objects = []
        if spec.kind == "plane-room":
            self.room_lo = np.array([-e, -0.6 * e, -e])
            self.room_hi = np.array([e, 0.6 * e, e])
            for _ in range(spec.n_objects):
                c = np.array([rng.uniform(-0.6, 0.6) * e, rng.uniform(0.0, 0.4) * e, rng.uniform(0.35, 0.75) * e])
                half = rng.uniform(0.08, 0.18, size=3) * e
                self.objects.append((c - half, c + half))
        elif spec.kind == "sphere-field":
            self.back = 2.0 * e
            for _ in range(spec.n_objects):
                c = np.array([rng.uniform(-0.5, 0.5) * e, rng.uniform(-0.3, 0.3) * e, rng.uniform(0.6, 1.6) * e])
                self.objects.append((c, rng.uniform(0.15, 0.35) * e))
        else:
            self.ground = 0.4 * e
            self.amp = 0.08 * e
            self.k = rng.uniform(1.5, 2.5, size=2) / e
            self.phase = rng.uniform(0, 2 * np.pi, size=2)
            self.max_dist = 6.0 * e

    def check_camera(self, c: np.ndarray) -> None:
        if self.spec.kind == "plane-room":
            margin = 0.05 * self.spec.extent
            if np.any(c <= self.room_lo + margin) or np.any(c >= self.room_hi - margin):
                raise ConfigError("camera path leaves the room")
            for lo, hi in self.objects:
                if np.all(c > lo) and np.all(c < hi):
                    raise ConfigError("camera path enters an object")

    def terrain_height(self, x, z):
        return self.ground + self.amp * np.sin(self.k[0] * x + self.phase[0]) * np.cos(self.k[1] * z + self.phase[1])

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Hit distance along unnormalised rays *d* (N×3) from origin *o*."""
        kind = self.spec.kind
        if kind == "plane-room":
            lam = _ray_box(o, d, self.room_lo, self.room_hi, inside=True)
            for lo, hi in self.objects:
                lam = np.minimum(lam, _ray_box(o, d, lo, hi, inside=False))
            return lam
        if kind == "sphere-field":
            with np.errstate(divide="ignore"):
                lam = np.where(d[:, 2] > 0, (self.back - o[2]) / d[:, 2], np.inf)
            for c, r in self.objects:
                oc = o - c
                a = np.einsum("ij,ij->i", d, d)
                b = 2 * d @ oc
                cc = oc @ oc - r * r
                disc = b * b - 4 * a * cc
                root = np.sqrt(np.maximum(disc, 0.0))
                t_near = (-b - root) / (2 * a)
                ok = (disc >= 0) & (t_near > 1e-9)
                lam = np.minimum(lam, np.where(ok, t_near, np.inf))
            return lam
        return self._intersect_terrain(o, d)

    def _terrain_gap(self, o, d, t):
        p = o[None, :] + t[:, None] * d
        return p[:, 1] - self.terrain_height(p[:, 0], p[:, 2])

    def _intersect_terrain(self, o, d):
        # march to bracket the first crossing, then bisect to machine precision
        n = d.shape[0]
        lam_max = self.max_dist / np.linalg.norm(d, axis=1)
        steps = 400
        prev_t = np.zeros(n)
        prev_v = self._terrain_gap(o, d, prev_t)
        found = np.zeros(n, dtype=bool)
        lo = np.zeros(n)
        hi = np.zeros(n)
        for i in range(1, steps + 1):
            t = lam_max * i / steps
            v = self._terrain_gap(o, d, t)
            new = (~found) & (prev_v < 0) & (v >= 0)
            lo[new], hi[new] = prev_t[new], t[new]
            found |= new
            prev_t, prev_v = t, v
        idx = np.flatnonzero(found)
        a, b = lo[idx], hi[idx]
        for _ in range(200):
            m = 0.5 * (a + b)
            pos = self._terrain_gap(o, d[idx], m) >= 0
            b = np.where(pos, m, b)
            a = np.where(pos, a, m)
        lam = np.full(n, np.inf)
        lam[idx] = 0.5 * (a + b)
        return lam


def pixel_rays(intr: Intrinsics, h: int, w: int) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape (H*W)×3 (row-major)."""
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    x = (u - intr.cx) / intr.f
    y = (v - intr.cy) / intr.f
    return np.stack([x.ravel(), y.ravel(), np.ones(h * w)], axis=1)


def render_frame(scene: _Scene, pose: PoseSE3, intr: Intrinsics, h: int, w: int) -> FrameSample:
    rays = pixel_rays(intr, h, w)
    lam = scene.intersect(pose.translation, rays @ pose.rotation.T)
    valid = np.isfinite(lam)
    pts = np.where(valid[:, None], rays * np.where(valid, lam, 0.0)[:, None], 0.0)
    pm = torch.from_numpy(pts.T.reshape(3, h, w).copy())
    depth = pm[2].clone()
    mask = torch.from_numpy(valid.reshape(h, w).astype(np.float64))
    return FrameSample(pm, depth, mask, intr)


def generate_scene(spec: SceneSpec) -> Sequence:
    """Ground-truth sequence (no predictions) with camera-to-world poses."""
    spec.validate()
    scene = _Scene(spec)
    poses = camera_poses(spec)
    intr = spec.intrinsics()
    samples = []
    for t, pose in enumerate(poses):
        scene.check_camera(pose.translation)
        s = render_frame(scene, pose, intr, spec.height, spec.width)
        frac = float(s.valid_mask.mean())
        if frac < MIN_VALID_FRACTION:
            raise ConfigError(f"frame {t} sees only {frac:.0%} valid geometry")
        samples.append(s)
    seq = Sequence(samples, None, 1, poses, {"scene": _jsonable(asdict(spec))})
    seq.validate()
    return seq


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d))


# --- drifting encoder ------------------------------------------------------------------------


@dataclass
class DriftSpec:
    scale_volatility: float = 0.05  # std of log-scale steps
    shift_volatility: float = 0.0  # std of shift steps, scene units
    scale_trend: float = 0.0  # mean log-scale step
    shift_trend: float = 0.0  # mean shift step
    feature_noise: float = 0.0  # std of white noise added to features
    channels: int = 8
    mu0: list[float] | None = None
    sigma0: list[float] | None = None
    smoothing: float = 1.5  # gaussian filter width (pixels) of feature content

    def validate(self) -> None:
        if min(self.scale_volatility, self.shift_volatility, self.feature_noise) < 0:
            raise ConfigError("volatilities and noise must be non-negative")
        if self.channels < 1:
            raise ConfigError("need at least one channel")
        for name in ("mu0", "sigma0"):
            v = getattr(self, name)
            if v is not None and len(v) != self.channels:
                raise ConfigError(f"{name} needs {self.channels} entries")
        if self.sigma0 is not None and min(self.sigma0) <= 0:
            raise ConfigError("sigma0 must be positive")

    def initial_stats(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = _rng(seed, "initial-stats")
        mu = rng.uniform(-0.5, 0.5, self.channels)
        sigma = rng.uniform(1.5, 2.5, self.channels)
        if self.mu0 is not None:
            mu = np.asarray(self.mu0, dtype=np.float64)
        if self.sigma0 is not None:
            sigma = np.asarray(self.sigma0, dtype=np.float64)
        return mu, sigma

    @classmethod
    def from_json(cls, d: dict) -> "DriftSpec":
        return cls(**d)


@dataclass
class DecoderConstants:
    a_s: float = 1.0  # log-scale per unit of mean channel std
    a_t: float = 0.5  # shift per unit of mean channel mean
    a_n: float = 0.5  # relative depth error per unit of standardised-feature deviation


@dataclass
class EncodedStream:
    features: list[torch.Tensor]
    patterns: list[torch.Tensor]
    trace: list[tuple[float, float]]  # decoder (scale, shift) per frame
    mu0: np.ndarray
    sigma0: np.ndarray


def _standardize(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    flat = flat / flat.std(axis=1, keepdims=True)
    return flat.reshape(x.shape)


def content_pattern(sample: FrameSample, channels: int, smoothing: float, seed: int, index: int) -> np.ndarray:
    """Zero-mean, unit-std spatial content per channel: a random mix of the
    frame's inverse depth and smooth noise."""
    h, w = sample.hw
    rng = _rng(seed, "pattern", index)
    valid = sample.valid_mask.numpy() > 0
    inv = np.where(valid, 1.0 / np.where(valid, sample.depth.numpy(), 1.0), 0.0)
    inv = (inv - inv.mean()) / (inv.std() + 1e-12)
    noise = rng.standard_normal((channels, h, w))
    noise = np.stack([gaussian_filter(n, smoothing, mode="wrap") for n in noise])
    noise = _standardize(noise)
    mix = rng.uniform(-1.0, 1.0, channels)
    return _standardize(mix[:, None, None] * inv[None] + noise)


def drift_walks(drift: DriftSpec, length: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative log-scale and shift walks, both zero at frame 0."""
    rng = _rng(seed, "drift-walk")
    ds = drift.scale_trend + drift.scale_volatility * rng.standard_normal(length)
    dt = drift.shift_trend + drift.shift_volatility * rng.standard_normal(length)
    ds[0] = dt[0] = 0.0
    return np.cumsum(ds), np.cumsum(dt)


def encode_with_drift(
    seq: Sequence,
    drift: DriftSpec,
    seed: int,
    consts: DecoderConstants | None = None,
) -> EncodedStream:
    """Synthesise per-frame features whose statistics follow the drift walks.

    All channels share one multiplicative factor on sigma chosen so that the
    decoder's scale follows ``s0 * exp(w_t)``; the channel means move together
    so the decoder's shift follows ``t0 + v_t``. The returned trace holds the
    decoder (scale, shift) realised from the actual feature statistics.
    """
    drift.validate()
    consts = consts or DecoderConstants()
    mu0, sigma0 = drift.initial_stats(seed)
    log_walk, shift_walk = drift_walks(drift, len(seq), seed)
    sbar = sigma0.mean()
    feats, pats, trace = [], [], []
    for t, sample in enumerate(seq.samples):
        pat = content_pattern(sample, drift.channels, drift.smoothing, seed, t)
        m = max(1.0 + log_walk[t] / (consts.a_s * sbar), 0.05)
        sigma = sigma0 * m
        mu = mu0 + shift_walk[t] / consts.a_t
        f = mu[:, None, None] + sigma[:, None, None] * pat
        if drift.feature_noise > 0:
            f = f + drift.feature_noise * _rng(seed, "feature-noise", t).standard_normal(f.shape)
        ft = torch.from_numpy(f)
        mu_r, sig_r = channel_stats(ft)
        trace.append((math.exp(consts.a_s * float(sig_r.mean())), consts.a_t * float(mu_r.mean())))
        feats.append(ft)
        pats.append(torch.from_numpy(pat))
    return EncodedStream(feats, pats, trace, mu0, sigma0)


# --- decoder -----------------------------------------------------------------------------


class SyntheticDecoder:
    """Frozen decoder: ``exp(a_s*mean(sigma_F)) * G*(1+r) + a_t*mean(mu_F) * z``.

    ``G`` is the frame's canonical geometry and ``r`` is ``a_n`` times the
    channel-mean deviation of the standardised features from the frame's
    canonical content pattern, so ``r`` vanishes for noise-free features.
    """

    def __init__(self, geometry: list[torch.Tensor], patterns: list[torch.Tensor], masks: list[torch.Tensor], consts: DecoderConstants | None = None):
        self.geometry = geometry
        self.patterns = patterns
        self.masks = masks
        self.consts = consts or DecoderConstants()

    @classmethod
    def from_stream(cls, seq: Sequence, stream: EncodedStream, consts: DecoderConstants | None = None) -> "SyntheticDecoder":
        return cls([s.point_map for s in seq.samples], stream.patterns, [s.valid_mask for s in seq.samples], consts)

    def __len__(self) -> int:
        return len(self.geometry)

    def canonical(self, mu0, sigma0) -> tuple[float, float]:
        c = self.consts
        return math.exp(c.a_s * float(np.mean(sigma0))), c.a_t * float(np.mean(mu0))

    def decode(self, f: torch.Tensor, index: int) -> Prediction:
        c = self.consts
        mu, sigma = channel_stats(f)
        safe = torch.where(sigma > 0, sigma, torch.ones_like(sigma))
        std = (f - mu[:, None, None]) / safe[:, None, None]
        r = c.a_n * (std - self.patterns[index]).mean(dim=0)
        scale = torch.exp(c.a_s * sigma.mean())
        shift = c.a_t * mu.mean()
        mask = self.masks[index]
        g = self.geometry[index]
        pm = scale * g * (1.0 + r)
        pm = torch.cat([pm[:2], (pm[2] + shift)[None]], dim=0) * mask
        return Prediction(pm, pm[2], mask)

    def for_frame(self, index: int):
        return lambda f: self.decode(f, index)

    def checksum(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.consts), sort_keys=True).encode())
        for group in (self.geometry, self.patterns, self.masks):
            for t in group:
                h.update(np.ascontiguousarray(t.detach().numpy()).tobytes())
        return h.hexdigest()


def decode(dec: SyntheticDecoder, f: torch.Tensor, index: int = 0) -> Prediction:
    return dec.decode(f, index)


# --- correspondences ------------------------------------------------------------------------


@dataclass
class CorrespondenceSet:
    src: np.ndarray  # 3×N camera-frame points of the current frame
    dst: np.ndarray  # 3×N world-frame points from reference frames
    weights: np.ndarray | None = None
    ref_index: np.ndarray | None = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64)
        self.dst = np.asarray(self.dst, dtype=np.float64)
        if self.src.shape != self.dst.shape or self.src.ndim != 2 or self.src.shape[0] != 3:
            raise ConfigError("src and dst must both be 3×N")

    def __len__(self) -> int:
        return self.src.shape[1]

    def subset(self, idx) -> "CorrespondenceSet":
        w = None if self.weights is None else self.weights[idx]
        r = None if self.ref_index is None else self.ref_index[idx]
        return CorrespondenceSet(self.src[:, idx], self.dst[:, idx], w, r)


def _reference_affine(seq: Sequence, k: int) -> tuple[float, float]:
    """(s, t) with reference prediction depth ≈ s*gt + t."""
    s = seq.samples[k]
    fit = solve_affine_frame(s.depth, seq.predictions[k].depth, s.valid_mask)
    return fit.s, fit.t


def generate_correspondences(
    seq: Sequence,
    j: int,
    references: list[int],
    ref_poses: dict[int, PoseSE3],
    n_per_ref: int = 100,
    outlier_fraction: float = 0.0,
    seed: int = 0,
    occlusion_tol: float = 0.01,
) -> tuple[CorrespondenceSet, np.ndarray]:
    """Pair frame-*j* prediction points with world points seen by references.

    Inlier pairs share a ground-truth world point. The reference side is the
    reference prediction's frame-level affine model evaluated at that point's
    exact sub-pixel location, lifted to world by ``ref_poses[k]``; perfect
    predictions therefore give exactly consistent pairs. A ``round(f*N)``
    subset of pairs has its world point replaced by a uniformly drawn one.
    Returns the set and the planted inlier mask.
    """
    if seq.poses is None or seq.predictions is None:
        raise ConfigError("correspondence generation needs GT poses and predictions")
    if not 0 <= outlier_fraction < 1:
        raise ConfigError("outlier fraction must lie in [0, 1)")
    rng = _rng(seed, "correspondences", j)
    sample = seq.samples[j]
    h, w = sample.hw
    intr = sample.intrinsics
    gt_pose_j = seq.poses[j]
    valid = np.flatnonzero(sample.valid_mask.numpy().ravel() > 0)
    gt_pts = sample.point_map.numpy().reshape(3, -1)
    pred_pts = seq.predictions[j].point_map.detach().numpy().reshape(3, -1)
    srcs, dsts, refs = [], [], []
    for k in references:
        sk = seq.samples[k]
        sk_fit = _reference_affine(seq, k)
        pose_k_inv = seq.poses[k].inverse()
        cand = rng.permutation(valid)
        X = gt_pose_j.rotation @ gt_pts[:, cand] + gt_pose_j.translation[:, None]
        q = pose_k_inv.rotation @ X + pose_k_inv.translation[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = q[0] / q[2] * intr.f + intr.cx
            v = q[1] / q[2] * intr.f + intr.cy
        ok = (q[2] > 1e-6) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        ui = np.clip(np.rint(np.nan_to_num(u)), 0, w - 1).astype(int)
        vi = np.clip(np.rint(np.nan_to_num(v)), 0, h - 1).astype(int)
        ref_depth = sk.depth.numpy()[vi, ui]
        ref_valid = sk.valid_mask.numpy()[vi, ui] > 0
        ok &= ref_valid & (np.abs(ref_depth - q[2]) <= occlusion_tol * np.abs(q[2]))
        sel = np.flatnonzero(ok)[:n_per_ref]
        if sel.size == 0:
            continue
        s_k, t_k = sk_fit
        qk = s_k * q[:, sel]
        qk[2] += t_k
        pose_ref = ref_poses[k]
        srcs.append(pred_pts[:, cand[sel]])
        dsts.append(pose_ref.rotation @ qk + pose_ref.translation[:, None])
        refs.append(np.full(sel.size, k))
    if not srcs:
        raise EmptyCorrespondenceError(f"frame {j} shares no visible geometry with references {references}")
    src = np.concatenate(srcs, axis=1)
    dst = np.concatenate(dsts, axis=1)
    ref_idx = np.concatenate(refs)
    n = src.shape[1]
    inlier = np.ones(n, dtype=bool)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        out_idx = rng.choice(n, size=n_out, replace=False)
        lo, hi = dst.min(axis=1), dst.max(axis=1)
        pad = 0.25 * (hi - lo) + 1e-3
        dst = dst.copy()
        # uniform over the padded bounding box of the reference cloud
        dst[:, out_idx] = (lo - pad)[:, None] + (hi - lo + 2 * pad)[:, None] * rng.random((3, n_out))
        inlier[out_idx] = False
    return CorrespondenceSet(src, dst, None, ref_idx), inlier


# --- on-disk dataset -------------------------------------------------------------------------


@dataclass
class SimulationSpec:
    scene: SceneSpec = field(default_factory=SceneSpec)
    drift: DriftSpec = field(default_factory=DriftSpec)
    decoder: DecoderConstants = field(default_factory=DecoderConstants)
    seed: int = 0

    @classmethod
    def from_json(cls, d: dict) -> "SimulationSpec":
        seed = int(d.get("seed", 0))
        scene = dict(d.get("scene", {}))
        scene.setdefault("seed", seed)
        return cls(
            SceneSpec.from_json(scene),
            DriftSpec.from_json(d.get("drift", {})),
            DecoderConstants(**d.get("decoder", {})),
            seed,
        )

    def to_json(self) -> dict:
        return _jsonable({"scene": asdict(self.scene), "drift": asdict(self.drift), "decoder": asdict(self.decoder), "seed": self.seed})


@dataclass
class SimulatedData:
    sequence: Sequence
    stream: EncodedStream
    decoder: SyntheticDecoder
    spec: SimulationSpec


def simulate(spec: SimulationSpec) -> SimulatedData:
    seq = generate_scene(spec.scene)
    stream = encode_with_drift(seq, spec.drift, spec.seed, spec.decoder)
    return SimulatedData(seq, stream, SyntheticDecoder.from_stream(seq, stream, spec.decoder), spec)


def write_simulation(data: SimulatedData, out_dir) -> Path:
    """Write GT manifest, features, content patterns, decoder constants and
    the planted trace under *out_dir*."""
    out_dir = Path(out_dir)
    write_sequence(data.sequence, out_dir)
    (out_dir / "features").mkdir(exist_ok=True)
    (out_dir / "decoder").mkdir(exist_ok=True)
    for t, (f, p) in enumerate(zip(data.stream.features, data.stream.patterns)):
        write_tensor(out_dir / f"features/feat_{t:05d}.ntf", "feature", f)
        write_tensor(out_dir / f"decoder/pattern_{t:05d}.ntf", "pattern", p)
    write_json_atomic(out_dir / "decoder.json", {"constants": asdict(data.decoder.consts), "length": len(data.sequence)})
    write_json_atomic(
        out_dir / "trace.json",
        {
            "scale": [s for s, _ in data.stream.trace],
            "shift": [t for _, t in data.stream.trace],
            "mu0": data.stream.mu0.tolist(),
            "sigma0": data.stream.sigma0.tolist(),
        },
    )
    write_json_atomic(out_dir / "simulation.json", data.spec.to_json())
    return out_dir


def load_simulation(data_dir, decoder_path=None) -> tuple[Sequence, list[torch.Tensor], SyntheticDecoder]:
    """Reload a simulated dataset. Features and patterns come back at float32
    precision, so the decoder is rebuilt from the stored patterns."""
    from .geometry import load_sequence
    from .errors import MissingFileError

    data_dir = Path(data_dir)
    seq = load_sequence(data_dir / "manifest.json")
    decoder_path = Path(decoder_path) if decoder_path is not None else data_dir / "decoder.json"
    if not decoder_path.is_file():
        raise MissingFileError(f"missing decoder description {decoder_path}")
    doc = json.loads(decoder_path.read_text())
    base = decoder_path.parent
    feats, pats = [], []
    for t in range(len(seq)):
        fp, pp = data_dir / f"features/feat_{t:05d}.ntf", base / f"decoder/pattern_{t:05d}.ntf"
        for p in (fp, pp):
            if not p.is_file():
                raise MissingFileError(f"missing tensor file {p}")
        feats.append(read_tensor(fp))
        pats.append(read_tensor(pp))
    dec = SyntheticDecoder([s.point_map for s in seq.samples], pats, [s.valid_mask for s in seq.samples], DecoderConstants(**doc["constants"]))
    return seq, feats, dec
