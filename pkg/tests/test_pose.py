import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dyfn.errors import ConfigError, DegenerateGeometryError, NoConsensusError
from dyfn.geometry import PoseSE3, Prediction, apply_pose
from dyfn.pose import (
    ReconConfig,
    RansacConfig,
    build_references,
    fuse_stream,
    procrustes_objective,
    read_ply,
    reconstruct,
    rotation_angle,
    simulator_provider,
    solve_pose_ransac,
    solve_procrustes,
    write_ply,
    write_reconstruction,
)
from dyfn.presets import preset
from dyfn.simulator import CorrespondenceSet, SceneSpec, generate_correspondences, generate_scene, simulate


def rodrigues(w):
    """Rotation matrices for a batch of rotation vectors (K×3)."""
    w = np.atleast_2d(w)
    th = np.linalg.norm(w, axis=1)
    k = np.where(th[:, None] > 0, w / np.where(th > 0, th, 1)[:, None], 0)
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -k[:, 2], k[:, 1], -k[:, 0]
    K = K - K.transpose(0, 2, 1)
    s, c = np.sin(th)[:, None, None], np.cos(th)[:, None, None]
    return np.eye(3) + s * K + (1 - c) * K @ K


def rz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


def planted(n=10, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    src = rng.normal(0, 1, (3, n)) + np.array([[0], [0], [4]])
    R = rodrigues(rng.normal(0, 1, 3))[0]
    t = rng.normal(0, 1, 3)
    dst = R @ src + t[:, None] + rng.normal(0, noise, (3, n))
    return CorrespondenceSet(src, dst), R, t


def test_identity_and_exact():
    src = np.array([[0.0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    p = solve_procrustes(CorrespondenceSet(src, src))
    assert np.abs(p.rotation - np.eye(3)).max() < 1e-12 and np.abs(p.translation).max() < 1e-12
    R = rz(90)
    p = solve_procrustes(CorrespondenceSet(src, R @ src + np.array([[1], [2], [3]])))
    assert np.abs(p.rotation - R).max() < 1e-12
    assert np.abs(p.translation - [1, 2, 3]).max() < 1e-12


def test_rotation_grid_oracle():
    c, R, t = planted(n=12, seed=1, noise=0.01)
    pose = solve_procrustes(c)
    best = procrustes_objective(pose, c)
    S = c.src - c.src.mean(axis=1, keepdims=True)
    D = c.dst - c.dst.mean(axis=1, keepdims=True)
    H = S @ D.T
    const = (S * S).sum() + (D * D).sum()
    step = math.radians(2)
    ax = np.arange(-math.pi, math.pi + step / 2, step)
    grid_min = np.inf
    for x in ax:
        Y, Z = np.meshgrid(ax, ax, indexing="ij")
        w = np.stack([np.full(Y.size, x), Y.ravel(), Z.ravel()], axis=1)
        w = w[np.linalg.norm(w, axis=1) <= math.pi]
        if not len(w):
            continue
        Rs = rodrigues(w)
        obj = const - 2 * np.einsum("kij,ji->k", Rs, H)
        grid_min = min(grid_min, float(obj.min()))
    # the translation is solved in closed form for both
    assert best <= grid_min + 1e-9
    tol = (S * S).sum() * (math.sqrt(3) * step / 2) ** 2
    assert grid_min - best <= tol


def test_global_optimality_under_perturbation():
    c, _, _ = planted(n=15, seed=2, noise=0.05)
    pose = solve_procrustes(c)
    base = procrustes_objective(pose, c)
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.normal(0, 1, 3)
        w *= 1e-3 / np.linalg.norm(w)
        q = PoseSE3(pose.rotation @ rodrigues(w)[0], pose.translation)
        assert procrustes_objective(q, c) >= base


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_rotations_are_proper(seed, mirror):
    rng = np.random.default_rng(seed)
    src = rng.normal(0, 1, (3, 8))
    dst = rng.normal(0, 1, (3, 8)) if not mirror else np.diag([1.0, 1.0, -1.0]) @ src
    R = solve_procrustes(CorrespondenceSet(src, dst)).rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


@pytest.mark.parametrize(
    "src",
    [
        np.ones((3, 5)),
        np.outer([1.0, 2.0, 3.0], np.arange(5.0)),
        np.zeros((3, 2)),
    ],
)
def test_degenerate_inputs(src):
    with pytest.raises(DegenerateGeometryError):
        solve_procrustes(CorrespondenceSet(src, src))


def test_ransac_clean_data():
    c, R, t = planted(n=30, seed=3)
    pose, mask, stats = solve_pose_ransac(c, RansacConfig(inlier_threshold=1e-6))
    assert mask.all() and stats.n_inliers == 30
    ref = solve_procrustes(c)
    assert np.abs(pose.rotation - ref.rotation).max() < 1e-12
    assert stats.iterations == 1


def test_ransac_coincident_and_small():
    pts = np.ones((3, 6))
    with pytest.raises(DegenerateGeometryError):
        solve_pose_ransac(CorrespondenceSet(pts, pts), RansacConfig(inlier_threshold=0.1, max_iterations=20))
    with pytest.raises(NoConsensusError):
        solve_pose_ransac(CorrespondenceSet(pts[:, :2], pts[:, :2]), RansacConfig(inlier_threshold=0.1))


def test_ransac_config_rejected():
    with pytest.raises(ConfigError):
        RansacConfig(inlier_threshold=0)
    with pytest.raises(ConfigError):
        RansacConfig(confidence=1.0)
    with pytest.raises(ConfigError):
        RansacConfig(min_sample=4)


@pytest.fixture(scope="module")
def perfect_seq():
    sim = simulate(preset("drift50"))
    seq = sim.sequence.prefix(30)
    return seq.with_predictions([Prediction(s.point_map.clone(), s.depth.clone(), s.valid_mask.clone()) for s in seq.samples])


def test_ransac_recovers_planted_mask(perfect_seq):
    j, refs = 25, build_references(25)
    c, inl = generate_correspondences(perfect_seq, j, refs, {k: perfect_seq.poses[k] for k in refs}, 100, 0.3, 5)
    cfg = RansacConfig(inlier_threshold=0.01, seed=1)
    pose, mask, _ = solve_pose_ransac(c, cfg)
    assert np.mean(mask == inl) >= 0.99
    assert rotation_angle(pose.rotation, perfect_seq.poses[j].rotation) < 1e-6
    again = solve_pose_ransac(c, cfg)
    assert np.array_equal(again[1], mask) and np.array_equal(again[0].rotation, pose.rotation)


def test_build_references():
    assert build_references(3) == [2]
    assert build_references(30) == [29, 25, 9]
    assert build_references(0) == []


def test_fusion_perfect(perfect_seq, tmp_path):
    rec = reconstruct(perfect_seq)
    assert rec.solved_fraction == 1.0 and rec.frames[0].status == "anchor"
    for f in rec.frames:
        g = perfect_seq.poses[f.index]
        assert np.abs(f.pose.rotation - g.rotation).max() < 1e-9
        assert np.abs(f.pose.translation - g.translation).max() < 1e-9
    gt_cloud = []
    for s, p in zip(perfect_seq.samples, perfect_seq.poses):
        m = s.valid_mask.numpy().reshape(-1) > 0
        gt_cloud.append(apply_pose(s.point_map.numpy().reshape(3, -1)[:, m], p))
    assert np.abs(rec.points - np.concatenate(gt_cloud, axis=1)).max() < 1e-9
    write_reconstruction(rec, tmp_path / "a")
    write_reconstruction(reconstruct(perfect_seq), tmp_path / "b")
    assert (tmp_path / "a/cloud.ply").read_bytes() == (tmp_path / "b/cloud.ply").read_bytes()


def test_odometry_mode(perfect_seq):
    rec = reconstruct(perfect_seq.prefix(12), ReconConfig(reference_mode="odometry"))
    assert rec.solved_fraction == 1.0
    assert all(rotation_angle(f.pose.rotation, perfect_seq.poses[f.index].rotation) < 1e-9 for f in rec.frames)


def test_two_correspondences_skip_frame(perfect_seq, caplog):
    seq = perfect_seq.prefix(4)
    base = simulator_provider(seq, ReconConfig())

    def provider(j, refs, poses):
        c, m = base(j, refs, poses)
        if j == 2:
            return c.subset(np.arange(2)), m[:2]
        return c, m

    with caplog.at_level(logging.WARNING):
        rec = fuse_stream(seq, provider, ReconConfig())
    assert rec.frames[2].status == "skipped" and rec.frames[2].pose is None
    assert [f.status for f in rec.frames] == ["anchor", "solved", "skipped", "solved"]
    assert "frame 2 skipped" in caplog.text


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 1, (3, 17))
    pix = rng.integers(0, 100, (2, 17))
    write_ply(tmp_path / "c.ply", pts, pix)
    p, q = read_ply(tmp_path / "c.ply")
    assert np.array_equal(p, pts.astype(np.float32).astype(np.float64))
    assert np.array_equal(q, pix)
    head = (tmp_path / "c.ply").read_bytes()[:60]
    assert head.startswith(b"ply\nformat binary_little_endian 1.0\nelement vertex 17\n")
    write_ply(tmp_path / "d.ply", pts)
    assert read_ply(tmp_path / "d.ply")[1] is None


def test_rotation_angle():
    assert rotation_angle(np.eye(3), np.eye(3)) == 0.0
    assert abs(rotation_angle(np.eye(3), rz(30)) - math.radians(30)) < 1e-12
    assert abs(rotation_angle(np.eye(3), rz(180)) - math.pi) < 1e-12
