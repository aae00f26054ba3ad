import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dyfn.errors import RejectedInputError
from dyfn.modulation import ModulationParams, default_grid, modulate, normalize, run_sweep, summarize_sweep
from dyfn.presets import preset
from dyfn.simulator import simulate
from dyfn.tensor_core import DTYPE, channel_stats


@pytest.fixture(scope="module")
def sim():
    return simulate(preset("drift50"))


def test_normalize_constant():
    f = torch.full((2, 3, 3), 7.0, dtype=DTYPE)
    fn, mu, sigma = normalize(f, 1e-6)
    assert torch.all(fn.abs() < 1e-12)
    assert mu.tolist() == [7.0, 7.0] and sigma.tolist() == [0.0, 0.0]


def test_normalize_standard_channel():
    g = torch.Generator().manual_seed(0)
    f = torch.randn(3, 6, 6, generator=g, dtype=DTYPE)
    mu, sigma = channel_stats(f)
    f = (f - mu[:, None, None]) / sigma[:, None, None]
    fn, _, _ = normalize(f, 1e-15)
    assert (fn - f).abs().max() < 1e-9


def test_normalize_random_stats(gen):
    f = 3 * torch.randn(8, 6, 6, generator=gen, dtype=DTYPE) + 2
    fn, _, sigma = normalize(f)
    m, s = channel_stats(fn)
    assert m.abs().max() < 1e-12
    lo = 1 - 1e-6 / sigma.min()
    assert torch.all(s <= 1 + 1e-12) and torch.all(s >= lo - 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_identity_round_trip_error_is_epsilon_scaled(seed, scale):
    # the only departure from identity is -eps * f_norm
    g = torch.Generator().manual_seed(seed)
    f = scale * torch.randn(4, 5, 5, generator=g, dtype=DTYPE)
    fn, mu, sigma = normalize(f, 1e-6)
    back = modulate(fn, mu, sigma, ModulationParams(1, 1, 1e-6))
    assert (back - f + 1e-6 * fn).abs().max() < 1e-12 * (1 + f.abs().max())


def test_identity_round_trip_on_simulated_features(sim):
    for f in sim.stream.features[:10]:
        back = modulate(*normalize(f, 1e-6), ModulationParams(1, 1, 1e-6))
        assert (back - f).abs().max() < 1e-6 * f.abs().max()


def test_modulate_alpha_beta(gen):
    f = torch.randn(4, 6, 6, generator=gen, dtype=DTYPE) + 1
    fn, mu, sigma = normalize(f)
    m2, s2 = channel_stats(modulate(fn, mu, sigma, ModulationParams(2, 1)))
    assert (m2 - 2 * mu).abs().max() < 1e-9 and (s2 - sigma).abs().max() < 1e-5
    _, sh = channel_stats(modulate(fn, mu, sigma, ModulationParams(1, 0.5)))
    assert (sh - 0.5 * sigma).abs().max() < 1e-5


def test_params_rejected():
    with pytest.raises(RejectedInputError):
        ModulationParams(0, 1)
    with pytest.raises(RejectedInputError):
        ModulationParams(1, 1, 0)
    with pytest.raises(RejectedInputError):
        modulate(torch.zeros(2, 2, 2, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), torch.ones(3, dtype=DTYPE), ModulationParams())


def test_default_grid():
    g = default_grid()
    assert len(g) == 49 and g[0] == (0.5, 0.5) and g[-1] == (2.0, 2.0)


def test_identity_point_recovers_frame_scale(sim):
    # frame 0 sits at the canonical statistics, so (1, 1) returns the canonical coupling
    rec = run_sweep(sim.stream.features[0], sim.decoder.for_frame(0), sim.sequence.samples[0], [(1.0, 1.0)], epsilon=1e-12)
    s0, t0 = sim.decoder.canonical(sim.stream.mu0, sim.stream.sigma0)
    assert abs(rec[0].fitted_scale - s0) < 1e-9 * s0
    assert abs(rec[0].fitted_shift - t0) < 1e-9


def test_scale_monotone_in_beta(sim):
    grid = [(1.0, b) for b in np.linspace(0.5, 2, 7)]
    rec = run_sweep(sim.stream.features[0], sim.decoder.for_frame(0), sim.sequence.samples[0], grid)
    scales = [r.fitted_scale for r in rec]
    assert all(b > a for a, b in zip(scales, scales[1:]))
    assert [(r.alpha, r.beta) for r in rec] == grid


def test_sweep_decoupling(sim):
    rec = run_sweep(sim.stream.features[0], sim.decoder.for_frame(0), sim.sequence.samples[0], default_grid())
    summ = summarize_sweep(rec)
    assert summ["n_failed"] == 0
    assert summ["scale_ratio"] >= 2
    assert summ["abs_rel_spread"] < 1e-9
    assert all(r.aligned_abs_rel >= 0 for r in rec)


def test_sweep_records_failures(sim):
    def flat(f):
        p = sim.decoder.decode(f, 0)
        p.depth = torch.ones_like(p.depth)
        return p

    rec = run_sweep(sim.stream.features[0], flat, sim.sequence.samples[0], [(1.0, 1.0), (2.0, 2.0)])
    assert len(rec) == 2 and all(r.error is not None for r in rec)
    assert all(math.isnan(r.fitted_scale) for r in rec)
    assert summarize_sweep(rec)["n_failed"] == 2
