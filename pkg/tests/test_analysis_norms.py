import math

import numpy as np
import pytest

from disknls.analysis_norms import (
    ProbeSweep, SpaceTimeField, _window_grid, bilinear_ratio, convergence_study, duhamel_field,
    duhamel_ratio, embedding_ratio, flow_mixed_norm_tail, interval_mixed_norm, mixed_norm,
    mixed_norm_grid, modes_in_interval, period_mixed_norm, product_field, random_band_field,
    tail_expected_slope, time_window, trapezoid_weights, xsb_norm,
)
from disknls.errors import PreconditionError
from disknls.nls_flow import FlowConfig, evolve
from disknls.random_field import NoiseStream, sample_free_batch
from disknls.spectral_disk import analyze, build_basis, hs_norm, japanese, lp_norm, synthesize

B8 = build_basis(8)
Z = B8.zeros


def periodic_single_mode(n=3, m=70, k=2048):
    t = 2 * np.pi * np.arange(k) / k
    vals = np.zeros((k, 8), complex)
    vals[:, n - 1] = np.exp(-1j * m * t) / math.sqrt(2 * math.pi)
    return SpaceTimeField.from_periodic_samples(vals, Z)


def free_trajectory(n=3, t_final=0.3):
    phi = np.zeros(8, complex)
    phi[n - 1] = 1
    return evolve(phi, FlowConfig(n=8, t_final=t_final, nonlinear_scale=0), B8)


def test_single_mode_closed_form():
    f = periodic_single_mode()
    expected = japanese(Z[2]) ** 0.4 * japanese(Z[2] ** 2 - 70) ** 0.55
    assert xsb_norm(f, 0.4, 0.55) == pytest.approx(expected, rel=1e-6)
    g = SpaceTimeField.single_mode(3, 70, Z)
    assert xsb_norm(g, 0.4, 0.55) == pytest.approx(expected, rel=1e-14)


def test_plancherel_for_windowed_trajectory():
    fld = SpaceTimeField.from_trajectory(free_trajectory(), Z)
    k = fld.meta["samples"]
    t, _ = _window_grid(0.3, fld.meta["ramp"], k)
    direct = math.sqrt(np.sum(time_window(t, 0.3) ** 2) * 2 * math.pi / k)
    assert xsb_norm(fld, 0, 0) == pytest.approx(direct, abs=1e-8)


def test_dominant_frequency_of_free_mode():
    fld = SpaceTimeField.from_trajectory(free_trajectory(n=3), Z).merged()
    assert fld.freqs[np.argmax(np.abs(fld.values))] == round(Z[2] ** 2)


def test_trajectory_field_reproduces_states_on_interval():
    phi = sample_free_batch(NoiseStream(0), 1, 8, Z)[0] * 5
    tr = evolve(phi, FlowConfig(n=8, t_final=0.2), B8)
    fld = SpaceTimeField.from_trajectory(tr, Z)
    got = fld.sample(tr.times[::20], 8)
    # the free continuation has a derivative kink at 0 and T, which aliases on the grid
    assert np.max(np.abs(got - tr.states[::20])) < 1e-4 * np.max(np.abs(tr.states))


def test_xsb_monotone_in_s_and_b():
    fld = SpaceTimeField.from_trajectory(free_trajectory(n=2), Z)
    vals = [xsb_norm(fld, s, b) for s, b in [(0, 0.3), (0.2, 0.3), (0.2, 0.6), (0.5, 0.6)]]
    assert np.all(np.diff(vals) > 0)


def test_xsb_preconditions():
    f = SpaceTimeField.single_mode(1, 5, Z)
    for b in (-0.1, 1.0):
        with pytest.raises(PreconditionError):
            xsb_norm(f, 0, b)
    with pytest.raises(PreconditionError):
        SpaceTimeField.from_periodic_samples(np.zeros((1024, 8)), Z)
    with pytest.raises(PreconditionError):
        SpaceTimeField.from_trajectory(free_trajectory(t_final=0.6), Z)
    with pytest.raises(PreconditionError):
        SpaceTimeField.single_mode(9, 1, Z)


def test_merged_sums_duplicates():
    f = SpaceTimeField([2, 1, 2], [5, -3, 5], [1.0, 2.0, 0.5j], Z).merged()
    assert list(f.modes) == [1, 2] and list(f.freqs) == [-3, 5]
    assert np.allclose(f.values, [2.0, 1 + 0.5j])
    assert [m for m, _, _ in f.by_mode()] == [1, 2]


def test_periodic_samples_roundtrip():
    rng = np.random.default_rng(2)
    vals = rng.standard_normal((2048, 8)) + 1j * rng.standard_normal((2048, 8))
    f = SpaceTimeField.from_periodic_samples(vals, Z)
    t = 2 * np.pi * np.arange(0, 2048, 97) / 2048
    assert np.allclose(f.sample(t, 8), vals[::97], atol=1e-10)


def test_mixed_norm_constant_in_time():
    u = np.linspace(1, 2, 8)
    times = np.linspace(0, 0.3, 31)
    states = np.tile(u, (31, 1))
    for p, q in [(2, 2), (4, 6), (3, math.inf)]:
        expected = 0.3 ** (1 / q) * lp_norm(u, p, B8)
        assert mixed_norm(states, p, q, B8, times=times) == pytest.approx(expected, rel=1e-12)
    assert mixed_norm(np.zeros((5, 8)), 4, 6, B8, times=times[:5]) == 0


def test_mixed_norm_fubini_at_two_two():
    tr = evolve(sample_free_batch(NoiseStream(1), 1, 8, Z)[0] * 8, FlowConfig(n=8, t_final=0.1), B8)
    direct = math.sqrt(np.sum(trapezoid_weights(tr.times) * np.sum(np.abs(tr.states) ** 2, axis=1)))
    assert mixed_norm(tr, 2, 2, B8) == pytest.approx(direct, rel=1e-8)
    assert mixed_norm(tr, 4, 4, B8) * 2 == pytest.approx(mixed_norm(tr.states * 2, 4, 4, B8,
                                                                     times=tr.times))
    with pytest.raises(PreconditionError):
        mixed_norm(tr.states, 2, 2, B8)


def test_mixed_norm_holder():
    rng = np.random.default_rng(3)
    times = np.linspace(0, 0.3, 21)
    tw = trapezoid_weights(times)
    f = synthesize(rng.standard_normal((21, 8)), B8)
    g = synthesize(rng.standard_normal((21, 8)), B8)
    lhs = mixed_norm_grid(f * g, tw, B8, 1, 1)
    assert lhs <= mixed_norm_grid(f, tw, B8, 2, 2) * mixed_norm_grid(g, tw, B8, 2, 2)
    with pytest.raises(PreconditionError):
        mixed_norm_grid(f, tw, B8, 0.5, 2)


def direct_duhamel(forcing, t, zeros, n, points=4001):
    """int_0^t exp(-i z^2 (t - tau)) F(tau) d tau by the trapezoid rule."""
    out = np.zeros((len(t), n), complex)
    for i, ti in enumerate(t):
        tau = np.linspace(0, ti, points)
        f = forcing.sample(tau, n)
        kern = np.exp(-1j * np.outer(ti - tau, zeros[:n] ** 2))
        out[i] = trapezoid_weights(tau) @ (kern * f)
    return out


@pytest.mark.parametrize("m", [40, 69, 72])
def test_duhamel_matches_direct_integration(m):
    # z_3^2 = 69.49..., so m = 69 exercises the near-resonant branch
    f = SpaceTimeField([3, 3, 1], [m, m + 2, 3], [1.0, 0.5j, 0.3], Z)
    d = duhamel_field(f, 0.3)
    t = np.array([0.0, 0.1, 0.3])
    assert np.allclose(d.sample(t, 8), direct_duhamel(f, t, Z, 8), atol=1e-6)


def test_product_field_matches_pointwise_product():
    f = random_band_field(NoiseStream(4), 0, [5, 6], Z, width=1)
    g = random_band_field(NoiseStream(4), 1, [1, 2], Z, width=1)
    prod = product_field(f, g, 8)
    t = np.array([0.05, 0.2])
    fine = build_basis(8, 256)
    fg = synthesize(f.sample(t, 8), fine) * synthesize(g.sample(t, 8), fine)
    assert np.allclose(prod.sample(t, 8), analyze(fg, fine), atol=1e-10)


def test_period_mixed_norm_against_dense_grid():
    f = random_band_field(NoiseStream(5), 0, [2, 3, 4], Z, width=2)
    k = 8192
    t = 2 * np.pi * np.arange(k) / k
    grid = synthesize(f.sample(t, 8), B8)
    direct = mixed_norm_grid(grid, np.full(k, 2 * np.pi / k), B8, 3, 4)
    assert period_mixed_norm(f, B8, 3, 4) == pytest.approx(float(direct), rel=1e-10)


def test_interval_mixed_norm_converges():
    f = random_band_field(NoiseStream(6), 0, [1, 2, 3], Z, width=2)
    coarse = interval_mixed_norm(f, B8, 2, 2, 0.3)
    fine = interval_mixed_norm(f, B8, 2, 2, 0.3, points_per_cycle=64)
    assert coarse == pytest.approx(fine, rel=1e-3)


def test_probe_ratios_are_homogeneous():
    f = random_band_field(NoiseStream(7), 0, [3, 4], Z)
    l1, r1 = embedding_ratio(f, B8, 0.4, 3, 8)
    l2, r2 = embedding_ratio(f.scaled(2.0), B8, 0.4, 3, 8)
    assert l1 / r1 == pytest.approx(l2 / r2, rel=1e-12) and l2 == pytest.approx(2 * l1)
    l1, r1 = duhamel_ratio(f, B8, 0.55, 0.1, 0.3)
    l2, r2 = duhamel_ratio(f.scaled(3.0), B8, 0.55, 0.1, 0.3)
    assert l1 / r1 == pytest.approx(l2 / r2, rel=1e-10)


def test_probe_zero_inputs():
    empty = SpaceTimeField([], [], [], Z)
    assert duhamel_ratio(empty, B8, 0.55, 0.1, 0.3) == (0.0, 0.0)
    f = random_band_field(NoiseStream(8), 0, [6], Z, width=1)
    g = random_band_field(NoiseStream(8), 1, [1, 2], Z, width=1).scaled(0.0)
    low = build_basis(2)
    assert bilinear_ratio(f, g, low, 0.55, 0.1, 0.0, 0.3, 8) == (0.0, 0.0)


def test_embedding_single_mode_is_finite():
    f = SpaceTimeField.single_mode(4, 120, Z)
    lhs, rhs = embedding_ratio(f, B8, 0.4, 3, 8)
    assert 0 < lhs < math.inf and 0 < rhs < math.inf
    with pytest.raises(PreconditionError):
        embedding_ratio(f, B8, 0.5, 3, 8)


def test_modes_in_interval():
    assert list(modes_in_interval(8, 16, Z)) == [3, 4, 5]


def test_probe_sweep_statistics():
    sweep = ProbeSweep("t", "N", [1, 2], {1: [1.0, 2.0], 2: [3.0, 30.0]},
                       {1: [1.0, 1.0], 2: [1.0, 1.0]}, {})
    assert list(sweep.max_ratios()) == [2.0, 30.0]
    assert sweep.flatness() == 15.0 and not sweep.flat()
    assert not sweep.outlier_free()
    assert len(list(sweep.rows())) == 4


def test_linear_convergence_equals_tail_norm():
    table = convergence_study([8, 16, 32], 0.4, 0.1, NoiseStream(9), 5, nonlinear_scale=0.0)
    phi = sample_free_batch(NoiseStream(9), 5, 32, build_basis(32).zeros)
    z = build_basis(32).zeros
    for k, n in enumerate([8, 16]):
        tail = np.zeros_like(phi)
        tail[:, n:2 * n] = phi[:, n:2 * n]
        assert np.allclose(table.distances[:, k], hs_norm(tail, 0.4, z), rtol=1e-10)


def test_linear_convergence_vanishes_above_support():
    table = convergence_study([8, 16, 32], 0.4, 0.1, NoiseStream(10), 3, nonlinear_scale=0.0,
                              initial_modes=8)
    assert np.all(table.distances == 0)


def test_convergence_study_is_reproducible_and_checked():
    a = convergence_study([8, 16], 0.4, 0.05, NoiseStream(11), 2)
    b = convergence_study([8, 16], 0.4, 0.05, NoiseStream(11), 2)
    assert np.array_equal(a.distances, b.distances)
    assert math.isnan(a.fitted_exponent())
    with pytest.raises(PreconditionError):
        convergence_study([8, 24], 0.4, 0.05, NoiseStream(11), 2)
    with pytest.raises(PreconditionError):
        convergence_study([8, 16], 0.5, 0.05, NoiseStream(11), 2)


def test_tail_expected_slope_near_s_minus_half():
    assert tail_expected_slope(0.4, [8, 16, 32, 64], build_basis(128).zeros) == pytest.approx(
        -0.1, abs=0.02)


def test_flow_tail_mass_conservation_identity():
    curve = flow_mixed_norm_tail(8, 0.0, 2, 2, 40, NoiseStream(12), t_final=0.1, min_count=1)
    phi = sample_free_batch(NoiseStream(12), 40, 8, Z)
    expected = math.sqrt(0.1) * np.linalg.norm(phi, axis=1)
    assert np.allclose(curve.extra["values"], expected, rtol=1e-8)
    assert np.all(np.diff(curve.prob) <= 0)


def test_flow_tail_preconditions():
    for kwargs in ({"sigma": 0.5}, {"sigma": 0.3, "p": 8}, {"high_pass": 8}):
        args = {"n": 8, "sigma": 0.0, "p": 2, "q": 2, "samples": 4, "stream": NoiseStream(0)}
        with pytest.raises(PreconditionError):
            flow_mixed_norm_tail(**(args | kwargs))
