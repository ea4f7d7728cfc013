import math

import numpy as np
import pytest
from scipy import special, stats

from disknls.errors import PreconditionError
from disknls.random_field import (
    NoiseStream, fit_stretched_exponential, gaussian_moment_probe, high_freq_tail_probe,
    is_convex_increasing, l4_norm_tail_probe, neglected_tail_variance, sample_free,
    sample_free_batch, sample_rows, survival,
)
from disknls.spectral_disk import build_basis, dirichlet_zeros, lp_norm

ZEROS = dirichlet_zeros(1024).zeros


def exact_moment_ratio(q: int) -> float:
    # E|g|^q = Gamma(q/2 + 1) for a normalised complex Gaussian
    return special.gamma(q / 2 + 1) ** (1 / q) / math.sqrt(q)


def test_stream_is_deterministic():
    a = NoiseStream(42).gaussians(7, 10)
    b = NoiseStream(42).gaussians(7, 10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, NoiseStream(43).gaussians(7, 10))
    assert not np.array_equal(a, NoiseStream(42).gaussians(8, 10))


def test_draw_agrees_with_block():
    s = NoiseStream(3)
    assert s.draw(5, 11) == s.block([11], 8)[0, 4]


def test_prefix_coupling():
    s = NoiseStream(5)
    a = sample_free(s, 9, 8, ZEROS).coeffs
    b = sample_free(s, 9, 16, ZEROS).coeffs
    assert np.array_equal(a, b[:8])
    batch = sample_free_batch(s, [9], 32, ZEROS)
    assert np.array_equal(batch[0, :16], b)


def test_seed_range_checked():
    with pytest.raises(PreconditionError):
        NoiseStream(-1)
    with pytest.raises(PreconditionError):
        NoiseStream(2**64)


def test_too_many_modes_rejected():
    with pytest.raises(PreconditionError):
        sample_free(NoiseStream(0), 0, 5, ZEROS[:4])


def test_first_mode_variance():
    u = sample_free_batch(NoiseStream(1), 100_000, 1, ZEROS)[:, 0]
    x = np.abs(u) ** 2 * math.pi**2 * ZEROS[0] ** 2
    assert abs(x.mean() - 1) < 3 * x.std() / math.sqrt(len(x))


def test_expected_mass_is_variance_sum():
    n = 16
    u = sample_free_batch(NoiseStream(2), 20_000, n, ZEROS)
    m = np.sum(np.abs(u) ** 2, axis=1)
    target = np.sum(1 / ZEROS[:n] ** 2) / math.pi**2
    assert abs(m.mean() - target) < 4 * m.std() / math.sqrt(len(m))


def test_real_and_imaginary_parts_split_variance():
    g = NoiseStream(8).block(np.arange(20_000), 1)[:, 0]
    assert g.real.var() == pytest.approx(0.5, abs=0.02)
    assert g.imag.var() == pytest.approx(0.5, abs=0.02)


def test_rotation_invariance_of_l4_norm():
    b = build_basis(16)
    u = sample_free_batch(NoiseStream(4), 3000, 16, b.zeros)
    v = sample_free_batch(NoiseStream(9), 3000, 16, b.zeros) * np.exp(0.7j)
    res = stats.ks_2samp(lp_norm(u, 4, b), lp_norm(v, 4, b))
    assert res.pvalue > 0.01


def test_survival_basics():
    x = np.arange(1, 101, dtype=float)
    c = survival(x, lam=[0, 10, 50.5, 100], min_count=5)
    assert list(c.counts) == [100, 90, 50, 0]
    assert np.all(np.diff(c.prob) <= 0)
    assert not c.resolvable[-1] and c.flags


def test_stretched_exponential_fit_recovers_exponent():
    lam = np.linspace(0.5, 3, 20)
    c, a = fit_stretched_exponential(lam, np.exp(-2.0 * lam**1.7))
    assert c == pytest.approx(1.7, rel=1e-10) and a == pytest.approx(2.0, rel=1e-10)
    assert math.isnan(fit_stretched_exponential([1, 2], [0.1, 0.01])[0])


def test_convexity_check():
    lam = np.linspace(0, 4, 30)
    assert is_convex_increasing(lam, np.exp(-lam**2))
    assert not is_convex_increasing(lam, np.exp(-np.sqrt(lam + 1e-9) * 5))


def test_neglected_tail_variance_against_direct_sum():
    s = 0.4
    direct = np.sum(dirichlet_zeros(20_000).zeros[512:] ** (-2 * (1 - s)))
    tail_beyond = neglected_tail_variance(s, 20_000)
    assert neglected_tail_variance(s, 512) == pytest.approx(direct + tail_beyond, rel=1e-4)


def test_high_freq_tail_probe_median_and_monotone():
    c = high_freq_tail_probe(NoiseStream(6), 0.4, 16, 2000, ZEROS, n_max=128)
    med = c.extra["median"]
    below = c.lam < med
    assert np.all(c.prob[below] >= 0.5)
    assert np.all(np.diff(c.prob) <= 0)
    assert c.extra["neglected_variance"] > 0
    with pytest.raises(PreconditionError):
        high_freq_tail_probe(NoiseStream(6), 0.5, 16, 10, ZEROS)
    with pytest.raises(PreconditionError):
        high_freq_tail_probe(NoiseStream(6), 0.4, 200, 10, ZEROS, n_max=128)


def test_l4_tail_has_gaussian_decay():
    c = l4_norm_tail_probe(NoiseStream(7), 16, 5000, build_basis(16))
    assert c.extra["gaussian_c"] > 0


@pytest.mark.parametrize("q", [2, 4, 8])
def test_gaussian_moment_single_weight(q):
    r = gaussian_moment_probe([1.0], q, 100_000, NoiseStream(10))
    assert r == pytest.approx(exact_moment_ratio(q), rel=0.03)


def test_gaussian_moment_q2_is_one_over_root_two():
    assert exact_moment_ratio(2) == pytest.approx(1 / math.sqrt(2))


def test_gaussian_moment_homogeneous_and_bounded():
    w = np.random.default_rng(0).standard_normal(64)
    r1 = gaussian_moment_probe(w, 8, 20_000, NoiseStream(11))
    r2 = gaussian_moment_probe(2 * w, 8, 20_000, NoiseStream(11))
    assert r1 == pytest.approx(r2, rel=1e-12)
    assert r1 < 2
    with pytest.raises(PreconditionError):
        gaussian_moment_probe(w, 3, 10, NoiseStream(0))
    with pytest.raises(PreconditionError):
        gaussian_moment_probe(np.zeros(3), 4, 10, NoiseStream(0))


def test_sample_rows_layout():
    rows = list(sample_rows(np.array([[1 + 2j, 3j]]), [5]))
    assert rows == [(5, 1, "1.0", "2.0"), (5, 2, "0.0", "3.0")]
