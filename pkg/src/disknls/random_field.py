"""Samples of the free Gaussian field phi = (1/pi) sum_n g_n e_n / z_n.

Randomness comes from a counter-based generator keyed by ``(seed, sample)``: a
sample's draws depend on nothing but those two integers, so samples can be
produced in any order or in parallel, and the first N draws of a sample are the
same whatever truncation is requested (coupling across N).
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy import special

from .errors import PreconditionError
from .spectral_disk import hs_norm, lp_norm


@dataclass(frozen=True)
class NoiseStream:
    """Normalised complex Gaussians: E|g|^2 = 1, real and imaginary parts iid
    with variance 1/2."""

    seed: int

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise PreconditionError("seed must be a 64-bit unsigned integer")

    def _generator(self, sample: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=(self.seed << 64) | int(sample)))

    def gaussians(self, sample: int, count: int) -> np.ndarray:
        """g_1..g_count of one sample."""
        z = self._generator(sample).standard_normal((count, 2))
        return (z[:, 0] + 1j * z[:, 1]) / math.sqrt(2.0)

    def draw(self, n: int, sample: int) -> complex:
        """Single value g_n (n >= 1) of a sample."""
        return complex(self.gaussians(sample, n)[n - 1])

    def block(self, samples, count: int) -> np.ndarray:
        """Array (len(samples), count) of g_n for each listed sample index."""
        samples = np.atleast_1d(samples)
        out = np.empty((len(samples), count), dtype=complex)
        for i, k in enumerate(samples):
            out[i] = self.gaussians(int(k), count)
        return out


@dataclass(frozen=True)
class FreeSample:
    coeffs: np.ndarray
    sample_index: int
    seed: int


def free_coeffs(g: np.ndarray, zeros) -> np.ndarray:
    z = np.asarray(getattr(zeros, "zeros", zeros))[: g.shape[-1]]
    return g / (math.pi * z)


def sample_free(stream: NoiseStream, sample_index: int, n: int, zeros) -> FreeSample:
    """One draw of P_N phi from the free measure (first ``n`` modes)."""
    z = np.asarray(getattr(zeros, "zeros", zeros))
    if n > len(z):
        raise PreconditionError(f"requested N={n} modes but only {len(z)} zeros available")
    g = stream.gaussians(sample_index, n)
    return FreeSample(free_coeffs(g, z[:n]), sample_index, stream.seed)


def sample_free_batch(stream: NoiseStream, samples, n: int, zeros) -> np.ndarray:
    """Coefficient array (S, n) for sample indices ``samples`` (an int means
    ``range(samples)``)."""
    if np.isscalar(samples):
        samples = np.arange(int(samples))
    z = np.asarray(getattr(zeros, "zeros", zeros))
    if n > len(z):
        raise PreconditionError(f"requested N={n} modes but only {len(z)} zeros available")
    return free_coeffs(stream.block(samples, n), z[:n])


@dataclass
class TailCurve:
    """Empirical survival function P(X > lambda) with a stretched-exponential
    fit ``-log P ~ a * lambda^c`` on the resolvable part of the curve."""

    lam: np.ndarray
    prob: np.ndarray
    counts: np.ndarray
    samples: int
    resolvable: np.ndarray
    fit_c: float
    fit_a: float
    flags: list
    extra: dict


def survival(values, lam=None, min_count: int = 20, points: int = 40) -> TailCurve:
    values = np.sort(np.asarray(values, dtype=float))
    n = len(values)
    if lam is None:
        lam = np.linspace(0.0, values[-1], points)
    lam = np.asarray(lam, dtype=float)
    counts = n - np.searchsorted(values, lam, side="right")
    prob = counts / n
    resolvable = counts >= min_count
    flags = []
    if not resolvable.all():
        flags.append(
            f"{int((~resolvable).sum())} lambda values have fewer than {min_count} "
            "exceedances and are not used in the fit"
        )
    c, a = fit_stretched_exponential(lam, prob, resolvable)
    return TailCurve(lam, prob, counts, n, resolvable, c, a, flags, {})


def fit_stretched_exponential(lam, prob, mask=None):
    """Least-squares fit of log(-log P) = log a + c log lambda over tail points
    (P < 1/2) in ``mask``. Returns (c, a); nan if fewer than three points."""
    lam = np.asarray(lam)
    prob = np.asarray(prob)
    sel = (prob < 0.5) & (prob > 0) & (lam > 0)
    if mask is not None:
        sel &= mask
    if sel.sum() < 3:
        return float("nan"), float("nan")
    y = np.log(-np.log(prob[sel]))
    c, loga = np.polyfit(np.log(lam[sel]), y, 1)
    return float(c), float(np.exp(loga))


def is_convex_increasing(lam, prob, mask=None, slack: float = 0.0) -> bool:
    """-log P nondecreasing and its chord slope over the upper half of the tail
    range at least that over the lower half."""
    lam = np.asarray(lam)
    prob = np.asarray(prob)
    sel = prob > 0
    if mask is not None:
        sel &= mask
    x, y = lam[sel], -np.log(prob[sel])
    if len(x) < 3 or np.any(np.diff(y) < -1e-12):
        return False
    start = np.argmax(y > 0) if np.any(y > 0) else 0
    x, y = x[max(start - 1, 0):], y[max(start - 1, 0):]
    if len(x) < 3:
        return False
    mid = len(x) // 2
    s1 = (y[mid] - y[0]) / (x[mid] - x[0])
    s2 = (y[-1] - y[mid]) / (x[-1] - x[mid])
    return bool(s2 >= s1 * (1 - slack))


def neglected_tail_variance(s: float, n_max: int) -> float:
    """sum_{n > n_max} z_n^{-2(1-s)} using z_n ~ pi (n - 1/4)."""
    e = 2.0 * (1.0 - s)
    return float(special.zeta(e, n_max + 1 - 0.25) / math.pi**e)


def high_freq_tail_probe(stream: NoiseStream, s: float, n0: int, samples: int,
                         zeros, n_max: int | None = None, lam=None,
                         min_count: int = 20) -> TailCurve:
    """Tail of N0^{1/2-s} ||P_{>=N0} phi||_{H^s} under the free measure, the
    infinite sum cut at ``n_max`` modes."""
    if s >= 0.5:
        raise PreconditionError("high_freq_tail_probe needs s < 1/2")
    z = np.asarray(getattr(zeros, "zeros", zeros))
    n_max = len(z) if n_max is None else n_max
    if not n0 < n_max <= len(z):
        raise PreconditionError("need N0 < N_max <= number of zeros")
    coeffs = sample_free_batch(stream, samples, n_max, z)
    tail = np.zeros_like(coeffs)
    tail[:, n0 - 1:] = coeffs[:, n0 - 1:]
    x = n0 ** (0.5 - s) * hs_norm(tail, s, z[:n_max])
    curve = survival(x, lam, min_count=min_count)
    curve.extra.update(
        s=s, n0=n0, n_max=n_max, seed=stream.seed,
        neglected_variance=neglected_tail_variance(s, n_max) / math.pi**2,
        median=float(np.median(x)),
    )
    return curve


def l4_norm_tail_probe(stream: NoiseStream, n: int, samples: int, basis, lam=None,
                       min_count: int = 20) -> TailCurve:
    """Tail of ||P_N phi||_{L^4} / E||P_N phi||_{L^4} (Gaussian concentration)."""
    coeffs = sample_free_batch(stream, samples, n, basis.zeros)
    x = lp_norm(coeffs, 4, basis)
    ratio = x / x.mean()
    curve = survival(ratio, lam, min_count=min_count)
    # fit P(X > t E X) <= exp(-c t^2) on t > 1
    sel = curve.resolvable & (curve.lam > 1) & (curve.prob > 0)
    cs = -np.log(curve.prob[sel]) / curve.lam[sel] ** 2
    curve.extra.update(n=n, seed=stream.seed, gaussian_c=float(cs.min()) if len(cs) else float("nan"))
    return curve


def gaussian_moment_probe(weights, q: int, samples: int, stream: NoiseStream) -> float:
    """MC estimate of ||sum_n alpha_n g_n||_{L^q(omega)} / (sqrt(q) ||alpha||_2)."""
    weights = np.asarray(weights, dtype=complex)
    if q not in range(2, 17, 2):
        raise PreconditionError("q must be an even integer in [2, 16]")
    norm = np.sqrt(np.sum(np.abs(weights) ** 2))
    if norm == 0:
        raise PreconditionError("weights must not all vanish")
    total = 0.0
    chunk = 4096
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        g = stream.block(np.arange(done, done + k), len(weights))
        total += np.sum(np.abs(g @ weights) ** q)
        done += k
    return float((total / samples) ** (1.0 / q) / (math.sqrt(q) * norm))


def sample_rows(coeffs: np.ndarray, sample_indices=None):
    """Rows (k, n, Re u_n, Im u_n) for CSV dumps."""
    coeffs = np.atleast_2d(coeffs)
    if sample_indices is None:
        sample_indices = range(len(coeffs))
    for k, row in zip(sample_indices, coeffs):
        for n, c in enumerate(row, start=1):
            yield (int(k), n, repr(float(c.real)), repr(float(c.imag)))
