"""Gibbs weights, partition functions, invariance tests and the focusing
spike construction.

The Gibbs measure is the free measure reweighted by

    defocusing:  exp(-||P_N phi||_{alpha+2}^{alpha+2} / (alpha+2))
    focusing:    exp(+||P_N phi||_4^4 / 4) * 1{||P_N phi||_2 < rho}

Everything is a density with respect to the free measure, so Monte Carlo
draws come from ``random_field`` and carry their log weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import PreconditionError
from .nls_flow import FlowConfig, evolve, hamiltonian, mass, nonlinear_coeffs
from .random_field import FreeSample, NoiseStream, sample_free_batch
from .spectral_disk import SpectralBasis, build_basis, dirichlet_zeros, hs_norm, lp_norm

RARE_EVENT_ESS_FRACTION = 0.01
MIN_INVARIANCE_ESS = 30.0
Z_THRESHOLD = 3.0

# Scale of the nonlinearity under which the Gibbs weight above is exactly
# invariant: the free field has density exp(-2 pi^2 K) with K the kinetic
# part of H_N, so exp(-2 pi^2 (K + s V)) matches the weight when s = 1/(2 pi^2).
CONSISTENT_NONLINEAR_SCALE = 1.0 / (2.0 * math.pi**2)


@dataclass
class WeightedSample:
    sample: FreeSample
    log_weight: float


def _coeffs(x) -> np.ndarray:
    return np.asarray(x.coeffs if isinstance(x, FreeSample) else x)


def log_weight(sample, basis: SpectralBasis, sign: str = "defocusing", alpha: int = 2,
               rho: float | None = None):
    """Log Gibbs density of ``sample`` (a FreeSample or coefficient array,
    batched over leading axes) relative to the free measure."""
    u = _coeffs(sample)
    if sign == "defocusing":
        if alpha <= 0 or alpha % 2:
            raise PreconditionError("alpha must be a positive even integer")
        return -lp_norm(u, alpha + 2, basis) ** (alpha + 2) / (alpha + 2)
    if sign != "focusing":
        raise PreconditionError(f"unknown sign {sign!r}")
    if alpha != 2:
        raise PreconditionError("focusing weights require alpha = 2")
    if rho is None or not rho > 0:
        raise PreconditionError("focusing weights need a positive mass cutoff rho")
    lw = lp_norm(u, 4, basis) ** 4 / 4.0
    inside = mass(u) < rho**2
    if np.ndim(lw) == 0:
        return float(lw) if inside else -math.inf
    return np.where(inside, lw, -np.inf)


def weigh(sample: FreeSample, basis: SpectralBasis, sign: str = "defocusing", alpha: int = 2,
          rho: float | None = None) -> WeightedSample:
    return WeightedSample(sample, float(log_weight(sample, basis, sign, alpha, rho)))


def sample_log_weights(n: int, sign: str, alpha: int, rho: float | None, samples: int,
                       stream: NoiseStream, basis: SpectralBasis | None = None,
                       chunk: int = 8192) -> np.ndarray:
    """Log weights of samples 0..samples-1 of ``stream`` at truncation N."""
    basis = basis or build_basis(n)
    out = np.empty(samples)
    for start in range(0, samples, chunk):
        idx = np.arange(start, min(samples, start + chunk))
        coeffs = sample_free_batch(stream, idx, n, basis.zeros)
        out[idx] = log_weight(coeffs, basis, sign, alpha, rho)
    return out


@dataclass
class PartitionEstimate:
    n: int
    rho: float | None
    mean: float
    stderr: float
    samples: int
    effective_sample_size: float
    log_mean: float
    flags: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"N": self.n, "rho": self.rho, "logZ_hat": self.log_mean,
                "ess": self.effective_sample_size, "samples": self.samples}


def estimate_from_log_weights(lw: np.ndarray, n: int, rho: float | None) -> PartitionEstimate:
    lw = np.asarray(lw, dtype=float)
    s = len(lw)
    flags = []
    if np.all(np.isneginf(lw)):
        flags.append("every sample violates the mass cutoff")
        return PartitionEstimate(n, rho, 0.0, 0.0, s, 0.0, -math.inf, flags)
    top = np.max(lw)
    w = np.exp(lw - top)  # scaled weights, max 1
    log_mean = float(top + math.log(w.sum()) - math.log(s))
    ess = float(w.sum() ** 2 / np.sum(w**2))
    scaled_sd = float(np.std(w, ddof=1)) if s > 1 else 0.0
    with np.errstate(over="ignore"):
        mean = math.exp(log_mean) if log_mean < 700 else math.inf
        stderr = scaled_sd * math.exp(top) / math.sqrt(s) if top < 700 else math.inf
    if ess < RARE_EVENT_ESS_FRACTION * s:
        flags.append(f"rare-event dominated: effective sample size {ess:.1f} of {s}")
    return PartitionEstimate(n, rho, mean, stderr, s, ess, log_mean, flags)


def partition_estimate(n: int, sign: str, alpha: int, rho: float | None, samples: int,
                       stream: NoiseStream, basis: SpectralBasis | None = None) -> PartitionEstimate:
    """Importance-sampling estimate of Z_N = E_free[density]."""
    if samples < 1000:
        raise PreconditionError("partition_estimate needs at least 1000 samples")
    lw = sample_log_weights(n, sign, alpha, rho, samples, stream, basis)
    return estimate_from_log_weights(lw, n, rho)


# -- invariance -------------------------------------------------------------

def _band(u: np.ndarray) -> np.ndarray:
    n = u.shape[-1]
    lo = max(n // 2, 1)
    return mass(u[..., lo - 1:])


def observable_functions(basis: SpectralBasis) -> dict:
    """Built-in observables, each mapping a coefficient batch (S, N) to (S,)."""
    return {
        "l4_quartic": lambda u: lp_norm(u, 4, basis) ** 4,
        "h0.4_norm": lambda u: hs_norm(u, 0.4, basis.zeros),
        "mode1_power": lambda u: np.abs(u[..., 0]) ** 2,
        "mode1_real": lambda u: u[..., 0].real,
        "band_mass": _band,
        "mass": mass,
    }


DEFAULT_OBSERVABLES = ("l4_quartic", "h0.4_norm", "mode1_power", "mode1_real", "band_mass")


@dataclass
class ObservableResult:
    observable: str
    mean_t0: float
    se_t0: float
    mean_tT: float
    se_tT: float
    z: float
    status: str

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class InvarianceReport:
    n: int
    sign: str
    t_final: float
    samples: int
    effective_sample_size: float
    results: list
    config: dict

    def passed(self) -> bool:
        return all(r.status == "pass" for r in self.results)


def weighted_mean(values: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Self-normalised mean and its delta-method standard error."""
    total = w.sum()
    m = float(np.sum(w * values) / total)
    se = float(np.sqrt(np.sum(w**2 * (values - m) ** 2)) / total)
    return m, se


def invariance_test(n: int, sign: str, alpha: int, rho: float | None, t_final: float,
                    observables=DEFAULT_OBSERVABLES, samples: int = 10_000,
                    stream: NoiseStream | None = None, basis: SpectralBasis | None = None,
                    dt: float | None = None, nonlinear_scale: float = 1.0,
                    batch: int = 2500) -> InvarianceReport:
    """Compare Gibbs-weighted means of observables at t = 0 and t = T.

    Samples are drawn from the free measure, weighted by the Gibbs density and
    pushed through the truncated flow; ``t_final = 0`` skips the flow. The
    z-score is (mean_T - mean_0) / sqrt(se_0^2 + se_T^2).
    """
    if stream is None:
        raise PreconditionError("invariance_test needs a NoiseStream")
    basis = basis or build_basis(n)
    funcs = observable_functions(basis)
    unknown = [o for o in observables if o not in funcs]
    if unknown:
        raise PreconditionError(f"unknown observables {unknown}; choose from {sorted(funcs)}")
    cfg = None
    if t_final > 0:
        cfg = FlowConfig(n=n, t_final=t_final, sign=sign, alpha=alpha, dt=dt,
                         nonlinear_scale=nonlinear_scale, save_every=10**9)
    elif t_final < 0:
        raise PreconditionError("T must be >= 0")
    lw = np.empty(samples)
    f0 = {o: np.empty(samples) for o in observables}
    fT = {o: np.empty(samples) for o in observables}
    for start in range(0, samples, batch):
        idx = np.arange(start, min(samples, start + batch))
        phi = sample_free_batch(stream, idx, n, basis.zeros)
        lw[idx] = log_weight(phi, basis, sign, alpha, rho)
        u_t = phi if cfg is None else evolve(phi, cfg, basis).final
        for o in observables:
            f0[o][idx] = funcs[o](phi)
            fT[o][idx] = funcs[o](u_t)
    keep = np.isfinite(lw)
    w = np.exp(lw[keep] - lw[keep].max()) if keep.any() else np.zeros(0)
    ess = float(w.sum() ** 2 / np.sum(w**2)) if len(w) else 0.0
    results = []
    for o in observables:
        if ess < MIN_INVARIANCE_ESS:
            results.append(ObservableResult(o, math.nan, math.nan, math.nan, math.nan, math.nan,
                                            "inconclusive"))
            continue
        m0, s0 = weighted_mean(f0[o][keep], w)
        mT, sT = weighted_mean(fT[o][keep], w)
        diff = mT - m0
        denom = math.sqrt(s0**2 + sT**2)
        z = 0.0 if diff == 0 else (diff / denom if denom > 0 else math.inf)
        results.append(ObservableResult(o, m0, s0, mT, sT, z,
                                        "pass" if abs(z) < Z_THRESHOLD else "fail"))
    config = {"N": n, "sign": sign, "alpha": alpha, "rho": rho, "T": t_final,
              "dt": cfg.dt if cfg else None, "nonlinear_scale": nonlinear_scale,
              "samples": samples, "seed": stream.seed}
    return InvarianceReport(n, sign, t_final, samples, ess, results, config)


# -- focusing phase transition ----------------------------------------------

@dataclass
class SpikeProfile:
    n: int
    rho: float
    coeffs: np.ndarray
    amplitude_constant: float  # c'' in g_n = c'' rho sqrt(N)


SPIKE_MASS_FRACTION = 0.9


def spike_profile(n: int, rho: float, zeros=None) -> SpikeProfile:
    """Deterministic Gaussian assignment g_n = 0 (n <= N/2), g_n = c'' rho sqrt(N)
    (N/2 < n <= N), with c'' fixed so the L^2 norm is 0.9 rho."""
    if n < 4 or n % 2:
        raise PreconditionError("spike_profile needs an even N >= 4")
    if not rho > 0:
        raise PreconditionError("rho must be positive")
    z = np.asarray(getattr(zeros, "zeros", zeros)) if zeros is not None else None
    if z is None or len(z) < n:
        z = dirichlet_zeros(n).zeros
    z = z[:n]
    high = np.arange(1, n + 1) > n // 2
    inv = np.where(high, 1.0 / (math.pi * z), 0.0)
    # ||phi||_2^2 = (c'' rho)^2 N sum_high 1/(pi z)^2
    c2 = SPIKE_MASS_FRACTION / math.sqrt(n * np.sum(inv**2))
    g = c2 * rho * math.sqrt(n) * high
    return SpikeProfile(n, rho, (g * inv).astype(complex), c2)


def blowup_criterion(phi, basis: SpectralBasis) -> dict:
    """Focusing alpha = 2 Hamiltonian and whether it is negative."""
    u = _coeffs(phi)
    h = float(hamiltonian(u, basis, "focusing", 2))
    return {"negative_hamiltonian": h < 0, "H_value": h}


def mass_fraction_within(phi, basis: SpectralBasis, radius: float) -> float:
    """Fraction of ||phi||_2^2 carried by |x| < radius (fine quadrature)."""
    u = _coeffs(phi)
    radius = min(radius, 1.0)
    x, w = np.polynomial.legendre.leggauss(max(64, 4 * len(u)))
    r = 0.5 * radius * (x + 1.0)
    vals = basis.evaluate(u, r)
    inner = float(np.sum(np.abs(vals) ** 2 * 0.5 * radius * w * 2.0 * math.pi * r))
    return inner / float(mass(u))


def bernstein_constant(basis: SpectralBasis, iterations: int = 500, tol: float = 1e-13) -> float:
    """C_N = sup ||phi||_4^4 / ||phi||_2^4 over the span of e_1..e_N.

    Fixed-point ascent phi <- P_N(|phi|^2 phi) / ||.|| from the origin kernel
    sum_n e_n(0) e_n; each step does not decrease the ratio.
    """
    phi = basis.origin_values().astype(complex)
    phi /= np.linalg.norm(phi)
    ratio = float(lp_norm(phi, 4, basis) ** 4)
    for _ in range(iterations):
        nxt = nonlinear_coeffs(phi, basis, 2)
        nxt /= np.linalg.norm(nxt)
        new = float(lp_norm(nxt, 4, basis) ** 4)
        phi = nxt
        if abs(new - ratio) <= tol * new:
            ratio = new
            break
        ratio = new
    return ratio


def free_ball_probability(n: int, rho: float, samples: int, stream: NoiseStream,
                          zeros) -> tuple[float, float]:
    """MC estimate (and standard error) of mu_F(||P_N phi||_2 < rho)."""
    z = np.asarray(getattr(zeros, "zeros", zeros))
    hits = 0
    for start in range(0, samples, 8192):
        idx = np.arange(start, min(samples, start + 8192))
        hits += int(np.sum(mass(sample_free_batch(stream, idx, n, z)) < rho**2))
    p = hits / samples
    return p, math.sqrt(p * (1 - p) / samples)


@dataclass
class SmallRhoResult:
    rho: float | None
    table: list  # rows (N, rho, estimate)


def no_upward_trend(estimates, k_sigma: float = 2.0) -> bool:
    """True if Z never increases between consecutive N beyond k_sigma combined
    standard errors."""
    for a, b in zip(estimates, estimates[1:]):
        if b.mean - a.mean > k_sigma * math.hypot(a.stderr, b.stderr):
            return False
    return True


def small_rho_protocol(rho_grid, n_list=(8, 16, 32), samples: int = 100_000,
                       stream: NoiseStream | None = None) -> SmallRhoResult:
    """Largest rho on the grid whose focusing Z_N shows no upward trend in N."""
    if stream is None:
        raise PreconditionError("small_rho_protocol needs a NoiseStream")
    bases = {n: build_basis(n) for n in n_list}
    # the quartic term and mass do not depend on rho: compute once per N
    quartic, masses = {}, {}
    for n in n_list:
        q = np.empty(samples)
        m = np.empty(samples)
        for start in range(0, samples, 8192):
            idx = np.arange(start, min(samples, start + 8192))
            u = sample_free_batch(stream, idx, n, bases[n].zeros)
            q[idx] = lp_norm(u, 4, bases[n]) ** 4 / 4.0
            m[idx] = mass(u)
        quartic[n], masses[n] = q, m
    table = []
    chosen = None
    for rho in sorted(rho_grid):
        ests = [estimate_from_log_weights(np.where(masses[n] < rho**2, quartic[n], -np.inf), n, rho)
                for n in n_list]
        table.extend(ests)
        if no_upward_trend(ests):
            chosen = rho
    return SmallRhoResult(chosen, table)


@dataclass
class WitnessBound:
    n: int
    rho: float
    log_lower_bound: float
    delta: float
    l4_lower: float
    log_probability: float


def spike_witness_bound(n: int, rho: float, basis: SpectralBasis | None = None,
                        delta_points: int = 200) -> WitnessBound:
    """Deterministic lower bound on log Z_N (focusing) from the spike.

    On the event |g_n - g*_n| < delta for all n the L^2 norm stays below rho
    and ||phi||_4 >= ||phi*||_4 - delta sum_n ||e_n||_4 / (pi z_n). The event
    has probability at least prod_n delta^2 exp(-(|g*_n| + delta)^2) under the
    density exp(-|g|^2)/pi of a normalised complex Gaussian.
    """
    basis = basis or build_basis(n)
    spike = spike_profile(n, rho, basis.zeros)
    z = basis.zeros[:n]
    g_star = np.abs(spike.coeffs) * math.pi * z
    l4_star = float(lp_norm(spike.coeffs, 4, basis))
    eye = np.eye(n)
    e4 = lp_norm(eye, 4, basis)
    l4_lip = float(np.sum(e4 / (math.pi * z)))
    l2_lip = float(math.sqrt(np.sum(1.0 / (math.pi * z) ** 2)))
    # keep 0.9 rho + delta * l2_lip < rho
    delta_max = (1.0 - SPIKE_MASS_FRACTION) * rho / l2_lip
    best = None
    for delta in delta_max * np.linspace(1e-3, 0.999, delta_points):
        low = max(l4_star - delta * l4_lip, 0.0)
        logp = float(np.sum(2.0 * math.log(delta) - (g_star + delta) ** 2))
        val = low**4 / 4.0 + logp
        if best is None or val > best.log_lower_bound:
            best = WitnessBound(n, rho, val, float(delta), low, logp)
    return best


def fit_slope(x, y) -> float:
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


def phase_sweep(n_list, rho_grid, samples: int, stream: NoiseStream) -> list:
    """Focusing log Z_N estimates over (N, rho), coupled samples throughout."""
    rows = []
    for n in n_list:
        basis = build_basis(n)
        q = np.empty(samples)
        m = np.empty(samples)
        for start in range(0, samples, 8192):
            idx = np.arange(start, min(samples, start + 8192))
            u = sample_free_batch(stream, idx, n, basis.zeros)
            q[idx] = lp_norm(u, 4, basis) ** 4 / 4.0
            m[idx] = mass(u)
        for rho in rho_grid:
            rows.append(estimate_from_log_weights(np.where(m < rho**2, q, -np.inf), n, rho))
    return rows


def large_rho_sweep(n_list, rho_grid) -> float | None:
    """Smallest rho on the grid at which the spike has negative Hamiltonian for
    every N and the witness bound grows with N^2."""
    for rho in sorted(rho_grid):
        bases = [build_basis(n) for n in n_list]
        neg = all(blowup_criterion(spike_profile(n, rho, b.zeros).coeffs, b)["negative_hamiltonian"]
                  for n, b in zip(n_list, bases))
        if not neg:
            continue
        wit = [spike_witness_bound(n, rho, b).log_lower_bound for n, b in zip(n_list, bases)]
        if fit_slope(np.asarray(n_list) ** 2, wit) > 0:
            return float(rho)
    return None
