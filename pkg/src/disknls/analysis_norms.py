"""Space-time norms of radial fields and numerical probes of the dispersive
estimates.

Time is periodised on [0, 2 pi) with the orthonormal characters
e(mt) = exp(-imt) / sqrt(2 pi), so the free evolution exp(-i z_n^2 t) e_n sits
at time frequency m = z_n^2 and the X^{s,b} weight <z_n^2 - m> measures the
distance to free evolution. A field is stored as its coefficient list

    f(t, x) = sum_j f_j e_{n_j}(x) e(m_j t).

Pieces that are not periodic (a trajectory on [0, T), the free term of a
Duhamel integral) are multiplied by a C-infinity window equal to 1 on [0, T]
and vanishing outside [-ramp, T + ramp]. The window leaves the field unchanged
on [0, T], so every X^{s,b} value computed here is an upper bound for the
infimum over representations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import sparse
from scipy.interpolate import CubicSpline

from .errors import BlowUpError, PreconditionError
from .nls_flow import FlowConfig, Trajectory, cth_distance, default_dt, evolve
from .random_field import NoiseStream, TailCurve, sample_free_batch, survival
from .spectral_disk import (SpectralBasis, build_basis, dirichlet_zeros, japanese,
                            synthesize)

SQRT_2PI = math.sqrt(2.0 * math.pi)
_FREQ_BITS = 40
_FREQ_OFFSET = 1 << 38
_FREQ_MASK = (1 << _FREQ_BITS) - 1
DEFAULT_RAMP = 1.0
WINDOW_SAMPLES = 4096
TRIM = 1e-17


def _zeros_of(zeros) -> np.ndarray:
    return np.asarray(getattr(zeros, "zeros", zeros), dtype=float)


def _next_pow2(x: float) -> int:
    return 1 << max(int(math.ceil(math.log2(max(x, 1.0)))), 0)


# -- window -------------------------------------------------------------------

def _smooth_step(x):
    x = np.clip(x, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def time_window(t, t_final: float, ramp: float = DEFAULT_RAMP) -> np.ndarray:
    """1 on [0, T], smooth decay to 0 over ``ramp`` on both sides."""
    t = np.asarray(t, dtype=float)
    left = _smooth_step((t + ramp) / ramp)
    right = _smooth_step((t_final + ramp - t) / ramp)
    return np.where(t < 0, left, np.where(t > t_final, right, 1.0))


def _window_grid(t_final: float, ramp: float, k: int) -> tuple[np.ndarray, float]:
    if t_final + 2 * ramp >= 2 * math.pi:
        raise PreconditionError("window support must fit inside one period")
    t0 = 0.5 * t_final - math.pi
    return t0 + 2 * math.pi * np.arange(k) / k, t0


def _coefficients_on_grid(q: np.ndarray, t0: float) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients c_j of sum_j c_j e(jt) for samples q(t0 + 2 pi l / K) along the
    last axis; returns (j, c) with j in [-K/2, K/2)."""
    k = q.shape[-1]
    j = np.fft.fftfreq(k, 1.0 / k).astype(np.int64)
    c = SQRT_2PI * np.fft.ifft(q, axis=-1) * np.exp(1j * j * t0)
    return j, c


def windowed_mode_coefficients(profile, omega: float, t_final: float, ramp: float = DEFAULT_RAMP,
                               samples: int = WINDOW_SAMPLES):
    """Coefficients of window(t) * profile(t) * exp(-i omega t) in the e(mt) basis.

    ``profile`` is a callable of t, assumed slowly varying next to the carrier.
    Returns integer frequencies m and coefficients.
    """
    t, t0 = _window_grid(t_final, ramp, samples)
    mu = int(round(omega))
    delta = omega - mu
    q = time_window(t, t_final, ramp) * profile(t) * np.exp(-1j * delta * t)
    j, c = _coefficients_on_grid(q, t0)
    # drop the negligible far tail of the window transform
    keep = np.abs(c) > TRIM * np.abs(c).max() if np.any(c) else np.zeros(len(c), dtype=bool)
    return mu + j[keep], c[keep]


# -- space-time fields --------------------------------------------------------

@dataclass
class SpaceTimeField:
    """Coefficient representation sum_j values_j e_{modes_j}(x) e(freqs_j t)."""

    modes: np.ndarray  # 1-based mode indices
    freqs: np.ndarray  # integer time frequencies
    values: np.ndarray
    zeros: np.ndarray
    t_final: float | None = None  # physical interval [0, T) when windowed
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.int64)
        self.freqs = np.asarray(self.freqs, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=complex)
        self.zeros = _zeros_of(self.zeros)
        if len(self.modes) and self.modes.max() > len(self.zeros):
            raise PreconditionError("field uses modes beyond the zero table")

    @property
    def max_mode(self) -> int:
        return int(self.modes.max()) if len(self.modes) else 0

    def merged(self) -> "SpaceTimeField":
        """Combine repeated (mode, frequency) entries; sorted by mode, then m."""
        if not len(self.modes):
            return self
        key = (self.modes << _FREQ_BITS) + (self.freqs + _FREQ_OFFSET)
        uniq, inv = np.unique(key, return_inverse=True)
        vals = (np.bincount(inv, self.values.real, len(uniq))
                + 1j * np.bincount(inv, self.values.imag, len(uniq)))
        return SpaceTimeField(uniq >> _FREQ_BITS, (uniq & _FREQ_MASK) - _FREQ_OFFSET, vals,
                              self.zeros, self.t_final, dict(self.meta))

    def by_mode(self):
        """Yield (mode, freqs, values) for each mode of the merged field."""
        f = self.merged()
        if not len(f.modes):
            return
        cuts = np.flatnonzero(np.diff(f.modes)) + 1
        for part in np.split(np.arange(len(f.modes)), cuts):
            yield int(f.modes[part[0]]), f.freqs[part], f.values[part]

    def scaled(self, c: complex) -> "SpaceTimeField":
        return SpaceTimeField(self.modes, self.freqs, c * self.values, self.zeros, self.t_final,
                              dict(self.meta))

    def with_derivative(self, sigma: float) -> "SpaceTimeField":
        """(sqrt(-Delta))^sigma applied mode-wise (multiplies by z_n^sigma)."""
        z = self.zeros[self.modes - 1]
        return SpaceTimeField(self.modes, self.freqs, self.values * z**sigma, self.zeros,
                              self.t_final, dict(self.meta))

    def sample(self, times, n: int | None = None) -> np.ndarray:
        """Mode coefficients (K, n) at the given times by direct summation."""
        times = np.asarray(times, dtype=float)
        n = n or self.max_mode
        out = np.zeros((len(times), n), dtype=complex)
        for mode in np.unique(self.modes):
            sel = self.modes == mode
            ph = np.exp(-1j * np.outer(times, self.freqs[sel]))
            out[:, mode - 1] = ph @ self.values[sel] / SQRT_2PI
        return out

    @classmethod
    def single_mode(cls, n: int, m: int, zeros, amplitude: complex = 1.0) -> "SpaceTimeField":
        return cls([n], [m], [amplitude], zeros)

    @classmethod
    def from_periodic_samples(cls, values, zeros) -> "SpaceTimeField":
        """Field from mode coefficients sampled on t_l = 2 pi l / K, l < K
        (array (K, N)), with no window."""
        values = np.asarray(values, dtype=complex)
        k, n = values.shape
        z = _zeros_of(zeros)[:n]
        if not 2 * math.pi / k < math.pi / z[-1] ** 2:
            raise PreconditionError(
                f"time grid with K={k} does not resolve z_N^2={z[-1] ** 2:.1f}: need K > 2 z_N^2")
        j, c = _coefficients_on_grid(values.T, 0.0)
        modes = np.repeat(np.arange(1, n + 1), k)
        return cls(modes, np.tile(j, n), c.ravel(), z)

    @classmethod
    def from_trajectory(cls, traj: Trajectory, zeros, ramp: float = DEFAULT_RAMP,
                        samples: int | None = None) -> "SpaceTimeField":
        """Windowed extension of a single-sample trajectory on [0, T].

        Each mode is interpolated in the interaction picture v_n = exp(i z_n^2 t) u_n
        (cubic spline), continued by free evolution outside [0, T] and
        multiplied by the window. The transform grid has K >= 8 z_N^2 points per
        period, enough for nonlinear frequencies up to 4 z_N^2.
        """
        times = np.asarray(traj.times, dtype=float)
        states = np.asarray(traj.states)
        if states.ndim != 2:
            raise PreconditionError("from_trajectory expects a single-sample trajectory")
        t_final = float(times[-1])
        if not 0 < t_final < 0.5:
            raise PreconditionError("space-time fields need a horizon 0 < T < 1/2")
        steps = np.diff(times)
        if len(steps) and np.ptp(steps) > 1e-9 * steps.mean():
            raise PreconditionError("trajectory time grid must be uniform")
        n = states.shape[1]
        z = _zeros_of(zeros)[:n]
        k = samples or _next_pow2(max(WINDOW_SAMPLES, 8 * z[-1] ** 2))
        if not 2 * math.pi / k < math.pi / z[-1] ** 2:
            raise PreconditionError("transform grid under-resolves z_N^2")
        v = states * np.exp(1j * np.outer(times, z**2))
        modes, freqs, vals = [], [], []
        for i in range(n):
            if len(times) > 2:
                spline = CubicSpline(times, v[:, i])
                prof = lambda t, s=spline: s(np.clip(t, 0.0, t_final))
            else:
                prof = lambda t, a=v[0, i]: np.full_like(t, a, dtype=complex)
            m, c = windowed_mode_coefficients(prof, z[i] ** 2, t_final, ramp, k)
            modes.append(np.full(len(m), i + 1))
            freqs.append(m)
            vals.append(c)
        return cls(np.concatenate(modes), np.concatenate(freqs), np.concatenate(vals), z,
                   t_final, {"ramp": ramp, "samples": k})


def xsb_norm(fld: SpaceTimeField, s: float, b: float) -> float:
    """(sum <z_n>^{2s} <z_n^2 - m>^{2b} |f_{n,m}|^2)^{1/2} of the stored
    representation (an upper bound for the infimum-based norm)."""
    if not 0 <= b < 1:
        raise PreconditionError("xsb_norm needs 0 <= b < 1")
    f = fld.merged()
    if not len(f.values):
        return 0.0
    z = f.zeros[f.modes - 1]
    w = japanese(z) ** (2 * s) * japanese(z**2 - f.freqs) ** (2 * b)
    return float(math.sqrt(np.sum(w * np.abs(f.values) ** 2)))


def _sobolev_weights(n: int, zeros, sigma: float) -> np.ndarray:
    return _zeros_of(zeros)[:n] ** sigma


def trapezoid_weights(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if len(times) == 1:
        return np.ones(1)
    w = np.zeros(len(times))
    d = np.diff(times)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def mixed_norm_grid(values, time_weights, basis: SpectralBasis, p: float, q: float,
                    origin=None) -> np.ndarray:
    """L^p_x L^q_t norm of grid values (K, ..., M): time on axis 0, radial
    nodes on the last axis. ``origin`` (K, ...) adds r = 0 to p = inf."""
    if p < 1 or q < 1:
        raise PreconditionError("mixed norms need p, q >= 1")
    a = np.abs(np.asarray(values))
    tw = np.asarray(time_weights).reshape((-1,) + (1,) * (a.ndim - 1))
    inner = a.max(axis=0) if np.isinf(q) else np.sum(tw * a**q, axis=0) ** (1.0 / q)
    if np.isinf(p):
        out = inner.max(axis=-1)
        if origin is not None:
            o = np.abs(np.asarray(origin))
            o = o.max(axis=0) if np.isinf(q) else np.sum(tw[..., 0] * o**q, axis=0) ** (1.0 / q)
            out = np.maximum(out, o)
        return out
    return (inner**p @ basis.weights) ** (1.0 / p)


def mixed_norm(traj, p: float, q: float, basis: SpectralBasis, sigma: float = 0.0,
               times=None) -> np.ndarray:
    """||(sqrt(-Delta))^sigma u||_{L^p_x L^q_t} over B x [0, T) with spatial
    quadrature and the trapezoid rule in time.

    ``traj`` is a Trajectory or a state array (K, ..., N) with ``times``.
    """
    if isinstance(traj, Trajectory):
        times, states = traj.times, traj.states
    else:
        if times is None:
            raise PreconditionError("times are required for raw state arrays")
        states = traj
    states = np.asarray(states)
    n = states.shape[-1]
    if sigma:
        states = states * _sobolev_weights(n, basis.zeros, sigma)
    grid = synthesize(states, basis)
    origin = states @ basis.norm_constants if np.isinf(p) else None
    return mixed_norm_grid(grid, trapezoid_weights(times), basis, p, q, origin)


# -- Duhamel integral in coefficient space ---------------------------------------

def duhamel_field(forcing: SpaceTimeField, t_final: float, ramp: float = DEFAULT_RAMP,
                  resonance_gap: float = 0.5) -> SpaceTimeField:
    """Representation of D(t) = int_0^t exp(i(t - tau) Delta) F(tau) d tau on [0, T].

    Mode k: D_k(t) = sum_m F_km (e(mt) - exp(-i z_k^2 t)/sqrt(2 pi)) / (i (z_k^2 - m)).
    Non-resonant terms keep their exact periodic part; the free part and any
    term with |z_k^2 - m| < resonance_gap are windowed.
    """
    z = forcing.zeros
    modes, freqs, vals = [], [], []
    for k, m, a in forcing.by_mode():
        z2 = z[k - 1] ** 2
        gap = z2 - m
        near = np.abs(gap) < resonance_gap
        far = ~near
        d = a[far] / (1j * gap[far])
        modes.append(np.full(far.sum(), k))
        freqs.append(m[far])
        vals.append(d)
        amp = d.sum() / SQRT_2PI
        if amp != 0:
            mm, c = windowed_mode_coefficients(np.ones_like, z2, t_final, ramp)
            modes.append(np.full(len(mm), k))
            freqs.append(mm)
            vals.append(-amp * c)
        for mr, ar, dr in zip(m[near], a[near], gap[near]):
            def prof(t, ar=ar, dr=dr):
                if abs(dr) < 1e-12:
                    return ar / SQRT_2PI * t
                return ar / SQRT_2PI * (1.0 - np.exp(-1j * dr * t)) / (1j * dr)
            mm, c = windowed_mode_coefficients(prof, float(mr), t_final, ramp)
            modes.append(np.full(len(mm), k))
            freqs.append(mm)
            vals.append(c)
    if not modes:
        return SpaceTimeField([], [], [], z, t_final)
    return SpaceTimeField(np.concatenate(modes), np.concatenate(freqs), np.concatenate(vals), z,
                          t_final).merged()


def triple_products(rows, cols, out_count: int, node_count: int | None = None) -> np.ndarray:
    """C[a, b, k] = int e_{rows[a]} e_{cols[b]} e_{k+1} dx for k < out_count."""
    top = max(max(rows), max(cols), out_count)
    basis = build_basis(top, node_count or 16 * top)
    s = basis.synthesis
    w = basis.weights
    ra = s[:, np.asarray(rows) - 1]
    cb = s[:, np.asarray(cols) - 1]
    return np.einsum("ja,jb,jk->abk", ra * w[:, None], cb, s[:, :out_count], optimize=True)


def product_field(f: SpaceTimeField, g: SpaceTimeField, out_count: int,
                  tensor: np.ndarray | None = None) -> SpaceTimeField:
    """Coefficients of the pointwise product f g projected onto e_1..e_out_count."""
    f, g = f.merged(), g.merged()
    fm, gm = np.unique(f.modes), np.unique(g.modes)
    if tensor is None:
        tensor = triple_products(fm, gm, out_count)
    ia = np.searchsorted(fm, f.modes)
    ib = np.searchsorted(gm, g.modes)
    # every (f entry, g entry) pair; e(mt) e(m't) = e((m+m')t) / sqrt(2 pi)
    mu = (f.freqs[:, None] + g.freqs[None, :]).ravel()
    pv = (f.values[:, None] * g.values[None, :]).ravel() / SQRT_2PI
    pair = (ia[:, None] * len(gm) + ib[None, :]).ravel()
    uniq, inv = np.unique(mu, return_inverse=True)
    # coefficient (k, mu) = sum over entries with that mu of C[pair, k] * pv
    weights = sparse.csr_matrix((pv, (inv, pair)), shape=(len(uniq), len(fm) * len(gm)))
    coeff = weights @ tensor.reshape(len(fm) * len(gm), out_count)  # (U, K)
    zeros = f.zeros if len(f.zeros) >= out_count else dirichlet_zeros(out_count).zeros
    modes = np.repeat(np.arange(1, out_count + 1), len(uniq))
    return SpaceTimeField(modes, np.tile(uniq, out_count), coeff.T.ravel(), zeros).merged()


# -- random band-limited fields ---------------------------------------------------

def random_band_field(stream: NoiseStream, trial: int, modes, zeros, width: int = 4,
                      decay: float = 0.0) -> SpaceTimeField:
    """Gaussian coefficients on |m - round(z_n^2)| <= width for each listed
    mode, scaled by z_n^{-decay} (decay = 1 mimics free-field data)."""
    z = _zeros_of(zeros)
    modes = np.asarray(modes, dtype=np.int64)
    offsets = np.arange(-width, width + 1)
    g = stream.gaussians(trial, len(modes) * len(offsets))
    g = g * np.repeat(z[modes - 1] ** -decay, len(offsets))
    centre = np.rint(z[modes - 1] ** 2).astype(np.int64)
    return SpaceTimeField(np.repeat(modes, len(offsets)),
                          (centre[:, None] + offsets[None, :]).ravel(), g, z)


def _grid_samples(fld: SpaceTimeField, times: np.ndarray, n: int) -> np.ndarray:
    """Mode coefficients (K, n) at ``times`` after removing a common carrier
    (absolute values are unaffected)."""
    carrier = int(np.rint(np.mean(fld.freqs))) if len(fld.freqs) else 0
    shifted = SpaceTimeField(fld.modes, fld.freqs - carrier, fld.values, fld.zeros)
    return shifted.sample(times, n)


def period_mixed_norm(fld: SpaceTimeField, basis: SpectralBasis, p: float, q: float,
                      samples: int | None = None) -> float:
    """L^p_x L^q_t over B x [0, 2 pi) via a carrier-shifted uniform time grid.

    For even q the time integral is exact once K > q/2 times the frequency
    spread; the default K = next power of two >= q * spread.
    """
    f = fld.merged()
    if not len(f.values):
        return 0.0
    spread = int(np.ptp(f.freqs)) + 1
    k = samples or _next_pow2(max(64, (q if np.isfinite(q) else 8) * spread))
    carrier = int(np.rint(np.mean(f.freqs)))
    j = f.freqs - carrier
    if np.any(np.abs(j) >= k // 2):
        raise PreconditionError("time grid too coarse for the field's frequency spread")
    used = np.unique(f.modes)
    coeff = np.zeros((len(used), k), dtype=complex)
    np.add.at(coeff, (np.searchsorted(used, f.modes), j % k), f.values)
    # sum_j c_j exp(-i j t_l) / sqrt(2 pi) on t_l = 2 pi l / K
    series = np.fft.fft(coeff, axis=1).T / SQRT_2PI
    grid = series @ basis.synthesis[:, used - 1].T
    tw = np.full(k, 2 * math.pi / k)
    return float(mixed_norm_grid(grid, tw, basis, p, q))


def interval_mixed_norm(fld: SpaceTimeField, basis: SpectralBasis, p: float, q: float,
                        t_final: float, points_per_cycle: int = 8) -> float:
    """L^p_x L^q_t over B x [0, T) on a trapezoid time grid that resolves the
    field's frequency spread."""
    if not len(fld.values):
        return 0.0
    spread = float(np.ptp(fld.freqs)) + 1.0
    k = int(math.ceil(points_per_cycle * spread * t_final / (2 * math.pi))) + 64
    t = np.linspace(0.0, t_final, k)
    states = _grid_samples(fld, t, basis.dimension)
    grid = synthesize(states, basis)
    return float(mixed_norm_grid(grid, trapezoid_weights(t), basis, p, q))


# -- probes -------------------------------------------------------------------------

@dataclass
class ProbeSweep:
    """LHS / RHS ratios of an inequality over a sweep of one parameter."""

    name: str
    parameter: str
    values: list
    lhs: dict
    rhs: dict
    params: dict

    def ratios(self, v) -> np.ndarray:
        return np.asarray(self.lhs[v]) / np.asarray(self.rhs[v])

    def max_ratios(self) -> np.ndarray:
        return np.array([np.max(self.ratios(v)) for v in self.values])

    def flatness(self) -> float:
        """max / min of the per-value maximum ratio."""
        m = self.max_ratios()
        return float(m.max() / m.min())

    def flat(self, factor: float = 3.0) -> bool:
        return self.flatness() <= factor

    def outlier_free(self, factor: float = 10.0) -> bool:
        """No trial ratio exceeds ``factor`` times the running median of all
        ratios seen up to its sweep value."""
        pooled = []
        for v in self.values:
            r = self.ratios(v)
            pooled.extend(r.tolist())
            if np.max(r) > factor * np.median(pooled):
                return False
        return True

    def rows(self):
        for v in self.values:
            for i, (l, r) in enumerate(zip(self.lhs[v], self.rhs[v])):
                yield (v, i, repr(float(l)), repr(float(r)), repr(float(l / r)))


def modes_in_interval(lo: float, hi: float, zeros) -> np.ndarray:
    z = _zeros_of(zeros)
    return np.nonzero((z >= lo) & (z < hi))[0] + 1


def embedding_ratio(fld: SpaceTimeField, basis: SpectralBasis, b: float, p: float,
                    interval_length: float, eps: float = 0.1) -> tuple[float, float]:
    """(LHS, RHS) of ||P_I f||_{L^p_x L^4_t} <~ |I|^gamma ||P_I f||_{0,b} with
    gamma = 1 - 2b + eps (b < 1/2) or eps (b > 1/2); f is taken as P_I f."""
    if b == 0.5:
        raise PreconditionError("the embedding probe needs b != 1/2")
    gamma = 1 - 2 * b + eps if b < 0.5 else eps
    lhs = period_mixed_norm(fld, basis, p, 4)
    rhs = interval_length**gamma * xsb_norm(fld, 0.0, b)
    return lhs, rhs


def embedding_probe(b: float, p: float, interval_lengths, trials: int, stream: NoiseStream,
                    eps: float = 0.1, width: int = 4) -> ProbeSweep:
    """Random fields supported on z_n in I = [L, 2L) and |m - z_n^2| <= width."""
    if not 0.25 < b < 1 or b == 0.5:
        raise PreconditionError("embedding_probe needs 1/4 < b < 1, b != 1/2")
    if not 2 <= p < 4:
        raise PreconditionError("embedding_probe needs 2 <= p < 4")
    top = max(interval_lengths)
    zeros = dirichlet_zeros(int(2 * top / math.pi) + 4).zeros
    lhs, rhs = {}, {}
    for length in interval_lengths:
        modes = modes_in_interval(length, 2 * length, zeros)
        if not len(modes):
            raise PreconditionError(f"no eigenvalue has z_n in [{length}, {2 * length})")
        n_top = int(modes.max())
        basis = build_basis(n_top)
        lhs[length], rhs[length] = [], []
        for trial in range(trials):
            f = random_band_field(stream, trial, modes, zeros, width)
            l, r = embedding_ratio(f, basis, b, p, length, eps)
            lhs[length].append(l)
            rhs[length].append(r)
    return ProbeSweep("embedding", "interval_length", list(interval_lengths), lhs, rhs,
                      {"b": b, "p": p, "eps": eps, "width": width, "trials": trials,
                       "seed": stream.seed})


def duhamel_probe(b: float, trials: int, stream: NoiseStream, n_list=(8, 16, 32),
                  eps: float = 0.1, t_final: float = 0.3, width: int = 4) -> ProbeSweep:
    """||int_0^t e^{i(t-tau)Delta} f||_{0,b} against
    ||(sqrt(-Delta))^{2b-1+eps} f||_{L^{4/3+eps}_x L^{4/3}_t} on [0, T), for
    random f on modes <= N."""
    if not 0.5 < b < 1:
        raise PreconditionError("duhamel_probe needs 1/2 < b < 1")
    lhs, rhs = {}, {}
    for n in n_list:
        basis = build_basis(n)
        lhs[n], rhs[n] = [], []
        for trial in range(trials):
            f = random_band_field(stream, trial, np.arange(1, n + 1), basis.zeros, width)
            l, r = duhamel_ratio(f, basis, b, eps, t_final)
            lhs[n].append(l)
            rhs[n].append(r)
    return ProbeSweep("duhamel", "N", list(n_list), lhs, rhs,
                      {"b": b, "eps": eps, "T": t_final, "width": width, "trials": trials,
                       "seed": stream.seed})


def duhamel_ratio(f: SpaceTimeField, basis: SpectralBasis, b: float, eps: float,
                  t_final: float) -> tuple[float, float]:
    lhs = xsb_norm(duhamel_field(f, t_final), 0.0, b)
    rhs = interval_mixed_norm(f.with_derivative(2 * b - 1 + eps), basis, 4.0 / 3.0 + eps,
                              4.0 / 3.0, t_final)
    return lhs, rhs


def bilinear_ratio(f: SpaceTimeField, g: SpaceTimeField, low_basis: SpectralBasis, b: float,
                   mu: float, s: float, t_final: float, out_count: int,
                   tensor: np.ndarray | None = None) -> tuple[float, float]:
    gamma = 5 * (2 * b - 1) + mu
    rhs = xsb_norm(f, s, b) * interval_mixed_norm(g.with_derivative(gamma), low_basis, 2, 2, t_final)
    if rhs == 0:
        return 0.0, 0.0
    prod = product_field(f, g, out_count, tensor)
    lhs = xsb_norm(duhamel_field(prod, t_final), s, b)
    return lhs, rhs


def bilinear_probe(b: float, mu: float, n_list, trials: int, stream: NoiseStream,
                   s: float = 0.0, t_final: float = 0.3, width: int = 2) -> ProbeSweep:
    """High-low product estimate: f on modes (N, 2N], g on modes <= N, the
    product projected onto modes <= 3N. Both factors carry free-field
    amplitudes g_n / z_n near the free frequencies."""
    if not b > 0.5:
        raise PreconditionError("bilinear_probe needs b > 1/2")
    lhs, rhs = {}, {}
    for n in n_list:
        out = 3 * n
        zeros = dirichlet_zeros(out).zeros
        high = np.arange(n + 1, 2 * n + 1)
        low = np.arange(1, n + 1)
        tensor = triple_products(high, low, out)
        low_basis = build_basis(n)
        lhs[n], rhs[n] = [], []
        for trial in range(trials):
            f = random_band_field(stream, 2 * trial, high, zeros, width, decay=1.0)
            g = random_band_field(stream, 2 * trial + 1, low, zeros, width, decay=1.0)
            l, r = bilinear_ratio(f, g, low_basis, b, mu, s, t_final, out, tensor)
            lhs[n].append(l)
            rhs[n].append(r)
    return ProbeSweep("bilinear", "N", list(n_list), lhs, rhs,
                      {"b": b, "mu": mu, "s": s, "T": t_final, "width": width,
                       "trials": trials, "seed": stream.seed})


# -- flow-based studies ------------------------------------------------------------

def _saved_times(cfg: FlowConfig) -> np.ndarray:
    k = np.arange(1, cfg.steps + 1)
    keep = (k % cfg.save_every == 0) | (k == cfg.steps)
    return np.concatenate([[0.0], k[keep] * cfg.dt])


def _evolve_batch(phi: np.ndarray, cfg: FlowConfig, basis: SpectralBasis):
    """Evolve a batch; on abort rerun sample by sample, NaN-filling and
    flagging the samples that fail. Returns (times, states, failed)."""
    try:
        tr = evolve(phi, cfg, basis)
        return tr.times, tr.states, np.zeros(len(phi), dtype=bool)
    except BlowUpError:
        pass
    times = _saved_times(cfg)
    states = np.full((len(times), len(phi), cfg.n), np.nan, dtype=complex)
    failed = np.zeros(len(phi), dtype=bool)
    for i in range(len(phi)):
        try:
            states[:, i] = evolve(phi[i], cfg, basis).states
        except BlowUpError:
            failed[i] = True
    return times, states, failed


def flow_mixed_norm_tail(n: int, sigma: float, p: float, q: float, samples: int,
                         stream: NoiseStream, t_final: float = 0.3, sign: str = "defocusing",
                         alpha: int = 2, high_pass: int | None = None, lam=None,
                         batch: int = 250, min_count: int = 20) -> TailCurve:
    """Tail of ||(sqrt(-Delta))^sigma u_N||_{L^p_x L^q_t} over free-measure data.

    With ``high_pass = M`` the field is u_N - P_M u_N and the values are
    multiplied by theta = T^{-1/q} M^{2/p - sigma}.
    """
    if not 0 <= sigma < 0.5:
        raise PreconditionError("flow_mixed_norm_tail needs 0 <= sigma < 1/2")
    if not 2 <= p < (2 / sigma if sigma > 0 else math.inf):
        raise PreconditionError("flow_mixed_norm_tail needs 2 <= p < 2/sigma")
    if high_pass is not None and not 1 <= high_pass < n:
        raise PreconditionError("high-pass cutoff M must satisfy 1 <= M < N")
    basis = build_basis(n)
    cfg = FlowConfig(n=n, t_final=t_final, sign=sign, alpha=alpha)
    values = np.empty(samples)
    flagged = np.zeros(samples, dtype=bool)
    for start in range(0, samples, batch):
        idx = np.arange(start, min(samples, start + batch))
        phi = sample_free_batch(stream, idx, n, basis.zeros)
        times, traj_states, failed = _evolve_batch(phi, cfg, basis)
        if high_pass is not None:
            traj_states = traj_states.copy()
            traj_states[..., :high_pass] = 0
        values[idx] = mixed_norm(traj_states, p, q, basis, sigma, times=times)
        flagged[idx] = failed
    theta = 1.0
    if high_pass is not None:
        theta = t_final ** (-1.0 / q) * high_pass ** (2.0 / p - sigma)
    x = theta * values[~flagged]
    curve = survival(x, lam, min_count=min_count)
    if flagged.any():
        curve.flags.append(f"{int(flagged.sum())} samples aborted by the integrator")
    curve.extra.update(n=n, sigma=sigma, p=p, q=q, T=t_final, theta=theta, high_pass=high_pass,
                       seed=stream.seed, values=x)
    return curve


@dataclass
class ConvergenceTable:
    n_list: list
    s: float
    t_final: float
    distances: np.ndarray  # (samples, steps): d for each sample and dyadic pair
    flagged: np.ndarray
    params: dict

    @property
    def max_distance(self) -> np.ndarray:
        return np.nanmax(self.distances, axis=0)

    @property
    def rms_distance(self) -> np.ndarray:
        return np.sqrt(np.nanmean(self.distances**2, axis=0))

    def fitted_exponent(self, which: str = "max") -> float:
        d = self.max_distance if which == "max" else self.rms_distance
        if len(d) < 2:
            return math.nan
        return float(np.polyfit(np.log(self.n_list[:-1]), np.log(d), 1)[0])

    def decreasing_fraction(self) -> float:
        """Fraction of non-aborted samples whose d_k is strictly decreasing in k."""
        ok = ~self.flagged
        dec = np.all(np.diff(self.distances[ok], axis=1) < 0, axis=1)
        return float(dec.mean()) if ok.any() else 0.0

    def passed(self, fraction: float = 0.9) -> bool:
        return len(self.n_list) >= 4 and self.decreasing_fraction() >= fraction

    def rows(self):
        for k, n in enumerate(self.n_list[:-1]):
            yield (n, repr(float(self.max_distance[k])), repr(self.fitted_exponent()))


def convergence_study(n_list, s: float, t_final: float, stream: NoiseStream, sample_count: int,
                      sign: str = "defocusing", alpha: int = 2, nonlinear_scale: float = 1.0,
                      dt: float | None = None, initial_modes: int | None = None) -> ConvergenceTable:
    """d_k = sup_t ||u_{2N_k} - u_{N_k}||_{H^s} for coupled data P_N phi.

    All truncations share one step size (the default for the largest N) and
    one sample index per row. ``initial_modes`` restricts phi to its first
    modes; ``nonlinear_scale = 0`` gives the linear control.
    """
    n_list = list(n_list)
    if any(b != 2 * a for a, b in zip(n_list, n_list[1:])):
        raise PreconditionError("convergence_study needs a dyadic sequence N_{k+1} = 2 N_k")
    if s >= 0.5:
        raise PreconditionError("convergence_study needs s < 1/2")
    dt = dt or default_dt(max(n_list))
    top = build_basis(max(n_list))
    phi_all = sample_free_batch(stream, sample_count, max(n_list), top.zeros)
    if initial_modes is not None:
        phi_all[:, initial_modes:] = 0
    finals = {}
    flagged = np.zeros(sample_count, dtype=bool)
    for n in n_list:
        basis = build_basis(n)
        cfg = FlowConfig(n=n, t_final=t_final, sign=sign, alpha=alpha, dt=dt,
                         nonlinear_scale=nonlinear_scale)
        _, states, failed = _evolve_batch(phi_all[:, :n], cfg, basis)
        finals[n] = states
        flagged |= failed
    dist = np.empty((sample_count, len(n_list) - 1))
    for k, (a, b) in enumerate(zip(n_list, n_list[1:])):
        dist[:, k] = cth_distance(finals[b], finals[a], s, top.zeros)
    dist[flagged] = np.nan
    return ConvergenceTable(n_list, s, t_final, dist, flagged,
                            {"dt": dt, "sign": sign, "alpha": alpha, "seed": stream.seed,
                             "nonlinear_scale": nonlinear_scale, "samples": sample_count})


def tail_expected_slope(s: float, n_list, zeros) -> float:
    """Log-log slope of the RMS free tail sqrt(sum_{N<n<=2N} <z_n>^{2s}/(pi z_n)^2)."""
    z = _zeros_of(zeros)
    vals = [math.sqrt(np.sum(japanese(z[n:2 * n]) ** (2 * s) / (math.pi * z[n:2 * n]) ** 2))
            for n in n_list]
    return float(np.polyfit(np.log(n_list), np.log(vals), 1)[0])
