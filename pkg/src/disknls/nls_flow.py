"""Frequency-truncated radial NLS in mode coordinates.

With u = sum_n u_n e_n and sigma = +1 (defocusing) or -1 (focusing),

    i d/dt u_n = z_n^2 u_n + sigma * P_N(|u|^alpha u)_n,

which conserves the mass sum |u_n|^2 and

    H_N = 1/2 sum z_n^2 |u_n|^2 + sigma/(alpha+2) int |u|^{alpha+2}.

All routines accept a single mode vector (N,) or a batch (S, N).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .errors import BlowUpError, PreconditionError
from .spectral_disk import SpectralBasis, analyze, hs_norm, synthesize

SIGNS = {"defocusing": 1.0, "focusing": -1.0}
INTEGRATORS = ("strang", "rk4_reference")


def default_dt(n: int) -> float:
    """1e-3 up to N = 32, halved each time N doubles."""
    if n <= 32:
        return 1e-3
    return 1e-3 / 2 ** math.ceil(math.log2(n / 32))


@dataclass(frozen=True)
class FlowConfig:
    n: int
    t_final: float
    sign: str = "defocusing"
    alpha: int = 2
    dt: float | None = None
    integrator: str = "strang"
    save_every: int = 1
    # multiplies the nonlinearity; 0 gives the free flow
    nonlinear_scale: float = 1.0
    blowup_threshold: float = 1e8

    def __post_init__(self):
        if self.sign not in SIGNS:
            raise PreconditionError(f"sign must be one of {sorted(SIGNS)}, got {self.sign!r}")
        if self.alpha <= 0 or self.alpha % 2:
            raise PreconditionError(f"alpha must be a positive even integer, got {self.alpha}")
        if self.sign == "focusing" and self.alpha != 2:
            raise PreconditionError("focusing runs require alpha = 2")
        if self.integrator not in INTEGRATORS:
            raise PreconditionError(f"integrator must be one of {INTEGRATORS}")
        if self.n < 1:
            raise PreconditionError("truncation N must be >= 1")
        if self.dt is None:
            object.__setattr__(self, "dt", default_dt(self.n))
        if not self.dt > 0:
            raise PreconditionError("dt must be positive")
        if not self.t_final >= self.dt:
            raise PreconditionError(f"T={self.t_final} must be >= dt={self.dt}")
        if self.save_every < 1:
            raise PreconditionError("save_every must be >= 1")

    @property
    def sigma(self) -> float:
        return SIGNS[self.sign]

    @property
    def steps(self) -> int:
        return int(math.floor(self.t_final / self.dt + 1e-9))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (K, N) or (K, S, N)
    config: FlowConfig
    diagnostics: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def nonlinear_coeffs(state, basis: SpectralBasis, alpha: int) -> np.ndarray:
    """Mode coefficients of P_N(|u|^alpha u), product formed on the quadrature grid."""
    if alpha < 0 or alpha % 2:
        raise PreconditionError("alpha must be an even integer")
    u = synthesize(state, basis)
    a2 = u.real**2 + u.imag**2
    return analyze(a2 ** (alpha // 2) * u, basis)


def linear_step(state, dt: float, zeros) -> np.ndarray:
    """Exact free flow u_n -> exp(-i z_n^2 dt) u_n."""
    state = np.asarray(state)
    z = np.asarray(getattr(zeros, "zeros", zeros))[: state.shape[-1]]
    return state * np.exp(-1j * z**2 * dt)


def mass(state) -> np.ndarray:
    state = np.asarray(state)
    return np.sum(state.real**2 + state.imag**2, axis=-1)


def potential(state, basis: SpectralBasis, alpha: int) -> np.ndarray:
    """int |u|^{alpha+2} dx."""
    u = synthesize(state, basis)
    return (np.abs(u) ** (alpha + 2)) @ basis.weights


def kinetic(state, zeros) -> np.ndarray:
    state = np.asarray(state)
    z = np.asarray(getattr(zeros, "zeros", zeros))[: state.shape[-1]]
    return 0.5 * np.sum(z**2 * np.abs(state) ** 2, axis=-1)


def hamiltonian(state, basis: SpectralBasis, sign: str = "defocusing", alpha: int = 2):
    sigma = SIGNS[sign]
    return kinetic(state, basis.zeros) + sigma / (alpha + 2) * potential(state, basis, alpha)


class _Stepper:
    def __init__(self, config: FlowConfig, basis: SpectralBasis):
        if basis.dimension != config.n:
            raise PreconditionError(
                f"basis dimension {basis.dimension} differs from truncation N={config.n}"
            )
        self.basis = basis
        self.alpha = config.alpha
        self.coef = -1j * config.sigma * config.nonlinear_scale
        self.z2 = basis.zeros**2
        self.integrator = config.integrator

    def rhs(self, u):
        if self.coef == 0:
            return np.zeros_like(u)
        return self.coef * nonlinear_coeffs(u, self.basis, self.alpha)

    def rot(self, h):
        return np.exp(-1j * self.z2 * h)

    def strang(self, u, h):
        half = self.rot(0.5 * h)
        u = u * half
        if self.coef != 0:
            k1 = self.rhs(u)
            k2 = self.rhs(u + 0.5 * h * k1)
            k3 = self.rhs(u + 0.5 * h * k2)
            k4 = self.rhs(u + h * k3)
            u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return u * half

    def lawson(self, u, h):
        # integrating-factor RK4: exact linear part, RK4 on the interaction picture
        e_half, e_full = self.rot(0.5 * h), self.rot(h)
        k1 = self.rhs(u)
        k2 = self.rhs(e_half * (u + 0.5 * h * k1))
        k3 = self.rhs(e_half * u + 0.5 * h * k2)
        k4 = self.rhs(e_full * u + h * e_half * k3)
        return e_full * u + (h / 6.0) * (e_full * k1 + 2 * e_half * (k2 + k3) + k4)

    def step(self, u, h):
        return self.strang(u, h) if self.integrator == "strang" else self.lawson(u, h)


def step(state, dt: float, config: FlowConfig, basis: SpectralBasis) -> np.ndarray:
    """One step of the configured integrator (dt may be negative)."""
    return _Stepper(config, basis).step(np.asarray(state, dtype=complex), dt)


def evolve(phi, config: FlowConfig, basis: SpectralBasis) -> Trajectory:
    """Integrate the truncated flow from ``phi`` on [0, T] with a uniform step.

    Raises BlowUpError (carrying the partial trajectory) if a coefficient
    becomes non-finite or exceeds ``config.blowup_threshold``.
    """
    u = np.array(phi, dtype=complex)
    if u.shape[-1] != config.n:
        raise PreconditionError(f"initial data has {u.shape[-1]} modes, config has N={config.n}")
    stepper = _Stepper(config, basis)
    k_total = config.steps
    times = [0.0]
    states = [u.copy()]
    for k in range(1, k_total + 1):
        u = stepper.step(u, config.dt)
        peak = np.max(np.abs(u)) if u.size else 0.0
        if not np.isfinite(peak) or peak > config.blowup_threshold:
            kind = "possible blow-up" if config.sign == "focusing" else "numerical overflow"
            raise BlowUpError(
                f"{kind} at step {k} (t={k * config.dt:.6g}): max |u_n| = {peak:.3g}",
                step=k, time=k * config.dt, times=np.array(times), states=np.array(states),
            )
        if k % config.save_every == 0 or k == k_total:
            times.append(k * config.dt)
            states.append(u.copy())
    traj = Trajectory(np.array(times), np.array(states), config)
    traj.diagnostics = conservation_diagnostics(traj, basis)
    return traj


def conservation_diagnostics(traj: Trajectory, basis: SpectralBasis) -> dict:
    cfg = traj.config
    m = mass(traj.states)
    h = hamiltonian(traj.states, basis, cfg.sign, cfg.alpha)
    m0, h0 = m[0], h[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        dm = np.max(np.abs(m - m0), axis=0) / np.abs(m0)
        dh = np.max(np.abs(h - h0), axis=0) / np.abs(h0)
    return {
        "max_relative_mass_drift": float(np.max(np.nan_to_num(dm))),
        "max_relative_hamiltonian_drift": float(np.max(np.nan_to_num(dh))),
    }


def relative_hamiltonian_drift(traj: Trajectory, basis: SpectralBasis) -> np.ndarray:
    """max_t |H(t) - H(0)| / |H(0)| (per sample for batched trajectories)."""
    cfg = traj.config
    h = hamiltonian(traj.states, basis, cfg.sign, cfg.alpha)
    return np.max(np.abs(h - h[0]), axis=0) / np.abs(h[0])


def cth_distance(a, b, s: float, zeros) -> np.ndarray:
    """sup_t ||a(t) - b(t)||_{H^s} for state arrays with time on axis 0; the
    shorter mode axis is zero-padded."""
    a, b = np.asarray(a), np.asarray(b)
    n = max(a.shape[-1], b.shape[-1])
    a = _pad(a, n)
    b = _pad(b, n)
    return np.max(hs_norm(a - b, s, zeros), axis=0)


def _pad(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[-1] == n:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(0, n - x.shape[-1])]
    return np.pad(x, pad)


def with_config(config: FlowConfig, **changes) -> FlowConfig:
    return replace(config, **changes)


def trajectory_rows(traj: Trajectory):
    """Rows (t, n, Re u_n, Im u_n) for a single-sample trajectory."""
    if traj.states.ndim != 2:
        raise PreconditionError("trajectory export expects a single sample")
    for t, state in zip(traj.times, traj.states):
        for n, c in enumerate(state, start=1):
            yield (repr(float(t)), n, repr(float(c.real)), repr(float(c.imag)))
