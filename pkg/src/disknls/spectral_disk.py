"""Radial Dirichlet eigenbasis of the unit disk.

The n-th radial eigenfunction is ``e_n(x) = c_n J_0(z_n |x|)`` where ``z_n`` is
the n-th positive zero of ``J_0`` and ``c_n`` makes ``||e_n||_{L^2(B_2)} = 1``.
Integrals over the disk are done with Gauss-Legendre nodes in the radius, the
weights absorbing the ``2 pi r`` area element.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import PreconditionError

# Branch boundaries for bessel_j; the overlap test in tests/test_spectral_disk.py
# checks adjacent branches agree to 1e-13 at both switch points.
SERIES_MAX = 4.0
ASYMPTOTIC_MIN = 20.0
_MILLER_START = 64


def _bessel_series(order: int, x: np.ndarray) -> np.ndarray:
    half = 0.5 * x
    term = half**order / math.factorial(order)
    total = term.copy()
    q = -half * half
    for k in range(1, 40):
        term = term * q / (k * (k + order))
        total += term
    return total


def _bessel_miller(order: int, x: np.ndarray) -> np.ndarray:
    # Backward recurrence J_{k-1} = (2k/x) J_k - J_{k+1}, normalised by
    # J_0 + 2 sum_k J_{2k} = 1.
    upper = np.zeros_like(x)
    cur = np.full_like(x, 1e-200)
    norm = np.zeros_like(x)
    j0 = j1 = None
    for k in range(_MILLER_START, 0, -1):
        lower = (2.0 * k / x) * cur - upper
        upper, cur = cur, lower
        # cur now holds J_{k-1}
        if (k - 1) % 2 == 0 and k - 1 > 0:
            norm += 2.0 * cur
        if k - 1 == 1:
            j1 = cur.copy()
    j0 = cur
    norm += j0
    return (j0 if order == 0 else j1) / norm


def _bessel_hankel(order: int, x: np.ndarray) -> np.ndarray:
    mu = 4.0 * order * order
    p = np.ones_like(x)
    q = np.zeros_like(x)
    term = np.ones_like(x)
    done = np.zeros(x.shape, dtype=bool)
    prev = np.full_like(x, np.inf)
    for k in range(1, 80):
        term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        # stop each entry once its terms start growing (optimal truncation)
        grow = np.abs(term) >= prev
        done |= grow | (np.abs(term) < 1e-18)
        step = np.where(done, 0.0, term)
        if k % 2 == 1:
            q += step * (-1) ** ((k - 1) // 2)
        else:
            p += step * (-1) ** (k // 2)
        prev = np.abs(term)
        if done.all():
            break
    c, s = np.cos(x), np.sin(x)
    # cos/sin of x - pi/4 - order*pi/2 without forming the shifted argument
    if order == 0:
        cs, sn = (c + s) / math.sqrt(2.0), (s - c) / math.sqrt(2.0)
    else:
        cs, sn = (s - c) / math.sqrt(2.0), -(s + c) / math.sqrt(2.0)
    return np.sqrt(2.0 / (math.pi * x)) * (p * cs - q * sn)


def bessel_j(order: int, x):
    """Bessel function of the first kind, ``order`` in {0, 1}, for ``x >= 0``.

    Power series below 4, Miller's backward recurrence on [4, 20) and the
    Hankel asymptotic expansion from 20 on. Accepts scalars or arrays.
    """
    if order not in (0, 1):
        raise PreconditionError(f"bessel_j supports orders 0 and 1, got {order!r}")
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise PreconditionError("bessel_j requires x >= 0")
    flat = arr.ravel()
    out = np.empty_like(flat)
    small = flat < SERIES_MAX
    large = flat >= ASYMPTOTIC_MIN
    mid = ~small & ~large
    if small.any():
        out[small] = _bessel_series(order, flat[small])
    if mid.any():
        out[mid] = _bessel_miller(order, flat[mid])
    if large.any():
        out[large] = _bessel_hankel(order, flat[large])
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BesselZeroTable:
    zeros: np.ndarray

    @property
    def count(self) -> int:
        return len(self.zeros)


def dirichlet_zeros(count: int) -> BesselZeroTable:
    """First ``count`` positive zeros of J_0, i.e. square roots of the radial
    Dirichlet eigenvalues of the unit disk."""
    if count < 1:
        raise PreconditionError("dirichlet_zeros needs count >= 1")
    n = np.arange(1, count + 1, dtype=float)
    beta = math.pi * (n - 0.25)
    x = beta + 1.0 / (8.0 * beta)
    lo, hi = math.pi * (n - 0.5), math.pi * n
    f_lo = bessel_j(0, lo)
    for _ in range(50):
        f = bessel_j(0, x)
        # keep the sign-change bracket current
        same = np.sign(f) == np.sign(f_lo)
        lo = np.where(same, x, lo)
        f_lo = np.where(same, f, f_lo)
        hi = np.where(same, hi, x)
        newton = x + f / bessel_j(1, x)
        outside = (newton <= lo) | (newton >= hi)
        x_new = np.where(outside, 0.5 * (lo + hi), newton)
        if np.all(np.abs(x_new - x) <= 4 * np.finfo(float).eps * x_new):
            x = x_new
            break
        x = x_new
    return BesselZeroTable(zeros=x)


@dataclass(frozen=True)
class RadialQuadrature:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.nodes)


def radial_quadrature(node_count: int) -> RadialQuadrature:
    """Gauss-Legendre rule in r on (0, 1) with weights ``w_j * 2 pi r_j``."""
    if node_count < 1:
        raise PreconditionError("radial quadrature needs at least one node")
    x, w = np.polynomial.legendre.leggauss(node_count)
    r = 0.5 * (x + 1.0)
    return RadialQuadrature(nodes=r, weights=0.5 * w * 2.0 * math.pi * r)


@dataclass(frozen=True)
class SpectralBasis:
    zero_table: BesselZeroTable
    norm_constants: np.ndarray
    quadrature: RadialQuadrature
    synthesis: np.ndarray  # (M, N), entry c_n J_0(z_n r_j)

    @property
    def dimension(self) -> int:
        return self.synthesis.shape[1]

    @property
    def zeros(self) -> np.ndarray:
        return self.zero_table.zeros

    @property
    def nodes(self) -> np.ndarray:
        return self.quadrature.nodes

    @property
    def weights(self) -> np.ndarray:
        return self.quadrature.weights

    def gram(self) -> np.ndarray:
        s = self.synthesis
        return s.T @ (self.weights[:, None] * s)

    def evaluate(self, coeffs, r) -> np.ndarray:
        """Field values at arbitrary radii ``r`` in [0, 1]."""
        coeffs = np.asarray(coeffs)
        r = np.atleast_1d(np.asarray(r, dtype=float))
        n = coeffs.shape[-1]
        phi = bessel_j(0, np.outer(r, self.zeros[:n])) * self.norm_constants[:n]
        return coeffs @ phi.T

    def origin_values(self) -> np.ndarray:
        """e_n(0) = c_n."""
        return self.norm_constants


def build_basis(dimension: int, node_count: int | None = None) -> SpectralBasis:
    """Eigenbasis e_1..e_N sampled on an M-node radial quadrature.

    M defaults to max(4N, 16). Products of two eigenfunctions are then
    integrated to rounding error and products of six (the L^6 norm of e_N)
    to relative error below 1e-3, shrinking as N grows; the floor keeps tiny
    bases orthonormal.
    """
    if dimension < 1:
        raise PreconditionError("basis dimension must be >= 1")
    if node_count is None:
        node_count = max(4 * dimension, 16)
    if node_count < dimension:
        raise PreconditionError(
            f"node_count M={node_count} < dimension N={dimension}: transform is rank-deficient"
        )
    table = dirichlet_zeros(dimension)
    c = 1.0 / (math.sqrt(math.pi) * np.abs(bessel_j(1, table.zeros)))
    quad = radial_quadrature(node_count)
    synth = bessel_j(0, np.outer(quad.nodes, table.zeros)) * c
    return SpectralBasis(table, c, quad, synth)


def _check_dim(coeffs: np.ndarray, basis: SpectralBasis) -> None:
    if coeffs.shape[-1] != basis.dimension:
        raise PreconditionError(
            f"mode vector has dimension {coeffs.shape[-1]}, basis has {basis.dimension}"
        )


def synthesize(coeffs, basis: SpectralBasis) -> np.ndarray:
    """Grid values u(r_j) = sum_n u_n e_n(r_j). Batched over leading axes."""
    coeffs = np.asarray(coeffs)
    _check_dim(coeffs, basis)
    return coeffs @ basis.synthesis.T


def analyze(grid, basis: SpectralBasis) -> np.ndarray:
    """Mode coefficients <g, e_n> by quadrature. Batched over leading axes."""
    grid = np.asarray(grid)
    if grid.shape[-1] != basis.quadrature.node_count:
        raise PreconditionError(
            f"grid has {grid.shape[-1]} samples, quadrature has {basis.quadrature.node_count}"
        )
    return (grid * basis.weights) @ basis.synthesis


def lp_norm(u, p: float, basis: SpectralBasis, *, grid: bool = False):
    """L^p(B_2) norm of a radial field given by mode coefficients (default) or
    by quadrature-grid values (``grid=True``).

    ``p = inf`` uses the maximum over the grid and the origin, a grid surrogate
    for the true supremum.
    """
    if p < 1:
        raise PreconditionError(f"lp_norm needs p >= 1, got {p}")
    u = np.asarray(u)
    if grid:
        values = u
        if u.shape[-1] != basis.quadrature.node_count:
            raise PreconditionError("grid length does not match the quadrature")
    else:
        _check_dim(u, basis)
        values = synthesize(u, basis)
    a = np.abs(values)
    if np.isinf(p):
        sup = a.max(axis=-1)
        if not grid:
            sup = np.maximum(sup, np.abs(u @ basis.norm_constants))
        return sup
    return (a**p @ basis.weights) ** (1.0 / p)


def japanese(z) -> np.ndarray:
    return np.sqrt(1.0 + np.asarray(z, dtype=float) ** 2)


def hs_norm(coeffs, s: float, zeros) -> np.ndarray:
    """Sobolev norm (sum_n <z_n>^{2s} |u_n|^2)^{1/2}; ``zeros`` may be a basis,
    a zero table or a plain array of z_n."""
    z = getattr(zeros, "zeros", zeros)
    coeffs = np.asarray(coeffs)
    z = np.asarray(z)[: coeffs.shape[-1]]
    return np.sqrt(np.sum(japanese(z) ** (2 * s) * np.abs(coeffs) ** 2, axis=-1))


def export_rows(basis: SpectralBasis):
    """Rows (n, z_n, c_n) for the basis CSV export."""
    return [(n + 1, float(z), float(c)) for n, (z, c) in
            enumerate(zip(basis.zeros, basis.norm_constants))]
