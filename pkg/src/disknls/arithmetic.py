"""Lattice points on circles and near-level sets of eigenvalue pair sums.

Boxes are axis-aligned with integer corner (a, b) and side R1, containing the
integer points a <= n1 < a + R1, b <= n2 < b + R1.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import PreconditionError

MAX_R_SQUARED = 10**10


@dataclass(frozen=True)
class LatticeBox:
    corner: tuple[int, int]
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise PreconditionError("box size R1 must be a positive integer")
        object.__setattr__(self, "corner", (int(self.corner[0]), int(self.corner[1])))

    def contains(self, n1, n2):
        a, b = self.corner
        return (n1 >= a) & (n1 < a + self.size) & (n2 >= b) & (n2 < b + self.size)

    @property
    def x_range(self) -> range:
        return range(self.corner[0], self.corner[0] + self.size)

    @property
    def y_range(self) -> range:
        return range(self.corner[1], self.corner[1] + self.size)


def circle_lattice_points(r_squared: int) -> np.ndarray:
    """All (n1, n2) in Z^2 with n1^2 + n2^2 = R^2, as an array (k, 2)."""
    r_squared = int(r_squared)
    if r_squared < 1:
        raise PreconditionError("R^2 must be a positive integer")
    if r_squared > MAX_R_SQUARED:
        raise PreconditionError(f"R^2 = {r_squared} exceeds the supported range {MAX_R_SQUARED}")
    r = math.isqrt(r_squared)
    n1 = np.arange(-r, r + 1, dtype=np.int64)
    rest = r_squared - n1 * n1
    root = np.sqrt(rest.astype(float)).round().astype(np.int64)
    # correct float rounding of the square root
    root = np.where(root * root > rest, root - 1, root)
    root = np.where((root + 1) * (root + 1) <= rest, root + 1, root)
    hit = root * root == rest
    x, y = n1[hit], root[hit]
    pts = np.concatenate([np.stack([x, y], 1), np.stack([x[y > 0], -y[y > 0]], 1)])
    return pts[np.lexsort((pts[:, 1], pts[:, 0]))]


def circle_points(r_squared: int, box: LatticeBox | None = None) -> int:
    """Number of lattice points on n1^2 + n2^2 = R^2, optionally inside a box."""
    pts = circle_lattice_points(r_squared)
    if box is None:
        return len(pts)
    return int(np.sum(box.contains(pts[:, 0], pts[:, 1])))


def circle_points_brute(r_squared: int, box: LatticeBox | None = None) -> int:
    """Double-loop oracle for circle_points."""
    r = math.isqrt(int(r_squared))
    xs = box.x_range if box else range(-r, r + 1)
    ys = box.y_range if box else range(-r, r + 1)
    return sum(1 for a in xs for b in ys if a * a + b * b == r_squared)


def _box_index_ranges(box: LatticeBox, count: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = box.corner
    if a < 1 or b < 1 or a + box.size - 1 > count or b + box.size - 1 > count:
        raise PreconditionError(
            f"box {box} reaches outside the zero table indices 1..{count}")
    return np.arange(a, a + box.size), np.arange(b, b + box.size)


def eigen_pair_count(level: float, box: LatticeBox, zeros) -> int:
    """#{(n1, n2) in box : |z_{n1}^2 + z_{n2}^2 - level| < 1} by a two-pointer sweep."""
    if not level > 0:
        raise PreconditionError("level must be positive")
    z = np.asarray(getattr(zeros, "zeros", zeros), dtype=float)
    i_idx, j_idx = _box_index_ranges(box, len(z))
    a = z[i_idx - 1] ** 2
    b = z[j_idx - 1] ** 2  # both increasing
    lo_target, hi_target = level - 1.0, level + 1.0
    total = 0
    lo = hi = len(b)
    # as a[i] increases the admissible window of b moves left
    for ai in a:
        while lo > 0 and ai + b[lo - 1] > lo_target:
            lo -= 1
        while hi > 0 and ai + b[hi - 1] >= hi_target:
            hi -= 1
        total += max(hi - lo, 0)
    return total


def eigen_pair_count_brute(level: float, box: LatticeBox, zeros) -> int:
    z = np.asarray(getattr(zeros, "zeros", zeros), dtype=float)
    i_idx, j_idx = _box_index_ranges(box, len(z))
    return sum(1 for i in i_idx for j in j_idx
               if abs(z[i - 1] ** 2 + z[j - 1] ** 2 - level) < 1.0)


# -- divisor-bound sweep --------------------------------------------------------

def _smallest_prime_factors(limit: int) -> np.ndarray:
    spf = np.zeros(limit + 1, dtype=np.int64)
    for p in range(2, limit + 1):
        if spf[p] == 0:
            spf[p::p] = np.where(spf[p::p] == 0, p, spf[p::p])
    return spf


def r2_of_square(r: int, spf: np.ndarray) -> int:
    """r_2(R^2) = 4 prod_{p = 1 mod 4} (2 e_p + 1)."""
    out = 4
    while r > 1:
        p = int(spf[r])
        e = 0
        while r % p == 0:
            r //= p
            e += 1
        if p % 4 == 1:
            out *= 2 * e + 1
    return out


def max_box_count(points: np.ndarray, size: int) -> tuple[int, tuple[int, int]]:
    """Largest number of the given points in one box of side ``size``, with a
    maximising corner. Some optimal box has its left edge at a point's n1 and
    its bottom edge at a point's n2, so only those corners are tried."""
    if not len(points):
        return 0, (0, 0)
    x, y = points[:, 0], points[:, 1]
    xa, ya = np.unique(x), np.unique(y)
    in_x = (x[None, :] >= xa[:, None]) & (x[None, :] < xa[:, None] + size)
    in_y = (y[None, :] >= ya[:, None]) & (y[None, :] < ya[:, None] + size)
    counts = in_x.astype(np.int32) @ in_y.T.astype(np.int32)
    i, j = np.unravel_index(np.argmax(counts), counts.shape)
    return int(counts[i, j]), (int(xa[i]), int(ya[j]))


@dataclass
class DivisorSweep:
    sizes: list
    max_counts: dict  # R1 -> max count over tested R and boxes
    witnesses: dict  # R1 -> (R, corner)
    c_min: float
    radii: list
    rows: list  # (R, R1, corner, count)

    def bound(self, size: int) -> float:
        if size < 3:
            return math.nan
        return math.exp(self.c_min * math.log(size) / math.log(math.log(size)))

    def table(self):
        return [(s, self.max_counts[s], self.bound(s)) for s in self.sizes]

    def small_box_max(self, exponent: float = 1 / 3) -> int:
        """Largest count among tested (R, R1) with R1 <= R^exponent; arcs that
        short hold at most two lattice points."""
        counts = [cnt for r, size, _, cnt in self.rows if size <= r**exponent]
        return max(counts, default=0)


def _default_sizes(r1_max: int) -> list:
    sizes = {1, 2, 3, r1_max}
    s = 4
    while s < r1_max:
        sizes.add(s)
        sizes.add(min(3 * s // 2, r1_max))
        s *= 2
    return sorted(sizes)


def divisor_bound_sweep(r1_max: int, trials: int, r_max: int = 10**4, seed: int = 0,
                        rich: int = 40, sizes=None) -> DivisorSweep:
    """Maximum number of points of n1^2 + n2^2 = R^2 in a box of side R1.

    R runs over ``trials`` random radii up to ``r_max`` plus the ``rich`` radii
    with the most lattice points. c_min is the smallest c with
    count <= exp(c log R1 / log log R1) for every tested (R, R1 >= 3, box).
    """
    if not 1 <= r1_max <= 1000:
        raise PreconditionError("divisor_bound_sweep needs 1 <= R1_max <= 1000")
    if trials < 0 or r_max < 1:
        raise PreconditionError("trials must be >= 0 and r_max >= 1")
    spf = _smallest_prime_factors(r_max)
    counts = np.array([0, 0] + [r2_of_square(r, spf) for r in range(2, r_max + 1)])
    counts[1] = 4
    rng = np.random.default_rng(seed)
    radii = set(rng.integers(1, r_max + 1, size=trials).tolist())
    radii |= set(np.argsort(-counts, kind="stable")[:rich].tolist())
    radii = sorted(int(r) for r in radii if r >= 1)
    sizes = sorted(sizes) if sizes is not None else _default_sizes(r1_max)
    best = {s: 0 for s in sizes}
    wit = {s: None for s in sizes}
    rows = []
    c_min = 0.0
    for r in radii:
        pts = circle_lattice_points(r * r)
        for s in sizes:
            cnt, corner = max_box_count(pts, s)
            rows.append((r, s, corner, cnt))
            if cnt > best[s]:
                best[s], wit[s] = cnt, (r, corner)
            if s >= 3 and cnt > 0:
                c_min = max(c_min, math.log(cnt) * math.log(math.log(s)) / math.log(s))
    return DivisorSweep(sizes, best, wit, c_min, radii, rows)
