"""Wasserstein-1 distances between discrete measures, fields and reference laws.

Solvers
-------
``w1_exact_1d``
    CDF-difference integral on the real line.
``w1_exact_assignment``
    Exact optimal transport in any dimension for small instances (Hungarian
    algorithm for equal-size uniform measures, transportation LP otherwise).
``w1_dyadic_bound``
    Multiscale upper bound from cell-mass differences over nested dyadic cubes
    inside growing annuli.
``w1_estimate``
    Monte Carlo average of exact distances between matched-size samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import optimize, sparse, special

__all__ = [
    "DiscreteMeasure",
    "GaussianLaw",
    "BudgetError",
    "w1_exact_1d",
    "w1_to_gaussian_1d",
    "w1_exact_assignment",
    "w1_dyadic_bound",
    "w1_estimate",
    "w1_uniform_samples",
    "w1_fields_1d",
]

ASSIGNMENT_BUDGET = 256
_LP_TOL = {"dual_feasibility_tolerance": 1e-10, "primal_feasibility_tolerance": 1e-10}


class BudgetError(ValueError):
    """Instance too large for the exact solver."""


class Sampleable(Protocol):
    dim: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported probability measure ``sum_i w_i delta_{x_i}``.

    Parameters
    ----------
    points : (n, d) array
    weights : (n,) array summing to one
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a non-empty (n, d) array")
        if w.shape != (pts.shape[0],):
            raise ValueError("weights must have one entry per point")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def normalized(cls, points, weights) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=float)
        return cls(points, w / w.sum())

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def abs_moment(self, p: float = 1.0) -> float:
        r = np.linalg.norm(self.points, axis=1)
        return float(self.weights @ r**p)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 1:
            return np.repeat(self.points, n, axis=0)
        idx = rng.choice(self.size, size=n, p=self.weights)
        return self.points[idx]

    def expect(self, f) -> float:
        return float(self.weights @ f(self.points))


@dataclass(frozen=True)
class GaussianLaw:
    """Isotropic Gaussian ``N(mean, scale^2 I)`` used as a continuous reference."""

    mean: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.scale * rng.standard_normal((n, self.dim))

    def box_mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Mass of boxes ``prod (lo_i, hi_i]``; rows are boxes."""
        a = (lo - self.mean) / self.scale
        b = (hi - self.mean) / self.scale
        return np.prod(_interval_mass(a, b), axis=-1)

    def outside_abs_moment(self, radius: float) -> float:
        """Upper bound on ``E[|X|; X outside (-R, R]^d]`` (Cauchy-Schwarz)."""
        p_in = float(self.box_mass(np.full(self.dim, -radius), np.full(self.dim, radius)))
        second = float(self.mean @ self.mean) + self.dim * self.scale**2
        return math.sqrt(second * max(1.0 - p_in, 0.0))


def _interval_mass(a, b):
    # Phi(b) - Phi(a), computed on the side of the shorter tail
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    upper = special.ndtr(-a) - special.ndtr(-b)
    lower = special.ndtr(b) - special.ndtr(a)
    return np.where(a > 0, upper, lower)


# ---------------------------------------------------------------------------
# one dimension


def w1_exact_1d(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    """Exact W1 on the line via ``int |F_a - F_b|``."""
    if a.dim != 1 or b.dim != 1:
        raise ValueError("w1_exact_1d requires one-dimensional measures")
    if a.size == b.size and a.is_uniform and b.is_uniform:
        xa = np.sort(a.points[:, 0], kind="stable")
        xb = np.sort(b.points[:, 0], kind="stable")
        return float(np.mean(np.abs(xa - xb)))
    x = np.concatenate([a.points[:, 0], b.points[:, 0]])
    w = np.concatenate([a.weights, -b.weights])
    order = np.argsort(x, kind="stable")
    x = x[order]
    cdiff = np.cumsum(w[order])[:-1]
    return float(np.sum(np.abs(cdiff) * np.diff(x)))


def _phi_integral(z):
    """Antiderivative ``z Phi(z) + phi(z)`` of the standard normal CDF (zero at -inf)."""
    return z * special.ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def w1_to_gaussian_1d(a: DiscreteMeasure, law: GaussianLaw) -> float:
    """Exact W1 between a discrete measure and ``N(mean, scale^2)`` on the line.

    Integrates ``|F_a - Phi|`` interval by interval with the closed-form
    antiderivative of ``Phi``, splitting each interval where the step level
    crosses the normal CDF.
    """
    if a.dim != 1 or law.dim != 1:
        raise ValueError("w1_to_gaussian_1d requires one-dimensional laws")
    s = float(law.scale)
    order = np.argsort(a.points[:, 0], kind="stable")
    z = (a.points[order, 0] - law.mean[0]) / s
    c = np.cumsum(a.weights[order])[:-1]
    H = _phi_integral
    total = H(z[0]) + H(-z[-1])
    lo, hi = z[:-1], z[1:]
    q = np.clip(special.ndtri(np.clip(c, 0.0, 1.0)), lo, hi)
    total += np.sum(c * (q - lo) - (H(q) - H(lo)) + (H(hi) - H(q)) - c * (hi - q))
    return float(s * total)


def w1_uniform_samples(xa: np.ndarray, xb: np.ndarray) -> float:
    """Exact W1 between two equal-size uniform point clouds (any dimension)."""
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    if xa.ndim == 1:
        xa, xb = xa[:, None], xb[:, None]
    if xa.shape != xb.shape:
        raise ValueError("sample clouds must have the same shape")
    if xa.shape[1] == 1:
        return float(np.mean(np.abs(np.sort(xa[:, 0]) - np.sort(xb[:, 0]))))
    cost = _cost_matrix(xa, xb)
    r, c = optimize.linear_sum_assignment(cost)
    return float(cost[r, c].sum() / xa.shape[0])


# ---------------------------------------------------------------------------
# exact transport in any dimension


def _cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _peel_flows(support_i, support_j, a, b):
    """Recompute transport flows on a spanning-forest support from the marginals.

    Returns ``None`` if the support is not a forest (degenerate LP output).
    """
    n, m = a.size, b.size
    ra = a.astype(float).copy()
    rb = b.astype(float).copy()
    edges = list(zip(support_i.tolist(), support_j.tolist()))
    flows = np.zeros(len(edges))
    deg = np.zeros(n + m, dtype=int)
    inc: list[list[int]] = [[] for _ in range(n + m)]
    for e, (i, j) in enumerate(edges):
        deg[i] += 1
        deg[n + j] += 1
        inc[i].append(e)
        inc[n + j].append(e)
    alive = np.ones(len(edges), dtype=bool)
    stack = [v for v in range(n + m) if deg[v] == 1]
    done = 0
    while stack:
        v = stack.pop()
        if deg[v] != 1:
            continue
        e = next(k for k in inc[v] if alive[k])
        i, j = edges[e]
        f = ra[i] if v < n else rb[j]
        f = max(f, 0.0)
        flows[e] = f
        ra[i] -= f
        rb[j] -= f
        alive[e] = False
        done += 1
        for u in (i, n + j):
            deg[u] -= 1
            if deg[u] == 1:
                stack.append(u)
    if done != len(edges):
        return None
    return flows


def w1_exact_assignment(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    """Exact optimal transport cost with Euclidean ground metric.

    Raises
    ------
    BudgetError
        If the total atom count exceeds 256; use :func:`w1_dyadic_bound` instead.
    """
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if a.size + b.size > ASSIGNMENT_BUDGET:
        raise BudgetError(
            f"{a.size + b.size} atoms exceed the exact budget of {ASSIGNMENT_BUDGET}; "
            "use w1_dyadic_bound for large instances")
    cost = _cost_matrix(a.points, b.points)
    if a.size == b.size and a.is_uniform and b.is_uniform:
        r, c = optimize.linear_sum_assignment(cost)
        return float(cost[r, c].sum() / a.size)
    n, m = cost.shape
    rows = np.repeat(np.arange(n), m)
    cols = np.arange(n * m)
    a_eq = sparse.vstack([
        sparse.csr_matrix((np.ones(n * m), (rows, cols)), shape=(n, n * m)),
        sparse.csr_matrix((np.ones(n * m), (np.tile(np.arange(m), n), cols)), shape=(m, n * m)),
    ]).tocsr()[:-1]
    b_eq = np.concatenate([a.weights, b.weights])[:-1]
    # default HiGHS tolerances (1e-7) can stop at a slightly suboptimal vertex
    res = optimize.linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                           method="highs-ds", options=_LP_TOL)
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    x = res.x.reshape(n, m)
    thresh = 1e-12
    si, sj = np.nonzero(x > thresh)
    flows = _peel_flows(si, sj, a.weights, b.weights)
    if flows is None:
        return float(np.sum(cost * x))
    return float(np.sum(flows * cost[si, sj]))


# ---------------------------------------------------------------------------
# dyadic multiscale bound


def _cell_index(points: np.ndarray, scale_n: int, level: int) -> np.ndarray:
    """Integer cell coordinates of points in the level-``level`` partition of (-2^n, 2^n]^d."""
    side = 2.0 ** (scale_n + 1 - level)
    # cells are half-open (lo, lo + side]
    return np.ceil((points + 2.0**scale_n) / side).astype(np.int64) - 1


def _annulus_index(points: np.ndarray, depth_scales: int) -> np.ndarray:
    """Annulus label: 0 for (-1,1]^d, n for B_n, -1 outside (-2^S, 2^S]^d."""
    # containment in (-r, r]^d: every x_i > -r and x_i <= r
    lab = np.full(points.shape[0], -1, dtype=np.int64)
    for n in range(depth_scales, -1, -1):
        r = 2.0**n
        inside = np.all((points > -r) & (points <= r), axis=1)
        lab[inside] = n
    return lab


def w1_dyadic_bound(a: DiscreteMeasure, b, depth_scales: int = 8, depth_levels: int = 12,
                    constant: float | None = None) -> float:
    """Multiscale upper bound on W1.

    The bound is the transport cost along a tree whose nodes are dyadic cells of
    the annuli ``B_n``; each tree edge is at least as long as the Euclidean
    distance between its endpoints, so the result dominates the exact W1::

        C * sum_n 2^n sum_{l>=1} 2^{-l} sum_F |a(2^n F cap B_n) - b(2^n F cap B_n)|
        + sum_x |a{x} - b{x}| * |x - centre(leaf(x))|
        + int_{outside} |x| da + int_{outside} |x| db

    with ``C = sqrt(d)`` by default (equal to 1 on the line). Mass outside
    ``(-2^S, 2^S]^d`` is moved to the origin and its cost added explicitly.

    Parameters
    ----------
    a : DiscreteMeasure
    b : DiscreteMeasure or GaussianLaw
    depth_scales : int
        Largest annulus index ``S``.
    depth_levels : int
        Finest dyadic level ``L`` inside each annulus.
    """
    d = a.dim
    if b.dim != d:
        raise ValueError("dimension mismatch")
    c = math.sqrt(d) if constant is None else float(constant)
    S, L = int(depth_scales), int(depth_levels)
    if S < 0 or L < 0:
        raise ValueError("depths must be nonnegative")

    discrete_b = isinstance(b, DiscreteMeasure)
    if discrete_b:
        pts = np.concatenate([a.points, b.points])
        wts = np.concatenate([a.weights, -b.weights])
    else:
        pts, wts = a.points, a.weights

    lab = _annulus_index(pts, S)
    out = lab < 0
    tail = float(np.sum(np.abs(wts[out]) * np.linalg.norm(pts[out], axis=1)))
    if not discrete_b:
        tail += b.outside_abs_moment(2.0**S)
    # relocated tail mass sits at the origin, inside B_0
    pts = np.where(out[:, None], 0.0, pts)
    lab = np.where(out, 0, lab)

    total = 0.0
    for n in range(S + 1):
        sel = lab == n
        if not discrete_b:
            b_annulus = _gauss_annulus_mass(b, n)
        if not np.any(sel) and (discrete_b or b_annulus == 0.0):
            continue
        p_n, w_n = pts[sel], wts[sel]
        for l in range(1, L + 1):
            idx = _cell_index(p_n, n, l)
            if idx.shape[0]:
                uniq, inv = np.unique(idx, axis=0, return_inverse=True)
                inv = inv.reshape(-1)
                cell_w = np.bincount(inv, weights=w_n, minlength=uniq.shape[0])
            else:
                uniq = np.zeros((0, d), dtype=np.int64)
                cell_w = np.zeros(0)
            if discrete_b:
                s = float(np.sum(np.abs(cell_w)))
            else:
                side = 2.0 ** (n + 1 - l)
                lo = -(2.0**n) + uniq * side
                bm = _gauss_cell_annulus_mass(b, lo, lo + side, n)
                s = float(np.sum(np.abs(cell_w - bm))) + max(b_annulus - float(bm.sum()), 0.0)
            total += c * 2.0 ** (n - l) * s
        # leaf edges
        side_l = 2.0 ** (n + 1 - L)
        leaf = _cell_index(p_n, n, L)
        centre = -(2.0**n) + (leaf + 0.5) * side_l
        dist = np.linalg.norm(p_n - centre, axis=1)
        if discrete_b:
            if p_n.shape[0]:
                uniq, inv = np.unique(p_n, axis=0, return_inverse=True)
                inv = inv.reshape(-1)
                net = np.bincount(inv, weights=w_n, minlength=uniq.shape[0])
                dist_u = np.zeros(uniq.shape[0])
                dist_u[inv] = dist
                total += float(np.sum(np.abs(net) * dist_u))
        else:
            total += float(np.sum(np.abs(w_n) * dist))
            total += c * side_l / 2.0 * b_annulus
    return float(total + tail)


def _gauss_annulus_mass(law: GaussianLaw, n: int) -> float:
    d = law.dim
    r = 2.0**n
    outer = float(law.box_mass(np.full(d, -r), np.full(d, r)))
    if n == 0:
        return outer
    ri = 2.0 ** (n - 1)
    inner = float(law.box_mass(np.full(d, -ri), np.full(d, ri)))
    return max(outer - inner, 0.0)


def _gauss_cell_annulus_mass(law: GaussianLaw, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Mass of ``cell cap B_n`` for cells lying inside ``(-2^n, 2^n]^d``."""
    full = law.box_mass(lo, hi)
    if n == 0 or lo.shape[0] == 0:
        return full
    ri = 2.0 ** (n - 1)
    ilo = np.maximum(lo, -ri)
    ihi = np.minimum(hi, ri)
    has = np.all(ihi > ilo, axis=1)
    inner = np.zeros_like(full)
    if np.any(has):
        inner[has] = law.box_mass(ilo[has], ihi[has])
    return np.maximum(full - inner, 0.0)


# ---------------------------------------------------------------------------
# Monte Carlo estimate


def w1_estimate(src_a: Sampleable, src_b: Sampleable, n_samples: int, reps: int,
                rng: np.random.Generator) -> tuple[float, float]:
    """Mean and standard error of exact W1 between ``n_samples``-point draws.

    Empirical W1 is biased upwards by the sampling fluctuation of both sides;
    equal sample sizes keep that bias matched across compared estimates.
    """
    if reps < 1 or n_samples < 1:
        raise ValueError("n_samples and reps must be positive")
    vals = np.empty(reps)
    for r in range(reps):
        xa = src_a.sample(n_samples, rng)
        xb = src_b.sample(n_samples, rng)
        vals[r] = w1_uniform_samples(xa, xb)
    se = float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return float(vals.mean()), se


# ---------------------------------------------------------------------------
# mixtures on the line


def w1_fields_1d(f, g, resolution: int = 64) -> float:
    """W1 between two one-dimensional mixture fields via ``int |F_f - F_g|``.

    Both CDFs are evaluated on a common uniform grid with spacing
    ``min bandwidth / resolution`` and integrated by the trapezoid rule.
    """
    if f.dim != 1 or g.dim != 1:
        raise ValueError("w1_fields_1d requires one-dimensional fields")
    lo = min(f.support_bounds()[0], g.support_bounds()[0])
    hi = max(f.support_bounds()[1], g.support_bounds()[1])
    h = min(f.bandwidths.min(), g.bandwidths.min()) / resolution
    n = int(min(max(math.ceil((hi - lo) / h) + 1, 64), 1 << 20))
    grid = np.linspace(lo, hi, n)
    diff = np.abs(f.cdf_on_grid(grid) - g.cdf_on_grid(grid))
    return float(np.trapezoid(diff, grid))
