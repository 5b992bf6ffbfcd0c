"""Numerical surrogates for the deterministic limit map ``(mu, eta) -> (mu Q, eta R)``.

Two methods are provided:

``QuantileGrid`` (d = 1, deterministic)
    ``mu`` is held as ``G`` equal-weight quantile nodes. One step pushes every
    node through the particle update; conditionally on the drift multiplier the
    image of a node is exactly Gaussian, so the new law is a Gaussian mixture
    (Gauss-Hermite nodes over the multiplier when it is random). The new nodes
    are the midpoint quantiles of that mixture.
``Ensemble`` (any d, random)
    ``mu`` is a large particle cloud pushed through the update with fresh noise.

In both cases the field is advanced exactly and then compacted to a fixed
component budget by deterministic stratified resampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import special

from .dynamics import ModelParams, interaction_term, _move, stream
from .field import MixtureField, compact_stratified, evolve_exact
from .transport import DiscreteMeasure, w1_estimate, w1_exact_1d, w1_fields_1d

__all__ = [
    "QuantileGrid",
    "Ensemble",
    "LimitState",
    "LimitTrajectory",
    "FixedPointReport",
    "UnsupportedMethodError",
    "psi_step",
    "run_limit",
    "iterate_to_fixed_point",
    "initial_measure",
    "limit_distance",
    "requantize",
]

FIELD_BUDGET = 4096


class UnsupportedMethodError(ValueError):
    pass


@dataclass(frozen=True)
class QuantileGrid:
    nodes: int = 2048
    gh_order: int = 32
    resolution: int = 64

    name = "quantile_grid"


@dataclass(frozen=True)
class Ensemble:
    n_ref: int = 50_000
    seed: int = 0

    name = "ensemble"


Method = Union[QuantileGrid, Ensemble]


@dataclass(frozen=True, eq=False)
class LimitState:
    mu: DiscreteMeasure
    eta: MixtureField
    step: int = 0


@dataclass
class LimitTrajectory:
    """Sequence of limit states ``(mu_n, eta_n)``, ``n = 0..n_steps``."""

    states: list
    method: Method
    field_budget: int = FIELD_BUDGET

    def __len__(self):
        return len(self.states)

    def __getitem__(self, n) -> LimitState:
        return self.states[n]

    @property
    def n_ref(self) -> int:
        return self.method.nodes if isinstance(self.method, QuantileGrid) else self.method.n_ref

    def metadata(self) -> dict:
        meta = {"method": self.method.name, "N_ref": self.n_ref, "field_budget": self.field_budget}
        if isinstance(self.method, Ensemble):
            meta["seed"] = self.method.seed
        return meta

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata(),
            "steps": [
                {"step": s.step, "mu": {"points": s.mu.points.tolist(), "weights": s.mu.weights.tolist()},
                 "eta": s.eta.to_dict()}
                for s in self.states
            ],
        }


@dataclass
class FixedPointReport:
    converged: bool
    iterations: int
    distances: list = field(default_factory=list)
    fitted_rate: float = math.nan
    warning: str = ""


# ---------------------------------------------------------------------------
# initial laws


def initial_measure(dim: int, method: Method, kind: str = "gaussian", loc=0.0, scale: float = 1.0,
                    rng: np.random.Generator | None = None) -> DiscreteMeasure:
    """Reference measure for ``gaussian`` (loc + scale Z) or ``point`` initial laws."""
    loc = np.broadcast_to(np.asarray(loc, dtype=float), (dim,))
    if kind not in ("gaussian", "point"):
        raise ValueError(f"unknown initial law {kind!r}")
    if isinstance(method, QuantileGrid):
        if dim != 1:
            raise UnsupportedMethodError("the quantile grid is one-dimensional")
        G = method.nodes
        if kind == "point" or scale == 0.0:
            x = np.full(G, loc[0])
        else:
            x = loc[0] + scale * special.ndtri((np.arange(G) + 0.5) / G)
        return DiscreteMeasure.uniform(x[:, None])
    rng = stream(method.seed, 0, 0) if rng is None else rng
    n = method.n_ref
    if kind == "point":
        pts = np.tile(loc, (n, 1))
    else:
        pts = loc + scale * rng.standard_normal((n, dim))
    return DiscreteMeasure.uniform(pts)


def requantize(mu: DiscreteMeasure, G: int) -> DiscreteMeasure:
    """Midpoint quantiles of a one-dimensional discrete measure at ``G`` levels."""
    x = mu.points[:, 0]
    order = np.argsort(x, kind="stable")
    cw = np.cumsum(mu.weights[order])
    levels = (np.arange(G) + 0.5) / G * cw[-1]
    j = np.minimum(np.searchsorted(cw, levels, side="left"), x.size - 1)
    return DiscreteMeasure.uniform(x[order][j][:, None])


# ---------------------------------------------------------------------------
# one application of the limit map


def _field_step(mu: DiscreteMeasure, eta: MixtureField, params: ModelParams, budget: int) -> MixtureField:
    return compact_stratified(evolve_exact(eta, mu, params.alpha, params.P, params.P_dep), budget)


def _quantile_push(mu: DiscreteMeasure, eta: MixtureField, params: ModelParams,
                   method: QuantileGrid) -> DiscreteMeasure:
    x = mu.points[:, 0]
    w = mu.weights
    a = float(params.A[0, 0])
    dr, nz, delta = params.drift, params.noise, params.delta
    if delta != 0.0 and dr.a1 != 0.0:
        g = eta.gradient(mu.points)[:, 0]
    else:
        g = np.zeros_like(x)
    lin = dr.a1 * g + dr.a2 * float(w @ x) + dr.a3 * x
    extra = np.zeros_like(x)
    if dr.variant == "interaction" and dr.kappa != 0.0:
        extra = dr.kappa * interaction_term(mu, mu.points)[:, 0]
    base = a * x + delta * (nz.L_mean * lin + nz.c_mean + extra)
    s = math.sqrt(nz.b**2 + (delta * nz.c_sd) ** 2)
    if nz.L_sd > 0.0 and delta != 0.0:
        t, wq = np.polynomial.hermite_e.hermegauss(method.gh_order)
        wq = wq / wq.sum()
        centers = (base[:, None] + delta * nz.L_sd * lin[:, None] * t[None, :]).ravel()
        weights = (w[:, None] * wq[None, :]).ravel()
    else:
        centers, weights = base, w
    G = method.nodes
    if s == 0.0:
        return requantize(DiscreteMeasure.normalized(centers[:, None], weights), G)
    mix = MixtureField.build(weights, centers[:, None], s, 0)
    h = s / method.resolution
    lo, hi = float(centers.min() - 12.0 * s), float(centers.max() + 12.0 * s)
    n = int(min(math.ceil((hi - lo) / h) + 1, 1 << 21))
    grid = np.linspace(lo, hi, n)
    F = mix.cdf_on_grid(grid)
    levels = (np.arange(G) + 0.5) / G
    # F is nondecreasing; make it strictly increasing for interpolation
    F = np.maximum.accumulate(F)
    keep = np.concatenate([[True], np.diff(F) > 0])
    nodes = np.interp(levels, F[keep], grid[keep])
    return DiscreteMeasure.uniform(nodes[:, None])


def _ensemble_push(mu: DiscreteMeasure, eta: MixtureField, params: ModelParams,
                   rng: np.random.Generator) -> DiscreteMeasure:
    x = mu.points
    eps = params.noise.draw(rng, x.shape[0], params.dim)
    if params.delta != 0.0 and params.drift.a1 != 0.0:
        g = eta.gradient(x)
    else:
        g = np.zeros_like(x)
    return DiscreteMeasure.uniform(_move(x, g, mu, params, eps))


def psi_step(mu: DiscreteMeasure, eta: MixtureField, params: ModelParams, method: Method,
             rng: np.random.Generator | None = None, field_budget: int = FIELD_BUDGET):
    """One application of the limit map; returns ``(mu+, eta+)``."""
    if isinstance(method, QuantileGrid):
        if params.dim != 1:
            raise UnsupportedMethodError("the quantile grid is one-dimensional")
        mu_new = _quantile_push(mu, eta, params, method)
    elif isinstance(method, Ensemble):
        if rng is None:
            raise ValueError("the ensemble method needs a generator")
        mu_new = _ensemble_push(mu, eta, params, rng)
    else:
        raise UnsupportedMethodError(f"unknown method {method!r}")
    return mu_new, _field_step(mu, eta, params, field_budget)


def run_limit(params: ModelParams, mu0: DiscreteMeasure, eta0: MixtureField, n_steps: int,
              method: Method, field_budget: int = FIELD_BUDGET) -> LimitTrajectory:
    """States ``0..n_steps`` of the limit system."""
    states = [LimitState(mu0, eta0, 0)]
    mu, eta = mu0, eta0
    for n in range(n_steps):
        rng = stream(method.seed, 1, n) if isinstance(method, Ensemble) else None
        mu, eta = psi_step(mu, eta, params, method, rng, field_budget)
        states.append(LimitState(mu, eta, n + 1))
    return LimitTrajectory(states, method, field_budget)


# ---------------------------------------------------------------------------
# distances and fixed points


def limit_distance(a: LimitState, b: LimitState, rng: np.random.Generator | None = None,
                   n_samples: int = 2000, reps: int = 4) -> tuple[float, float]:
    """``(W1(mu_a, mu_b), W1(eta_a, eta_b))``; exact in d = 1, Monte Carlo otherwise."""
    if a.mu.dim == 1:
        return w1_exact_1d(a.mu, b.mu), w1_fields_1d(a.eta, b.eta, resolution=64)
    rng = np.random.default_rng(0) if rng is None else rng
    return (w1_estimate(a.mu, b.mu, n_samples, reps, rng)[0],
            w1_estimate(a.eta, b.eta, n_samples, reps, rng)[0])


def fit_geometric_rate(values, floor: float = 0.0) -> float:
    """Least-squares slope of ``log values`` against step, as a per-step factor."""
    v = np.asarray(values, dtype=float)
    n = np.arange(v.size)
    ok = v > max(floor, 1e-300)
    if ok.sum() < 3:
        return math.nan
    slope = np.polyfit(n[ok], np.log(v[ok]), 1)[0]
    return float(math.exp(slope))


def iterate_to_fixed_point(params: ModelParams, init, tol: float = 1e-3, max_iter: int = 500,
                           method: Method | None = None, field_budget: int = FIELD_BUDGET):
    """Iterate the limit map until consecutive states are within ``tol`` (summed W1).

    Returns ``(mu_inf, eta_inf, FixedPointReport)``; exceeding ``max_iter`` gives a
    non-converged report rather than an exception.
    """
    from .stability import compute_constants

    method = QuantileGrid() if method is None else method
    mu, eta = init
    report = FixedPointReport(False, 0)
    try:
        rep = compute_constants(params)
        if not rep.cond_contraction:
            report.warning = f"c1 + c2 = {rep.c1 + rep.c2:.4g} >= 1: uniqueness not guaranteed"
    except Exception as exc:  # constants are advisory here
        report.warning = f"stability constants unavailable: {exc}"
    prev = LimitState(mu, eta, 0)
    for n in range(max_iter):
        rng = stream(method.seed, 1, n) if isinstance(method, Ensemble) else None
        mu, eta = psi_step(prev.mu, prev.eta, params, method, rng, field_budget)
        cur = LimitState(mu, eta, n + 1)
        dm, de = limit_distance(prev, cur)
        report.distances.append(dm + de)
        report.iterations = n + 1
        prev = cur
        if dm + de < tol:
            report.converged = True
            break
    report.fitted_rate = fit_geometric_rate(report.distances)
    return prev.mu, prev.eta, report
