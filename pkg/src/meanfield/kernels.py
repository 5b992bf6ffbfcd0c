"""Transition kernels for chemical diffusion and particle deposits.

Two translation-invariant families are shipped:

* ``gaussian``: ``p(x, y) = (2 pi lam^2)^(-d/2) exp(-|y - x|^2 / (2 lam^2))``
* ``biexponential`` (d = 1 only): ``p(x, y) = exp(-|y - x| / lam) / (2 lam)``

Every kernel carries the analytic constants consumed by :mod:`meanfield.stability`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import integrate, optimize, special

__all__ = [
    "Family",
    "KernelSpec",
    "KernelConstants",
    "DivergenceError",
    "density",
    "grad_density",
    "sample",
    "constants",
    "exp_moment",
    "noise_abs_moment",
]


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    BIEXPONENTIAL = "biexponential"


FAMILY_CODES = {Family.GAUSSIAN: 0, Family.BIEXPONENTIAL: 1}
CODE_FAMILIES = {v: k for k, v in FAMILY_CODES.items()}


class DivergenceError(ValueError):
    """Raised when a requested moment is infinite."""


@dataclass(frozen=True)
class KernelConstants:
    """Analytic constants of a transition kernel.

    Attributes
    ----------
    lip_pushforward : float
        Lipschitz constant of ``x -> P(x, .)`` acting on Lipschitz test functions.
    lip_grad : float
        Lipschitz constant of ``(x, y) -> grad_y p(x, y)`` (sup of the Hessian norm).
    grad_growth : float
        ``M`` with ``sup_x |grad_y p(x, y)| <= M (1 + |y|)``.
    grad_at_zero : float
        ``sup_x |grad_y p(x, 0)|``, the offset of the linear gradient-growth bound.
    """

    lip_pushforward: float
    lip_grad: float
    grad_growth: float
    grad_at_zero: float
    h1_slope: float
    h1_at_zero: float
    alpha1_max: float
    _family: Family = field(repr=False)
    _bandwidth: float = field(repr=False)
    _dim: int = field(repr=False)

    def h2(self, alpha1: float) -> float:
        """Log prefactor of the exponential-moment bound."""
        lam = self._bandwidth
        if self._family is Family.GAUSSIAN:
            return 0.5 * lam**2 * alpha1**2
        if alpha1 * lam >= 1.0:
            return math.inf
        return -math.log1p(-(alpha1 * lam) ** 2)

    def h3(self, alpha1: float) -> float:
        return 0.0

    def moment_1ptau(self, tau: float) -> float:
        """Smallest ``m`` with ``E|x + noise|^(1+tau) <= m (1 + |x|^(1+tau))`` for all x."""
        return _moment_growth_bound(self._family, self._bandwidth, self._dim, tau)


@dataclass(frozen=True)
class KernelSpec:
    """Translation-invariant Markov kernel ``P(x, dy)`` on ``R^d``."""

    family: Family
    bandwidth: float
    dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "bandwidth", float(self.bandwidth))
        object.__setattr__(self, "dim", int(self.dim))
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError(f"bandwidth must be positive and finite, got {self.bandwidth}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.family is Family.BIEXPONENTIAL and self.dim != 1:
            raise ValueError("biexponential kernel is only defined for dim = 1")

    @property
    def code(self) -> int:
        return FAMILY_CODES[self.family]

    @cached_property
    def constants(self) -> KernelConstants:
        return _build_constants(self)

    def to_dict(self) -> dict:
        return {"family": self.family.value, "bandwidth": self.bandwidth, "dim": self.dim}


def _as_points(k: KernelSpec, z, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z.reshape(1)
    if z.shape[-1] != k.dim:
        raise ValueError(f"{name} has trailing dimension {z.shape[-1]}, kernel has dim {k.dim}")
    return z


def _profile(family: Family, lam: float, dim: int, u: np.ndarray) -> np.ndarray:
    """Density as a function of the displacement ``u = y - x`` (trailing axis = coords)."""
    if family is Family.GAUSSIAN:
        r2 = np.einsum("...i,...i->...", u, u)
        return (2.0 * np.pi * lam**2) ** (-dim / 2) * np.exp(-0.5 * r2 / lam**2)
    return np.exp(-np.abs(u[..., 0]) / lam) / (2.0 * lam)


def _profile_grad(family: Family, lam: float, dim: int, u: np.ndarray) -> np.ndarray:
    if family is Family.GAUSSIAN:
        return -(_profile(family, lam, dim, u) / lam**2)[..., None] * u
    # zero at the kink u = 0 (midpoint of the subdifferential)
    return (-np.sign(u[..., 0]) * np.exp(-np.abs(u[..., 0]) / lam) / (2.0 * lam**2))[..., None]


def density(k: KernelSpec, x, y) -> np.ndarray:
    """Transition density ``p_k(x, y)``; broadcasts over leading axes."""
    x = _as_points(k, x, "x")
    y = _as_points(k, y, "y")
    return _profile(k.family, k.bandwidth, k.dim, y - x)


def grad_density(k: KernelSpec, x, y) -> np.ndarray:
    """Gradient ``grad_y p_k(x, y)``; the bi-exponential kink returns zero."""
    x = _as_points(k, x, "x")
    y = _as_points(k, y, "y")
    return _profile_grad(k.family, k.bandwidth, k.dim, y - x)


def draw_noise(k: KernelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` displacements distributed as ``P(0, .)``, shape (n, d)."""
    if k.family is Family.GAUSSIAN:
        return k.bandwidth * rng.standard_normal((n, k.dim))
    return rng.laplace(0.0, k.bandwidth, size=(n, 1))


def sample(k: KernelSpec, x, rng: np.random.Generator) -> np.ndarray:
    """One draw from ``P(x, .)`` per row of ``x``."""
    x = _as_points(k, x, "x")
    flat = x.reshape(-1, k.dim)
    out = flat + draw_noise(k, flat.shape[0], rng)
    return out.reshape(x.shape)


def constants(k: KernelSpec) -> KernelConstants:
    return k.constants


def noise_abs_moment(family: Family, lam: float, dim: int, p: float) -> float:
    """``E|xi|^p`` for ``xi ~ P(0, .)``."""
    if family is Family.GAUSSIAN:
        return lam**p * 2.0 ** (p / 2) * math.exp(math.lgamma((dim + p) / 2) - math.lgamma(dim / 2))
    return lam**p * math.gamma(p + 1.0)


def _build_constants(k: KernelSpec) -> KernelConstants:
    lam, d = k.bandwidth, k.dim
    if k.family is Family.GAUSSIAN:
        peak = (2.0 * np.pi * lam**2) ** (-d / 2)
        # Hessian of the profile has eigenvalues -peak*e^{-s/2}/lam^2 (transverse) and
        # peak*e^{-s/2}(s-1)/lam^2 (radial), s = |u|^2/lam^2; the max modulus is at u = 0.
        lip_grad = peak / lam**2
        gmax = peak * math.exp(-0.5) / lam
        alpha1_max = math.inf
    else:
        lip_grad = 1.0 / (2.0 * lam**3)
        gmax = 1.0 / (2.0 * lam**2)
        alpha1_max = 1.0 / lam
    return KernelConstants(
        lip_pushforward=1.0,
        lip_grad=float(lip_grad),
        grad_growth=float(gmax),
        grad_at_zero=float(gmax),
        h1_slope=1.0,
        h1_at_zero=0.0,
        alpha1_max=alpha1_max,
        _family=k.family,
        _bandwidth=lam,
        _dim=d,
    )


def _abs_power_expectation_1d(family: Family, lam: float, r: float, p: float) -> float:
    """``E|r + xi|^p`` for one-dimensional noise ``xi``, by adaptive quadrature."""
    if family is Family.GAUSSIAN:
        dens = lambda u: math.exp(-0.5 * (u / lam) ** 2) / (math.sqrt(2.0 * math.pi) * lam)
        span = 40.0 * lam
    else:
        dens = lambda u: math.exp(-abs(u) / lam) / (2.0 * lam)
        span = 80.0 * lam
    g = lambda u: abs(r + u) ** p * dens(u)
    edges = sorted({-span, min(max(-r, -span), span), 0.0, span})
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            total += integrate.quad(g, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    return total


@lru_cache(maxsize=128)
def _moment_growth_bound(family: Family, lam: float, dim: int, tau: float) -> float:
    """``sup_x E|x + xi|^p / (1 + |x|^p)`` with ``p = 1 + tau``.

    Exact for ``p = 2``; a numerical supremum in one dimension; the Minkowski
    bound ``sup_r (r + c_p)^p / (1 + r^p)`` with ``c_p = (E|xi|^p)^(1/p)`` otherwise.
    """
    p = 1.0 + float(tau)
    if math.isclose(p, 2.0, rel_tol=0.0, abs_tol=1e-15):
        return float(max(1.0, noise_abs_moment(family, lam, dim, 2.0)))
    if dim == 1:
        ratio = lambda r: _abs_power_expectation_1d(family, lam, r, p) / (1.0 + r**p)
    else:
        cp = noise_abs_moment(family, lam, dim, p) ** (1.0 / p)
        ratio = lambda r: (r + cp) ** p / (1.0 + r**p)
    grid = np.concatenate([[0.0], np.geomspace(1e-4, 1e4, 161) * lam])
    vals = np.array([ratio(r) for r in grid])
    i = int(np.argmax(vals))
    best = float(vals[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(lambda r: -ratio(r), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-10 * max(hi, 1e-3)})
        best = max(best, -float(res.fun))
    # the ratio tends to 1 as |x| grows
    return float(max(best, 1.0))


def exp_moment(k: KernelSpec, x: float, alpha1: float) -> float:
    """``E exp(alpha1 |Y|)`` for ``Y ~ P(x, .)`` in one dimension (closed form)."""
    if k.dim != 1:
        raise ValueError("exp_moment is defined for dim = 1")
    a = float(alpha1)
    lam = k.bandwidth
    x = abs(float(np.asarray(x, dtype=float).reshape(-1)[0]))
    if a < 0:
        raise ValueError("alpha1 must be nonnegative")
    if a == 0:
        return 1.0
    if k.family is Family.GAUSSIAN:
        # E e^{a|x + lam Z|} split at the sign change of x + lam Z
        lp = a * x + 0.5 * (a * lam) ** 2 + special.log_ndtr(a * lam + x / lam)
        lm = -a * x + 0.5 * (a * lam) ** 2 + special.log_ndtr(a * lam - x / lam)
        return float(np.exp(np.logaddexp(lp, lm)))
    if a * lam >= 1.0:
        raise DivergenceError(f"exponential moment diverges for alpha1*lambda = {a * lam} >= 1")
    s = a * lam
    ex = math.exp(-x / lam)
    eax = math.exp(a * x)
    # Y = x + L, L Laplace(lam): regions L > 0, -x < L < 0, L < -x
    return float(eax / (2 * (1 - s)) + (eax - ex) / (2 * (1 + s)) + ex / (2 * (1 - s)))
