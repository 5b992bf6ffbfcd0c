"""Stability constants and hypothesis flags for a model.

All constants are derived from the drift and noise specification and the kernel
constants; Monte Carlo is used only where no one-dimensional integral exists,
and the method is recorded on the report.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, special

from .dynamics import ModelParams, NoiseSpec, DriftSpec, operator_norm
from .field import gradient_bound_constants
from .kernels import Family, KernelSpec, noise_abs_moment

__all__ = [
    "StabilityReport",
    "ConstantsUnavailableError",
    "NotApplicableError",
    "LogFactor",
    "compute_constants",
    "contraction_rate",
    "rate_exponent",
    "iid_constants",
    "alpha_star",
    "moment_ceiling",
    "field_moment_ceiling",
]

MC_SAMPLES = 10_000_000


class ConstantsUnavailableError(ValueError):
    pass


class NotApplicableError(ValueError):
    pass


class LogFactor(str, enum.Enum):
    NONE = "none"
    LOG = "log"
    LOG2 = "log2"


@dataclass(frozen=True)
class StabilityReport:
    norm_A: float
    delta: float
    alpha: float
    tau: float
    sigma: float
    sigma1_tau: float
    sigma2_tau: float
    mean_A2: float
    mean_abs_B: float
    moments_method: str
    l_grad_P: float
    l_grad_Pdep: float
    l_grad_alpha: float
    c_grad_alpha: float
    l_push_P: float
    l_push_Pdep: float
    l_push: float
    m_tau_P: float
    m_tau_Pdep: float
    a0: float
    a_tau: float
    c1: float
    c2: float
    theta_star: float
    cond_contraction: bool
    cond_delta_a0: bool
    cond_delta_atau: bool
    cond_moment_tau: bool
    alpha_star: float
    K_bound: float | None
    C1: float | None
    chi1: float | None
    rate_exponent: float
    rate_exponent_printed: float
    rate_log_factor: str
    dim: int

    def flags_consistent(self) -> bool:
        """Re-derive every flag from the numeric fields."""
        atau_ok = self.a_tau > 0 and self.delta < self.a_tau ** (1.0 / (1.0 + self.tau))
        return (
            self.cond_contraction == (self.c1 + self.c2 < 1.0)
            and self.cond_delta_a0 == (self.delta < self.a0)
            and self.cond_delta_atau == atau_ok
            and self.cond_moment_tau == ((1.0 - self.alpha) * self.m_tau_P < 1.0)
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def pretty(self) -> str:
        rows = []
        for k, v in self.to_dict().items():
            rows.append(f"{k:>22s} : {v!r}" if not isinstance(v, float) else f"{k:>22s} : {v:.12g}")
        return "\n".join(rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


# ---------------------------------------------------------------------------
# noise integrals


def _folded_mean(m: float, s: float) -> float:
    if s == 0.0 or abs(m) > 40.0 * s:
        return abs(m)
    return s * math.sqrt(2.0 / math.pi) * math.exp(-0.5 * (m / s) ** 2) + m * (1.0 - 2.0 * special.ndtr(-m / s))


def _expect_gauss_1d(g, m: float, s: float) -> float:
    """``E g(m + s Z)`` by adaptive quadrature, split at the kink of |.|."""
    if s == 0.0:
        return float(g(m))
    pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    kink = -m / s
    f = lambda z: g(m + s * z) * pdf(z)
    lo, hi = -40.0, 40.0
    pts = [kink] if lo < kink < hi else []
    total = 0.0
    edges = [lo] + pts + [hi]
    for a, b in zip(edges[:-1], edges[1:]):
        total += integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return total


def _abs_norm_samples(d: int, m: float, s: float, z: np.ndarray) -> np.ndarray:
    return np.linalg.norm(m + s * z, axis=1)


@lru_cache(maxsize=256)
def _noise_moments(drift: DriftSpec, noise: NoiseSpec, d: int, tau: float):
    """``(sigma, sigma1(tau), sigma2(tau), E A2, E|B|, method)``."""
    p = 1.0 + tau
    amax, lk = drift.coef_max, drift.lip_interaction
    sigma = amax * _folded_mean(noise.L_mean, noise.L_sd) + lk
    sigma1 = _expect_gauss_1d(lambda l: (amax * abs(l) + lk) ** p, noise.L_mean, noise.L_sd)
    eb = noise.b * noise_abs_moment(Family.GAUSSIAN, 1.0, d, 1.0)
    if noise.c_sd == 0.0:
        ec = abs(noise.c_mean) * math.sqrt(d)
    elif d == 1:
        ec = _folded_mean(noise.c_mean, noise.c_sd)
    else:
        ec = None
    method = "closed-form+quadrature"
    if d == 1:
        # |c| + b|Z| with c, Z independent: nested one-dimensional quadrature
        if noise.b == 0.0:
            sigma2 = _expect_gauss_1d(lambda c: abs(c) ** p, noise.c_mean, noise.c_sd)
        else:
            inner = lambda c: _expect_gauss_1d(lambda z: (abs(c) + noise.b * abs(z)) ** p, 0.0, 1.0)
            if noise.c_sd == 0.0:
                sigma2 = inner(noise.c_mean)
            else:
                sigma2 = _expect_gauss_1d(inner, noise.c_mean, noise.c_sd)
    elif noise.c_sd == 0.0 and noise.b == 0.0:
        sigma2 = (abs(noise.c_mean) * math.sqrt(d)) ** p
    elif noise.c_sd == 0.0:
        cn = abs(noise.c_mean) * math.sqrt(d)
        # |Z_d| has a chi density; integrate against it
        chi = lambda r: math.exp((d - 1) * math.log(r) - 0.5 * r * r - (d / 2 - 1) * math.log(2) - math.lgamma(d / 2)) if r > 0 else 0.0
        sigma2 = integrate.quad(lambda r: (cn + noise.b * r) ** p * chi(r), 0, 60, epsabs=1e-13, limit=200)[0]
    else:
        rng = np.random.default_rng(20240607)
        acc, acc2, ec_acc, n_done = 0.0, 0.0, 0.0, 0
        chunk = 1_000_000
        while n_done < MC_SAMPLES:
            zc = rng.standard_normal((chunk, d))
            zb = rng.standard_normal((chunk, d))
            cn = _abs_norm_samples(d, noise.c_mean, noise.c_sd, zc)
            v = (cn + noise.b * np.linalg.norm(zb, axis=1)) ** p
            acc += v.sum(); acc2 += (v * v).sum(); ec_acc += cn.sum()
            n_done += chunk
        sigma2 = acc / n_done
        ec = ec_acc / n_done
        method = f"monte-carlo(n={n_done}, se={math.sqrt(max(acc2 / n_done - sigma2**2, 0) / n_done):.3g})"
    return sigma, sigma1, sigma2, ec, eb, method


# ---------------------------------------------------------------------------
# public constants


def contraction_rate(c1: float, c2: float) -> float:
    """Smallest ``theta`` with ``theta^2 - c1 theta - c2 >= 0``."""
    return 0.5 * (c1 + math.sqrt(c1 * c1 + 4.0 * c2))


def rate_exponent(d: int, tau: float) -> tuple[float, LogFactor, float]:
    """Predicted W1 decay ``N^{-e} (log N)^k``.

    Returns ``(e_min, log_factor, e_printed)`` where ``e_min`` takes the slower of
    the two competing terms and ``e_printed`` the faster one.
    """
    d = int(d)
    tau = float(tau)
    moment = tau / (1.0 + tau)
    if d == 1:
        if math.isclose(tau, 1.0):
            return 0.5, LogFactor.LOG, 0.5
        return min(0.5, moment), LogFactor.NONE, max(0.5, moment)
    if d == 2:
        if math.isclose(tau, 1.0):
            return 0.5, LogFactor.LOG2, 0.5
        # N^{-1/2} log N + N^{-tau/(1+tau)}: the log rides on the 1/2 term
        logf = LogFactor.LOG if tau > 1.0 else LogFactor.NONE
        return min(0.5, moment), logf, max(0.5, moment)
    if math.isclose(tau, 1.0 / (d - 1)):
        return 1.0 / d, LogFactor.LOG, 1.0 / d
    return min(1.0 / d, moment), LogFactor.NONE, max(1.0 / d, moment)


def alpha_star(alpha: float, P: KernelSpec) -> float:
    """Root of ``a |h1(0)| + h2(a) = -log(1 - alpha)`` for the kernel's h-functions."""
    kc = P.constants
    target = -math.log1p(-alpha)
    g = lambda a: a * abs(kc.h1_at_zero) + kc.h2(a) - target
    hi = min(kc.alpha1_max, 1e6)
    if math.isfinite(kc.alpha1_max):
        hi = kc.alpha1_max * (1.0 - 1e-15)
    else:
        hi = 1.0
        while g(hi) < 0:
            hi *= 2.0
    return float(optimize.brentq(g, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def iid_constants(params: ModelParams, K: float | None = None, variant: str = "printed"):
    """Coupling constants ``(C1, chi1)``.

    ``variant="printed"`` evaluates ``chi1 = delta K max{chi, c5} + C1``;
    ``variant="proof"`` uses ``chi1 = max{chi, c5} + C1`` as it arises in the
    recursion that produces the coupling inequality.
    """
    if K is None:
        K = sup_A1(params)
    nA = operator_norm(params.A)
    a, dK = params.alpha, params.delta * K
    kp, kd = params.P.constants, params.P_dep.constants
    l_ga = (1.0 - a) * kp.lip_grad + a * kd.lip_grad
    chi = nA + dK * (1.0 + l_ga)
    c4 = max(1.0, (1.0 - a) * kp.lip_grad * a * kd.lip_pushforward)
    c5 = max(a * kd.lip_grad, (1.0 - a) * kp.lip_pushforward)
    top = max(chi, c5)
    gap = abs(chi - c5)
    C1 = dK * c4 * top / gap if dK != 0.0 else 0.0
    if variant == "printed":
        chi1 = dK * top + C1
    elif variant == "proof":
        chi1 = top + C1
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return float(C1), float(chi1)


def sup_A1(params: ModelParams) -> float:
    """Almost-sure bound on the drift Lipschitz factor; needs a deterministic ``L``."""
    if params.noise.L_sd > 0:
        raise NotApplicableError("A1 is unbounded when L(eps) is Gaussian")
    return abs(params.noise.L_mean) * params.drift.coef_max + params.drift.lip_interaction


def compute_constants(params: ModelParams, tau: float = 1.0) -> StabilityReport:
    """Every derived constant and hypothesis flag for ``params``."""
    if not isinstance(params.drift, DriftSpec) or params.drift.variant not in ("linear", "interaction"):
        raise ConstantsUnavailableError("constants are only available for the shipped drift variants")
    tau = float(tau)
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = params.dim
    nA = operator_norm(params.A)
    a, delta = params.alpha, params.delta
    kp, kd = params.P.constants, params.P_dep.constants
    sigma, sigma1, sigma2, eA2, eB, method = _noise_moments(params.drift, params.noise, d, tau)
    l_ga, c_ga = gradient_bound_constants(a, params.P, params.P_dep)
    l_push = (1.0 - a) * kp.lip_pushforward + a * kd.lip_pushforward
    a0 = (1.0 - nA) / (sigma * (2.0 + l_ga)) if sigma > 0 else math.inf
    a_tau = ((4.0 ** (-tau) - nA ** (1.0 + tau)) / (sigma1 * (1.0 + (1.0 + l_ga) ** (1.0 + tau)))
             if sigma1 > 0 else math.inf)
    c1 = max(nA + delta * sigma * (2.0 + l_ga) + a * kd.lip_pushforward, (1.0 - a) * kp.lip_pushforward)
    c2 = delta * sigma * max(a * kd.lip_grad, (1.0 - a) * kp.lip_grad)
    theta = contraction_rate(c1, c2)
    m_tau_P = kp.moment_1ptau(tau)
    m_tau_Pd = kd.moment_1ptau(tau)
    try:
        K = sup_A1(params)
        C1, chi1 = iid_constants(params, K)
    except NotApplicableError:
        K = C1 = chi1 = None
    e_min, logf, e_printed = rate_exponent(d, tau)
    atau_ok = bool(a_tau > 0 and delta < a_tau ** (1.0 / (1.0 + tau)))
    return StabilityReport(
        norm_A=nA, delta=delta, alpha=a, tau=tau,
        sigma=sigma, sigma1_tau=sigma1, sigma2_tau=sigma2, mean_A2=eA2, mean_abs_B=eB,
        moments_method=method,
        l_grad_P=kp.lip_grad, l_grad_Pdep=kd.lip_grad, l_grad_alpha=l_ga, c_grad_alpha=c_ga,
        l_push_P=kp.lip_pushforward, l_push_Pdep=kd.lip_pushforward, l_push=l_push,
        m_tau_P=m_tau_P, m_tau_Pdep=m_tau_Pd,
        a0=a0, a_tau=a_tau, c1=c1, c2=c2, theta_star=theta,
        cond_contraction=bool(c1 + c2 < 1.0),
        cond_delta_a0=bool(delta < a0),
        cond_delta_atau=atau_ok,
        cond_moment_tau=bool((1.0 - a) * m_tau_P < 1.0),
        alpha_star=alpha_star(a, params.P),
        K_bound=K, C1=C1, chi1=chi1,
        rate_exponent=e_min, rate_exponent_printed=e_printed, rate_log_factor=logf.value,
        dim=d,
    )


# ---------------------------------------------------------------------------
# moment ceilings


def moment_ceiling(report: StabilityReport, n: int, m0: float, grad_offset: float) -> float:
    """Ceiling on ``E|X_n|`` for ``delta < a0``.

    ``gamma^n m0 + (delta sigma c + E[delta A2 + |B|]) / (1 - gamma)`` with
    ``gamma = |A| + delta sigma (2 + l)``; ``c`` bounds the field gradient.
    """
    gamma = report.norm_A + report.delta * report.sigma * (2.0 + report.l_grad_alpha)
    if gamma >= 1.0:
        return math.inf
    return gamma**n * m0 + _noise_drive(report, grad_offset) / (1.0 - gamma)


def _noise_drive(report: StabilityReport, grad_offset: float) -> float:
    return report.delta * (report.sigma * grad_offset + report.mean_A2) + report.mean_abs_B


def field_moment_ceiling(report: StabilityReport, params: ModelParams, k: int, mu_sup: float,
                         eta0_moment: float, n_terms: int = 4000) -> float:
    """Ceiling on ``<|x|, eta_{k+1}>`` from the geometric expansion of the field.

    ``alpha l(P') sup<|x|,mu> sum_{i<=k} [(1-alpha) l(P)]^i
    + alpha sum_i (1-alpha)^i int|y| P'P^i(0,dy) + [(1-alpha) l(P)]^{k+1} <|x|, eta0>``
    """
    a = params.alpha
    r = (1.0 - a) * report.l_push_P
    geo = sum(r**i for i in range(k + 1))
    dep = 0.0
    for i in range(n_terms):
        wt = (1.0 - a) ** i
        if wt < 1e-18:
            break
        dep += wt * _kernel_power_abs_moment(params, i)
    return a * report.l_push_Pdep * mu_sup * geo + a * dep + r ** (k + 1) * eta0_moment


def _kernel_power_abs_moment(params: ModelParams, i: int) -> float:
    """``int |y| P'P^i(0, dy)``; exact for Gaussian kernels, triangle bound otherwise."""
    P, Pd, d = params.P, params.P_dep, params.dim
    if P.family is Family.GAUSSIAN and Pd.family is Family.GAUSSIAN:
        s = math.sqrt(Pd.bandwidth**2 + i * P.bandwidth**2)
        return noise_abs_moment(Family.GAUSSIAN, s, d, 1.0)
    return noise_abs_moment(Pd.family, Pd.bandwidth, d, 1.0) + i * noise_abs_moment(P.family, P.bandwidth, d, 1.0)
