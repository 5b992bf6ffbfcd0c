"""Chemical field as a finite kernel mixture.

A field is ``eta(y) = sum_k w_k p_k(c_k, y)`` with each component carrying its own
kernel family and bandwidth. Gaussian mixtures are closed under diffusion by a
Gaussian kernel, so the exact update only widens bandwidths and appends one
deposit component per particle.
"""
from __future__ import annotations

import json
import math
from functools import lru_cache
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft
from scipy import special

from .kernels import CODE_FAMILIES, FAMILY_CODES, Family, KernelSpec, noise_abs_moment
from .transport import DiscreteMeasure

__all__ = [
    "MixtureField",
    "FieldSample",
    "UnsupportedKernelError",
    "eval_density",
    "eval_gradient",
    "evolve_exact",
    "subsample",
    "evolve_sampled",
    "expansion_reference",
    "first_moment",
    "moment_1ptau",
    "compact",
    "compact_stratified",
    "gradient_bound_constants",
]

WEIGHT_FLOOR = 1e-15
_CHUNK = 1 << 21
_TAIL = {0: 12.0, 1: 40.0}

GAUSS, BIEXP = FAMILY_CODES[Family.GAUSSIAN], FAMILY_CODES[Family.BIEXPONENTIAL]


class UnsupportedKernelError(ValueError):
    """Requested operation has no closed form for the kernel combination."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MixtureField:
    """Weighted kernel mixture on ``R^d`` stored column-wise.

    Parameters
    ----------
    weights : (K,) array
    centers : (K, d) array
    bandwidths : (K,) array
    families : (K,) int array of family codes
    """

    weights: np.ndarray
    centers: np.ndarray
    bandwidths: np.ndarray
    families: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        c = np.asarray(self.centers, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        bw = np.broadcast_to(np.asarray(self.bandwidths, dtype=float), w.shape).copy()
        fam = np.broadcast_to(np.asarray(self.families, dtype=np.int8), w.shape).copy()
        if w.size == 0 or c.shape[0] != w.size:
            raise ValueError("a field needs at least one component and one center per weight")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        if not np.all(np.isfinite(c)):
            raise ValueError("centers must be finite")
        if np.any(bw <= 0) or not np.all(np.isfinite(bw)):
            raise ValueError("bandwidths must be positive and finite")
        if np.any((fam != GAUSS) & (fam != BIEXP)):
            raise ValueError("unknown family code")
        if c.shape[1] != 1 and np.any(fam == BIEXP):
            raise ValueError("biexponential components require dim = 1")
        for name, val in (("weights", w), ("centers", c), ("bandwidths", bw), ("families", fam)):
            object.__setattr__(self, name, _frozen(val))

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, weights, centers, bandwidths, families) -> "MixtureField":
        """Drop weights below the floor and renormalize."""
        w = np.asarray(weights, dtype=float)
        c = np.asarray(centers, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        bw = np.broadcast_to(np.asarray(bandwidths, dtype=float), w.shape)
        fam = np.broadcast_to(np.asarray(families, dtype=np.int8), w.shape)
        keep = w >= WEIGHT_FLOOR
        if not np.any(keep):
            raise ValueError("all weights below the floor")
        w = w[keep]
        return cls(w / w.sum(), c[keep], bw[keep], fam[keep])

    @classmethod
    def single(cls, kernel: KernelSpec, center=None) -> "MixtureField":
        c = np.zeros((1, kernel.dim)) if center is None else np.asarray(center, float).reshape(1, -1)
        return cls(np.ones(1), c, np.array([kernel.bandwidth]), np.array([kernel.code]))

    @classmethod
    def from_components(cls, components) -> "MixtureField":
        """From an iterable of ``(weight, center, KernelSpec)``."""
        comps = list(components)
        w = np.array([c[0] for c in comps], dtype=float)
        cen = np.array([np.atleast_1d(np.asarray(c[1], float)) for c in comps])
        bw = np.array([c[2].bandwidth for c in comps])
        fam = np.array([c[2].code for c in comps])
        return cls(w, cen, bw, fam)

    @classmethod
    def deposit(cls, mu: DiscreteMeasure, kernel: KernelSpec) -> "MixtureField":
        """``mu P`` as a mixture: one kernel component per atom."""
        return cls(mu.weights, mu.points, np.full(mu.size, kernel.bandwidth),
                   np.full(mu.size, kernel.code))

    # -- basic views --------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def components(self):
        d = self.dim
        return [(float(w), c.copy(), KernelSpec(CODE_FAMILIES[int(f)], float(b), d))
                for w, c, b, f in zip(self.weights, self.centers, self.bandwidths, self.families)]

    def support_bounds(self) -> tuple[float, float]:
        """Interval holding all but a negligible tail of the mass (d = 1)."""
        tail = np.where(self.families == BIEXP, _TAIL[BIEXP], _TAIL[GAUSS]) * self.bandwidths
        x = self.centers[:, 0]
        return float(np.min(x - tail)), float(np.max(x + tail))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return subsample(self, n, rng).points

    def density(self, y) -> np.ndarray:
        return eval_density(self, y)

    def gradient(self, y) -> np.ndarray:
        return eval_gradient(self, y)

    def cdf_on_grid(self, grid: np.ndarray) -> np.ndarray:
        return _cdf_1d(self, np.asarray(grid, dtype=float))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"w": float(w), "center": [float(v) for v in c],
                 "family": CODE_FAMILIES[int(f)].value, "bandwidth": float(b)}
                for w, c, b, f in zip(self.weights, self.centers, self.bandwidths, self.families)
            ],
        }

    def to_json(self) -> str:
        # float repr round-trips exactly through json
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "MixtureField":
        d = int(obj["dim"])
        comps = obj["components"]
        w = np.array([c["w"] for c in comps], dtype=float)
        cen = np.array([c["center"] for c in comps], dtype=float).reshape(len(comps), d)
        bw = np.array([c["bandwidth"] for c in comps], dtype=float)
        fam = np.array([FAMILY_CODES[Family(c["family"])] for c in comps])
        return cls(w, cen, bw, fam)

    @classmethod
    def from_json(cls, text: str) -> "MixtureField":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class FieldSample:
    """``M`` i.i.d. draws from a field, taken at step ``source_step``."""

    points: np.ndarray
    source_step: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 1:
            raise ValueError("a field sample needs M >= 1 points")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# evaluation


def _query(f: MixtureField, y) -> tuple[np.ndarray, tuple]:
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape[-1] != f.dim:
        raise ValueError(f"query dimension {y.shape[-1]} does not match field dimension {f.dim}")
    lead = y.shape[:-1]
    return y.reshape(-1, f.dim), lead


def _blocks(n_points: int, n_comp: int):
    step = max(1, _CHUNK // max(n_comp, 1))
    for s in range(0, n_points, step):
        yield slice(s, min(s + step, n_points))


def _group_terms(f: MixtureField, fam: int):
    sel = f.families == fam
    if not np.any(sel):
        return None
    return f.weights[sel], f.centers[sel], f.bandwidths[sel]


def eval_density(f: MixtureField, y) -> np.ndarray:
    """``sum_k w_k p_k(c_k, y)`` at each query row."""
    q, lead = _query(f, y)
    d = f.dim
    out = np.zeros(q.shape[0])
    g = _group_terms(f, GAUSS)
    if g is not None:
        w, c, b = g
        coef = w * (2.0 * np.pi * b**2) ** (-d / 2)
        inv = -0.5 / b**2
        for sl in _blocks(q.shape[0], w.size):
            if d == 1:
                r2 = (q[sl, 0][:, None] - c[None, :, 0]) ** 2
            else:
                diff = q[sl, None, :] - c[None, :, :]
                r2 = np.einsum("ijk,ijk->ij", diff, diff)
            out[sl] += np.exp(r2 * inv) @ coef
    g = _group_terms(f, BIEXP)
    if g is not None:
        w, c, b = g
        for sl in _blocks(q.shape[0], w.size):
            r = np.abs(q[sl, 0][:, None] - c[None, :, 0])
            out[sl] += np.exp(-r / b) @ (w / (2.0 * b))
    return out.reshape(lead)


def eval_gradient(f: MixtureField, y) -> np.ndarray:
    """``sum_k w_k grad_y p_k(c_k, y)`` at each query row, shape ``(..., d)``."""
    q, lead = _query(f, y)
    d = f.dim
    out = np.zeros_like(q)
    g = _group_terms(f, GAUSS)
    if g is not None:
        w, c, b = g
        coef = w * (2.0 * np.pi * b**2) ** (-d / 2) / b**2
        inv = -0.5 / b**2
        for sl in _blocks(q.shape[0], w.size):
            if d == 1:
                diff = q[sl, 0][:, None] - c[None, :, 0]
                out[sl, 0] -= (np.exp(diff**2 * inv) * diff) @ coef
            else:
                diff = q[sl, None, :] - c[None, :, :]
                r2 = np.einsum("ijk,ijk->ij", diff, diff)
                e = np.exp(r2 * inv) * coef
                out[sl] -= np.einsum("ij,ijk->ik", e, diff)
    g = _group_terms(f, BIEXP)
    if g is not None:
        w, c, b = g
        for sl in _blocks(q.shape[0], w.size):
            diff = q[sl, 0][:, None] - c[None, :, 0]
            out[sl, 0] -= (np.sign(diff) * np.exp(-np.abs(diff) / b)) @ (w / (2.0 * b**2))
    return out.reshape(lead + (d,))


# ---------------------------------------------------------------------------
# evolution


def _require_gaussian(*kernels: KernelSpec):
    for k in kernels:
        if k.family is not Family.GAUSSIAN:
            raise UnsupportedKernelError(
                f"exact convolution needs Gaussian kernels, got {k.family.value}")


def _check_mu(f_dim: int, mu: DiscreteMeasure):
    if mu.dim != f_dim:
        raise ValueError(f"measure dimension {mu.dim} does not match field dimension {f_dim}")


def evolve_exact(f: MixtureField, mu: DiscreteMeasure, alpha: float, P: KernelSpec,
                 P_dep: KernelSpec) -> MixtureField:
    """``(1 - alpha) f P + alpha mu P_dep`` as an exact mixture.

    Every existing component is convolved with ``P`` (bandwidths add in
    quadrature) and one deposit component per atom of ``mu`` is appended.
    """
    _check_mu(f.dim, mu)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha < 1.0:
        _require_gaussian(P)
        if np.any(f.families != GAUSS):
            raise UnsupportedKernelError("exact convolution needs Gaussian field components")
    parts_w, parts_c, parts_b, parts_f = [], [], [], []
    if alpha < 1.0:
        parts_w.append((1.0 - alpha) * f.weights)
        parts_c.append(f.centers)
        parts_b.append(np.sqrt(f.bandwidths**2 + P.bandwidth**2))
        parts_f.append(f.families)
    if alpha > 0.0:
        parts_w.append(alpha * mu.weights)
        parts_c.append(mu.points)
        parts_b.append(np.full(mu.size, P_dep.bandwidth))
        parts_f.append(np.full(mu.size, P_dep.code, dtype=np.int8))
    return MixtureField.build(np.concatenate(parts_w), np.concatenate(parts_c),
                              np.concatenate(parts_b), np.concatenate(parts_f))


def subsample(f: MixtureField, M: int, rng: np.random.Generator, step: int = 0) -> FieldSample:
    """``M`` i.i.d. draws: a component by weight, then a kernel displacement."""
    M = int(M)
    if M < 1:
        raise ValueError("M must be >= 1")
    if f.n_components == 1:
        idx = np.zeros(M, dtype=np.int64)
    else:
        idx = rng.choice(f.n_components, size=M, p=f.weights)
    z = rng.standard_normal((M, f.dim))
    lap = rng.laplace(0.0, 1.0, size=M)
    fam = f.families[idx]
    noise = np.where((fam == BIEXP)[:, None], lap[:, None], z)
    return FieldSample(f.centers[idx] + f.bandwidths[idx][:, None] * noise, step)


def evolve_sampled(s: FieldSample, mu: DiscreteMeasure, alpha: float, P: KernelSpec,
                   P_dep: KernelSpec) -> MixtureField:
    """``(1 - alpha) S^M P + alpha mu P_dep``: exactly ``M + N`` components."""
    _check_mu(s.points.shape[1], mu)
    M = s.size
    w = np.concatenate([np.full(M, (1.0 - alpha) / M), alpha * mu.weights])
    c = np.concatenate([s.points, mu.points])
    b = np.concatenate([np.full(M, P.bandwidth), np.full(mu.size, P_dep.bandwidth)])
    fam = np.concatenate([np.full(M, P.code), np.full(mu.size, P_dep.code)]).astype(np.int8)
    keep = w > 0
    if not np.all(keep):
        w, c, b, fam = w[keep], c[keep], b[keep], fam[keep]
    return MixtureField(w / w.sum(), c, b, fam)


def expansion_reference(eta0: MixtureField, mus, alpha: float, P: KernelSpec,
                        P_dep: KernelSpec) -> MixtureField:
    """Field after ``k + 1`` exact updates, built from the geometric expansion.

    ``eta_{k+1} = sum_i alpha (1-alpha)^i mu_{k-i} P_dep P^i + (1-alpha)^{k+1} eta0 P^{k+1}``
    where the ``i``-th term has bandwidth ``sqrt(lam_dep^2 + i lam^2)``.
    """
    mus = list(mus)
    if not mus:
        raise ValueError("need at least one measure in the history")
    _require_gaussian(P, P_dep)
    if np.any(eta0.families != GAUSS):
        raise UnsupportedKernelError("expansion needs a Gaussian initial field")
    k = len(mus) - 1
    lam2, dep2 = P.bandwidth**2, P_dep.bandwidth**2
    ws, cs, bs = [], [], []
    for i in range(k + 1):
        mu = mus[k - i]
        _check_mu(eta0.dim, mu)
        ws.append(alpha * (1.0 - alpha) ** i * mu.weights)
        cs.append(mu.points)
        bs.append(np.full(mu.size, math.sqrt(dep2 + i * lam2)))
    ws.append((1.0 - alpha) ** (k + 1) * eta0.weights)
    cs.append(eta0.centers)
    bs.append(np.sqrt(eta0.bandwidths**2 + (k + 1) * lam2))
    w = np.concatenate(ws)
    return MixtureField.build(w, np.concatenate(cs), np.concatenate(bs), np.full(w.size, GAUSS))


# ---------------------------------------------------------------------------
# moments


def _folded_abs_moment(m: np.ndarray, s: np.ndarray, p: float) -> np.ndarray:
    """``E|m + s Z|^p`` in closed form."""
    if p == 1.0:
        return s * math.sqrt(2.0 / math.pi) * np.exp(-0.5 * (m / s) ** 2) + m * (1.0 - 2.0 * special.ndtr(-m / s))
    if p == 2.0:
        return m**2 + s**2
    # s^p 2^{p/2} Gamma((p+1)/2) / sqrt(pi) * 1F1(-p/2; 1/2; -m^2 / (2 s^2))
    c = 2.0 ** (p / 2) * math.exp(special.gammaln((p + 1) / 2)) / math.sqrt(math.pi)
    return c * s**p * special.hyp1f1(-p / 2, 0.5, -0.5 * (m / s) ** 2)


def _laplace_abs_moment(m: np.ndarray, b: np.ndarray, p: float) -> np.ndarray:
    """``E|m + L|^p`` for ``L`` Laplace with scale ``b``, in closed form."""
    a = np.abs(m)
    if p == 1.0:
        return a + b * np.exp(-a / b)
    if p == 2.0:
        return m**2 + 2.0 * b**2
    x = a / b
    gp = math.exp(special.gammaln(p + 1))
    # mass right of the atom, the stretch between 0 and |m|, and beyond the origin
    right = b ** (p + 1) * special.hyperu(-p, -p, x)
    middle = a ** (p + 1) / (p + 1) * special.hyp1f1(1.0, p + 2.0, -x)
    far = np.exp(-x) * b ** (p + 1) * gp
    return (right + middle + far) / (2.0 * b)


def first_moment(f: MixtureField, rng: np.random.Generator | None = None, n_mc: int = 200_000):
    """``<|x|, f>``. Closed form in d = 1; tensor Gauss-Hermite per component in
    d = 2; Monte Carlo (returns ``(value, se)``) in d > 2."""
    return _abs_moment(f, 1.0, rng, n_mc)


def moment_1ptau(f: MixtureField, tau: float, rng: np.random.Generator | None = None,
                 n_mc: int = 200_000):
    """``<|x|^(1+tau), f>``."""
    return _abs_moment(f, 1.0 + float(tau), rng, n_mc)


def _abs_moment(f: MixtureField, p: float, rng, n_mc: int):
    d = f.dim
    if d == 1:
        m, b = f.centers[:, 0], f.bandwidths
        g = f.families == GAUSS
        vals = np.empty_like(m)
        vals[g] = _folded_abs_moment(m[g], b[g], p)
        vals[~g] = _laplace_abs_moment(m[~g], b[~g], p)
        return float(f.weights @ vals)
    if d == 2:
        return _quad_abs_moment_2d(f, p)
    rng = np.random.default_rng(0) if rng is None else rng
    r = np.linalg.norm(f.sample(n_mc, rng), axis=1) ** p
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(n_mc))


def _quad_abs_moment_2d(f: MixtureField, p: float) -> float:
    # tensor Gauss-Hermite per component; |x|^p is smooth away from the origin
    t, wq = np.polynomial.hermite_e.hermegauss(80)
    wq = wq / wq.sum()
    z = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    wz = np.outer(wq, wq).reshape(-1)
    total = 0.0
    for w, c, b in zip(f.weights, f.centers, f.bandwidths):
        total += w * float(wz @ np.linalg.norm(c + b * z, axis=1) ** p)
    return total


# ---------------------------------------------------------------------------
# cumulative distribution on a grid (d = 1)


def _kernel_cdf(fam: int, u: np.ndarray, b: float) -> np.ndarray:
    if fam == GAUSS:
        return special.ndtr(u / b)
    return np.where(u < 0, 0.5 * np.exp(np.minimum(u, 0.0) / b),
                    1.0 - 0.5 * np.exp(-np.maximum(u, 0.0) / b))


def _kernel_cdf_curvature(fam: int, u: np.ndarray, b: float) -> np.ndarray:
    """Second derivative of the kernel CDF, i.e. the derivative of the density."""
    if fam == GAUSS:
        return -u / b**2 * np.exp(-0.5 * (u / b) ** 2) / (math.sqrt(2.0 * math.pi) * b)
    return -np.sign(u) * np.exp(-np.abs(u) / b) / (2.0 * b**2)


_FFT_MIN_GROUP = 16


@lru_cache(maxsize=256)
def _kernel_spectra(fam: int, b: float, h: float, n: int, L: int):
    """FFTs of the kernel CDF and its curvature sampled at offsets ``k h``, ``|k| < n``."""
    offs = np.arange(-(n - 1), n) * h
    return (sp_fft.rfft(_kernel_cdf(fam, offs, b), L),
            sp_fft.rfft(_kernel_cdf_curvature(fam, offs, b), L))


def _cdf_1d(f: MixtureField, t: np.ndarray) -> np.ndarray:
    """Mixture CDF at sorted points ``t``.

    Components are grouped by kernel. On a fine uniform grid, groups of at
    least ``_FFT_MIN_GROUP`` components are linearly binned onto the grid and
    convolved with the kernel CDF by FFT; the binning error
    ``frac (1 - frac) h^2 / 2`` times the CDF curvature is subtracted, which
    leaves an ``O(h^3)`` error. Small groups are summed directly.
    """
    if f.dim != 1:
        raise ValueError("CDF evaluation is one-dimensional")
    t = np.asarray(t, dtype=float)
    n = t.size
    out = np.zeros(n)
    uniform = n > 2 and np.allclose(np.diff(t), t[1] - t[0], rtol=1e-9, atol=0.0)
    # signed bandwidth identifies (family, bandwidth) since bandwidths are positive
    key = np.where(f.families == GAUSS, f.bandwidths, -f.bandwidths)
    uk, inv = np.unique(key, return_inverse=True)
    h = float(t[1] - t[0]) if n > 1 else 1.0
    L = sp_fft.next_fast_len(2 * n - 1, real=True)
    acc = None
    small = np.zeros(f.n_components, dtype=bool)
    for g, kv in enumerate(uk):
        sel = inv == g
        fam, b = (GAUSS if kv > 0 else BIEXP), abs(float(kv))
        w, c = f.weights[sel], f.centers[sel, 0]
        if not (uniform and w.size >= _FFT_MIN_GROUP and h <= b / 16
                and c.min() >= t[0] and c.max() <= t[-1]):
            small |= sel
            continue
        pos = (c - t[0]) / h
        j = np.minimum(np.floor(pos).astype(np.int64), n - 2)
        frac = pos - j
        binned = np.bincount(j, weights=w * (1.0 - frac), minlength=n)
        binned += np.bincount(j + 1, weights=w * frac, minlength=n)
        corr_w = 0.5 * h * h * w * frac * (1.0 - frac)
        curv = np.bincount(j, weights=corr_w * (1.0 - frac), minlength=n)
        curv += np.bincount(j + 1, weights=corr_w * frac, minlength=n)
        k_cdf, k_curv = _kernel_spectra(fam, b, h, n, L)
        term = sp_fft.rfft(binned, L) * k_cdf - sp_fft.rfft(curv, L) * k_curv
        acc = term if acc is None else acc + term
    for fam in (GAUSS, BIEXP):
        sel = small & (f.families == fam)
        if not sel.any():
            continue
        w, c, b = f.weights[sel], f.centers[sel, 0], f.bandwidths[sel]
        for sl in _blocks(n, w.size):
            out[sl] += _kernel_cdf(fam, t[sl, None] - c[None, :], b[None, :]) @ w
    if acc is not None:
        # circular length L >= 2n - 1 keeps indices n-1 .. 2n-2 free of wraparound
        out += sp_fft.irfft(acc, L)[n - 1: 2 * n - 1]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# compaction


def compact(f: MixtureField, M: int, rng: np.random.Generator) -> MixtureField:
    """Random reduction to at most ``M`` components.

    Components are resampled with probability equal to their weight and keep
    their own kernel; the result equals ``f`` in expectation.
    """
    M = int(M)
    if M < 1:
        raise ValueError("M must be >= 1")
    idx = rng.choice(f.n_components, size=M, p=f.weights)
    u, counts = np.unique(idx, return_counts=True)
    return MixtureField(counts / M, f.centers[u], f.bandwidths[u], f.families[u])


def _weighted_midpoint_quantiles(x: np.ndarray, w: np.ndarray, n: int) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    cw = np.cumsum(ws)
    levels = (np.arange(n) + 0.5) / n * cw[-1]
    j = np.searchsorted(cw, levels, side="left")
    return xs[np.minimum(j, xs.size - 1)]


def compact_stratified(f: MixtureField, budget: int) -> MixtureField:
    """Deterministic reduction to roughly ``budget`` components.

    Components sharing a kernel form a group; each group keeps
    ``max(1, round(budget * group_weight))`` equal-weight components placed at
    weighted midpoint quantiles of its centers (d = 1) or chosen by systematic
    resampling in stored order (d > 1). Returns ``f`` unchanged if it already
    fits.
    """
    if f.n_components <= budget:
        return f
    keys = np.stack([f.families.astype(float), f.bandwidths], axis=1)
    uk, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    ws, cs, bs, fs = [], [], [], []
    for g, (fam, b) in enumerate(uk):
        sel = inv == g
        w, c = f.weights[sel], f.centers[sel]
        wg = float(w.sum())
        n = max(1, int(round(budget * wg)))
        if n >= w.size:
            ws.append(w); cs.append(c)
            bs.append(np.full(w.size, b)); fs.append(np.full(w.size, int(fam)))
            continue
        if f.dim == 1:
            newc = _weighted_midpoint_quantiles(c[:, 0], w, n)[:, None]
        else:
            cw = np.cumsum(w)
            levels = (np.arange(n) + 0.5) / n * cw[-1]
            newc = c[np.minimum(np.searchsorted(cw, levels), w.size - 1)]
        ws.append(np.full(n, wg / n)); cs.append(newc)
        bs.append(np.full(n, b)); fs.append(np.full(n, int(fam)))
    w = np.concatenate(ws)
    return MixtureField(w / w.sum(), np.concatenate(cs), np.concatenate(bs),
                        np.concatenate(fs).astype(np.int8))


# ---------------------------------------------------------------------------
# gradient growth


def gradient_bound_constants(alpha: float, P: KernelSpec, P_dep: KernelSpec) -> tuple[float, float]:
    """``(l, c)`` with ``|grad eta_{n+1}(y)| <= l |y| + c`` for every evolved field.

    The gradient of ``(1-alpha) eta P + alpha mu P_dep`` is an average of kernel
    gradients, so it is bounded by ``c = (1-alpha) sup|grad p| + alpha sup|grad p_dep|``;
    the slope is the mixed Hessian constant ``l = (1-alpha) l_P + alpha l_P_dep``.
    """
    kp, kd = P.constants, P_dep.constants
    slope = (1.0 - alpha) * kp.lip_grad + alpha * kd.lip_grad
    offset = (1.0 - alpha) * kp.grad_at_zero + alpha * kd.grad_at_zero
    return float(slope), float(offset)


def gradient_sup(f: MixtureField) -> float:
    """Upper bound on ``sup_y |grad f(y)|`` from per-component maxima."""
    d = f.dim
    g = f.families == GAUSS
    b = f.bandwidths
    gm = np.where(g, (2.0 * np.pi * b**2) ** (-d / 2) * math.exp(-0.5) / b, 1.0 / (2.0 * b**2))
    return float(f.weights @ gm)


def abs_moment_of_kernel(P: KernelSpec) -> float:
    """``int |y| P(0, dy)``."""
    return noise_abs_moment(P.family, P.bandwidth, P.dim, 1.0)
