"""Particle dynamics: exact-field system, sampled-field system and the coupled pair.

One step of every system reads the field gradient at the current positions,
moves all particles with

    X+ = A X + delta f(grad eta(X), mu, X, eps) + B(eps),

and then updates the field with the pre-move empirical measure.

Noise is drawn per step as one block with a row per particle label, so two
systems stepped from equal generators consume identical per-particle draws,
and permuting positions together with labels permutes the trajectory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .field import MixtureField, evolve_exact, evolve_sampled, subsample
from .kernels import KernelSpec
from .transport import DiscreteMeasure

__all__ = [
    "DriftSpec",
    "NoiseSpec",
    "NoiseDraw",
    "ModelParams",
    "ParticleEnsemble",
    "CoupledState",
    "DivergenceError",
    "stream",
    "operator_norm",
    "drift_eval",
    "step_ips1",
    "step_ips2",
    "step_coupled",
    "empirical_measure",
    "initial_ensemble",
]


class DivergenceError(FloatingPointError):
    """A particle coordinate became non-finite."""

    def __init__(self, step: int, system: str = "particles"):
        super().__init__(f"non-finite position in {system} at step {step}")
        self.step = step
        self.system = system


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``; keys are e.g. (replication, purpose)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def operator_norm(A: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Spectral norm by power iteration on ``A^T A``; scalar multiples of I are exact."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if np.array_equal(A, A[0, 0] * np.eye(d)):
        return abs(float(A[0, 0]))
    G = A.T @ A
    v = np.ones(d) / math.sqrt(d) + 1e-3 * np.arange(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ G @ v)
        if abs(new - lam) <= tol * max(new, 1e-300):
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class DriftSpec:
    """Drift ``f(g, mu, x, eps)``.

    ``linear``:      ``L(eps) (a1 g + a2 mean(mu) + a3 x) + c(eps)``
    ``interaction``: the above plus ``kappa * int psi(y - x) mu(dy)`` with
    ``psi(u) = u / (1 + |u|)``, a 1-Lipschitz map vanishing at 0.
    """

    a1: float = 1.0
    a2: float = 0.0
    a3: float = 0.0
    variant: str = "linear"
    kappa: float = 0.0

    def __post_init__(self):
        if self.variant not in ("linear", "interaction"):
            raise ValueError(f"unknown drift variant {self.variant!r}")
        if self.variant == "linear" and self.kappa != 0.0:
            raise ValueError("kappa is only used by the interaction variant")

    @property
    def coef_max(self) -> float:
        return max(abs(self.a1), abs(self.a2), abs(self.a3))

    @property
    def lip_interaction(self) -> float:
        return abs(self.kappa) if self.variant == "interaction" else 0.0


@dataclass(frozen=True)
class NoiseSpec:
    """Per-particle noise ``eps`` and the maps built from it.

    ``eps`` is standard Gaussian with columns ``[Z_B (d) | xi (1 if L_sd>0) | zeta (d if c_sd>0)]``:
    ``B(eps) = b Z_B``, ``L(eps) = L_mean + L_sd xi``, ``c(eps) = c_mean + c_sd zeta``.
    """

    b: float = 1.0
    L_mean: float = 1.0
    L_sd: float = 0.0
    c_mean: float = 0.0
    c_sd: float = 0.0

    def __post_init__(self):
        for name in ("b", "L_sd", "c_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def width(self, d: int) -> int:
        return d + (1 if self.L_sd > 0 else 0) + (d if self.c_sd > 0 else 0)

    def decode(self, eps: np.ndarray, d: int) -> "NoiseDraw":
        eps = np.atleast_2d(eps)
        n = eps.shape[0]
        col = d
        B = self.b * eps[:, :d]
        if self.L_sd > 0:
            L = self.L_mean + self.L_sd * eps[:, col]
            col += 1
        else:
            L = np.full(n, self.L_mean)
        if self.c_sd > 0:
            c = self.c_mean + self.c_sd * eps[:, col:col + d]
        else:
            c = np.full((n, d), self.c_mean)
        return NoiseDraw(eps, B, L, c)

    def draw(self, rng: np.random.Generator, n: int, d: int) -> "NoiseDraw":
        return self.decode(rng.standard_normal((n, self.width(d))), d)


@dataclass(frozen=True, eq=False)
class NoiseDraw:
    eps: np.ndarray
    B: np.ndarray
    L: np.ndarray
    c: np.ndarray

    def take(self, idx) -> "NoiseDraw":
        return NoiseDraw(self.eps[idx], self.B[idx], self.L[idx], self.c[idx])


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full model: ``A``, step ``delta``, mixing ``alpha``, drift, noise and kernels."""

    A: np.ndarray
    delta: float
    alpha: float
    drift: DriftSpec
    noise: NoiseSpec
    P: KernelSpec
    P_dep: KernelSpec

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not np.all(np.isfinite(A)):
            raise ValueError("A must be finite")
        A = A.copy()
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        if not (self.delta >= 0 and math.isfinite(self.delta)):
            raise ValueError("delta must be finite and >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        d = A.shape[0]
        if self.P.dim != d or self.P_dep.dim != d:
            raise ValueError("kernel dimensions must match A")

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def norm_A(self) -> float:
        return operator_norm(self.A)

    @property
    def is_scalar_A(self) -> bool:
        d = self.dim
        return bool(np.array_equal(self.A, self.A[0, 0] * np.eye(d)))

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Positions ``(N, d)`` at ``step`` with per-particle noise labels."""

    positions: np.ndarray
    step: int = 0
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] < 1:
            raise ValueError("an ensemble needs N >= 1 particles")
        if not np.all(np.isfinite(x)):
            raise DivergenceError(self.step)
        lab = np.arange(x.shape[0]) if self.labels is None else np.asarray(self.labels, dtype=np.int64)
        if lab.shape != (x.shape[0],) or np.unique(lab).size != lab.size:
            raise ValueError("labels must be a permutation-like array of distinct ints")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "labels", lab)

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def permuted(self, perm) -> "ParticleEnsemble":
        perm = np.asarray(perm)
        return ParticleEnsemble(self.positions[perm], self.step, self.labels[perm])


@dataclass(frozen=True, eq=False)
class CoupledState:
    """Interacting system ``X`` and limit-driven system ``Y`` sharing noise."""

    primary: ParticleEnsemble
    auxiliary: ParticleEnsemble

    def __post_init__(self):
        if self.primary.N != self.auxiliary.N or self.primary.step != self.auxiliary.step:
            raise ValueError("coupled ensembles need equal size and step")
        if not np.array_equal(self.primary.labels, self.auxiliary.labels):
            raise ValueError("coupled ensembles need identical labels")

    @classmethod
    def start(cls, ens: ParticleEnsemble) -> "CoupledState":
        return cls(ens, ens)

    @property
    def step(self) -> int:
        return self.primary.step


def empirical_measure(ens: ParticleEnsemble) -> DiscreteMeasure:
    """Uniform measure on the positions (positions are shared, not copied)."""
    n = ens.N
    m = DiscreteMeasure.__new__(DiscreteMeasure)
    object.__setattr__(m, "points", ens.positions)
    object.__setattr__(m, "weights", np.full(n, 1.0 / n))
    return m


def initial_ensemble(N: int, dim: int, rng: np.random.Generator, kind: str = "gaussian",
                     loc=0.0, scale: float = 1.0) -> ParticleEnsemble:
    """i.i.d. initial positions: ``gaussian`` (loc + scale Z) or ``point`` (all at loc)."""
    loc = np.broadcast_to(np.asarray(loc, dtype=float), (dim,))
    if kind == "gaussian":
        x = loc + scale * rng.standard_normal((N, dim))
    elif kind == "point":
        x = np.tile(loc, (N, 1))
    else:
        raise ValueError(f"unknown initial law {kind!r}")
    return ParticleEnsemble(x, 0)


# ---------------------------------------------------------------------------
# drift


def _psi(u: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.einsum("...i,...i->...", u, u))
    return u / (1.0 + r)[..., None]


def interaction_term(mu: DiscreteMeasure, x: np.ndarray, block: int = 512) -> np.ndarray:
    """``int psi(y - x) mu(dy)`` for each row of ``x``."""
    out = np.empty_like(x)
    for s in range(0, x.shape[0], block):
        diff = mu.points[None, :, :] - x[s:s + block, None, :]
        out[s:s + block] = np.einsum("j,ijk->ik", mu.weights, _psi(diff))
    return out


def drift_eval(spec: DriftSpec, g, mu: DiscreteMeasure, x, eps: NoiseDraw) -> np.ndarray:
    """Drift ``f(g, mu, x, eps)`` row by row; ``g`` and ``x`` have shape ``(n, d)``."""
    g = np.atleast_2d(np.asarray(g, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lin = spec.a1 * g + spec.a2 * mu.mean()[None, :] + spec.a3 * x
    out = eps.L[:, None] * lin + eps.c
    if spec.variant == "interaction" and spec.kappa != 0.0:
        out = out + spec.kappa * interaction_term(mu, x)
    return out


def _move(x: np.ndarray, grad: np.ndarray, mu: DiscreteMeasure, params: ModelParams,
          eps: NoiseDraw) -> np.ndarray:
    # overflow surfaces as a DivergenceError from the caller
    with np.errstate(over="ignore", invalid="ignore"):
        lin = x @ params.A.T
        if params.delta != 0.0:
            lin = lin + params.delta * drift_eval(params.drift, grad, mu, x, eps)
        return lin + eps.B


def _noise_block(ens: ParticleEnsemble, params: ModelParams, rng: np.random.Generator) -> NoiseDraw:
    n_rows = int(ens.labels.max()) + 1
    block = params.noise.draw(rng, n_rows, params.dim)
    return block.take(ens.labels)


def _finite_or_raise(x: np.ndarray, step: int, system: str):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(step, system)


def _gradient(field_: MixtureField, x: np.ndarray, params: ModelParams) -> np.ndarray:
    if params.delta == 0.0 or params.drift.a1 == 0.0:
        return np.zeros_like(x)
    return field_.gradient(x)


def step_ips1(ens: ParticleEnsemble, field_: MixtureField, params: ModelParams,
              rng: np.random.Generator) -> tuple[ParticleEnsemble, MixtureField]:
    """One step of the exact-field system; the field grows by ``N`` components."""
    if field_.dim != ens.dim:
        raise ValueError("field and ensemble dimensions differ")
    mu = empirical_measure(ens)
    eps = _noise_block(ens, params, rng)
    x_new = _move(ens.positions, _gradient(field_, ens.positions, params), mu, params, eps)
    _finite_or_raise(x_new, ens.step + 1, "ips1")
    new_field = evolve_exact(field_, mu, params.alpha, params.P, params.P_dep)
    return ParticleEnsemble(x_new, ens.step + 1, ens.labels), new_field


def step_ips2(ens: ParticleEnsemble, field_: MixtureField, M: int, params: ModelParams,
              rng: np.random.Generator) -> tuple[ParticleEnsemble, MixtureField]:
    """One step of the sampled-field system; the new field has ``M + N`` components."""
    if field_.dim != ens.dim:
        raise ValueError("field and ensemble dimensions differ")
    mu = empirical_measure(ens)
    eps = _noise_block(ens, params, rng)
    x_new = _move(ens.positions, _gradient(field_, ens.positions, params), mu, params, eps)
    _finite_or_raise(x_new, ens.step + 1, "ips2")
    s = subsample(field_, M, rng, ens.step)
    new_field = evolve_sampled(s, mu, params.alpha, params.P, params.P_dep)
    return ParticleEnsemble(x_new, ens.step + 1, ens.labels), new_field


def step_coupled(cs: CoupledState, field_N: MixtureField, limit_state, params: ModelParams,
                 rng: np.random.Generator) -> tuple[CoupledState, MixtureField]:
    """Advance ``X`` (interacting, exact field) and ``Y`` (driven by the limit) with shared noise.

    Parameters
    ----------
    limit_state : object with ``mu`` (DiscreteMeasure), ``eta`` (MixtureField) and ``step``
        The limit pair at the current step.
    """
    if getattr(limit_state, "step", cs.step) != cs.step:
        raise ValueError(f"limit state is at step {limit_state.step}, coupled state at {cs.step}")
    X, Y = cs.primary, cs.auxiliary
    mu_x = empirical_measure(X)
    eps = _noise_block(X, params, rng)
    x_new = _move(X.positions, _gradient(field_N, X.positions, params), mu_x, params, eps)
    y_new = _move(Y.positions, _gradient(limit_state.eta, Y.positions, params), limit_state.mu,
                  params, eps)
    _finite_or_raise(x_new, cs.step + 1, "coupled-X")
    _finite_or_raise(y_new, cs.step + 1, "coupled-Y")
    new_field = evolve_exact(field_N, mu_x, params.alpha, params.P, params.P_dep)
    nxt = CoupledState(ParticleEnsemble(x_new, cs.step + 1, X.labels),
                       ParticleEnsemble(y_new, cs.step + 1, Y.labels))
    return nxt, new_field
