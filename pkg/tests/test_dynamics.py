from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from conftest import make_params
from meanfield.dynamics import (CoupledState, DivergenceError, DriftSpec, NoiseSpec, ParticleEnsemble,
                                drift_eval, empirical_measure, initial_ensemble, operator_norm,
                                step_coupled, step_ips1, step_ips2, stream)
from meanfield.field import MixtureField, gradient_bound_constants
from meanfield.kernels import KernelSpec
from meanfield.limit import LimitState
from meanfield.transport import DiscreteMeasure, w1_exact_1d


def energy_distance_pvalue(x, y, rng, n_perm=300):
    """Permutation p-value of the one-dimensional energy statistic."""

    def stat(a, b):
        ab = np.abs(a[:, None] - b[None, :]).mean()
        aa = np.abs(a[:, None] - a[None, :]).mean()
        bb = np.abs(b[:, None] - b[None, :]).mean()
        return 2 * ab - aa - bb

    obs = stat(x, y)
    pooled = np.concatenate([x, y])
    count = 0
    for _ in range(n_perm):
        p = rng.permutation(pooled)
        count += stat(p[:x.size], p[x.size:]) >= obs
    return (count + 1) / (n_perm + 1)


def test_drift_examples():
    r = np.random.default_rng(0)
    mu = DiscreteMeasure.uniform(r.normal(size=(5, 2)))
    g, x = r.normal(size=(3, 2)), r.normal(size=(3, 2))
    noise = NoiseSpec(b=1.0, L_mean=1.3, L_sd=0.4, c_mean=0.2, c_sd=0.5)
    eps = noise.draw(r, 3, 2)
    out = drift_eval(DriftSpec(0.0, 0.0, 0.0), g, mu, x, eps)
    assert np.array_equal(out, eps.c)
    plain = NoiseSpec(b=1.0).draw(r, 3, 2)
    assert np.array_equal(drift_eval(DriftSpec(1.0, 0.0, 0.0), g, mu, x, plain), g)


@pytest.mark.parametrize("variant", ["linear", "interaction"])
def test_drift_lipschitz_audit(variant):
    r = np.random.default_rng(1)
    spec = DriftSpec(0.7, -1.2, 0.4, variant, 0.8 if variant == "interaction" else 0.0)
    noise = NoiseSpec(b=1.0, L_mean=0.5, L_sd=1.0, c_mean=0.1, c_sd=0.3)
    for _ in range(1000):
        mu1 = DiscreteMeasure.uniform(r.normal(size=(int(r.integers(1, 6)), 1)))
        mu2 = DiscreteMeasure.uniform(r.normal(size=(int(r.integers(1, 6)), 1)))
        g1, g2, x1, x2 = r.normal(size=(4, 1, 1))
        eps = noise.draw(r, 1, 1)
        f1 = drift_eval(spec, g1, mu1, x1, eps)
        f2 = drift_eval(spec, g2, mu2, x2, eps)
        A1 = abs(eps.L[0]) * spec.coef_max + spec.lip_interaction
        rhs = A1 * (np.abs(x1 - x2).sum() + np.abs(g1 - g2).sum() + w1_exact_1d(mu1, mu2))
        assert np.abs(f1 - f2).sum() <= rhs + 1e-12


def test_ips1_halving_without_drift_or_noise():
    p = make_params(A=0.5, delta=0.0, b=0.0)
    ens = initial_ensemble(20, 1, np.random.default_rng(2))
    field = MixtureField.single(p.P)
    nxt, new_field = step_ips1(ens, field, p, np.random.default_rng(3))
    assert np.array_equal(nxt.positions, 0.5 * ens.positions)
    assert new_field.n_components == 21


def test_random_walk_variance():
    b, n, N = 0.8, 10, 4000
    p = make_params(A=1.0, delta=0.0, b=b)
    ens = initial_ensemble(N, 1, stream(0, 0), kind="point")
    field = MixtureField.single(p.P)
    for k in range(n):
        ens, _ = step_ips1(ens, field, p, stream(0, 1, k))
    x = ens.positions[:, 0]
    var = x.var(ddof=1)
    se = n * b**2 * math.sqrt(2 / (N - 1))
    assert abs(var - n * b**2) <= 3 * se


def test_single_particle_mean_field_reduction():
    A, delta, b = 0.6, 0.3, 1.0
    p = make_params(A=A, delta=delta, a1=0.0, a2=1.0, b=b)
    field = MixtureField.single(p.P)
    r = np.random.default_rng(4)
    x0 = r.normal(size=100_000)
    out = np.empty_like(x0)
    for i, x in enumerate(x0):
        ens = ParticleEnsemble(np.array([[x]]))
        out[i] = step_ips1(ens, field, p, stream(5, i))[0].positions[0, 0]
    direct = (A + delta) * x0 + b * r.normal(size=x0.size)
    assert stats.ks_2samp(out, direct).pvalue > 0.01


def test_ips2_field_size_and_alpha_zero():
    p = make_params()
    r = np.random.default_rng(6)
    ens = initial_ensemble(7, 1, r)
    field = MixtureField.single(p.P)
    for k in range(3):
        ens, field = step_ips2(ens, field, 11, p, r)
        assert field.n_components == 11 + 7
    assert abs(field.weights.sum() - 1) < 1e-12
    # with alpha -> 0 the deposits carry no weight: the field is the M resampled P-components
    _, f0 = step_ips2(ens, field, 11, p.with_(alpha=1e-300), r)
    assert np.all(f0.weights[11:] < 1e-299)
    assert np.allclose(f0.weights[:11].sum(), 1.0)


def test_ips2_matches_ips1_for_large_M():
    p = make_params(A=0.5, delta=0.5, alpha=0.5, lam=0.5, lam_dep=0.5)
    N, reps = 8, 1000
    a, b = np.empty(reps), np.empty(reps)
    for i in range(reps):
        ens0 = initial_ensemble(N, 1, stream(7, i, 0))
        f0 = MixtureField.single(p.P)
        e1, f1 = step_ips1(ens0, f0, p, stream(7, i, 1))
        e1, _ = step_ips1(e1, f1, p, stream(7, i, 2))
        e2, f2 = step_ips2(ens0, f0, 50 * N, p, stream(8, i, 1))
        e2, _ = step_ips2(e2, f2, 50 * N, p, stream(8, i, 2))
        a[i], b[i] = e1.positions[0, 0], e2.positions[0, 0]
    assert energy_distance_pvalue(a, b, np.random.default_rng(9)) > 0.01


def test_coupled_identity_cases():
    p = make_params(delta=0.0)
    ens = initial_ensemble(30, 1, np.random.default_rng(10))
    cs = CoupledState.start(ens)
    assert w1_exact_1d(empirical_measure(cs.primary), empirical_measure(cs.auxiliary)) == 0
    field = MixtureField.single(p.P)
    limit = LimitState(DiscreteMeasure.uniform(np.zeros((5, 1))), MixtureField.single(p.P), 0)
    for k in range(4):
        cs, field = step_coupled(cs, field, limit, p, stream(11, k))
        assert np.array_equal(cs.primary.positions, cs.auxiliary.positions)
        limit = LimitState(limit.mu, limit.eta, k + 1)
    with pytest.raises(ValueError):
        step_coupled(cs, field, LimitState(limit.mu, limit.eta, 0), p, stream(11, 9))


def test_empirical_measure_view():
    x = np.random.default_rng(12).normal(size=(9, 2))
    ens = ParticleEnsemble(x)
    mu = empirical_measure(ens)
    assert mu.points is ens.positions
    assert np.allclose(mu.mean(), x.mean(axis=0), rtol=0, atol=1e-15)
    one = empirical_measure(ParticleEnsemble(np.array([[1.5]])))
    assert one.size == 1 and one.weights[0] == 1.0
    e1 = empirical_measure(ParticleEnsemble(x[:, :1]))
    assert w1_exact_1d(e1, e1) == 0.0


def _run(ens, params, seed, n, system="ips1"):
    field = MixtureField.single(params.P)
    for k in range(n):
        if system == "ips1":
            ens, field = step_ips1(ens, field, params, stream(seed, k))
        else:
            ens, field = step_ips2(ens, field, 16, params, stream(seed, k))
    return ens


@pytest.mark.parametrize("system", ["ips1", "ips2"])
def test_determinism(system):
    p = make_params(delta=0.2, a2=0.5)
    ens = initial_ensemble(12, 1, stream(1, 0))
    a = _run(ens, p, 3, 5, system)
    b = _run(ens, p, 3, 5, system)
    assert a.positions.tobytes() == b.positions.tobytes()


def test_exchangeability():
    p = make_params(delta=0.3, a2=0.4, a3=-0.2, dim=2)
    ens = initial_ensemble(4, 2, stream(2, 0))
    perm = np.array([2, 0, 3, 1])
    a = _run(ens, p, 4, 3)
    b = _run(ens.permuted(perm), p, 4, 3)
    assert np.allclose(a.positions[perm], b.positions, rtol=0, atol=1e-12)
    assert np.array_equal(b.labels, perm)


def test_one_step_contraction_pathwise():
    p = make_params(A=0.4, delta=0.2, alpha=0.3, a1=1.0, a2=0.5, a3=0.3, lam=0.8, lam_dep=0.6)
    l_grad, _ = gradient_bound_constants(p.alpha, p.P, p.P_dep)
    sigma = p.drift.coef_max
    bound = p.norm_A + p.delta * sigma * (2 + l_grad)
    r = np.random.default_rng(13)
    field = MixtureField(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), 0.8, 0)
    for trial in range(50):
        N = 20
        xa = np.sort(r.normal(size=N))[:, None]
        xb = np.sort(r.normal(loc=r.uniform(-1, 1), scale=r.uniform(0.5, 2), size=N))[:, None]
        before = w1_exact_1d(DiscreteMeasure.uniform(xa), DiscreteMeasure.uniform(xb))
        ea, _ = step_ips1(ParticleEnsemble(xa), field, p, stream(14, trial))
        eb, _ = step_ips1(ParticleEnsemble(xb), field, p, stream(14, trial))
        after = w1_exact_1d(empirical_measure(ea), empirical_measure(eb))
        assert after <= bound * before + 1e-12


def test_divergence_is_reported():
    p = make_params(A=1e200, delta=0.0, b=0.0)
    ens = ParticleEnsemble(np.full((3, 1), 1e200))
    with pytest.raises(DivergenceError) as err:
        step_ips1(ens, MixtureField.single(p.P), p, stream(0))
    assert err.value.step == 1


def test_operator_norm_matches_svd():
    r = np.random.default_rng(15)
    for d in (1, 2, 4):
        A = r.normal(size=(d, d))
        assert operator_norm(A) == pytest.approx(np.linalg.norm(A, 2), rel=1e-9)
    assert operator_norm(0.3 * np.eye(3)) == 0.3


def test_model_validation():
    with pytest.raises(ValueError):
        make_params(alpha=1.0)
    with pytest.raises(ValueError):
        make_params(delta=-0.1)
    with pytest.raises(ValueError):
        DriftSpec(variant="linear", kappa=1.0)
    with pytest.raises(DivergenceError):
        ParticleEnsemble(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        make_params().with_(P=KernelSpec("gaussian", 1.0, 2))
