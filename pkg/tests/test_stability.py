from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_params
from meanfield.dynamics import DriftSpec, ModelParams, NoiseSpec
from meanfield.kernels import KernelSpec
from meanfield.stability import (ConstantsUnavailableError, LogFactor, NotApplicableError,
                                 compute_constants, contraction_rate, iid_constants, rate_exponent)

# Gaussian bandwidth whose gradient-Lipschitz constant (2 pi)^{-1/2} / lam^3 equals one
LAM_UNIT = (2 * math.pi) ** (-1 / 6)


def test_unit_bandwidth_constant():
    assert KernelSpec("gaussian", LAM_UNIT).constants.lip_grad == pytest.approx(1.0, rel=1e-14)


def test_drift_free_case():
    p = make_params(A=0.4, delta=0.0, alpha=0.3, lam=0.8, lam_dep=0.5)
    rep = compute_constants(p)
    assert rep.c2 == 0.0
    assert rep.c1 == max(0.4 + 0.3 * 1.0, 0.7 * 1.0)
    assert rep.theta_star == rep.c1
    assert rep.C1 == 0.0 and rep.chi1 == 0.0


def test_sigma_deterministic_scale():
    p = make_params(a1=1.0, a2=1.0, a3=1.0)
    assert compute_constants(p).sigma == 1.0


def test_sigma_against_monte_carlo():
    r = np.random.default_rng(0)
    for _ in range(5):
        spec = DriftSpec(*r.uniform(-1.5, 1.5, 3))
        noise = NoiseSpec(b=1.0, L_mean=r.uniform(-1, 1), L_sd=r.uniform(0.1, 1.0))
        p = ModelParams(0.5 * np.eye(1), 0.05, 0.3, spec, noise, KernelSpec("gaussian", 1.0),
                        KernelSpec("gaussian", 1.0))
        L = noise.draw(r, 10**6, 1).L
        a1 = np.abs(L) * spec.coef_max
        se = a1.std() / 1e3
        assert abs(compute_constants(p).sigma - a1.mean()) <= 3 * se


def test_contraction_rate_examples():
    assert contraction_rate(0.5, 0.0) == 0.5
    assert contraction_rate(0.0, 0.25) == 0.5
    th = contraction_rate(0.3, 0.2)
    assert th == pytest.approx((0.3 + math.sqrt(0.89)) / 2, abs=1e-15)
    assert th == pytest.approx(0.6217, abs=1e-4)
    a = [1.0, 1.0]
    for _ in range(50):
        a.append(0.3 * a[-1] + 0.2 * a[-2])
    pref = max(a[0], a[1] / th)
    assert all(a[n] <= 1.01 * th**n * pref for n in range(len(a)))


@given(st.floats(0.0, 0.9), st.floats(1e-6, 0.5))
def test_theta_root_identity(c1, c2):
    th = contraction_rate(c1, c2)
    assert c1 / th + c2 / th**2 == pytest.approx(1.0, abs=1e-12)
    assert (th < 1) == (c1 + c2 < 1)


def test_rate_exponent_table():
    e, logf, printed = rate_exponent(1, 3.0)
    assert printed == 0.75 and e == 0.5
    e, logf, printed = rate_exponent(2, 1.0)
    assert e == 0.5 and logf is LogFactor.LOG2
    e, logf, _ = rate_exponent(5, 0.25)
    assert e == pytest.approx(0.2) and logf is LogFactor.LOG
    assert rate_exponent(1, 1.0)[1] is LogFactor.LOG
    assert rate_exponent(3, 2.0)[0] == pytest.approx(1 / 3)


def hand_coupling_constants(nA, delta, K, alpha, lg_P, lg_Pd, l_P, l_Pd):
    lga = (1 - alpha) * lg_P + alpha * lg_Pd
    inner = nA + delta * K * (1 + lga)
    top = max(inner, alpha * lg_Pd, (1 - alpha) * l_P)
    gap = abs(inner - max(alpha * lg_Pd, (1 - alpha) * l_P))
    C1 = delta * K * max(1, (1 - alpha) * lg_P * alpha * l_Pd) * top / gap
    return C1, delta * K * top + C1


def test_iid_constants_hand_instance():
    p = make_params(A=0.2, delta=0.05, alpha=0.1, lam=LAM_UNIT, lam_dep=LAM_UNIT)
    C1, chi1 = iid_constants(p, K=1.0)
    hC1, hchi1 = hand_coupling_constants(0.2, 0.05, 1.0, 0.1, 1.0, 1.0, 1.0, 1.0)
    assert hC1 == pytest.approx(0.075, abs=1e-15) and hchi1 == pytest.approx(0.12, abs=1e-15)
    assert C1 == pytest.approx(hC1, abs=1e-12)
    assert chi1 == pytest.approx(hchi1, abs=1e-12)


def test_iid_constants_degenerate_and_monotone():
    p = make_params(A=0.3, delta=0.0, alpha=0.3)
    assert iid_constants(p, K=1.0) == (0.0, 0.0)
    # the closed form has a pole where ||A|| + delta K (1 + l) crosses max{alpha l', (1 - alpha) l}
    # so the grids stay on one side of it
    for A in (0.1, 0.9):
        q = p.with_(A=A * np.eye(1))
        chis = [iid_constants(q.with_(delta=d), K=1.0)[1] for d in np.linspace(0.01, 0.3, 30)]
        assert np.all(np.diff(chis) > 0)


def test_iid_constants_need_bounded_drift():
    p = make_params(L_sd=0.5)
    with pytest.raises(NotApplicableError):
        iid_constants(p)
    rep = compute_constants(p)
    assert rep.C1 is None and rep.K_bound is None


def test_unsupported_drift():
    p = make_params()
    bad = ModelParams(p.A, p.delta, p.alpha, SimpleNamespace(variant="custom"), p.noise, p.P, p.P_dep)
    with pytest.raises(ConstantsUnavailableError):
        compute_constants(bad)


def test_a_tau_limit():
    p = make_params(A=0.3, delta=0.05, a1=0.8, a2=0.3)
    a0 = compute_constants(p, 1.0).a0
    at = compute_constants(p, 1e-3).a_tau
    assert at ** (1 / (1 + 1e-3)) == pytest.approx(a0, rel=1e-2)


@given(st.floats(0.0, 0.95), st.floats(0.0, 0.5), st.floats(0.05, 0.95), st.floats(0.3, 2.0),
       st.floats(0.3, 2.0), st.floats(-1.0, 1.0), st.floats(0.0, 0.8))
def test_report_invariants(A, delta, alpha, lam, lam_dep, a2, L_sd):
    p = make_params(A=A, delta=delta, alpha=alpha, a2=a2, lam=lam, lam_dep=lam_dep, L_sd=L_sd)
    rep = compute_constants(p)
    assert rep.flags_consistent()
    assert (0 < rep.theta_star < 1) == rep.cond_contraction
    if A < 1:
        assert rep.a0 > 0
    assert rep.l_grad_alpha == pytest.approx((1 - alpha) * rep.l_grad_P + alpha * rep.l_grad_Pdep)
    assert rep.cond_contraction == (rep.c1 + rep.c2 < 1)
