"""Acceptance criteria; each test prints one ``criterion k: PASS|FAIL`` line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
with output capture on.
"""
from __future__ import annotations

import itertools
import math
import os
import time

import numpy as np
import pytest
from scipy import integrate

from conftest import make_params
from meanfield.cli import main
from meanfield.experiments import (PASS, ExperimentConfig, InitSpec, check_kernel_clt_bound, run_chaos,
                                   run_contraction, run_convergence_rate, run_coupling_check,
                                   run_moment_monitor)
from meanfield.field import MixtureField, evolve_exact, expansion_reference
from meanfield.kernels import KernelSpec, density, grad_density
from meanfield.limit import LimitState, QuantileGrid, initial_measure, iterate_to_fixed_point, limit_distance
from meanfield.stability import compute_constants, iid_constants
from meanfield.transport import (DiscreteMeasure, GaussianLaw, w1_dyadic_bound, w1_exact_1d,
                                 w1_exact_assignment, w1_to_gaussian_1d)

THREADS = os.cpu_count() or 1


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail, t0):
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} ({detail}; {time.time() - t0:.1f} s)")
        assert ok, detail
    return emit


def contracting():
    """Regime with c1 + c2 < 1 and delta < a0, shared by criteria 3 to 5."""
    return make_params(A=0.1, delta=0.05, alpha=0.45)


def random_measure(r, n, d=1):
    return DiscreteMeasure.normalized(r.normal(size=(n, d)), r.uniform(0.05, 1.0, n))


def test_c01_mixture_identity(report):
    t0 = time.time()
    r = np.random.default_rng(101)
    worst = 0.0
    for _ in range(5):
        P = KernelSpec("gaussian", r.uniform(0.3, 1.5))
        P_dep = KernelSpec("gaussian", r.uniform(0.3, 1.5))
        alpha = r.uniform(0.05, 0.95)
        eta0 = MixtureField.build(r.dirichlet(np.ones(3)), r.normal(size=(3, 1)), r.uniform(0.3, 1.5, 3), 0)
        mus = [DiscreteMeasure.normalized(r.normal(scale=2, size=(4, 1)), r.uniform(0.1, 1, 4))
               for _ in range(5)]
        eta = eta0
        for mu in mus:
            eta = evolve_exact(eta, mu, alpha, P, P_dep)
        ref = expansion_reference(eta0, mus, alpha, P, P_dep)
        probes = r.uniform(-6, 6, size=(20, 1))
        worst = max(worst, float(np.max(np.abs(eta.density(probes) - ref.density(probes)))))
    report(1, worst < 1e-10, f"max abs density error {worst:.2e} < 1e-10", t0)


def _brute(a, b):
    n = a.size
    return min(sum(np.linalg.norm(a.points[i] - b.points[p]) for i, p in enumerate(perm)) / n
               for perm in itertools.permutations(range(n)))


def test_c02_transport_cross_validation(report):
    t0 = time.time()
    r = np.random.default_rng(102)
    d1 = bf = dy = 0.0
    for _ in range(100):
        a, b = random_measure(r, int(r.integers(1, 9))), random_measure(r, int(r.integers(1, 9)))
        exact = w1_exact_assignment(a, b)
        d1 = max(d1, abs(w1_exact_1d(a, b) - exact))
        dy = max(dy, exact - w1_dyadic_bound(a, b))
        d = int(r.integers(1, 4))
        u = DiscreteMeasure.uniform(r.normal(size=(4, d)))
        v = DiscreteMeasure.uniform(r.normal(size=(4, d)))
        exact = w1_exact_assignment(u, v)
        bf = max(bf, abs(exact - _brute(u, v)))
        dy = max(dy, exact - w1_dyadic_bound(u, v))
    ok = d1 < 1e-12 and bf < 1e-14 and dy <= 1e-12
    report(2, ok, f"1-D vs LP {d1:.1e}, 4-atom brute force {bf:.1e}, max(exact - dyadic) {dy:.1e}", t0)


def test_c03_contraction_rate(report):
    t0 = time.time()
    p = contracting()
    rep = compute_constants(p)
    cfg = ExperimentConfig(p, n_steps=40, init=InitSpec("point", 0.0), init_alt=InitSpec("gaussian", 3.0))
    res = run_contraction(cfg)
    rate = res.fits["rate_sum"]
    ok = rep.c1 + rep.c2 < 1 and res.verdicts["rate"] == PASS and rate <= rep.theta_star + 0.05
    report(3, ok, f"c1 + c2 = {rep.c1 + rep.c2:.3f}, fitted rate {rate:.3f} <= theta* + 0.05 = "
                  f"{rep.theta_star + 0.05:.3f} over {res.fits['points_sum']} steps above the floor", t0)


def test_c04_fixed_point_uniqueness(report):
    t0 = time.time()
    p = contracting()
    rep = compute_constants(p)
    q = QuantileGrid()
    tol = 1e-3
    starts = [(initial_measure(1, q, kind="point"), MixtureField.single(p.P)),
              (initial_measure(1, q, loc=3.0), MixtureField.single(p.P, center=[3.0]))]
    out = [iterate_to_fixed_point(p, s, tol=tol, max_iter=500, method=q) for s in starts]
    gap = sum(limit_distance(*(LimitState(m, e) for m, e, _ in out)))
    ok = rep.cond_delta_a0 and all(f.converged for *_, f in out) and gap < 2 * tol
    report(4, ok, f"delta {p.delta} < a0 {rep.a0:.3f}, fixed points {gap:.2e} apart < 2 tol", t0)


def test_c05_rate_slope(report):
    t0 = time.time()
    cfg = ExperimentConfig(contracting(), grid=(64, 128, 256, 512, 1024), n_steps=200, replications=32,
                           window=(20, 200), stride=5, threads=THREADS)
    res = run_convergence_rate(cfg)
    f = res.fits
    zmax = max(x["z"] for x in f["flatness"])
    ok = res.verdicts["slope"] == PASS and res.verdicts["flatness"] == PASS
    report(5, ok, f"slope {f['slope']:.3f} +- {f['slope_se']:.3f} vs -0.5 +- 0.15, "
                  f"largest trend z in n {zmax:.2f}", t0)


def test_c06_coupling_inequality(report):
    t0 = time.time()
    p = make_params(A=0.3, delta=0.1, alpha=0.3)
    _, chi1 = iid_constants(p)
    cfg = ExperimentConfig(p, grid=(100,), n_steps=50, replications=200, system="ips1", threads=THREADS)
    res = run_coupling_check(cfg)
    f = res.fits
    ok = chi1 < 1 and res.verdicts["inequality"] == PASS
    report(6, ok, f"chi1 {chi1:.3f}, holds on {f['fraction_holding']:.1%} of {f['paths']} paths, "
                  f"max violation {f['max_violation']:.1e} (floor {f['floor']:.1e})", t0)


def test_c07_ar1_anchor(report):
    t0 = time.time()
    a, b = 0.5, 1.0
    p = make_params(A=a, delta=0.0, alpha=0.5, b=b)
    q = QuantileGrid(nodes=4096)
    mu, _, fp = iterate_to_fixed_point(p, (initial_measure(1, q, kind="point"), MixtureField.single(p.P)),
                                       tol=1e-6, max_iter=200, method=q)
    sd = b / math.sqrt(1 - a * a)
    w = w1_to_gaussian_1d(mu, GaussianLaw(np.zeros(1), sd))
    cfg = ExperimentConfig(p, grid=(1000,), n_steps=60, burn_in=20, replications=32, threads=THREADS)
    pl = run_moment_monitor(cfg).fits["plateau_particle_abs"]
    target = sd * math.sqrt(2 / math.pi)
    ok = fp.converged and w < 1e-3 and abs(pl["mean"] - target) <= 3 * pl["se"]
    report(7, ok, f"W1 to N(0, {sd**2:.4f}) {w:.1e} < 1e-3, plateau {pl['mean']:.4f} vs "
                  f"{target:.4f} (3 SE = {3 * pl['se']:.1e})", t0)


def test_c08_sqrt_n_bound(report):
    t0 = time.time()
    cfg = ExperimentConfig(make_params(), grid=(100, 1000, 10000), replications=64, threads=THREADS)
    res = check_kernel_clt_bound(cfg)
    worst = max((r["mean"] + 3 * r["se"]) / r["bound"] for r in res.rows)
    ok = all(v == PASS for v in res.verdicts.values()) and len(res.verdicts) == 5 and worst <= 1
    report(8, ok, f"largest (mean + 3 SE) / bound {worst:.3f} over 5 functions x 3 N", t0)


def test_c09_chaos_trend(report):
    t0 = time.time()
    p = make_params(A=0.5, delta=0.2, alpha=0.3, a1=1.0, a2=1.0, variant="interaction", kappa=1.0)
    cfg = ExperimentConfig(p, grid=(8, 32, 128, 512), n_steps=60, window=(40, 60), replications=64,
                           ref_tol=1e-4, threads=THREADS)
    res = run_chaos(cfg)
    f = res.fits
    ok = res.verdicts["trend"] == PASS and res.verdicts["marginal"] == PASS
    dec = ", ".join(f"{v:.4f}" for v in f["decorrelation"])
    report(9, ok, f"decorrelation {dec} ({f['inversions']} inversions), marginal W1 {f['marginal_w1']:.4f} "
                  f"<= 3 x rate curve {f['rate_curve_w1']:.4f}", t0)


def _fd(fun, y, h=1e-5):
    g = np.empty_like(y)
    for i in range(y.size):
        e = np.zeros_like(y)
        e[i] = h
        g[i] = (fun(y + e) - fun(y - e)) / (2 * h)
    return g


def test_c10_gradients_and_normalization(report):
    t0 = time.time()
    r = np.random.default_rng(110)
    grad_err = 0.0
    for _ in range(60):
        fam = str(r.choice(["gaussian", "biexponential"]))
        dim = 1 if fam == "biexponential" else int(r.integers(1, 4))
        k = KernelSpec(fam, r.uniform(0.3, 2.0), dim)
        x, y = r.normal(size=dim), r.normal(size=dim)
        if fam == "biexponential" and abs(x - y)[0] < 0.05:
            y = y + 0.2
        g = grad_density(k, x, y)
        fd = _fd(lambda z: float(density(k, x, z)), y)
        grad_err = max(grad_err, float(np.max(np.abs(g - fd) / np.maximum(np.abs(g), 1e-3))))
    weight_err = dens_err = 0.0
    for _ in range(10):
        n = int(r.integers(1, 6))
        fams = r.integers(0, 2, n)
        f = MixtureField.build(r.dirichlet(np.ones(n)), r.normal(size=(n, 1)), r.uniform(0.3, 1.5, n), fams)
        for z in r.normal(size=(5, 1)):
            if np.min(np.abs(f.centers[:, 0] - z[0])) < 0.05:
                continue
            fd = _fd(lambda q: float(f.density(q[None, :])[0]), z)
            g = f.gradient(z[None, :])[0]
            grad_err = max(grad_err, float(np.max(np.abs(g - fd) / np.maximum(np.abs(g), 1e-3))))
        mu = random_measure(r, 4)
        f2 = evolve_exact(f, mu, 0.3, KernelSpec("gaussian", 0.7), KernelSpec("gaussian", 0.5)) \
            if np.all(fams == 0) else f
        weight_err = max(weight_err, abs(f.weights.sum() - 1), abs(f2.weights.sum() - 1))
        pts = np.sort(np.concatenate([f.centers[:, 0], [-60.0, 60.0]]))
        total = sum(integrate.quad(lambda t: float(f.density(np.array([[t]]))[0]), lo, hi,
                                   epsabs=1e-12, limit=200)[0] for lo, hi in zip(pts, pts[1:]))
        dens_err = max(dens_err, abs(total - 1))
    ok = grad_err < 1e-6 and weight_err < 1e-12 and dens_err < 1e-6
    report(10, ok, f"gradient rel err {grad_err:.1e}, weight-sum err {weight_err:.1e}, "
                   f"integral err {dens_err:.1e}", t0)


DETERMINISM_EXPERIMENT = {
    "grid": [8, 16, 32], "n_steps": 6, "replications": 8, "window": [2, 6], "ref_nodes": 256,
    "ref_tol": 1e-3, "monitor_steps": [2, 4], "burn_in": 2, "eps_grid": [0.3, 0.6],
}


def test_c11_determinism(tmp_path, report):
    import json
    t0 = time.time()
    cmds = ["simulate", "stability", "rates", "contract", "chaos", "concentrate", "couple", "moments",
            "cltbound"]
    mismatched = []
    for cmd in cmds:
        exp = dict(DETERMINISM_EXPERIMENT)
        if cmd == "concentrate":
            exp["replications"] = 500
        conf = tmp_path / f"{cmd}.json"
        conf.write_text(json.dumps({"experiment": exp,
                                    "model": {"delta": 0.1, "drift": {"a2": 0.3}}}), encoding="utf-8")
        outs = []
        for run, threads in ((0, 1), (1, 1), (2, 4)):
            d = tmp_path / f"{cmd}-{run}"
            code = main([cmd, "--config", str(conf), "--seed", "2024", "--threads", str(threads), "--out", str(d)])
            outs.append((code, (d / f"{cmd}.csv").read_bytes(), (d / f"{cmd}.json").read_bytes()))
        if not all(o == outs[0] for o in outs[1:]):
            mismatched.append(cmd)
    report(11, not mismatched, f"{len(cmds)} subcommands x (2 runs, threads 1 and 4); "
                               f"mismatches: {mismatched or 'none'}", t0)
