"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py`` or as a script; either way a
pass/fail line per criterion is printed at the end.
"""

import math
import sys
import time

import numpy as np
import pytest

from frac_heat_lab import cli
from frac_heat_lab.kernel import build_kernel, check_bounds, check_chapman_kolmogorov, eval_kernel
from frac_heat_lab.nonlinearity import (
    Criticality, build_calculus, classify, custom, estimate_qf, expn, exponential, power,
)
from frac_heat_lab.semigroup import discretize, indicator_ball, power_singularity
from frac_heat_lab.solvability import (
    beta_window, centered_average, check_expn_pair, check_necessary, integrability, jensen_check,
    make_dcs,
)
from frac_heat_lab.solver import Verdict, estimate_blowup_time, mild_solve
from oracles import heat_indicator, poisson_kernel


def test_criterion_01_power_closed_forms():
    """Calculus closed forms for u^p, p in {2, 3, 4}."""
    u = np.geomspace(1e-2, 1e4, 60)
    t0 = time.perf_counter()
    for p in (2, 3, 4):
        cp = (p - 1) ** (-1 / (p - 1))
        for nl in (power(p), custom(f"u^{p}", f"{p}*u^{p - 1}")):
            c = build_calculus(nl)
            assert np.allclose(c.F(u), u ** (1 - p) / (p - 1), rtol=1e-6, atol=0)
            assert np.allclose(c.G(u), (p - 1) * u ** (p - 1), rtol=1e-6, atol=0)
            assert np.allclose(c.psi(u), cp * u ** (1 / (p - 1)), rtol=1e-6, atol=0)
    assert time.perf_counter() - t0 < 1.0


def test_criterion_02_growth_exponents():
    """Growth exponents and classification against (N, theta) = (1, 2)."""
    for p in (2, 3, 4):
        nl = power(p)
        est = estimate_qf(build_calculus(nl), nl)
        assert abs(est.q_hat - p / (p - 1)) <= 1e-3
    for nl in (exponential(), expn(1, 2.0), expn(2, 1.0)):
        est = estimate_qf(build_calculus(nl), nl)
        assert abs(est.q_hat - 1.0) <= 1e-3
    expected = {4: Criticality.SUPERCRITICAL, 2: Criticality.SUBCRITICAL,
                3: Criticality.CRITICAL}
    for p, kind in expected.items():
        c = build_calculus(power(p))
        assert classify(c, 1, 2.0) is kind
    assert abs(build_calculus(power(3)).p_f - 3.0) <= 1e-3


def test_criterion_03_kernel_structure(tmp_path):
    """Unit mass, Poisson profile, Chapman-Kolmogorov, two-sided bound."""
    t0 = time.perf_counter()
    ks = {th: build_kernel(1, th, cache_dir=tmp_path) for th in (1.0, 1.5, 2.0)}
    for k in ks.values():
        assert abs(k.total_mass() - 1.0) <= 1e-6
    x = np.linspace(-20, 20, 1601)
    assert np.max(np.abs(eval_kernel(ks[1.0], np.abs(x), 1.0) / poisson_kernel(x) - 1)) <= 1e-5
    for th in (1.0, 1.5):
        assert check_chapman_kolmogorov(ks[th], 1.0, 0.3, grid=(40.0, 4096)) <= 1e-3
    errs = [check_chapman_kolmogorov(ks[1.5], 1.0, 0.1, grid=(40.0, M)) for M in (64, 128, 256)]
    assert errs[1] <= errs[0] / 2 and errs[2] <= errs[1] / 2
    for th in (1.0, 1.5):
        C = check_bounds(ks[th])
        assert math.isfinite(C) and C <= 100
    assert time.perf_counter() - t0 < 30.0


def test_criterion_04_linear_duhamel():
    """f(u) = u with indicator data reproduces e^T S(T) mu."""
    k = build_kernel(1, 2.0)
    u0 = discretize(indicator_ball(), 1, 8.0, 4096)
    T = 0.5
    rep = mild_solve(k, custom("u", "1"), u0, T, 0.01, scheme="history", refine="never")
    exact = math.exp(T) * heat_indicator(u0.axis, T)
    assert rep.verdict is Verdict.CONVERGED
    assert np.max(np.abs(rep.fields[-1] - exact)) / np.max(exact) <= 1e-4


def test_criterion_05_ode_blowup():
    """Constant data blow up at F(1) for u^2 and exp(u)."""
    u0 = discretize(1.0, 1, 1.0, 16)
    for nl, target in ((power(2), 1.0), (exponential(), math.exp(-1))):
        bt = estimate_blowup_time(None, nl, u0, [2e-3, 1e-3], 3.0)
        assert 0.98 * target <= bt.estimate <= 1.02 * target
        assert bt.contains(float(build_calculus(nl).F(1.0)))


def test_criterion_06_necessary_exactness():
    """Constant-data violation time is F(c)/C_*; the grid path agrees."""
    cases = [(power(2), 0.5, lambda c: 1 / c), (power(3), 2.0, lambda c: c ** -2 / 2),
             (exponential(), 1.5, lambda c: math.exp(-c))]
    for nl, c0, F in cases:
        calc = build_calculus(nl)
        for Cstar in (1.0, 0.3):
            v = check_necessary(None, calc, c0, Cstar, t_grid=[1e6])
            assert v.witness["violation_time"] == pytest.approx(F(c0) / Cstar, rel=1e-10)
    # a wide plateau sees the same sup as constant data until long after the violation
    k = build_kernel(1, 2.0)
    calc = build_calculus(power(2))
    u0 = discretize(indicator_ball(20.0, 0.5), 1, 32.0, 1024)
    v = check_necessary(k, calc, u0, 1.0, t_grid=[0.5, 1.0, 1.5, 2.5, 3.0])
    assert v.witness["path"] == "grid"
    assert v.witness["violation_time"] == pytest.approx(2.0, rel=1e-3)


def test_criterion_07_centered_average():
    """Centred ball average of G^beta along the psi profile in closed form."""
    c = build_calculus(power(4))
    eps0, beta, theta = 0.3, 0.45, 2.0
    dcs = make_dcs("Generic", eps0, theta, calculus=c, cutoff=10.0)

    def gb(v):
        return np.power(c.G(np.asarray(v, dtype=float)), beta)
    for s in np.geomspace(1e-3, 1.0, 13):
        ref = eps0 ** beta * s ** (-beta * theta) / (1 - beta * theta)
        assert centered_average(dcs.profile, s, 1, gb) == pytest.approx(ref, rel=1e-6)


def test_criterion_08_jensen_on_grids():
    """Phi(S(t)mu) <= S(t)Phi(mu) cellwise for Phi = G^beta."""
    k1, k2d = build_kernel(1, 2.0), build_kernel(2, 2.0)
    quartic, expo, cubic = (build_calculus(nl) for nl in (power(4), exponential(), power(3)))
    cases = [
        (k1, quartic, discretize(make_dcs("Power", 1.0, 2.0, params={"p": 4}), 1, 2.0, 1024),
         0.45, 1e-3),
        (k1, expo, discretize(make_dcs("Exp", 1.0, 2.0), 1, 2.0, 1024), 0.3, 1e-3),
        (k2d, cubic, discretize(power_singularity(0.5), 2, 2.0, 128), 0.75, 1e-2),
    ]
    for k, c, u0, beta, t in cases:
        lo, hi = beta_window(float(c.q_f), u0.N, 2.0)
        assert lo < beta < hi
        assert jensen_check(k, c, u0, beta, t) <= 1e-8


def test_criterion_09_dcs_consistency():
    """Generalised-exponential profiles reduce to Exp and are integrable."""
    e1 = make_dcs("ExpN", 1.0, 2.0, params={"n": 1, "p": 1}, cutoff=0.9)
    e0 = make_dcs("Exp", 1.0, 2.0, cutoff=0.9)
    r = np.geomspace(1e-12, 0.9, 500)
    assert np.max(np.abs(e1.profile(r) - e0.profile(r))) <= 1e-12
    for kind, params in (("Power", {"p": 4}), ("PowerLog", {"p": 4, "q": 1}),
                         ("ExpN", {"n": 2, "p": 1})):
        rep = integrability(make_dcs(kind, 1.0, 2.0, params=params), 1)
        assert rep.finite and math.isfinite(rep.integral) and rep.integral > 0
    assert e1.profile(np.array([math.exp(-1)]))[0] == pytest.approx(2.0, abs=1e-12)


SWEEP_BASE = {
    "nonlinearity": {"family": "power", "p": 4}, "N": 1, "theta": 2.0, "mode": "sweep",
    "grid": {"L": 2.0, "M": 4096},
    "time": {"T": 1e-4, "dt": 1e-5, "safety": 0.05, "scheme": "stepping", "adaptive": True},
    "data": {"kind": "dcs", "family": "Power", "params": {"p": 4}, "cutoff": 1.0},
    "sweep": {"lambda_min": 1e-3, "lambda_max": 1e3, "points": 13, "bisections": 6},
}


def _sweep(**over):
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in SWEEP_BASE.items()}
    for key, val in over.items():
        cfg[key].update(val)
    return cli.run_sweep(cli.load_config(cfg), threads=1)["sweep"]


def test_criterion_10_dilation_dichotomy():
    """Lambda sweep on u^4 data: monotone, nonempty, refinement-stable bracket."""
    t0 = time.perf_counter()
    runs = [_sweep(), _sweep(grid={"M": 8192}), _sweep(time={"dt": 5e-6, "safety": 0.025})]
    elapsed = time.perf_counter() - t0
    brackets = []
    for sw in runs:
        rows = sorted(sw["rows"], key=lambda r: r["lambda"])
        blown = [r["verdict"] == "BlowUpEvidence" for r in rows]
        assert blown == sorted(blown)
        lo, hi = sw["bracket"]["lambda_lo"], sw["bracket"]["lambda_hi"]
        assert lo is not None and hi is not None and 0 < lo < hi
        brackets.append((lo, hi))
    mids = [math.sqrt(lo * hi) for lo, hi in brackets]
    assert max(mids) / min(mids) <= 2.0
    # regression lock on the base-grid bracket
    assert brackets[0] == pytest.approx((0.033376246942920386, 0.03398208328942559), rel=1e-6)
    assert elapsed <= 600.0


def test_criterion_11_generalised_exponential_pair():
    """log_i A(u) / log_i u within 1% of one at u = 1e12."""
    failures = []
    for n in (1, 2):
        rep = check_expn_pair(n, 1.0, [math.log(1e3), math.log(1e12)])
        for i, ratio in rep.iterated_logs.items():
            if not 0.99 <= ratio <= 1.01:
                failures.append(f"n={n}, i={i}: {ratio:.4f}")
    assert not failures, "; ".join(failures)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
