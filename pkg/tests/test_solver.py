import json
import math

import numpy as np
import pytest

from frac_heat_lab.kernel import build_kernel
from frac_heat_lab.nonlinearity import custom, exponential, power
from frac_heat_lab.semigroup import (
    GridField, apply_semigroup, discretize, indicator_ball, power_singularity,
)
from frac_heat_lab.solvability import make_dcs
from frac_heat_lab.solver import (
    NotBlowingUp, SolverError, Verdict, check_order_preservation, estimate_blowup_time,
    mild_solve, report_hash,
)
from oracles import heat_indicator, ode_blowup_time


@pytest.fixture(scope="module")
def k2():
    return build_kernel(1, 2.0)


@pytest.fixture(scope="module")
def k15():
    return build_kernel(1, 1.5)


def test_zero_source_reproduces_semigroup(k15):
    u0 = discretize(indicator_ball(), 1, 16.0, 256)
    rep = mild_solve(k15, custom("0", "0"), u0, 0.2, 0.05, refine="never")
    assert rep.verdict is Verdict.CONVERGED
    assert np.all(rep.residual_history == 0.0)
    ref = apply_semigroup(k15, u0, 0.2).values
    assert np.max(np.abs(rep.fields[-1] - ref)) <= 1e-12


@pytest.mark.parametrize("a", [1.0, 2.5])
def test_linear_source_matches_exponential_factor(k2, a):
    u0 = discretize(indicator_ball(), 1, 8.0, 1024)
    T = 0.5
    rep = mild_solve(k2, custom(f"{a}*u", f"{a}"), u0, T, 0.01, refine="never")
    exact = math.exp(a * T) * heat_indicator(u0.axis, T)
    assert rep.verdict is Verdict.CONVERGED
    assert np.max(np.abs(rep.fields[-1] - exact)) / np.max(exact) <= 1e-4


def test_constant_data_follow_the_ode():
    # u' = u^2, u(0) = 0.5  ->  u(t) = 1 / (2 - t)
    u0 = discretize(0.5, 1, 1.0, 16)
    rep = mild_solve(None, power(2), u0, 1.0, 1e-3, tol=1e-13, refine="never")
    assert rep.verdict is Verdict.CONVERGED
    assert rep.sup_history[-1] == pytest.approx(1.0, rel=1e-5)
    for f in rep.fields:
        assert np.ptp(f) <= 1e-10


@pytest.mark.parametrize("c,p", [(1.0, 2), (2.0, 2), (1.0, 3), (0.5, 3)])
def test_power_blowup_time_is_F(c, p):
    u0 = discretize(c, 1, 1.0, 16)
    bt = estimate_blowup_time(None, power(p), u0, [2e-3, 1e-3], 3 * c ** (1 - p))
    exact = c ** (1 - p) / (p - 1)
    assert bt.contains(exact)
    assert bt.estimate == pytest.approx(exact, rel=1e-3)


def test_exponential_blowup_time_matches_ode_oracle():
    u0 = discretize(1.0, 1, 1.0, 16)
    bt = estimate_blowup_time(None, exponential(), u0, [2e-3, 1e-3], 1.0)
    ref = ode_blowup_time(math.exp, 1.0, tail=lambda b: math.exp(-b))
    assert ref == pytest.approx(math.exp(-1), rel=1e-8)
    assert bt.contains(ref)


def test_not_blowing_up():
    with pytest.raises(NotBlowingUp):
        estimate_blowup_time(None, power(2), discretize(0.1, 1, 1.0, 16), [1e-2], 1.0)


def test_blowup_evidence_is_refinement_stable():
    rep = mild_solve(None, power(2), discretize(1.0, 1, 1.0, 16), 2.0, 1e-3)
    assert rep.verdict is Verdict.BLOWUP and rep.refinement_stable is True
    assert len(rep.refinements) == 2
    assert rep.crossing_time == pytest.approx(1.0, rel=1e-2)


def test_refine_never_leaves_stability_unset():
    rep = mild_solve(None, power(2), discretize(1.0, 1, 1.0, 16), 2.0, 1e-3, refine="never")
    assert rep.verdict is Verdict.BLOWUP and rep.refinement_stable is None


def test_nan_source_is_not_evidence_without_refinement():
    nl = custom("log(u - 2)", "1/(u - 2)")
    rep = mild_solve(None, nl, discretize(1.0, 1, 1.0, 4), 1.0, 0.1, refine="never")
    assert rep.verdict is Verdict.INCONCLUSIVE


def test_order_preservation_between_runs(k2):
    mu = discretize(power_singularity(0.4, 1.0, 0.5), 1, 4.0, 256)
    nu = mu.with_values(mu.values + 0.1)
    kw = dict(refine="never", scheme="history")
    a = mild_solve(k2, power(2), mu, 0.05, 0.005, **kw)
    b = mild_solve(k2, power(2), nu, 0.05, 0.005, **kw)
    assert check_order_preservation(a, b)
    assert not check_order_preservation(b, a)
    assert check_order_preservation(a, a)


def test_zero_data_stay_below(k2):
    mu = discretize(indicator_ball(), 1, 4.0, 128)
    zero = mu.with_values(np.zeros_like(mu.values))
    a = mild_solve(k2, power(3), zero, 0.1, 0.01, refine="never")
    b = mild_solve(k2, power(3), mu, 0.1, 0.01, refine="never")
    assert all(np.all(f == 0) for f in a.fields)
    assert check_order_preservation(a, b)


def test_stepping_and_history_schemes_agree(k2):
    u0 = discretize(indicator_ball(), 1, 8.0, 512)
    kw = dict(refine="never", tol=1e-12)
    gaps = []
    for dt in (0.005, 0.0025):
        h = mild_solve(k2, power(2), u0, 0.2, dt, scheme="history", **kw)
        s = mild_solve(k2, power(2), u0, 0.2, dt, scheme="stepping", **kw)
        gaps.append(np.max(np.abs(h.fields[-1] - s.fields[-1])))
    # the gap is a spatial O(h^2) effect and must not grow with the number of steps
    assert max(gaps) <= 1e-3 and gaps[1] <= 1.1 * gaps[0]


def test_scaling_consistency_power_profile(k2):
    """Data with cutoff 1/a on [-L/a, L/a] over time T/a^theta is a rescaled copy."""
    a, theta, p = 2.0, 2.0, 4
    for lam, verdict in ((1e-3, Verdict.CONVERGED), (1.0, Verdict.BLOWUP)):
        reps = []
        for s in (1.0, a):
            dcs = make_dcs("Power", lam, theta, params={"p": p}, cutoff=1.0 / s)
            u0 = discretize(dcs, 1, 2.0 / s, 256)
            reps.append(mild_solve(k2, power(p), u0, 1e-4 / s ** theta, 1e-5 / s ** theta,
                                   scheme="stepping", adaptive=True, refine="never",
                                   keep_fields=False))
        assert reps[0].verdict is verdict and reps[1].verdict is verdict
        if verdict is Verdict.CONVERGED:
            ratio = reps[1].sup_history / reps[0].sup_history
            assert np.allclose(ratio, a ** (theta / (p - 1)), rtol=1e-9)
        else:
            assert reps[1].crossing_time == pytest.approx(reps[0].crossing_time / a ** theta,
                                                          rel=1e-2)


def test_report_serialisation_is_deterministic(k2):
    u0 = discretize(indicator_ball(), 1, 4.0, 64)
    a = mild_solve(k2, power(2), u0, 0.05, 0.01, refine="never")
    b = mild_solve(k2, power(2), u0, 0.05, 0.01, refine="never")
    d = json.loads(a.to_json())
    assert d["verdict"] == "Converged" and d["grid"]["M"] == 64
    assert d["input_hash"] == u0.content_hash()
    assert report_hash(a) == report_hash(b)


@pytest.mark.parametrize("kwargs", [dict(T=0.0), dict(cap=0.5), dict(refine="sometimes"),
                                    dict(scheme="spectral"), dict(adaptive=True)])
def test_invalid_arguments(kwargs):
    args = dict(k=None, nl=power(2), u0=discretize(1.0, 1, 1.0, 4), T=1.0, dt=0.1)
    args.update(kwargs)
    with pytest.raises(SolverError):
        mild_solve(**args)


def test_two_dimensional_solve_converges():
    k = build_kernel(2, 2.0)
    u0 = discretize(indicator_ball(0.5, 0.5), 2, 3.0, 64)
    rep = mild_solve(k, power(2), u0, 0.05, 0.01)
    assert rep.verdict is Verdict.CONVERGED
    assert rep.sup_history[-1] < rep.sup_history[0] and np.all(rep.sup_history < 0.51)


def test_grid_field_background_is_preserved():
    u0 = GridField(1, 1.0, 8, np.full(8, 0.2), 0.2)
    rep = mild_solve(None, power(2), u0, 0.5, 0.05, refine="never")
    assert rep.backgrounds[-1] == pytest.approx(1 / (5 - 0.5), rel=1e-3)
