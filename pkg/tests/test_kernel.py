import math
import warnings

import numpy as np
import pytest
from scipy import integrate

from frac_heat_lab.kernel import (
    KernelConfig, KernelError, build_kernel, check_bounds, check_chapman_kolmogorov,
    eval_kernel, peak_value,
)
from oracles import gaussian_kernel, poisson_kernel


@pytest.fixture(scope="module")
def k1():
    return build_kernel(1, 1.0)


@pytest.fixture(scope="module")
def k15():
    return build_kernel(1, 1.5)


@pytest.fixture(scope="module")
def k2():
    return build_kernel(1, 2.0)


def fourier_cosine_oracle(theta, x):
    """``(1/pi) int_0^inf cos(x xi) exp(-xi^theta) d xi``, truncated where the weight is below 1e-300."""
    top = 700.0 ** (1.0 / theta)
    with warnings.catch_warnings():
        # roundoff warning at large x: the requested 1e-13 is below cancellation level
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(lambda s: math.exp(-s ** theta) * math.cos(x * s), 0, top,
                                limit=4000, epsabs=1e-15, epsrel=1e-13)
    return val / math.pi


def test_gaussian_peak(k2):
    assert eval_kernel(k2, 0.0, 1.0) == pytest.approx((4 * math.pi) ** -0.5, rel=1e-14)


def test_cauchy_peak(k1):
    assert eval_kernel(k1, 0.0, 1.0) == pytest.approx(1 / math.pi, rel=1e-7)


@pytest.mark.parametrize("theta", [1.0, 1.5, 2.0])
def test_unit_mass(theta):
    assert build_kernel(1, theta).total_mass() == pytest.approx(1.0, abs=1e-6)


def test_gaussian_closed_form_at_quarter_time(k2):
    assert eval_kernel(k2, 1.0, 0.25) == pytest.approx(gaussian_kernel(1.0, 0.25), rel=1e-10)


def test_cauchy_closed_form_point(k1):
    assert eval_kernel(k1, 2.0, 3.0) == pytest.approx(3 / (math.pi * 13), rel=1e-5)


def test_cauchy_profile_on_window(k1):
    x = np.linspace(0, 20, 801)
    assert np.max(np.abs(eval_kernel(k1, x, 1.0) / poisson_kernel(x) - 1)) <= 1e-5


@pytest.mark.parametrize("x", [0.0, 0.3, 1.0, 2.5, 6.0])
def test_stable_profile_matches_cosine_quadrature(k15, x):
    assert eval_kernel(k15, x, 1.0) == pytest.approx(fourier_cosine_oracle(1.5, x), rel=1e-6)


def test_self_similar_scaling_is_exact(k15):
    x, t = np.array([0.1, 0.7, 3.0]), 2.7
    direct = eval_kernel(k15, x, t)
    scaled = t ** (-1 / 1.5) * eval_kernel(k15, t ** (-1 / 1.5) * x, 1.0)
    assert np.array_equal(direct, scaled)


@pytest.mark.parametrize("theta", [0.5, 1.0, 1.5, 1.9])
def test_profile_positive_and_decreasing(theta):
    k = build_kernel(1, theta)
    vals = eval_kernel(k, np.geomspace(1e-4, 1e5, 300), 1.0)
    assert np.all(vals > 0) and np.all(np.diff(vals) < 0)


@pytest.mark.parametrize("N", [2, 3])
def test_peak_in_higher_dimensions(N):
    k = build_kernel(N, 1.0)
    # Cauchy kernel in R^N: Gamma((N+1)/2) / pi^{(N+1)/2}
    ref = math.gamma((N + 1) / 2) / math.pi ** ((N + 1) / 2)
    assert k.peak == pytest.approx(ref, rel=1e-12)
    assert eval_kernel(k, 1.0, 1.0) == pytest.approx(ref * 2 ** (-(N + 1) / 2), rel=1e-5)


def test_peak_value_closed_form():
    assert peak_value(1, 1.5) == pytest.approx(fourier_cosine_oracle(1.5, 0.0), rel=1e-12)


def test_chapman_kolmogorov_gaussian(k2):
    assert check_chapman_kolmogorov(k2, 1.0, 0.5, grid=(40.0, 4096)) <= 1e-6


def test_chapman_kolmogorov_stable(k15):
    assert check_chapman_kolmogorov(k15, 1.0, 0.3, grid=(40.0, 4096)) <= 1e-3


def test_chapman_kolmogorov_cauchy(k1):
    assert check_chapman_kolmogorov(k1, 1.0, 0.5, grid=(40.0, 4096)) <= 1e-4


def test_chapman_kolmogorov_rejects_bad_times(k1):
    with pytest.raises(KernelError):
        check_chapman_kolmogorov(k1, 1.0, 1.0)


def test_two_sided_bound_cauchy_regression(k1):
    # Gamma_1(r) (1+r)^2 = (1+r)^2 / (pi (1+r^2)) ranges over [1/pi, 2/pi]
    assert check_bounds(k1) == pytest.approx(math.pi, rel=1e-6)


def test_two_sided_bound_near_gaussian():
    C = check_bounds(build_kernel(1, 1.9))
    assert math.isfinite(C) and C < 1e6


def test_bound_rejected_for_gaussian(k2):
    with pytest.raises(KernelError):
        check_bounds(k2)


def test_invalid_parameters():
    with pytest.raises(KernelError):
        build_kernel(4, 1.0)
    with pytest.raises(KernelError):
        build_kernel(1, 2.5)
    with pytest.raises(KernelError):
        eval_kernel(build_kernel(1, 2.0), 1.0, 0.0)


def test_cache_round_trip(tmp_path):
    cfg = KernelConfig(points_per_decade=10)
    a = build_kernel(1, 1.2, cfg, cache_dir=tmp_path)
    assert list(tmp_path.iterdir())
    b = build_kernel(1, 1.2, cfg, cache_dir=tmp_path)
    x = np.geomspace(1e-3, 1e3, 50)
    assert np.array_equal(eval_kernel(a, x, 1.0), eval_kernel(b, x, 1.0))


def test_cache_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FRACHEAT_CACHE", str(tmp_path))
    build_kernel(1, 1.3, KernelConfig(points_per_decade=10))
    assert any(p.suffix == ".json" for p in tmp_path.rglob("*"))
