"""Checkable solvability conditions and dilation-critical singularities.

A dilation-critical singularity (DCS) is a profile ``mu_lambda(x) =
psi(lambda |x|^{-theta})`` cut off outside a ball; for the critical
dilation ``lambda_0`` data with ``lambda < lambda_0`` are locally solvable
and data with ``lambda > lambda_0`` are not.  This module builds such
profiles, evaluates the pointwise, necessary and sufficient conditions,
and brackets ``lambda_0`` empirically with the mild solver.
"""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate

from .kernel import KernelTable, sphere_area
from .nonlinearity import Calculus, e_n
from .semigroup import (GridField, RadialData, SemigroupOperator, ball_integrals,
                        jensen_gap)
from .solver import MildSolveReport, Verdict


class SolvabilityError(ValueError):
    """Base class for solvability failures."""


class BetaWindowEmpty(SolvabilityError):
    """No exponent satisfies ``q_f - 1 < beta < min(q_f, N/theta)``."""


class LogDomain(SolvabilityError):
    """The profile argument leaves the domain of the iterated logarithm."""


class NonMonotoneSweep(SolvabilityError):
    """A solvable verdict appeared above a blow-up verdict in a sweep."""


class VerdictKind(str, enum.Enum):
    NECESSARY_VIOLATED = "NecessaryViolated"
    NECESSARY_PASSED = "NecessaryPassed"
    SUFFICIENT_HOLDS = "SufficientHolds"
    SUFFICIENT_FAILS = "SufficientFails"


@dataclass(frozen=True)
class SolvabilityVerdict:
    """Outcome of a condition check with the quantities that decide it."""

    kind: VerdictKind
    witness: dict
    parameters: dict

    @property
    def holds(self) -> bool:
        return self.kind in (VerdictKind.NECESSARY_PASSED, VerdictKind.SUFFICIENT_HOLDS)


# ----------------------------------------------------------------------------
# DCS profiles
# ----------------------------------------------------------------------------

class DCSKind(str, enum.Enum):
    GENERIC = "Generic"
    POWER = "Power"
    EXP = "Exp"
    POWERLOG = "PowerLog"
    EXPN = "ExpN"


def _iter_log_from_log(log_u: np.ndarray, k: int) -> np.ndarray:
    """``log_k u`` given ``log u`` (NaN where undefined)."""
    out = np.asarray(log_u, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        for _ in range(k - 1):
            out = np.where(out > 0, np.log(np.where(out > 0, out, 1.0)), np.nan)
    return out


def log_A(log_u: np.ndarray, n: int, p: float) -> np.ndarray:
    """``log A(u)`` for ``A(u) = u (log_n u)^{1/p} prod_{k<=n} (log_k u)^{-1}``."""
    log_u = np.asarray(log_u, dtype=float)
    terms = [_iter_log_from_log(log_u, k) for k in range(1, n + 1)]
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = log_u + np.log(terms[-1]) / p
        for t in terms:
            acc = acc - np.log(t)
    if n == 1 and p == 1.0:
        acc = np.where(np.isfinite(acc), log_u, acc)
    return acc


def iterated_log_ratio(log_u: float, n: int, p: float, i: int) -> float:
    """``log_i A(u) / log_i u`` evaluated from ``log u``."""
    la = log_A(np.array([log_u]), n, p)
    num = _iter_log_from_log(la, i)[0]
    den = _iter_log_from_log(np.array([log_u]), i)[0]
    return float(num / den)


def expn_psi_log(log_v: np.ndarray, n: int, p: float) -> np.ndarray:
    """``psi_0(v) = (log_n A(v))^{1/p}`` from ``log v``; NaN outside the domain."""
    la = log_A(log_v, n, p)
    ln = _iter_log_from_log(la, n)
    with np.errstate(invalid="ignore"):
        return np.where(ln > 0, np.power(np.where(ln > 0, ln, 0.0), 1.0 / p), np.nan)


def expn_phi_log(log_w: np.ndarray, n: int, p: float) -> np.ndarray:
    """``log phi_0(w)`` with ``phi_0(w) = w^{p-1} prod_{k<=n} exp_k(w^p)``."""
    w = np.exp(np.asarray(log_w, dtype=float))
    acc = (p - 1.0) * np.asarray(log_w, dtype=float)
    # log exp_k(v) = exp_{k-1}(v); accumulate exp_{k-1}(w^p)
    v = np.power(w, p)
    cur = v
    with np.errstate(over="ignore"):
        for k in range(1, n + 1):
            acc = acc + cur
            cur = np.exp(cur)
    return acc


def expn_domain_start(n: int, p: float) -> float:
    """Smallest ``L >= e_n`` beyond which ``psi_0`` is positive and increasing."""
    if n == 1 and p == 1.0:
        return 1.0
    lo = math.log(e_n(n)) if n >= 1 and e_n(n) > 0 else -50.0
    grid = lo + np.geomspace(1e-9, 700.0, 4000)
    vals = expn_psi_log(grid, n, p)
    bad = ~np.isfinite(vals) | (vals <= 0)
    inc = np.diff(vals) >= 0
    bad[:-1] |= ~inc
    idx = np.nonzero(bad)[0]
    start = 0 if idx.size == 0 else idx[-1] + 1
    if start >= grid.size:
        raise LogDomain("profile never becomes positive and increasing")
    return float(math.exp(grid[start]))


@dataclass(frozen=True)
class DCSSpec:
    """Evaluable profile ``mu_lambda(x) = psi(lambda |x|^{-theta})`` inside ``|x| < cutoff``."""

    kind: DCSKind
    theta: float
    lam: float
    cutoff: float
    params: dict
    psi_log: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    domain_start: float = 0.0
    singular_exponent: float = 0.0
    q_f: Optional[float] = None

    def psi(self, v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore"):
            out = self.psi_log(np.log(v))
        return np.where(v > self.domain_start, np.nan_to_num(out, nan=0.0), 0.0)

    def profile(self, rho) -> np.ndarray:
        """Profile as a function of the radius (0 outside the cutoff)."""
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore"):
            log_v = math.log(self.lam) - self.theta * np.log(rho)
            out = self.psi_log(log_v)
        inside = rho < self.cutoff
        if self.domain_start > 0:
            inside &= log_v > math.log(self.domain_start)
        return np.where(inside, np.nan_to_num(out, nan=0.0, posinf=np.inf), 0.0)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        rho = np.abs(x) if x.ndim <= 1 else np.sqrt(np.sum(x ** 2, axis=-1))
        return self.profile(rho)

    def as_data(self) -> RadialData:
        return RadialData(self.profile, self.singular_exponent, 0.0,
                          f"{self.kind.value}(lambda={self.lam:g})")

    def with_lambda(self, lam: float, cutoff: Optional[float] = None) -> "DCSSpec":
        from dataclasses import replace
        return replace(self, lam=float(lam), cutoff=self.cutoff if cutoff is None else cutoff)


def make_dcs(kind: Union[str, DCSKind], lam: float, theta: float, *,
             calculus: Optional[Calculus] = None, params: Optional[dict] = None,
             cutoff: Optional[float] = None, N: Optional[int] = None,
             strict: bool = False) -> DCSSpec:
    """Build the dilation-critical profile of the requested family.

    Parameters
    ----------
    kind : {"Generic", "Power", "Exp", "PowerLog", "ExpN"}
        ``Generic`` uses the zero-extended inverse of G from ``calculus``.
    lam : float
        Dilation parameter.
    params : dict
        ``{"p"}`` for Power, ``{"p", "q", "L"}`` for PowerLog,
        ``{"n", "p"}`` for ExpN.
    cutoff : float, optional
        Support radius.  Defaults to ``(lam / L)^{1/theta}`` with L the
        start of the family's domain (1 for Power).
    N : int, optional
        When given, Power and PowerLog require ``p > 1 + theta/N``.
    strict : bool
        Raise :class:`LogDomain` instead of shrinking a cutoff that reaches
        outside the profile's domain.
    """
    kind = DCSKind(kind)
    params = dict(params or {})
    if not lam > 0:
        raise SolvabilityError("lambda must be positive")
    if not 0 < theta <= 2:
        raise SolvabilityError("theta must lie in (0, 2]")
    if kind in (DCSKind.POWER, DCSKind.POWERLOG):
        p = float(params["p"])
        if p <= 1:
            raise SolvabilityError("p must exceed 1")
        if N is not None and p <= 1 + theta / N:
            raise SolvabilityError(f"p={p} is not above 1 + theta/N = {1 + theta / N}")
    if kind is DCSKind.POWER:
        p = float(params["p"])
        cp = (p - 1.0) ** (-1.0 / (p - 1.0))

        def psi_log(lv, cp=cp, p=p):
            with np.errstate(over="ignore"):
                return cp * np.exp(np.asarray(lv) / (p - 1.0))
        start, default_cut = 0.0, 1.0
        a, q_f = theta / (p - 1.0), p / (p - 1.0)
    elif kind is DCSKind.EXP:
        def psi_log(lv):
            return np.asarray(lv, dtype=float)
        start = 1.0
        default_cut = lam ** (1.0 / theta)
        a, q_f = 0.0, 1.0
    elif kind is DCSKind.POWERLOG:
        p, q, L = float(params["p"]), float(params["q"]), float(params.get("L", 10.0))

        def psi_log(lv, p=p, q=q):
            lv = np.asarray(lv, dtype=float)
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                return np.exp(lv / (p - 1.0)) * np.power(lv, -q / (p - 1.0))
        start = L
        default_cut = (lam / L) ** (1.0 / theta)
        a, q_f = theta / (p - 1.0), p / (p - 1.0)
    elif kind is DCSKind.EXPN:
        n, p = int(params["n"]), float(params["p"])
        if n < 1 or not p > 0:
            raise SolvabilityError("ExpN needs n >= 1 and p > 0")

        def psi_log(lv, n=n, p=p):
            return expn_psi_log(lv, n, p)
        start = expn_domain_start(n, p)
        default_cut = (lam / start) ** (1.0 / theta)
        a, q_f = 0.0, 1.0
    else:
        if calculus is None:
            raise SolvabilityError("the Generic kind needs a Calculus")
        c = calculus

        def psi_log(lv, c=c):
            with np.errstate(over="ignore"):
                return np.asarray(c.psi(np.exp(np.asarray(lv, dtype=float))), dtype=float)
        start = float(c.G0)
        default_cut = (lam / start) ** (1.0 / theta) if start > 0 else 1.0
        q_f = float(c.q_f)
        a = theta * (q_f - 1.0)
        params.setdefault("nonlinearity", c.nl.to_spec())
    if cutoff is None:
        cutoff = default_cut
    if start > 0:
        limit = (lam / start) ** (1.0 / theta)
        if cutoff > limit * (1 + 1e-12):
            msg = (f"cutoff {cutoff:g} reaches where lambda|x|^-theta <= {start:g}; "
                   f"the profile domain ends at {limit:g}")
            if strict:
                raise LogDomain(msg)
            warnings.warn(msg + "; cutoff shrunk", RuntimeWarning, stacklevel=2)
            cutoff = limit
    return DCSSpec(kind, float(theta), float(lam), float(cutoff), params, psi_log,
                   float(start), float(a), q_f)


# radial substitution rho = r e^{-s}: beyond this s the weight e^{-Ns} underflows
_S_MAX = 700.0


def _finite_upper(value: Callable[[float], float], s_max: float) -> float:
    """Largest ``s <= s_max`` with a finite ``value(s)``, by bisection.

    Generic profiles evaluate psi at ``lam r^-theta``, which overflows long
    before the radial weight underflows; the cut tail is below the weight there.
    """
    if math.isfinite(value(s_max)):
        return s_max
    lo, hi = 0.0, s_max
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if math.isfinite(value(mid)):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class IntegrabilityReport:
    integral: float
    abs_error: float
    exponent_margin: float
    finite: bool


def integrability(dcs: DCSSpec, N: int, eps0: float = 0.0) -> IntegrabilityReport:
    """``int_{B_r} mu`` by radial quadrature with ``rho = r e^{-s}``.

    ``exponent_margin`` is ``N + theta (1 - q_f - eps0)``; a positive margin
    is the local integrability condition for profiles built from psi.
    """
    r = dcs.cutoff

    def integrand(s):
        return math.exp(-N * s) * float(dcs.profile(np.array([r * math.exp(-s)]))[0])

    top = _finite_upper(integrand, _S_MAX / N)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(integrand, 0.0, top, limit=400, epsabs=0.0,
                                  epsrel=1e-10)
    total = sphere_area(N) * r ** N * val
    q_f = dcs.q_f if dcs.q_f is not None else 1.0
    margin = N + dcs.theta * (1.0 - q_f - eps0)
    finite = bool(np.isfinite(total) and err <= 1e-6 * max(abs(val), 1e-300) and margin > 0)
    return IntegrabilityReport(float(total), float(sphere_area(N) * r ** N * err), margin, finite)


# ----------------------------------------------------------------------------
# asymptotic pairs
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PairReport:
    composition: tuple        # (min, max) of phi(psi(u))/u on the grid
    against_G: Optional[tuple]
    iterated_logs: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def _bracket_ok(lo: float, hi: float, spread: float) -> bool:
    return bool(np.isfinite(lo) and np.isfinite(hi) and lo > 0 and hi / lo <= spread)


def check_asymptotic_pair(phi: Callable, psi: Callable, grid: Sequence[float],
                          G: Optional[Callable] = None, spread: float = 10.0) -> PairReport:
    """Brackets of ``phi(psi(u))/u`` and ``phi(u)/G(u)`` on a grid.

    A bracket passes when it is finite, positive and ``max/min <= spread``.
    """
    u = np.asarray(grid, dtype=float)
    with np.errstate(all="ignore"):
        comp = np.asarray(phi(psi(u)), dtype=float) / u
    c_lo, c_hi = float(np.min(comp)), float(np.max(comp))
    passed = {"composition": _bracket_ok(c_lo, c_hi, spread)}
    against = None
    if G is not None:
        with np.errstate(all="ignore"):
            r = np.asarray(phi(u), dtype=float) / np.asarray(G(u), dtype=float)
        against = (float(np.min(r)), float(np.max(r)))
        passed["against_G"] = _bracket_ok(*against, spread)
    return PairReport((c_lo, c_hi), against, {}, passed)


def check_expn_pair(n: int, p: float, log_grid: Sequence[float],
                    log_tol: float = 0.01, spread: float = 10.0) -> PairReport:
    """The generalised-exponential pair, evaluated entirely in log space.

    ``log_grid`` holds values of ``log u``.  Besides the composition bracket,
    ``log_i A(u) / log_i u`` for ``i <= n`` at the largest grid point must lie
    within ``log_tol`` of 1.
    """
    lu = np.asarray(log_grid, dtype=float)
    w = expn_psi_log(lu, n, p)
    with np.errstate(divide="ignore"):
        log_comp = expn_phi_log(np.log(w), n, p) - lu
    comp = np.exp(log_comp)
    c_lo, c_hi = float(np.min(comp)), float(np.max(comp))
    ratios = {i: iterated_log_ratio(float(lu[-1]), n, p, i) for i in range(1, n + 1)}
    passed = {"composition": _bracket_ok(c_lo, c_hi, spread)}
    for i, rt in ratios.items():
        passed[f"log_{i}"] = bool(abs(rt - 1.0) <= log_tol)
    return PairReport((c_lo, c_hi), None, ratios, passed)


# ----------------------------------------------------------------------------
# pointwise, necessary and sufficient conditions
# ----------------------------------------------------------------------------

def check_pointwise_condition(c: Calculus, mu: Callable, const: float, r: float, theta: float,
                              side: str = "gamma", samples: int = 200,
                              decades: float = 8.0) -> SolvabilityVerdict:
    """Compare ``G(mu(x)) |x|^theta`` with ``const`` on ``0 < |x| <= r``.

    ``side="gamma"`` tests the lower bound ``G(mu) >= gamma |x|^{-theta}``
    (nonexistence side); ``side="epsilon"`` tests the upper bound
    ``G(mu) <= epsilon |x|^{-theta}`` (existence side).
    """
    rho = r * np.geomspace(10.0 ** -decades, 1.0, samples)
    prof = mu.profile if hasattr(mu, "profile") else mu
    vals = np.asarray(prof(rho), dtype=float)
    ratio = np.asarray(c.G(vals), dtype=float) * rho ** theta
    if side == "gamma":
        i = int(np.argmin(ratio))
        ok = bool(ratio[i] >= const)
        kind = VerdictKind.NECESSARY_VIOLATED if ok else VerdictKind.NECESSARY_PASSED
        params = {"gamma": const}
    elif side == "epsilon":
        i = int(np.argmax(ratio))
        ok = bool(ratio[i] <= const)
        kind = VerdictKind.SUFFICIENT_HOLDS if ok else VerdictKind.SUFFICIENT_FAILS
        params = {"epsilon": const}
    else:
        raise SolvabilityError(f"unknown side {side!r}")
    witness = {"radius": float(rho[i]), "ratio": float(ratio[i]),
               "ratio_min": float(np.min(ratio)), "ratio_max": float(np.max(ratio))}
    return SolvabilityVerdict(kind, witness, params)


def violation_time_constant(c: Calculus, value: float, Cstar: float = 1.0) -> float:
    """Time after which constant data violate ``F(S(t)mu) >= C_* t``: ``F(c)/C_*``."""
    return float(c.F(value)) / Cstar


def check_necessary(k: Optional[KernelTable], c: Calculus, u0: Union[GridField, float],
                    Cstar: float = 1.0, Tstar: Optional[float] = None,
                    t_grid: Optional[Sequence[float]] = None,
                    bisections: int = 60) -> SolvabilityVerdict:
    """Scan ``F([S(t)mu](x)) >= C_* t`` over a time grid.

    Constant data use the analytic path ``t_viol = F(c)/C_*``.  Otherwise the
    semigroup is applied on the grid; the first violating time is refined by
    bisection and reported with the location of the supremum.
    """
    params = {"Cstar": Cstar, "Tstar": Tstar}
    if isinstance(u0, (int, float)) or (isinstance(u0, GridField)
                                        and not np.any(u0.values != u0.background)):
        value = float(u0) if isinstance(u0, (int, float)) else float(u0.background)
        tv = violation_time_constant(c, value, Cstar)
        horizon = Tstar if Tstar is not None else (max(t_grid) if t_grid is not None else math.inf)
        violated = tv < horizon
        kind = VerdictKind.NECESSARY_VIOLATED if violated else VerdictKind.NECESSARY_PASSED
        return SolvabilityVerdict(kind, {"t": tv if violated else None, "x": None,
                                         "violation_time": tv, "path": "analytic"}, params)
    if t_grid is None:
        raise SolvabilityError("non-constant data need a time grid")
    if k is None:
        raise SolvabilityError("non-constant data need a kernel")
    ts = np.asarray(sorted(t_grid), dtype=float)
    if Tstar is not None:
        ts = ts[ts < Tstar]
    op = SemigroupOperator(k, u0.N, u0.L, u0.M)

    def gap(t):
        vals = op.apply_values(u0.values, u0.background, t)
        i = int(np.argmax(vals))
        return float(c.F(max(float(vals.flat[i]), 1e-300))) - Cstar * t, i, float(vals.flat[i])

    prev = None
    for t in ts:
        g, i, top = gap(float(t))
        if g < 0:
            lo, hi = (prev if prev is not None else 0.0), float(t)
            if prev is not None:
                for _ in range(bisections):
                    mid = 0.5 * (lo + hi)
                    if gap(mid)[0] < 0:
                        hi = mid
                    else:
                        lo = mid
                    if hi - lo <= 1e-14 * hi:
                        break
            idx = np.unravel_index(i, u0.values.shape)
            x = [float(u0.axis[j]) for j in idx]
            return SolvabilityVerdict(VerdictKind.NECESSARY_VIOLATED,
                                      {"t": float(t), "x": x, "sup": top, "violation_time": hi,
                                       "path": "grid"}, params)
        prev = float(t)
    return SolvabilityVerdict(VerdictKind.NECESSARY_PASSED,
                              {"t": None, "x": None, "violation_time": None, "path": "grid"},
                              params)


def beta_window(q_f: float, N: int, theta: float) -> tuple:
    """Open interval ``(q_f - 1, min(q_f, N/theta))``; raises if empty."""
    lo, hi = q_f - 1.0, min(q_f, N / theta)
    if lo >= hi:
        raise BetaWindowEmpty(f"q_f - 1 = {lo:g} >= min(q_f, N/theta) = {hi:g}")
    return lo, hi


def check_growth_window(c: Calculus, beta: float, delta: float,
                        u_range: tuple = (10.0, 1e6), points: int = 200) -> dict:
    """Sample ``beta <= f'(u) F(u) <= 1 + beta - delta``; report the onset ``tau*``."""
    u = np.geomspace(u_range[0], u_range[1], points)
    prod = np.array([c.growth_product(float(x)) for x in u])
    ok = (prod >= beta) & (prod <= 1.0 + beta - delta)
    bad = np.nonzero(~ok)[0]
    if bad.size == 0:
        tau = float(u[0])
    elif bad[-1] == u.size - 1:
        tau = None
    else:
        tau = float(u[bad[-1] + 1])
    return {"holds": tau is not None, "tau_star": tau,
            "min": float(prod.min()), "max": float(prod.max())}


def centered_average(profile: Callable, sigma: float, N: int, g: Callable) -> float:
    """Mean of ``g(profile(|y|))`` over the ball of radius sigma at the origin."""
    def integrand(s):
        return math.exp(-N * s) * float(g(profile(np.array([sigma * math.exp(-s)])))[0])

    top = _finite_upper(integrand, _S_MAX / N)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(integrand, 0.0, top, limit=400, epsabs=0.0, epsrel=1e-12)
    return N * val


def sliding_ball_averages(field_: GridField, values: np.ndarray, sigma: float) -> np.ndarray:
    """Mean of ``values`` over ``B(x, sigma)`` at every cell centre."""
    g = field_.with_values(values, 0.0)
    ones = field_.with_values(np.ones_like(values), 0.0)
    num = ball_integrals(g, sigma)
    den = ball_integrals(ones, sigma)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, 0.0)


def check_sufficient(c: Calculus, mu, N: int, theta: float, beta: float, delta: float,
                     eps: float, T: float, sigma_grid: Optional[Sequence[float]] = None,
                     u_range: tuple = (10.0, 1e6)) -> SolvabilityVerdict:
    """Ball-average sufficient condition with the growth sandwich.

    ``mu`` may be a constant, a radial profile (DCSSpec, RadialData or a
    callable of the radius) or a GridField.  Radial profiles use the exact
    centred average, where the supremum sits for nonincreasing data; grid
    fields use sliding ball averages.

    Raises
    ------
    BetaWindowEmpty
        If the exponent window is empty for ``(N, theta)``.
    """
    lo, hi = beta_window(float(c.q_f), N, theta)
    params = {"beta": beta, "delta": delta, "eps": eps, "T": T, "window": (lo, hi)}
    if not lo < beta < hi:
        raise SolvabilityError(f"beta={beta} is outside the window ({lo:g}, {hi:g})")
    if not c.q_f < 1.0 + beta - delta:
        raise SolvabilityError(f"need q_f < 1 + beta - delta, got {c.q_f} >= {1 + beta - delta}")
    growth = check_growth_window(c, beta, delta, u_range)
    params["growth"] = growth
    if not growth["holds"]:
        return SolvabilityVerdict(VerdictKind.SUFFICIENT_FAILS,
                                  {"reason": "growth sandwich fails on the sampled tail"}, params)
    top = T ** (1.0 / theta)
    sig = np.asarray(sigma_grid if sigma_grid is not None
                     else np.geomspace(top * 1e-3, top, 31), dtype=float)
    if np.any(sig <= 0) or np.any(sig > top * (1 + 1e-12)):
        raise SolvabilityError("sigma grid must lie in (0, T^{1/theta}]")

    def gb(v):
        return np.power(np.asarray(c.G(np.asarray(v, dtype=float)), dtype=float), beta)

    sups = np.zeros(sig.size)
    if isinstance(mu, (int, float)):
        sups[:] = float(gb(np.array([float(mu)]))[0])
    elif isinstance(mu, GridField):
        vals = gb(mu.values)
        for j, s in enumerate(sig):
            sups[j] = float(np.max(sliding_ball_averages(mu, vals, s)))
    else:
        prof = mu.profile if hasattr(mu, "profile") else mu
        for j, s in enumerate(sig):
            sups[j] = centered_average(prof, float(s), N, gb)
    ratio = sups * sig ** (beta * theta)
    j = int(np.argmax(ratio))
    witness = {"sigma": float(sig[j]), "average": float(sups[j]),
               "eps_needed": float(ratio[j]), "averages": [float(v) for v in sups],
               "sigmas": [float(s) for s in sig]}
    kind = VerdictKind.SUFFICIENT_HOLDS if ratio[j] <= eps else VerdictKind.SUFFICIENT_FAILS
    return SolvabilityVerdict(kind, witness, params)


def jensen_check(k: KernelTable, c: Calculus, u0: GridField, beta: float, t: float,
                 tau_star: float = 0.0) -> float:
    """Largest scaled excess of ``Phi(S(t)mu)`` over ``S(t)Phi(mu)`` for ``Phi = G^beta``.

    Data are raised to ``max(mu, tau_star)`` where ``Phi`` is convex.
    """
    lifted = u0.with_values(np.maximum(u0.values, tau_star), max(u0.background, tau_star))

    def phi(v):
        return np.power(np.asarray(c.G(np.asarray(v, dtype=float)), dtype=float), beta)

    return jensen_gap(k, lifted, phi, t)


@dataclass(frozen=True)
class SupersolutionReport:
    kappa: float
    excess: float          # max of (Duhamel(v) - v) / (1 + v) over cells and steps
    worst_time: float
    holds: bool


def check_supersolution(k: KernelTable, c: Calculus, u0: GridField, beta: float, T: float,
                        steps: int = 10, kappa: float = 2.0,
                        tol: float = 1e-8) -> SupersolutionReport:
    """Test ``v = Phi^{-1}(kappa S(t) Phi(mu))``, ``Phi = G^beta``, as a supersolution.

    ``v`` is a supersolution when ``v >= S(t) mu + int_0^t S(t-s) f(v(s)) ds``;
    the integral uses the trapezoid rule on ``steps`` equal steps.
    """
    if not kappa > 1:
        raise SolvabilityError("kappa must exceed 1")
    op = SemigroupOperator(k, u0.N, u0.L, u0.M)
    f = c.nl.f

    def phi(v):
        return np.power(np.asarray(c.G(np.asarray(v, dtype=float)), dtype=float), beta)

    def phi_inv(y):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.asarray(c.psi(np.power(y, 1.0 / beta)), dtype=float)

    pm = phi(u0.values)
    pm_bg = float(phi(np.array([u0.background]))[0])
    dt = T / steps
    times = dt * np.arange(steps + 1)
    v = [phi_inv(kappa * pm)]
    for t in times[1:]:
        v.append(phi_inv(kappa * op.apply_values(pm, pm_bg, float(t))))
    fv = [np.asarray(f(x), dtype=float) for x in v]
    f_bg = float(np.asarray(f(phi_inv(np.array([kappa * pm_bg]))), dtype=float)[0])
    excess, worst = -math.inf, 0.0
    for n in range(1, steps + 1):
        duh = op.apply_values(u0.values, u0.background, float(times[n]))
        for j in range(n + 1):
            w = dt * (0.5 if j in (0, n) else 1.0)
            lag = float(times[n] - times[j])
            duh = duh + w * (op.apply_values(fv[j], f_bg, lag) if lag > 0 else fv[j])
        gap = float(np.max((duh - v[n]) / (1.0 + v[n])))
        if gap > excess:
            excess, worst = gap, float(times[n])
    return SupersolutionReport(float(kappa), excess, worst, bool(excess <= tol))


# ----------------------------------------------------------------------------
# lambda sweep
# ----------------------------------------------------------------------------

@dataclass
class SweepRow:
    lam: float
    verdict: str
    T_reached: float
    sup_final: float
    residual_final: float
    refinement_stable: Optional[bool]
    stage: str = "sweep"

    def as_csv_row(self) -> list:
        return [repr(self.lam), self.verdict, repr(self.T_reached), repr(self.sup_final),
                repr(self.residual_final), "" if self.refinement_stable is None
                else str(self.refinement_stable).lower()]


SWEEP_COLUMNS = ["lambda", "verdict", "T_reached", "sup_final", "residual_final",
                 "refinement_stable"]


@dataclass
class LambdaBracket:
    lo: Optional[float]
    hi: Optional[float]
    rows: list
    widths: list

    @property
    def nonempty(self) -> bool:
        return self.lo is not None and self.hi is not None and self.lo < self.hi

    def to_dict(self) -> dict:
        return {"lambda_lo": self.lo, "lambda_hi": self.hi, "widths": self.widths,
                "estimate": math.sqrt(self.lo * self.hi) if self.nonempty else None}


def _row(lam: float, rep: MildSolveReport, stage: str) -> SweepRow:
    return SweepRow(float(lam), rep.verdict.value, float(rep.T_reached),
                    float(rep.sup_history[-1]),
                    float(rep.residual_history[-1]) if len(rep.residual_history) else 0.0,
                    rep.refinement_stable, stage)


def bracket_lambda0(solve_for: Callable[[float], MildSolveReport], lambdas: Sequence[float],
                    bisections: int = 4, executor: Optional[Executor] = None) -> LambdaBracket:
    """Bracket the critical dilation with a geometric sweep and bisection.

    ``solve_for(lam)`` runs the solver on the data of dilation ``lam``.
    The bracket is (largest Converged, smallest BlowUpEvidence); it is then
    bisected geometrically.  Inconclusive midpoints stop the bisection.

    Raises
    ------
    NonMonotoneSweep
        If a Converged verdict occurs above a BlowUpEvidence verdict.
    """
    lams = sorted(float(x) for x in lambdas)
    if executor is not None:
        reports = list(executor.map(solve_for, lams))
    else:
        reports = [solve_for(x) for x in lams]
    rows = [_row(x, r, "sweep") for x, r in zip(lams, reports)]
    conv = [x for x, r in zip(lams, reports) if r.verdict is Verdict.CONVERGED]
    blow = [x for x, r in zip(lams, reports) if r.verdict is Verdict.BLOWUP]
    if conv and blow and max(conv) > min(blow):
        raise NonMonotoneSweep(
            f"Converged at lambda={max(conv):g} above BlowUpEvidence at {min(blow):g}")
    lo = max(conv) if conv else None
    hi = min(blow) if blow else None
    widths = []
    if lo is not None and hi is not None:
        widths.append(hi / lo)
        for _ in range(bisections):
            mid = math.sqrt(lo * hi)
            rep = solve_for(mid)
            rows.append(_row(mid, rep, "bisection"))
            if rep.verdict is Verdict.CONVERGED:
                lo = mid
            elif rep.verdict is Verdict.BLOWUP:
                hi = mid
            else:
                break
            widths.append(hi / lo)
    return LambdaBracket(lo, hi, rows, widths)
