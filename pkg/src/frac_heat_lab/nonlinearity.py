"""Nonlinearities f(u) and the tail calculus built from them.

For a nondecreasing, positive f with integrable reciprocal at infinity we
work with

* ``F(u) = int_u^inf ds / f(s)`` and ``F0 = lim_{u->0} F(u)``,
* ``G = 1/F`` (with ``G(0) = 1/F0``, zero when ``F0`` is infinite),
* ``psi_f``, the inverse of ``G`` extended by zero below ``G(0)``,
* ``q_f = lim f'(u) F(u)`` and its Hölder conjugate ``p_f``.

Built-in families carry closed forms where they exist and log-space
evaluators so that fast-growing nonlinearities such as ``exp(exp(u))``
can be handled far beyond the range where ``f`` itself overflows.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

from .expr import parse_expression

ArrayFn = Callable[[np.ndarray], np.ndarray]


class NonlinearityError(ValueError):
    """Base class for failures of the nonlinearity calculus."""


class TailDivergent(NonlinearityError):
    """The tail integral of 1/f does not converge."""


class NonMonotone(NonlinearityError):
    """A sampled monotonicity, positivity or convexity check failed."""


class DomainError(NonlinearityError):
    """Argument outside the domain of an evaluator."""


class BracketFailure(NonlinearityError):
    """The inverse of G could not be bracketed below the configured cap."""


class NoLimit(NonlinearityError):
    """The sequence f'(u)F(u) does not look convergent."""


class InversionFailure(NonlinearityError):
    """F could not be inverted at the requested level."""


# ----------------------------------------------------------------------------
# iterated exponentials and logarithms
# ----------------------------------------------------------------------------

def exp_n(x, n: int):
    """n-fold composition of exp (``exp_0`` is the identity)."""
    y = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        for _ in range(n):
            y = np.exp(y)
    return y if y.ndim else float(y)


def log_n(x, n: int):
    """n-fold composition of log (``log_0`` is the identity)."""
    y = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(n):
            y = np.log(y)
    return y if y.ndim else float(y)


def e_n(n: int) -> float:
    """``exp_n(0)``: 0, 1, e, e^e, ..."""
    return float(exp_n(0.0, n))


# ----------------------------------------------------------------------------
# nonlinearity
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ClosedForms:
    """Optional closed forms; any field may be None."""

    log_F: Optional[ArrayFn] = None
    F0: Optional[float] = None
    psi: Optional[ArrayFn] = None
    F_inv: Optional[ArrayFn] = None
    q_f: Optional[float] = None


@dataclass(frozen=True)
class Nonlinearity:
    """A nonlinearity together with its evaluators and thresholds.

    ``log_f``, ``log_slope`` (``log(f'/f)``) and ``dlog_f`` (the increment
    ``log f(u+d) - log f(u)``) are supplied by built-in families and let
    the calculus work in log space.  Custom nonlinearities leave them unset.
    """

    family: str
    spec: tuple
    f: ArrayFn
    f_prime: ArrayFn
    tau0: float = 0.0
    tau1: float = 0.0
    log_f: Optional[ArrayFn] = field(default=None, repr=False)
    log_slope: Optional[ArrayFn] = field(default=None, repr=False)
    dlog_f: Optional[Callable] = field(default=None, repr=False)
    closed: Optional[ClosedForms] = field(default=None, repr=False)

    def to_spec(self) -> dict:
        """JSON-compatible description (round-trips through :func:`from_spec`)."""
        return dict(self.spec)

    @property
    def name(self) -> str:
        parts = [f"{k}={v}" for k, v in self.spec if k != "family"]
        return f"{self.family}({', '.join(parts)})"


def _arr(u):
    return np.asarray(u, dtype=float)


def _out(x):
    x = np.asarray(x, dtype=float)
    return x if x.ndim else float(x)


def power(p: float) -> Nonlinearity:
    """``f(u) = u^p`` with ``p > 1``."""
    p = float(p)
    if not p > 1.0:
        raise TailDivergent(f"u^p needs p > 1 for an integrable tail, got p={p}")

    def f(u):
        return _out(np.power(_arr(u), p))

    def fp(u):
        return _out(p * np.power(_arr(u), p - 1.0))

    def log_f(u):
        with np.errstate(divide="ignore"):
            return _out(p * np.log(_arr(u)))

    def log_slope(u):
        with np.errstate(divide="ignore"):
            return _out(math.log(p) - np.log(_arr(u)))

    def dlog(u, d):
        if type(u) is float and type(d) is float and u > 0:
            return p * math.log1p(d / u)
        u, d = _arr(u), _arr(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(u > 0, p * np.log1p(d / np.where(u > 0, u, 1.0)),
                           p * np.log(d) - p * np.log(np.maximum(u, 1e-300)))
        return _out(out)

    c_p = (p - 1.0) ** (-1.0 / (p - 1.0))

    def log_F(u):
        with np.errstate(divide="ignore"):
            return _out((1.0 - p) * np.log(_arr(u)) - math.log(p - 1.0))

    def psi(v):
        v = _arr(v)
        return _out(c_p * np.power(np.maximum(v, 0.0), 1.0 / (p - 1.0)))

    def F_inv(s):
        return _out(np.power((p - 1.0) * _arr(s), -1.0 / (p - 1.0)))

    closed = ClosedForms(log_F=log_F, F0=math.inf, psi=psi, F_inv=F_inv,
                         q_f=p / (p - 1.0))
    return Nonlinearity("power", (("family", "power"), ("p", p)), f, fp,
                        0.0, 0.0, log_f, log_slope, dlog, closed)


def power_sum(p: float, q: float) -> Nonlinearity:
    """``f(u) = u^p + u^q`` with ``p > q >= 1``."""
    p, q = float(p), float(q)
    if not (p > q >= 1.0):
        raise DomainError(f"power sum needs p > q >= 1, got p={p}, q={q}")

    def f(u):
        u = _arr(u)
        return _out(np.power(u, p) + np.power(u, q))

    def fp(u):
        u = _arr(u)
        return _out(p * np.power(u, p - 1.0) + q * np.power(u, q - 1.0))

    def log_f(u):
        u = _arr(u)
        with np.errstate(divide="ignore", over="ignore"):
            big = p * np.log(u) + np.log1p(np.power(u, q - p))
            small = q * np.log(u) + np.log1p(np.power(u, p - q))
        return _out(np.where(u >= 1.0, big, small))

    def log_slope(u):
        u = _arr(u)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            r = np.power(u, q - p)
            return _out(np.log((p + q * r) / (1.0 + r)) - np.log(u))

    def dlog(u, d):
        return _out(log_f(_arr(u) + _arr(d)) - log_f(u))

    closed = ClosedForms(F0=math.inf, q_f=p / (p - 1.0))
    return Nonlinearity("powersum", (("family", "powersum"), ("p", p), ("q", q)),
                        f, fp, 0.0, 0.0, log_f, log_slope, dlog, closed)


def power_log(p: float, q: float, L: float = 10.0) -> Nonlinearity:
    """``f(u) = u^p (log u)^q`` for ``u >= L``, continued by ``f(L)(u/L)^p`` below.

    The continuation keeps f positive, nondecreasing and vanishing at 0.
    """
    p, q, L = float(p), float(q), float(L)
    if not p > 1.0:
        raise TailDivergent(f"power-log needs p > 1, got p={p}")
    if not L > 1.0:
        raise DomainError(f"power-log needs L > 1, got L={L}")
    if not p * math.log(L) + q > 0.0:
        raise NonMonotone(f"u^p (log u)^q is not increasing beyond L={L}")
    log_fL = p * math.log(L) + q * math.log(math.log(L))

    def log_f(u):
        u = _arr(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            uu = np.maximum(u, L)
            tail = p * np.log(uu) + q * np.log(np.log(uu))
            head = log_fL + p * (np.log(u) - math.log(L))
        return _out(np.where(u >= L, tail, head))

    def f(u):
        with np.errstate(over="ignore"):
            return _out(np.exp(log_f(u)))

    def fp(u):
        u = _arr(u)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            uu = np.maximum(u, L)
            lg = np.log(uu)
            tail = np.power(uu, p - 1.0) * np.power(lg, q - 1.0) * (p * lg + q)
            head = p * np.exp(log_fL) * np.power(u, p - 1.0) / L ** p
        return _out(np.where(u >= L, tail, head))

    def log_slope(u):
        u = _arr(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.log(np.maximum(u, L))
            tail = np.log(p + q / lg) - np.log(u)
            head = math.log(p) - np.log(u)
        return _out(np.where(u >= L, tail, head))

    def dlog(u, d):
        u, d = _arr(u), _arr(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            uu = np.maximum(u, L)
            r = np.log1p(d / uu)
            stable = p * r + q * np.log1p(r / np.log(uu))
            naive = log_f(u + d) - log_f(u)
        return _out(np.where(u >= L, stable, naive))

    closed = ClosedForms(F0=math.inf, q_f=p / (p - 1.0))
    spec = (("family", "powerlog"), ("p", p), ("q", q), ("L", L))
    return Nonlinearity("powerlog", spec, f, fp, 0.0, L, log_f, log_slope, dlog, closed)


def expn(n: int = 1, p: float = 1.0) -> Nonlinearity:
    """``f(u) = exp_n(u^p)`` with ``n >= 1`` and ``p > 0``."""
    if int(n) != n or n < 1:
        raise DomainError(f"expn needs an integer n >= 1, got {n}")
    n, p = int(n), float(p)
    if not p > 0.0:
        raise DomainError(f"expn needs p > 0, got {p}")

    def inner(u):
        with np.errstate(over="ignore"):
            return np.power(_arr(u), p)

    def log_f(u):
        return _out(exp_n(inner(u), n - 1))

    def f(u):
        return _out(exp_n(inner(u), n))

    def log_slope(u):
        u = _arr(u)
        acc = math.log(p) + ((p - 1.0) * _safe_log(u) if p != 1.0 else 0.0)
        g = inner(u)
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(n - 1):
                acc = acc + g
                g = np.exp(g)
        return _out(acc)

    def fp(u):
        with np.errstate(over="ignore", invalid="ignore"):
            return _out(np.exp(np.asarray(log_slope(u)) + np.asarray(log_f(u))))

    def dlog(u, d):
        if type(u) is float and type(d) is float:
            return _dlog_expn_scalar(u, d, n, p)
        u, d = _arr(u), _arr(d)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            safe_u = np.where(u > 0, u, 1.0)
            delta = np.where(u > 0,
                             np.power(safe_u, p) * np.expm1(p * np.log1p(d / safe_u)),
                             np.power(d, p))
            g = inner(u)
            for _ in range(n - 1):
                delta = np.exp(g) * np.expm1(delta)
                g = np.exp(g)
        return _out(delta)

    tau1 = ((1.0 - p) / p) ** (1.0 / p) if p < 1.0 else 0.0
    if n == 1 and p == 1.0:
        def log_F(u):
            return _out(-_arr(u))

        def psi(v):
            v = _arr(v)
            with np.errstate(divide="ignore", invalid="ignore"):
                return _out(np.where(v > 1.0, np.log(np.maximum(v, 1.0)), 0.0))

        def F_inv(s):
            return _out(-np.log(_arr(s)))

        closed = ClosedForms(log_F=log_F, F0=1.0, psi=psi, F_inv=F_inv, q_f=1.0)
    else:
        closed = ClosedForms(q_f=1.0)
    spec = (("family", "expn"), ("n", n), ("p", p))
    return Nonlinearity("expn", spec, f, fp, 0.0, tau1, log_f, log_slope, dlog, closed)


def _dlog_expn_scalar(u: float, d: float, n: int, p: float) -> float:
    try:
        delta = u ** p * math.expm1(p * math.log1p(d / u)) if u > 0 else d ** p
        g = u ** p
        for _ in range(n - 1):
            delta = math.exp(g) * math.expm1(delta)
            g = math.exp(g)
    except OverflowError:
        return math.inf
    return delta


def exponential() -> Nonlinearity:
    """``f(u) = exp(u)``."""
    return expn(1, 1.0)


def custom(f, f_prime, tau0: float = 0.0, tau1: float = 0.0,
           label: Optional[str] = None) -> Nonlinearity:
    """Black-box nonlinearity from expressions in ``u`` or from callables."""
    spec = [("family", "custom")]
    if isinstance(f, str):
        spec.append(("f", f))
        f = parse_expression(f)
    elif label is not None:
        spec.append(("label", label))
    if isinstance(f_prime, str):
        spec.append(("fprime", f_prime))
        f_prime = parse_expression(f_prime)
    spec += [("tau0", float(tau0)), ("tau1", float(tau1))]
    return Nonlinearity("custom", tuple(spec), f, f_prime, float(tau0), float(tau1))


def from_spec(spec: dict) -> Nonlinearity:
    """Build a nonlinearity from its JSON description."""
    fam = spec.get("family")
    if fam == "power":
        return power(spec["p"])
    if fam == "powersum":
        return power_sum(spec["p"], spec["q"])
    if fam == "powerlog":
        return power_log(spec["p"], spec["q"], spec.get("L", 10.0))
    if fam in ("expn", "exp"):
        return expn(spec.get("n", 1), spec.get("p", 1.0))
    if fam == "custom":
        return custom(spec["f"], spec["fprime"], spec.get("tau0", 0.0),
                      spec.get("tau1", 0.0))
    raise DomainError(f"unknown nonlinearity family {fam!r}")


def _safe_log(u):
    with np.errstate(divide="ignore"):
        return np.log(u)


# ----------------------------------------------------------------------------
# hypothesis checks
# ----------------------------------------------------------------------------

def _quad(fn, a, b, rel):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(fn, a, b, epsabs=0.0, epsrel=rel, limit=200)
    return val


def _piece(f: ArrayFn, a: float, b: float, rel: float) -> float:
    """int_a^b ds/f(s) on a log scale (a > 0)."""
    def g(t):
        s = math.exp(t)
        fs = float(f(s))
        return s / fs if fs > 0 and math.isfinite(fs) else (0.0 if fs > 0 else math.inf)
    return _quad(g, math.log(a), math.log(b), rel)


def _tail_from(f: ArrayFn, u: float, rel: float = 1e-12,
               u_max: float = 1e300) -> float:
    """``int_u^inf ds/f`` with geometric extrapolation of the remainder.

    Integrates to U, 2U, 4U, ... and extrapolates the remainder from the
    ratio of successive dyadic pieces.  Stops when the remainder is below
    tolerance or two successive extrapolations agree.
    """
    U = max(16.0 * u, 16.0)
    core = _piece(f, u, U, rel)
    previous = None
    while True:
        d1 = _piece(f, U, 2 * U, rel)
        d2 = _piece(f, 2 * U, 4 * U, rel)
        if not (math.isfinite(d1) and math.isfinite(d2)):
            raise TailDivergent("1/f is not integrable on the sampled tail")
        if d2 == 0.0:
            return core + d1
        ratio = d2 / d1
        if ratio >= 1.0 - 1e-9:
            raise TailDivergent(f"dyadic tail pieces do not decay (ratio {ratio:.6g})")
        rem = d2 * ratio / (1.0 - ratio)
        total = core + d1 + d2 + rem
        if rem <= rel * total or (previous is not None
                                  and abs(total - previous) <= rel * total):
            return total
        previous = total
        core += d1 + d2
        U *= 4.0
        if U > u_max:
            raise TailDivergent("tail extrapolation did not settle below u_max")


def check_hypotheses(nl: Nonlinearity, grid: Optional[np.ndarray] = None) -> None:
    """Sampled falsification of monotonicity, tail integrability and convexity.

    Raises
    ------
    NonMonotone
        If f decreases, vanishes at a positive sample, or f' is negative or
        decreasing beyond ``max(tau0, tau1)``.
    TailDivergent
        If the dyadic pieces of the tail integral do not decay.
    """
    u = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 241)]) if grid is None \
        else np.asarray(grid, dtype=float)
    fv = np.asarray(nl.f(u), dtype=float)
    ok = np.isfinite(fv)
    if np.any(fv[ok][u[ok] > 0] <= 0.0):
        raise NonMonotone("f must be positive for u > 0")
    fo = fv[ok]
    if np.any(np.diff(fo) < -1e-12 * np.abs(fo[1:])):
        raise NonMonotone("f decreases on the sampled grid")
    start = max(nl.tau0, nl.tau1)
    uc = u[(u > start) & (u > 0)]
    with np.errstate(over="ignore", invalid="ignore"):
        dv = np.asarray(nl.f_prime(uc), dtype=float)
    dv = dv[np.isfinite(dv)]
    if np.any(dv < 0):
        raise NonMonotone("f' is negative beyond tau1")
    if np.any(np.diff(dv) < -1e-9 * np.abs(dv[1:])):
        raise NonMonotone("f' decreases beyond tau1 (f not convex there)")
    if nl.log_f is None:
        _tail_from(nl.f, max(start, 1.0), rel=1e-8)
    else:
        lf = np.asarray(nl.log_f(np.array([1e3, 1e6])), dtype=float)
        if np.all(np.isfinite(lf)) and not (lf[1] - lf[0]) > math.log(1e3):
            raise TailDivergent("f grows at most linearly on the sampled tail")


# ----------------------------------------------------------------------------
# calculus
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureConfig:
    """Tolerances and caps for the numerical calculus."""

    rel_tol: float = 1e-12
    u_max: float = 1e300
    use_closed_forms: bool = True
    check: bool = True


class Criticality(str, enum.Enum):
    SUBCRITICAL = "Subcritical"
    CRITICAL = "Critical"
    SUPERCRITICAL = "Supercritical"


def _log_F_logspace(nl: Nonlinearity, u: float, rel: float) -> tuple[float, float]:
    """Return ``(log F(u), f'(u)F(u))`` via the scaled tail integral.

    With ``l = log f`` and ``w = 1/l'(u)``,
    ``F(u) = exp(-l(u)) w J`` and ``f'(u)F(u) = J`` where
    ``J = int_0^inf exp(-(l(u + w x) - l(u))) dx``.
    """
    lf = float(nl.log_f(u))
    ls = float(nl.log_slope(u))
    if math.isfinite(ls):
        w = math.exp(-ls)
        slope_w = 1.0
    else:
        w = max(u, 1.0) if u > 0 else 1.0
        slope_w = math.nan

    def g(x):
        d = float(nl.dlog_f(u, w * x))
        return math.exp(-d) if d < 745.0 else 0.0

    def g_log(s):
        if s > 700.0:
            return 0.0
        x = math.exp(s)
        return g(x) * x

    J = _quad(g_log, -math.inf, math.inf, rel)
    if not (J > 0.0 and math.isfinite(J)):
        raise TailDivergent(f"tail integral not finite at u={u}")
    return -lf + math.log(w) + math.log(J), J * slope_w


@dataclass(frozen=True)
class Calculus:
    """F, G, psi_f and growth exponents of a nonlinearity."""

    nl: Nonlinearity
    cfg: QuadratureConfig
    F0: float
    G0: float
    q_f: float
    p_f: float
    q_source: str
    F0_estimated: bool

    # -- scalar cores ------------------------------------------------------
    def _closed(self, name):
        if not self.cfg.use_closed_forms or self.nl.closed is None:
            return None
        return getattr(self.nl.closed, name)

    def _log_F_scalar(self, u: float) -> float:
        if self.nl.log_f is not None:
            return _log_F_logspace(self.nl, u, self.cfg.rel_tol)[0]
        val = _tail_from(self.nl.f, u, self.cfg.rel_tol, self.cfg.u_max)
        return math.log(val) if val > 0 else -math.inf

    def growth_product(self, u) -> np.ndarray:
        """Numerical ``f'(u) F(u)`` (never uses the closed-form q_f)."""
        def one(x):
            if self.nl.log_f is not None:
                return _log_F_logspace(self.nl, x, self.cfg.rel_tol)[1]
            with np.errstate(over="ignore", divide="ignore"):
                lfp = math.log(float(self.nl.f_prime(x)))
            return math.exp(lfp + self._log_F_scalar(x))
        with np.errstate(over="ignore"):
            return _out(np.vectorize(one, otypes=[float])(_arr(u)))

    # -- public evaluators ---------------------------------------------------
    def log_F(self, u):
        u = _arr(u)
        if np.any(u <= 0):
            raise DomainError("F is defined for u > 0 only")
        cf = self._closed("log_F")
        if cf is not None:
            return _out(cf(u))
        with np.errstate(over="ignore"):
            return _out(np.vectorize(self._log_F_scalar, otypes=[float])(u))

    def F(self, u):
        with np.errstate(over="ignore", under="ignore"):
            return _out(np.exp(self.log_F(u)))

    def G(self, u):
        u = _arr(u)
        if np.any(u < 0):
            raise DomainError("G is defined for u >= 0 only")
        pos = u > 0
        out = np.full(u.shape, self.G0)
        if np.any(pos):
            with np.errstate(over="ignore"):
                out[pos] = np.exp(-np.asarray(self.log_F(u[pos])))
        return _out(out)

    def _invert(self, target: float) -> float:
        """Solve ``log F(u) = target`` for u, working in ``s = log u``.

        Safeguarded Newton first (``d log F / d log u = -u/(f F)``), then an
        expanding bracket with Brent's method as the fallback.
        """
        def h(s):
            try:
                return self._log_F_scalar(math.exp(s)) - target
            except TailDivergent:
                return -math.inf  # F underflows: u is far past the root
        cf = self._closed("log_F")
        if cf is not None:
            def h(s):  # noqa: F811
                return float(cf(math.exp(s))) - target
        root = self._newton(h, target)
        if root is not None:
            return math.exp(root)
        s_lo, s_hi = -1.0, 1.0
        lo_max = math.log(1e-300)
        hi_max = math.log(self.cfg.u_max)
        step = 1.0
        for _ in range(200):
            if h(s_lo) > 0:
                break
            s_lo = max(s_lo - step, lo_max)
            step *= 2
            if s_lo == lo_max and h(s_lo) <= 0:
                raise BracketFailure("could not bracket the inverse from below")
        step = 1.0
        for _ in range(200):
            if h(s_hi) < 0:
                break
            s_hi = min(s_hi + step, hi_max)
            step *= 2
            if s_hi == hi_max and h(s_hi) >= 0:
                raise BracketFailure(f"inverse exceeds u_max={self.cfg.u_max:g}")
        root = optimize.brentq(lambda x: max(h(x), -1e300), s_lo, s_hi, xtol=1e-15, rtol=1e-15, maxiter=200)
        return math.exp(root)

    def _newton(self, h, target: float) -> Optional[float]:
        lo, hi = -math.inf, math.inf
        s = 0.0
        lim = math.log(self.cfg.u_max)
        prev = s
        for _ in range(80):
            val = h(s)
            if val == -math.inf:
                hi = min(hi, s)
                s = 0.5 * (s + (lo if math.isfinite(lo) else prev))
                continue
            if not math.isfinite(val):
                return None
            prev = s
            if val > 0:
                lo = max(lo, s)
            else:
                hi = min(hi, s)
            if abs(val) <= 1e-14 * max(1.0, abs(target)):
                return s
            u = math.exp(s)
            lf = float(self.nl.log_f(u)) if self.nl.log_f is not None \
                else math.log(float(self.nl.f(u)))
            dh = -math.exp(s - lf - (val + target))
            if not (math.isfinite(dh) and dh < 0):
                return None
            nxt = s - val / dh
            nxt = min(max(nxt, s - 20.0), s + 20.0)
            if math.isfinite(lo) and math.isfinite(hi) and not lo < nxt < hi:
                nxt = 0.5 * (lo + hi)
            if abs(nxt) > lim:
                return None
            if abs(nxt - s) <= 1e-15 * max(1.0, abs(s)):
                return nxt
            s = nxt
        return None

    def psi(self, v):
        """Zero-extended inverse of G."""
        v = _arr(v)
        if np.any(v < 0):
            raise DomainError("psi_f is defined for v >= 0 only")
        cf = self._closed("psi")
        if cf is not None:
            return _out(np.where(v > self.G0, cf(v), 0.0))

        def one(x):
            return 0.0 if x <= self.G0 else self._invert(-math.log(x))
        with np.errstate(over="ignore"):  # Newton probes past the root
            return _out(np.vectorize(one, otypes=[float])(v))

    def F_inv(self, sigma):
        """Inverse of F on ``(0, F0)``."""
        s = _arr(sigma)
        if np.any(s <= 0) or np.any(s >= self.F0):
            raise InversionFailure("F^{-1} needs 0 < sigma < F0")
        cf = self._closed("F_inv")
        if cf is not None:
            return _out(cf(s))

        def one(x):
            try:
                return self._invert(math.log(x))
            except BracketFailure as exc:
                raise InversionFailure(str(exc)) from None
        with np.errstate(over="ignore"):
            return _out(np.vectorize(one, otypes=[float])(s))


def _estimate_F0(nl: Nonlinearity, cfg: QuadratureConfig, log_F) -> float:
    f0 = float(nl.f(0.0))
    if f0 > 0:
        if nl.log_f is not None:
            return math.exp(_log_F_logspace(nl, 0.0, cfg.rel_tol)[0])
        head = _quad(lambda s: 1.0 / float(nl.f(s)), 0.0, 1.0, cfg.rel_tol)
        return head + math.exp(log_F(1.0))
    # f(0) = 0: decide divergence from how F grows as u -> 0
    us = [1e-4, 1e-8, 1e-12, 1e-16]
    vals = [math.exp(log_F(x)) for x in us]
    inc = np.diff(vals)
    if np.any(~np.isfinite(vals)) or inc[-1] >= 0.5 * inc[-2]:
        return math.inf
    r = inc[-1] / inc[-2]
    return vals[-1] + inc[-1] * r / (1.0 - r)


def conjugate(q: float) -> float:
    """Hölder conjugate ``q/(q-1)``, infinite at ``q = 1``."""
    if q <= 1.0:
        return math.inf
    return q / (q - 1.0)


def build_calculus(nl: Nonlinearity, cfg: Optional[QuadratureConfig] = None) -> Calculus:
    """Assemble F, G, psi_f and q_f for ``nl``.

    Closed forms are used when present (and enabled); otherwise F comes
    from adaptive quadrature and q_f from :func:`estimate_qf`.
    """
    cfg = cfg or QuadratureConfig()
    if cfg.check:
        check_hypotheses(nl)
    prov = Calculus(nl, cfg, math.inf, 0.0, math.nan, math.nan, "pending", False)
    closed = nl.closed if cfg.use_closed_forms else None
    if closed is not None and closed.F0 is not None:
        F0, est = closed.F0, False
    else:
        F0 = _estimate_F0(nl, cfg, lambda x: prov._log_F_scalar(x)
                          if not (closed and closed.log_F) else float(closed.log_F(x)))
        est = True
    G0 = 0.0 if math.isinf(F0) else 1.0 / F0
    prov = replace(prov, F0=F0, G0=G0, F0_estimated=est)
    if closed is not None and closed.q_f is not None:
        q, src = closed.q_f, "closed-form"
    else:
        q, src = estimate_qf(prov).q_hat, "estimated"
    return replace(prov, q_f=q, p_f=conjugate(q), q_source=src)


def eval_F(c: Calculus, u):
    """F(u) for u > 0."""
    return c.F(u)


def eval_psi_f(c: Calculus, v):
    """psi_f(v) for v >= 0."""
    return c.psi(v)


# ----------------------------------------------------------------------------
# growth exponent
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QfEstimate:
    q_hat: float
    p_hat: float
    grid: np.ndarray = field(repr=False)
    sequence: np.ndarray = field(repr=False)
    extrapolated: np.ndarray = field(repr=False)
    converged: bool = True


def estimate_qf(c: Calculus, nl: Optional[Nonlinearity] = None,
                grid: Optional[np.ndarray] = None, tail: int = 10,
                cauchy_tol: float = 1e-3, strict: bool = True) -> QfEstimate:
    """Estimate ``q_f = lim f'(u)F(u)`` from a geometric grid.

    The raw sequence is Richardson-extrapolated in ``1/log u`` over the
    last ``tail`` finite points.  Points where the products are not
    representable are dropped.

    Raises
    ------
    NoLimit
        If the tail is not eventually monotone with agreeing extrapolants.
    """
    if nl is not None and nl is not c.nl:
        c = replace(c, nl=nl)
    u = np.geomspace(1e2, 1e12, 60) if grid is None else np.asarray(grid, float)
    u = u[u > max(c.nl.tau0, c.nl.tau1)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        seq = []
        for x in u:
            try:
                seq.append(float(c.growth_product(x)))
            except (TailDivergent, OverflowError, ValueError):
                seq.append(math.nan)
    seq = np.asarray(seq)
    keep = np.isfinite(seq) & (seq > 0)
    u, seq = u[keep], seq[keep]
    if seq.size < 3:
        raise NoLimit("fewer than three representable samples of f'F")
    ut, at = u[-tail:], seq[-tail:]
    h = 1.0 / np.log(ut)
    rich = (at[1:] * h[:-1] - at[:-1] * h[1:]) / (h[:-1] - h[1:])
    d = np.diff(at)
    scale = max(1.0, abs(at[-1]))
    flat = np.all(np.abs(d) <= 1e-10 * scale)
    if flat:
        q_hat, ok = float(at[-1]), True
    else:
        sig = np.sign(d[np.abs(d) > 1e-12 * scale])
        monotone = sig.size == 0 or np.all(sig == sig[0])
        spread = float(np.max(rich) - np.min(rich))
        ok = bool(monotone and spread <= cauchy_tol * scale)
        q_hat = float(rich[-1])
    if not ok and strict:
        raise NoLimit(f"f'F does not settle: tail {at}")
    return QfEstimate(q_hat, conjugate(q_hat), u, seq, rich, ok)


def classify(c: Calculus, N: int, theta: float, tol: float = 1e-3) -> Criticality:
    """Compare ``p_f`` with ``1 + theta/N``; within ``tol`` counts as critical."""
    p_theta = 1.0 + theta / N
    if math.isinf(c.p_f):
        return Criticality.SUPERCRITICAL
    if abs(c.p_f - p_theta) <= tol:
        return Criticality.CRITICAL
    return Criticality.SUPERCRITICAL if c.p_f > p_theta else Criticality.SUBCRITICAL


@dataclass(frozen=True)
class SandwichReport:
    threshold: float
    grid: np.ndarray = field(repr=False)
    ratio: np.ndarray = field(repr=False)
    holds: bool = True


def check_growth_sandwich(c: Calculus, grid: Optional[np.ndarray] = None) -> SandwichReport:
    """Check ``f'/(2q) <= G <= 2f'/q`` on a tail grid.

    Equivalent to ``q/2 <= f'F <= 2q``; reports the smallest grid point
    beyond which this holds.
    """
    u = np.geomspace(1.0, 1e8, 81) if grid is None else np.asarray(grid, float)
    r = np.asarray(c.growth_product(u), dtype=float)
    good = (r >= c.q_f / 2) & (r <= 2 * c.q_f)
    bad = np.nonzero(~good)[0]
    if bad.size == 0:
        thr = float(u[0])
    elif bad[-1] == u.size - 1:
        return SandwichReport(math.inf, u, r, False)
    else:
        thr = float(u[bad[-1] + 1])
    return SandwichReport(thr, u, r, True)


# ----------------------------------------------------------------------------
# growth and convexity verifiers
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class InverseGrowthReport:
    """Fit of the two-sided growth bound for f(F^{-1}(sigma))."""

    C: float
    eps: float
    q_f: float
    passed: bool
    log_parts: tuple = ()


def check_inverse_growth(c: Calculus, eps: float, sigma_grid, c_max: float = 1e6) -> InverseGrowthReport:
    """Smallest ``C >= 1`` with
    ``C^{-1} s^{eps-q} <= f(F^{-1}(s)) <= C s^{-eps-q}`` and
    ``F^{-1}(s) <= C s^{1-q-eps}`` on the grid.
    """
    q = c.q_f
    if not 0.0 < eps < q:
        raise DomainError("eps must lie in (0, q_f)")
    s = np.asarray(sigma_grid, dtype=float)
    u = np.asarray(c.F_inv(s), dtype=float)
    if c.nl.log_f is not None:
        la = np.asarray(c.nl.log_f(u), dtype=float)
    else:
        la = np.log(np.asarray(c.nl.f(u), dtype=float))
    ls = np.log(s)
    parts = (
        float(np.max((eps - q) * ls - la)),
        float(np.max(la + (eps + q) * ls)),
        float(np.max(np.log(u) - (1.0 - q - eps) * ls)),
    )
    logC = max(0.0, *parts)
    C = math.exp(logC) if logC < 700 else math.inf
    return InverseGrowthReport(C, eps, q, bool(C <= c_max), parts)


@dataclass(frozen=True)
class InverseConvexityReport:
    """Convexity of ``g(s) = F^{-1}(s^k)`` near zero."""

    sigma_star: float
    sigma: np.ndarray = field(repr=False)
    second_diff: np.ndarray = field(repr=False)
    passed: bool = True


def check_inverse_convexity(c: Calculus, k: float, sigma_grid, tol: float = 1e-7) -> InverseConvexityReport:
    """Second divided differences of ``g(s) = F^{-1}(s^k)``.

    Returns the largest grid point up to which all second differences are
    above ``-tol`` times the local scale ``|g|/s^2``.
    """
    s = np.sort(np.asarray(sigma_grid, dtype=float))
    g = np.asarray(c.F_inv(s ** k), dtype=float)
    h0, h1 = np.diff(s)[:-1], np.diff(s)[1:]
    dd = 2.0 * ((g[2:] - g[1:-1]) / h1 - (g[1:-1] - g[:-2]) / h0) / (h0 + h1)
    scale = np.abs(g[1:-1]) / s[1:-1] ** 2
    ok = dd >= -tol * scale
    if ok.all():
        star = float(s[-1])
    else:
        first_bad = int(np.argmin(ok))
        star = float(s[first_bad]) if first_bad > 0 else 0.0
    return InverseConvexityReport(star, s, dd, star > 0.0)
