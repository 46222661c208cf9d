"""Independent reference computations used by the tests.

Nothing here imports the package: each oracle is built from scratch or from
scipy primitives the package does not use for the same quantity.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import erf


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-13, depth: int = 60) -> float:
    """Recursive adaptive Simpson rule with Richardson correction."""
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (rec(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, depth)


def tail_integral(f, u: float, rel: float = 1e-12, max_doublings: int = 200) -> float:
    """``int_u^inf ds / f(s)`` by Simpson on ``[U, 2U]`` pieces until they vanish."""
    total, lo = 0.0, u
    hi = max(2.0 * u, u + 1.0)
    for _ in range(max_doublings):
        g = lambda s: 1.0 / f(s)  # noqa: E731
        rough = (hi - lo) / 6.0 * (g(lo) + 4.0 * g(0.5 * (lo + hi)) + g(hi))
        piece = adaptive_simpson(g, lo, hi, tol=rel * 1e-2 * abs(rough))
        total += piece
        if piece <= rel * 1e-2 * total:
            return total
        lo, hi = hi, 2.0 * hi
    raise RuntimeError("tail integral did not converge")


def poisson_kernel(x, t: float = 1.0):
    """Cauchy density, the theta = 1 kernel in one dimension."""
    x = np.asarray(x, dtype=float)
    return t / (math.pi * (t * t + x * x))


def gaussian_kernel(x, t: float):
    """Heat kernel of ``du/dt = u''``."""
    x = np.asarray(x, dtype=float)
    return np.exp(-x * x / (4.0 * t)) / np.sqrt(4.0 * math.pi * t)


def heat_indicator(x, t: float, radius: float = 1.0):
    """Heat flow of the indicator of ``[-radius, radius]``."""
    x = np.asarray(x, dtype=float)
    s = 2.0 * math.sqrt(t)
    return 0.5 * (erf((radius - x) / s) + erf((radius + x) / s))


def heat_indicator_cell_average(axis, h: float, t: float, radius: float = 1.0):
    """Cell average of :func:`heat_indicator`, integrated exactly via erf primitives."""
    def prim(z):
        # antiderivative of erf(z/s): z erf(z/s) + s/sqrt(pi) exp(-(z/s)^2)
        s = 2.0 * math.sqrt(t)
        return z * erf(z / s) + s / math.sqrt(math.pi) * np.exp(-(z / s) ** 2)

    a, b = np.asarray(axis) - h / 2, np.asarray(axis) + h / 2
    # integral of erf((R - x)/s) over [a, b] is prim(R - a) - prim(R - b)
    part1 = prim(radius - a) - prim(radius - b)
    part2 = prim(radius + b) - prim(radius + a)
    return 0.5 * (part1 + part2) / h


def subsample_average(func, lo: float, hi: float, n: int = 1000) -> float:
    """Midpoint average of ``func`` over ``[lo, hi]`` on ``n`` points."""
    x = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    return float(np.mean(func(x)))


def ode_blowup_time(f, u0: float, big: float = 20.0, tail=None) -> float:
    """Blow-up time of ``u' = f(u)``: high-order integration to ``big`` plus the analytic tail.

    ``tail(big)`` is the remaining time ``int_big^inf ds/f(s)``.
    """
    def hit(t, y):
        return y[0] - big
    hit.terminal = True
    sol = solve_ivp(lambda t, y: [f(y[0])], (0.0, 10.0), [u0], method="DOP853",
                    rtol=1e-12, atol=1e-12, events=hit)
    t_hit = float(sol.t_events[0][0])
    return t_hit + (tail(big) if tail is not None else 0.0)


def ball_integral_1d(func, x: float, r: float, n: int = 20000) -> float:
    """``int_{x-r}^{x+r} func`` by the midpoint rule."""
    return subsample_average(func, x - r, x + r, n) * 2.0 * r
