"""Mild solutions of ``u = S(t)mu + int_0^t S(t-s) f(u(s)) ds`` on a grid.

The Duhamel integral is discretised with the trapezoid rule on a uniform
time grid.  The resulting lower-triangular Volterra system is solved by
marching in time; at every step the implicit end-point term is resolved
by a monotone fixed-point iteration started from the explicit part, so
iterates increase towards the minimal solution.  Kernel spectra for every
lag are computed once and the history sum is formed in Fourier space.

Spatially constant data follow the same scheme with the convolution
skipped, which reproduces the trapezoid discretisation of ``u' = f(u)``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernel import KernelTable
from .nonlinearity import Nonlinearity
from .semigroup import GridField, SemigroupOperator


class SolverError(ValueError):
    """Base class for solver failures."""


class NaNEncountered(SolverError):
    """Non-finite values appeared before the cap logic could act."""


class NotBlowingUp(SolverError):
    """A run expected to cross the cap reached the horizon instead."""


class Verdict(str, enum.Enum):
    CONVERGED = "Converged"
    BLOWUP = "BlowUpEvidence"
    INCONCLUSIVE = "Inconclusive"


@dataclass
class _Run:
    status: str                   # "converged", "cap", "stalled", "nan"
    dt: float
    M: int
    times: np.ndarray
    sup_history: np.ndarray
    residual_history: np.ndarray
    iterations: np.ndarray
    crossing_time: Optional[float]
    fields: Optional[list]
    backgrounds: np.ndarray


@dataclass
class MildSolveReport:
    """Outcome of :func:`mild_solve`.

    ``residual_history`` holds the final fixed-point residual of every time
    step; ``sup_history`` holds ``||u(t_n)||_inf`` for the steps reached.
    """

    verdict: Verdict
    T_reached: float
    residual_history: np.ndarray
    sup_history: np.ndarray
    refinement_stable: Optional[bool]
    times: np.ndarray
    crossing_time: Optional[float]
    dt: float
    T: float
    tol: float
    cap: float
    N: int
    L: float
    M: int
    theta: float
    nonlinearity: dict
    input_hash: str
    refinements: list = field(default_factory=list)
    fields: Optional[list] = field(default=None, repr=False)
    backgrounds: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "T_reached": self.T_reached,
            "T": self.T,
            "dt": self.dt,
            "tol": self.tol,
            "cap": self.cap,
            "grid": {"N": self.N, "L": self.L, "M": self.M},
            "theta": self.theta,
            "nonlinearity": self.nonlinearity,
            "input_hash": self.input_hash,
            "crossing_time": self.crossing_time,
            "refinement_stable": self.refinement_stable,
            "refinements": self.refinements,
            "times": [float(t) for t in self.times],
            "sup_history": [float(s) for s in self.sup_history],
            "residual_history": [float(r) for r in self.residual_history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=True)


def _saturated(nl: Nonlinearity, cap: float):
    def f(u):
        with np.errstate(over="ignore", invalid="ignore"):
            return np.asarray(nl.f(np.minimum(u, cap)), dtype=float)
    if nl.f_prime is None:
        return f, None

    def fp(u):
        with np.errstate(over="ignore", invalid="ignore"):
            return np.asarray(nl.f_prime(np.minimum(u, cap)), dtype=float)
    return f, fp


def _implicit_step(A, c, f, fp, tau1, cap, tol, max_iter):
    """Smallest solution of ``u = A + c f(u)`` above A, cellwise.

    Returns ``(u, residual, iterations, status)`` with status one of
    ``"ok"``, ``"cap"`` (iterates passed the cap or no fixed point exists)
    and ``"stalled"``.
    """
    u = np.array(A, dtype=float)
    if c == 0.0:
        return u, 0.0, 0, "ok"
    res = math.inf
    for it in range(1, max_iter + 1):
        pic = A + c * f(u)
        new = pic
        if fp is not None:
            g = u - pic
            dg = 1.0 - c * fp(u)
            convex = u >= tau1
            fold = convex & (dg <= 0.0) & (g < 0.0)
            if np.any(fold):
                return u, res, it, "cap"
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = np.where(convex & (dg > 0.0), u - g / dg, pic)
            new = np.maximum(pic, newton)
        if not np.all(np.isfinite(new)):
            if np.any(np.isnan(new)):
                return u, res, it, "nan"
            return u, res, it, "cap"
        top = float(np.max(new))
        res = float(np.max(np.abs(new - u))) / (1.0 + top)
        u = new
        if top > cap:
            return u, res, it, "cap"
        if res <= tol:
            return u, res, it, "ok"
    return u, res, max_iter, "stalled"


def _march(k: Optional[KernelTable], nl: Nonlinearity, u0: GridField, T: float, dt: float,
           tol: float, cap: float, max_iter: int, keep_fields: bool, leak_tol: float) -> _Run:
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise SolverError(f"dt={dt} does not divide T={T}")
    f, fp = _saturated(nl, cap)
    tau1 = float(nl.tau1)
    b = float(u0.background)
    v0 = u0.values - b
    homogeneous = not np.any(v0)
    op = None
    if not homogeneous:
        if k is None:
            raise SolverError("a kernel table is required for non-constant data")
        op = SemigroupOperator(k, u0.N, u0.L, u0.M, leak_tol)
    shape = u0.values.shape
    pad = tuple(2 * m for m in shape)

    def spec(arr):
        return np.fft.rfftn(arr, pad, tuple(range(len(pad))))

    # lagged kernel spectra, filled on first use and reused for every step
    if not homogeneous:
        spec_shape = pad[:-1] + (pad[-1] // 2 + 1,)
        khat = np.empty((n_steps + 1,) + spec_shape, dtype=complex)
        hist = np.empty((n_steps,) + spec_shape, dtype=complex)

    times = [0.0]
    sups = [float(max(np.max(u0.values), b))]
    residuals = [0.0]
    iters = [0]
    fields = [u0.values.copy()] if keep_fields else None
    bgs = [b]
    fb_hist = []
    u_prev = u0.values.copy()
    f_prev = f(u_prev)
    fb_prev = float(f(np.array(b)))
    status = "converged"
    crossing = None
    v0_hat = None if homogeneous else spec(v0)
    for n in range(1, n_steps + 1):
        weight_prev = 0.5 * dt if n == 1 else dt
        fb_hist.append(weight_prev * fb_prev)
        bg_A = b + math.fsum(fb_hist)
        if homogeneous:
            A = np.full(shape, bg_A)
        else:
            khat[n] = op.transform(n * dt)
            hist[n - 1] = weight_prev * spec(f_prev - fb_prev)
            acc = np.einsum("i...,i...->...", khat[n:0:-1], hist[:n]) + khat[n] * v0_hat
            A = np.fft.irfftn(acc, pad, tuple(range(len(pad))))[tuple(slice(0, m) for m in shape)] + bg_A
            A = np.maximum(A, bg_A)
        u, res, it, st = _implicit_step(A, 0.5 * dt, f, fp, tau1, cap, tol, max_iter)
        # background follows the same scalar scheme
        bg, _, _, bst = _implicit_step(np.array([bg_A]), 0.5 * dt, f, fp, tau1, cap, tol, max_iter)
        t = n * dt
        if st == "nan" or bst == "nan":
            status = "nan"
            break
        if st == "cap" or bst == "cap":
            status = "cap"
            crossing = _crossing(times[-1], dt, sups[-1], float(np.max(u)), cap)
            break
        if st == "stalled":
            status = "stalled"
            break
        times.append(t)
        sups.append(float(max(np.max(u), bg[0])))
        residuals.append(res)
        iters.append(it)
        bgs.append(float(bg[0]))
        if keep_fields:
            fields.append(u.copy())
        u_prev = u
        f_prev = f(u)
        fb_prev = float(f(bg)[0])
        if not np.all(np.isfinite(f_prev)):
            status = "nan"
            break
    return _Run(status, dt, u0.M, np.array(times), np.array(sups), np.array(residuals),
                np.array(iters), crossing, fields, np.array(bgs))


def _crossing(t_prev: float, step: float, s_prev: float, s_new: float, cap: float) -> float:
    """Cap-crossing time by log-linear interpolation of the sup within a step."""
    if np.isfinite(s_new) and s_new > cap and s_prev > 0:
        frac = (math.log(cap) - math.log(s_prev)) / (math.log(s_new) - math.log(s_prev))
        return t_prev + step * min(max(frac, 0.0), 1.0)
    return t_prev + step


def _slope(nl: Nonlinearity, f, fp, u: float) -> float:
    if fp is not None:
        return float(fp(np.array([u]))[0])
    v = max(u, 1e-8)
    return float((f(np.array([2 * v]))[0] - f(np.array([v]))[0]) / v)


def _march_stepping(k: Optional[KernelTable], nl: Nonlinearity, u0: GridField, T: float,
                    dt: float, tol: float, cap: float, max_iter: int, keep_fields: bool,
                    leak_tol: float, adaptive: bool, safety: float,
                    max_steps: int = 200_000) -> _Run:
    """One-step Duhamel recursion ``u_{n+1} = S(k)[u_n + k/2 f(u_n)] + k/2 f(u_{n+1})``.

    With ``adaptive`` the step k is taken from the ladder ``dt 2^{-j/4}``
    so that ``k f'(sup u_n) <= safety``, growing by at most one rung per
    step; otherwise k = dt.
    """
    if not adaptive:
        n_steps = int(round(T / dt))
        if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
            raise SolverError(f"dt={dt} does not divide T={T}")
    f, fp = _saturated(nl, cap)
    tau1 = float(nl.tau1)
    b = float(u0.background)
    homogeneous = not np.any(u0.values - b)
    op = None
    if not homogeneous:
        if k is None:
            raise SolverError("a kernel table is required for non-constant data")
        # repeated short steps need weights that compose exactly
        op = SemigroupOperator(k, u0.N, u0.L, u0.M, leak_tol, weights="lattice")
    u = u0.values.copy()
    times, sups, residuals, iters, bgs = [0.0], [float(max(np.max(u), b))], [0.0], [0], [b]
    fields = [u.copy()] if keep_fields else None
    status, crossing = "converged", None
    t = 0.0
    rung = 0
    while t < T * (1 - 1e-12):
        if adaptive:
            slope = max(_slope(nl, f, fp, sups[-1]), 0.0)
            need = 0 if slope == 0 else max(0, math.ceil(4 * math.log2(dt * slope / safety)))
            rung = max(need, rung - 1)
            step = dt * 2.0 ** (-rung / 4)
        else:
            step = dt
        step = min(step, T - t)
        if len(times) > max_steps:
            status = "stalled"
            break
        c = 0.5 * step
        fu = f(u)
        fb = float(f(np.array([b]))[0])
        bg_A = b + c * fb
        if homogeneous:
            A = np.full(u.shape, bg_A)
        else:
            A = op.apply_values(u + c * fu, bg_A, step)
            A = np.maximum(A, bg_A)
        u_new, res, it, st = _implicit_step(A, c, f, fp, tau1, cap, tol, max_iter)
        bg, _, _, bst = _implicit_step(np.array([bg_A]), c, f, fp, tau1, cap, tol, max_iter)
        if st == "nan" or bst == "nan" or not np.all(np.isfinite(fu)):
            status = "nan"
            break
        if st == "cap" or bst == "cap":
            status = "cap"
            crossing = _crossing(t, step, sups[-1], float(np.max(u_new)), cap)
            break
        if st == "stalled":
            status = "stalled"
            break
        # near blow-up steps may fall below the resolution of t; the state still advances
        t = T if T - (t + step) <= 1e-12 * T else t + step
        u, b = u_new, float(bg[0])
        times.append(t)
        sups.append(float(max(np.max(u), b)))
        residuals.append(res)
        iters.append(it)
        bgs.append(b)
        if keep_fields:
            fields.append(u.copy())
    return _Run(status, dt, u0.M, np.array(times), np.array(sups), np.array(residuals),
                np.array(iters), crossing, fields, np.array(bgs))


def _verdict(run: _Run, tol: float) -> Verdict:
    if run.status == "converged" and np.all(np.isfinite(run.sup_history)) \
            and np.all(run.residual_history <= tol):
        return Verdict.CONVERGED
    if run.status == "cap":
        return Verdict.BLOWUP
    return Verdict.INCONCLUSIVE


def _summary(run: _Run, tol: float) -> dict:
    return {"dt": run.dt, "M": run.M, "status": run.status,
            "verdict": _verdict(run, tol).value,
            "T_reached": float(run.times[-1]), "crossing_time": run.crossing_time,
            "sup_final": float(run.sup_history[-1])}


def mild_solve(k: Optional[KernelTable], nl: Nonlinearity, u0: GridField, T: float, dt: float,
               tol: float = 1e-10, cap: float = 1e8, max_iter: int = 500,
               refine: str = "blowup", keep_fields: bool = True,
               leak_tol: float = 0.01, scheme: str = "history", adaptive: bool = False,
               safety: float = 0.05) -> MildSolveReport:
    """Solve the discretised Duhamel equation on ``[0, T]``.

    Parameters
    ----------
    k : KernelTable or None
        Kernel; may be None for spatially constant data.
    refine : {"blowup", "always", "never"}
        When to repeat the run once with ``dt/2`` and once with ``2M``.
        A cap crossing becomes ``BlowUpEvidence`` only if both refined runs
        also cross the cap; with ``refine="never"`` a single crossing is
        reported as evidence and ``refinement_stable`` is None.
    scheme : {"history", "stepping"}
        ``history`` sums the trapezoid Duhamel rule over all lags with the
        kernel of each lag; ``stepping`` uses the equivalent one-step
        recursion through the semigroup property and allows adaptive steps.
    adaptive : bool
        Only for ``stepping``: dt becomes the largest step and steps shrink
        so that ``step * f'(sup u) <= safety``.  The dt refinement halves
        both dt and safety.

    Returns
    -------
    MildSolveReport
    """
    if not T > 0 or not dt > 0:
        raise SolverError("T and dt must be positive")
    if not cap > u0.sup():
        raise SolverError("cap must exceed sup of the initial data")
    if refine not in ("blowup", "always", "never"):
        raise SolverError(f"unknown refine policy {refine!r}")
    if scheme not in ("history", "stepping"):
        raise SolverError(f"unknown scheme {scheme!r}")
    if adaptive and scheme != "stepping":
        raise SolverError("adaptive steps need the stepping scheme")

    def run(field_, step, keep, safe=safety):
        if scheme == "history":
            return _march(k, nl, field_, T, step, tol, cap, max_iter, keep, leak_tol)
        return _march_stepping(k, nl, field_, T, step, tol, cap, max_iter, keep, leak_tol,
                               adaptive, safe)

    base = run(u0, dt, keep_fields)
    verdict = _verdict(base, tol)
    stable = None
    refinements = []
    if refine == "always" or (refine == "blowup" and verdict is not Verdict.CONVERGED):
        if np.any(u0.values != u0.background):
            finer = u0.refined()
        else:
            finer = GridField(u0.N, u0.L, 2 * u0.M, np.full((2 * u0.M,) * u0.N, u0.background),
                              u0.background)
        others = [run(u0, dt / 2, False, safety / 2), run(finer, dt, False)]
        verdicts = [_verdict(r, tol) for r in others]
        refinements = [_summary(r, tol) for r in others]
        stable = all(v is verdict for v in verdicts)
        if verdict is Verdict.BLOWUP and not stable:
            verdict = Verdict.INCONCLUSIVE
        if base.status == "nan":
            verdict = Verdict.BLOWUP if all(r.status in ("nan", "cap") for r in others) \
                else Verdict.INCONCLUSIVE
    return MildSolveReport(
        verdict=verdict, T_reached=float(base.times[-1]),
        residual_history=base.residual_history, sup_history=base.sup_history,
        refinement_stable=stable, times=base.times, crossing_time=base.crossing_time,
        dt=dt, T=T, tol=tol, cap=cap, N=u0.N, L=u0.L, M=u0.M,
        theta=float(k.theta) if k is not None else float("nan"),
        nonlinearity=nl.to_spec(), input_hash=u0.content_hash(),
        refinements=refinements, fields=base.fields, backgrounds=base.backgrounds)


@dataclass(frozen=True)
class BlowupTime:
    """Extrapolated first cap-crossing time with a bracket."""

    estimate: float
    lower: float
    upper: float
    crossings: tuple

    def contains(self, t: float) -> bool:
        return self.lower <= t <= self.upper


def estimate_blowup_time(k: Optional[KernelTable], nl: Nonlinearity, u0: GridField,
                         dt_seq: Sequence[float], T: float, cap: float = 1e8,
                         tol: float = 1e-12, max_iter: int = 500) -> BlowupTime:
    """Richardson-extrapolated crossing time over a decreasing dt sequence.

    The last two crossings ``T(dt), T(dt/2)`` give ``2 T(dt/2) - T(dt)``; the
    bracket spans the extrapolant and the finest crossing, widened by the
    last correction.

    Raises
    ------
    NotBlowingUp
        If any run reaches T without crossing the cap.
    """
    crossings = []
    for dt in dt_seq:
        run = _march(k, nl, u0, T, dt, tol, cap, max_iter, False, 0.01)
        if run.status != "cap":
            raise NotBlowingUp(f"run with dt={dt} ended with status {run.status!r}")
        crossings.append(float(run.crossing_time))
    if len(crossings) == 1:
        c = crossings[0]
        return BlowupTime(c, c - dt_seq[0], c + dt_seq[0], tuple(crossings))
    c1, c2 = crossings[-2], crossings[-1]
    ratio = dt_seq[-2] / dt_seq[-1]
    est = c2 + (c2 - c1) / (ratio - 1.0)
    corr = abs(est - c2)
    lo, hi = min(est, c2) - corr, max(est, c2) + corr
    return BlowupTime(est, lo, hi, tuple(crossings))


def check_order_preservation(a: MildSolveReport, b: MildSolveReport, rtol: float = 1e-12) -> bool:
    """True if ``u_A(t_n) <= u_B(t_n)`` cellwise at every common stored step."""
    if a.fields is None or b.fields is None:
        raise SolverError("both reports must keep their fields")
    if (a.N, a.L, a.M) != (b.N, b.L, b.M) or a.dt != b.dt:
        raise SolverError("reports live on different grids or time steps")
    for ua, ub in zip(a.fields, b.fields):
        scale = 1.0 + np.abs(ub)
        if np.any(ua - ub > rtol * scale):
            return False
    return True


def report_hash(report: MildSolveReport) -> str:
    return hashlib.sha256(report.to_json().encode()).hexdigest()
