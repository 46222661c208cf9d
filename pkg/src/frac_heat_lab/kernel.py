"""Fractional heat kernel: the density with Fourier transform exp(-t|xi|^theta).

The unit-time radial profile is tabulated on a log-uniform grid and every
other time follows from self-similarity,
``Gamma(x, t) = t^{-N/theta} Gamma(t^{-1/theta} x, 1)``.

For ``theta < 2`` the profile comes from the radial Fourier inversion of
``exp(-|xi|^theta)``.  The integration ray is rotated into the upper half
plane by a small angle, which turns the slowly decaying oscillatory
integrand into an exponentially damped one; every abscissa is checked by
repeating the quadrature with all panels halved.  Beyond the table the
profile continues as ``c r^{-N-theta}``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special
from scipy.interpolate import CubicSpline


class KernelError(ValueError):
    """Base class for kernel failures."""


class QuadratureFailure(KernelError):
    """The Fourier inversion failed its step-halving self-check."""


class BoundViolation(KernelError):
    """No moderate constant makes the two-sided kernel bound hold."""


def sphere_area(N: int) -> float:
    """Surface measure of the unit sphere in R^N (2 for N = 1)."""
    return 2.0 * math.pi ** (N / 2.0) / math.gamma(N / 2.0)


def peak_value(N: int, theta: float) -> float:
    """``Gamma(0, 1)`` in closed form."""
    return sphere_area(N) / (2.0 * math.pi) ** N * math.gamma(N / theta) / theta


@dataclass(frozen=True)
class KernelConfig:
    """Resolution of the tabulated profile."""

    r_min: float = 1e-6
    r_max: Optional[float] = None
    points_per_decade: int = 40
    nodes: int = 20
    rel_tol: float = 1e-9

    def resolved_r_max(self, N: int) -> float:
        if self.r_max is not None:
            return float(self.r_max)
        return 1e4 if N == 1 else 1e3

    def digest(self, N: int, theta: float) -> str:
        payload = json.dumps({"N": N, "theta": theta, **asdict(self)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# Fourier inversion
# ----------------------------------------------------------------------------

def _panels(S: float, r: float, refine: int) -> np.ndarray:
    """Break points on [0, S]: dyadic grading towards 0 plus a uniform mesh."""
    graded = S * 2.0 ** -np.arange(1, 60, dtype=float)
    n_uni = int(math.ceil(S * max(r, 1.0) / 0.5)) + 8
    uniform = np.linspace(0.0, S, n_uni + 1)[1:]
    pts = np.unique(np.concatenate([[0.0], graded, uniform]))
    for _ in range(refine):
        pts = np.sort(np.concatenate([pts, 0.5 * (pts[1:] + pts[:-1])]))
    return pts


def _ray_integral(N: int, theta: float, r: float, nodes: int,
                  refine: int) -> tuple[float, float]:
    """Radial inversion at one radius along a rotated ray.

    Returns the value and the size of the summed terms (for roundoff control).
    """
    phi = min(math.pi / (4.0 * theta), math.pi / 3.0)
    rot = complex(math.cos(phi), math.sin(phi))
    damp = math.cos(theta * phi)
    S = (40.0 / damp) ** (1.0 / theta)
    if r > 0:
        S = min(S, 40.0 / (r * math.sin(phi)))
    pts = _panels(S, r, refine)
    x, w = np.polynomial.legendre.leggauss(nodes)
    a, b = pts[:-1, None], pts[1:, None]
    s = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
    ws = (0.5 * (b - a) * w).ravel()
    xi = s * rot
    decay = np.exp(-(s ** theta) * complex(math.cos(theta * phi), math.sin(theta * phi)))
    if N == 1:
        vals = np.exp(1j * r * xi) * decay
        pref = 1.0 / math.pi
    elif N == 3:
        vals = -1j * xi * np.exp(1j * r * xi) * decay
        pref = 1.0 / (2.0 * math.pi ** 2 * r)
    else:
        vals = special.hankel1(0, r * xi) * xi * decay
        pref = 1.0 / (2.0 * math.pi)
    total = rot * np.sum(ws * vals)
    return float(total.real * pref), float(np.sum(ws * np.abs(vals)) * pref)


def invert_profile(N: int, theta: float, r: float, nodes: int = 20,
                   rel_tol: float = 1e-9) -> float:
    """``Gamma_theta(r, 1)`` by Fourier inversion with a step-halving check."""
    if r == 0.0:
        return peak_value(N, theta)
    coarse, _ = _ray_integral(N, theta, r, nodes, 0)
    fine, size = _ray_integral(N, theta, r, nodes, 1)
    if not abs(fine - coarse) <= rel_tol * abs(fine) + 1e-13 * size:
        raise QuadratureFailure(
            f"inversion at r={r:g} (N={N}, theta={theta}) unstable: {coarse!r} vs {fine!r}")
    return fine


# ----------------------------------------------------------------------------
# table
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelTable:
    """Unit-time radial profile plus far-field coefficient.

    For ``theta = 2`` the Gaussian closed form is used for evaluation; the
    table is kept for uniformity.
    """

    N: int
    theta: float
    r: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    tail_coeff: Optional[float]
    peak: float
    cfg: KernelConfig = field(default_factory=KernelConfig, repr=False)
    _spline: CubicSpline = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lr = np.log(self.r)
        spline = CubicSpline(lr, np.log(self.values))
        object.__setattr__(self, "_spline", spline)
        # cumulative radial mass at the table nodes
        xg, wg = np.polynomial.legendre.leggauss(8)
        a, b = lr[:-1, None], lr[1:, None]
        t = 0.5 * (b - a) * xg + 0.5 * (a + b)
        piece = np.sum(0.5 * (b - a) * wg * np.exp(spline(t) + self.N * t), axis=1)
        head = self.peak * self.r[0] ** self.N / self.N
        cum = sphere_area(self.N) * np.concatenate([[head], head + np.cumsum(piece)])
        object.__setattr__(self, "_cum", cum)

    @property
    def gaussian(self) -> bool:
        return self.theta == 2.0

    # -- profile ---------------------------------------------------------------
    def profile(self, rho) -> np.ndarray:
        """``Gamma(rho, 1)`` for radii ``rho >= 0``."""
        rho = np.abs(np.asarray(rho, dtype=float))
        if self.gaussian:
            return (4.0 * math.pi) ** (-self.N / 2.0) * np.exp(-rho ** 2 / 4.0)
        out = np.empty_like(rho)
        r0, r1 = self.r[0], self.r[-1]
        lo, hi = rho < r0, rho > r1
        mid = ~(lo | hi)
        out[mid] = np.exp(self._spline(np.log(rho[mid])))
        out[lo] = self.peak + (self.values[0] - self.peak) * (rho[lo] / r0) ** 2
        out[hi] = self.tail_coeff * rho[hi] ** (-self.N - self.theta)
        return out

    def mass_within(self, R) -> np.ndarray:
        """Mass of ``Gamma(., 1)`` inside the ball of radius R."""
        R = np.abs(np.asarray(R, dtype=float))
        if self.gaussian:
            return special.gammainc(self.N / 2.0, R ** 2 / 4.0)
        total = self.total_mass()
        A = sphere_area(self.N)
        out = np.empty_like(R)
        r0, r1 = self.r[0], self.r[-1]
        lo, hi = R <= r0, R >= r1
        mid = ~(lo | hi)
        out[lo] = A * self.peak * R[lo] ** self.N / self.N
        out[hi] = total - A * self.tail_coeff * R[hi] ** (-self.theta) / self.theta
        if np.any(mid):
            lr = np.log(self.r)
            t = np.log(R[mid])
            idx = np.clip(np.searchsorted(lr, t) - 1, 0, lr.size - 2)
            xg, wg = np.polynomial.legendre.leggauss(8)
            a = lr[idx][:, None]
            b = t[:, None]
            nodes = 0.5 * (b - a) * xg + 0.5 * (a + b)
            part = np.sum(0.5 * (b - a) * wg * np.exp(self._spline(nodes) + self.N * nodes),
                          axis=1)
            out[mid] = self._cum[idx] + A * part
        return out

    def mass_outside(self, R) -> np.ndarray:
        """Mass of ``Gamma(., 1)`` outside the ball of radius R."""
        R = np.abs(np.asarray(R, dtype=float))
        if self.gaussian:
            return special.gammaincc(self.N / 2.0, R ** 2 / 4.0)
        out = self.total_mass() - self.mass_within(R)
        hi = R >= self.r[-1]
        out[hi] = sphere_area(self.N) * self.tail_coeff * R[hi] ** (-self.theta) / self.theta
        return np.maximum(out, 0.0)

    def total_mass(self) -> float:
        if self.gaussian:
            return 1.0
        tail = sphere_area(self.N) * self.tail_coeff * self.r[-1] ** (-self.theta) / self.theta
        return float(self._cum[-1] + tail)

    # -- serialisation -----------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "N": self.N,
            "theta": self.theta,
            "r": self.r.tolist(),
            "values": self.values.tolist(),
            "tail_coeff": self.tail_coeff,
            "peak": self.peak,
            "cfg": asdict(self.cfg),
        }

    @classmethod
    def from_json(cls, data: dict) -> "KernelTable":
        return cls(int(data["N"]), float(data["theta"]), np.asarray(data["r"], float),
                   np.asarray(data["values"], float), data["tail_coeff"],
                   float(data["peak"]), KernelConfig(**data["cfg"]))


def _cache_path(N: int, theta: float, cfg: KernelConfig,
                cache_dir: Optional[os.PathLike]) -> Optional[Path]:
    root = cache_dir if cache_dir is not None else os.environ.get("FRACHEAT_CACHE")
    if not root:
        return None
    return Path(root) / f"kernel_N{N}_theta{theta:.6g}_{cfg.digest(N, theta)}.json"


def build_kernel(N: int, theta: float, cfg: Optional[KernelConfig] = None,
                 cache_dir: Optional[os.PathLike] = None) -> KernelTable:
    """Tabulate ``Gamma_theta(r, 1)`` in dimension N.

    Parameters
    ----------
    N : int
        Dimension, one of 1, 2, 3.
    theta : float
        Order in (0, 2]; 2 is the Gaussian.
    cfg : KernelConfig, optional
        Table resolution and tolerances.
    cache_dir : path, optional
        Directory for a JSON cache; defaults to ``$FRACHEAT_CACHE`` if set.
    """
    if N not in (1, 2, 3):
        raise KernelError(f"dimension must be 1, 2 or 3, got {N}")
    theta = float(theta)
    if not 0.0 < theta <= 2.0:
        raise KernelError(f"theta must lie in (0, 2], got {theta}")
    cfg = cfg or KernelConfig()
    path = _cache_path(N, theta, cfg, cache_dir)
    if path is not None and path.exists():
        return KernelTable.from_json(json.loads(path.read_text()))
    r_max = cfg.resolved_r_max(N)
    n = int(round(cfg.points_per_decade * math.log10(r_max / cfg.r_min))) + 1
    r = np.geomspace(cfg.r_min, r_max, n)
    peak = peak_value(N, theta)
    if theta == 2.0:
        r = r[r <= 40.0]
        values = (4.0 * math.pi) ** (-N / 2.0) * np.exp(-r ** 2 / 4.0)
        tail = None
    else:
        values = np.array([invert_profile(N, theta, x, cfg.nodes, cfg.rel_tol) for x in r])
        if np.any(values <= 0):
            raise QuadratureFailure("inverted profile is not positive")
        tail = float(values[-1] * r[-1] ** (N + theta))
    table = KernelTable(N, theta, r, values, tail, peak, cfg)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(table.to_json()))
    return table


def eval_kernel(k: KernelTable, x, t: float) -> np.ndarray:
    """``Gamma_theta(x, t)``; ``x`` holds points (last axis of length N) or radii."""
    if not t > 0:
        raise KernelError("t must be positive")
    x = np.asarray(x, dtype=float)
    if k.N > 1 and x.ndim >= 1 and x.shape[-1] == k.N:
        rho = np.sqrt(np.sum(x ** 2, axis=-1))
    else:
        rho = np.abs(x)
    scale = t ** (1.0 / k.theta)
    out = t ** (-k.N / k.theta) * k.profile(rho / scale)
    return out if out.ndim else float(out)


# ----------------------------------------------------------------------------
# structural checks
# ----------------------------------------------------------------------------

def _grid_points(N: int, L: float, M: int) -> tuple[np.ndarray, float]:
    h = 2.0 * L / M
    axis = -L + (np.arange(M) + 0.5) * h
    if N == 1:
        return axis, h
    mesh = np.meshgrid(*([axis] * N), indexing="ij")
    return np.sqrt(sum(m ** 2 for m in mesh)), h


def lattice_radii(N: int, M: int, h: float) -> np.ndarray:
    """Distances of the lattice offsets ``k h``, ``k in [-M, M)``, in FFT order.

    Convolving with an array of this shape (zero-padded data of M cells per
    axis) is a linear, not circular, convolution on the M-cell window.
    """
    k = np.fft.fftfreq(2 * M, d=1.0 / (2 * M)) * h
    if N == 1:
        return np.abs(k)
    mesh = np.meshgrid(*([k] * N), indexing="ij")
    return np.sqrt(sum(m ** 2 for m in mesh))


def convolve_padded(kernel_hat: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Apply a transformed lattice kernel to M^N data and crop back."""
    shape = tuple(2 * n for n in data.shape)
    axes = tuple(range(data.ndim))
    full = np.fft.irfftn(np.fft.rfftn(data, shape, axes) * kernel_hat, shape, axes)
    return full[tuple(slice(0, n) for n in data.shape)]


def check_chapman_kolmogorov(k: KernelTable, t: float, s: float,
                             grid: Sequence = (40.0, 4096), pad: int = 4) -> float:
    """Max deviation of ``Gamma(t)`` from ``Gamma(t-s) * Gamma(s)`` on a grid.

    The convolution is a midpoint sum with cell size ``h = 2L/M``; the
    factor ``Gamma(., s)`` is sampled on a window ``pad`` times wider than
    ``[-L, L]^N`` so that heavy tails do not masquerade as discretisation
    error.  The deviation on ``[-L, L]^N`` is reported relative to the peak
    of ``Gamma(., t)``.
    """
    if not 0.0 < s < t:
        raise KernelError("need 0 < s < t")
    L, M = float(grid[0]), int(grid[1])
    Mw = pad * M
    rho, h = _grid_points(k.N, pad * L, Mw)
    lattice = eval_kernel(k, lattice_radii(k.N, Mw, h), t - s)
    shape = tuple([2 * Mw] * k.N)
    conv = convolve_padded(np.fft.rfftn(lattice, shape, tuple(range(k.N))), eval_kernel(k, rho, s)) * h ** k.N
    lo = (Mw - M) // 2
    inner = tuple([slice(lo, lo + M)] * k.N)
    target = eval_kernel(k, rho[inner], t)
    return float(np.max(np.abs(conv[inner] - target)) / np.max(target))


def check_bounds(k: KernelTable, c_max: float = 1e6) -> float:
    """Smallest C with ``C^{-1} B(r) <= Gamma(r, 1) <= C B(r)``, ``B = (1+r)^{-N-theta}``.

    Evaluated on the tabulated radii and on the far field.
    """
    if k.gaussian:
        raise KernelError("the algebraic two-sided bound applies only for theta < 2")
    rho = np.concatenate([[0.0], k.r, k.r[-1] * np.geomspace(1.0, 1e6, 20)[1:]])
    ratio = k.profile(rho) * (1.0 + rho) ** (k.N + k.theta)
    C = float(max(np.max(ratio), np.max(1.0 / ratio)))
    if not C <= c_max:
        raise BoundViolation(f"fitted constant {C:g} exceeds {c_max:g}")
    return C
