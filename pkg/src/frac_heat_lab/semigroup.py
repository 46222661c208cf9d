"""Gridded data and the action of the fractional heat semigroup on it.

Data live on the uniform cell grid of ``[-L, L]^N`` with ``M`` cells per
axis (a power of two).  Cell values are cell averages of the underlying
function, so the semigroup is applied with cell-integrated kernel
weights: the result at a cell centre is then exactly ``S(t)`` of the
piecewise-constant reconstruction, up to the kernel table accuracy.

Bounded, non-decaying data are split into a constant background plus a
compactly supported part; the background is carried exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate, special

from .kernel import KernelTable, convolve_padded, lattice_radii


class SemigroupError(ValueError):
    """Base class for semigroup failures."""


class NonIntegrableSingularity(SemigroupError):
    """Declared local singularity ``|x|^{-a}`` with ``a >= N``."""


class WindowTooSmall(SemigroupError):
    """Too much kernel mass leaves the computational window."""


# ----------------------------------------------------------------------------
# data descriptions
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class RadialData:
    """Radial data ``mu(x) = profile(|x|)``, optionally singular at the origin.

    Parameters
    ----------
    profile : callable
        Vectorised function of the radius.
    singular_exponent : float, optional
        Declared local behaviour ``|x|^{-a}`` near 0; cells touching the
        origin then receive accurately integrated averages.
    background : float
        Value of the data outside the computational window.
    """

    profile: Callable[[np.ndarray], np.ndarray]
    singular_exponent: Optional[float] = None
    background: float = 0.0
    label: str = "radial"


@dataclass(frozen=True)
class PointData:
    """General data ``mu(x)`` given as a function of the coordinate arrays."""

    func: Callable[..., np.ndarray]
    background: float = 0.0
    label: str = "pointwise"


DataSpec = Union[float, int, RadialData, PointData]


def indicator_ball(radius: float = 1.0, height: float = 1.0) -> RadialData:
    """``height`` times the indicator of the ball ``|x| < radius``."""
    return RadialData(lambda r: np.where(np.asarray(r) < radius, height, 0.0),
                      None, 0.0, f"indicator(r<{radius})")


def power_singularity(a: float, radius: float = 1.0, scale: float = 1.0) -> RadialData:
    """``scale |x|^{-a}`` on the ball of the given radius, zero outside."""
    def prof(r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(r < radius, scale * np.power(r, -a), 0.0)
    return RadialData(prof, float(a), 0.0, f"{scale}|x|^-{a}")


# ----------------------------------------------------------------------------
# grid field
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GridField:
    """Nonnegative cell values on ``[-L, L]^N`` with M cells per axis."""

    N: int
    L: float
    M: int
    values: np.ndarray = field(repr=False)
    background: float = 0.0
    singular_cells: tuple = ()
    source: Optional[DataSpec] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.N not in (1, 2, 3):
            raise SemigroupError(f"dimension must be 1, 2 or 3, got {self.N}")
        if self.M < 2 or self.M & (self.M - 1):
            raise SemigroupError(f"M must be a power of two, got {self.M}")
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.M,) * self.N:
            raise SemigroupError(f"values have shape {vals.shape}, expected {(self.M,) * self.N}")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise SemigroupError("values must be finite and nonnegative")
        object.__setattr__(self, "values", vals)

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.M

    @property
    def axis(self) -> np.ndarray:
        return -self.L + (np.arange(self.M) + 0.5) * self.h

    def coordinates(self) -> list:
        if self.N == 1:
            return [self.axis]
        return np.meshgrid(*([self.axis] * self.N), indexing="ij")

    def radii(self) -> np.ndarray:
        return np.sqrt(sum(c ** 2 for c in self.coordinates()))

    def with_values(self, values: np.ndarray, background: Optional[float] = None) -> "GridField":
        return replace(self, values=np.asarray(values, dtype=float),
                       background=self.background if background is None else background)

    def sup(self) -> float:
        return float(max(np.max(self.values), self.background))

    def mass(self) -> float:
        """Integral of ``values - background`` over the window."""
        return float(np.sum(self.values - self.background) * self.h ** self.N)

    def refined(self) -> "GridField":
        """Same window with twice as many cells per axis."""
        if self.source is not None:
            return discretize(self.source, self.N, self.L, 2 * self.M)
        vals = self.values
        for ax in range(self.N):
            vals = np.repeat(vals, 2, axis=ax)
        return replace(self, M=2 * self.M, values=vals, singular_cells=(), source=None)

    def content_hash(self) -> str:
        meta = json.dumps([self.N, self.L, self.M, self.background]).encode()
        return hashlib.sha256(meta + np.ascontiguousarray(self.values).tobytes()).hexdigest()

    # -- serialisation -------------------------------------------------------
    def to_csv(self, path: Union[str, os.PathLike, None] = None) -> str:
        """CSV with columns ``index, x0[, x1, x2], value`` and a metadata comment."""
        buf = io.StringIO()
        buf.write(f"# N={self.N} L={self.L!r} M={self.M} background={self.background!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index"] + [f"x{i}" for i in range(self.N)] + ["value"])
        coords = [c.ravel() for c in self.coordinates()]
        for i, v in enumerate(self.values.ravel()):
            w.writerow([i] + [repr(float(c[i])) for c in coords] + [repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path: Union[str, os.PathLike]) -> "GridField":
        with open(path) as fh:
            meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
            rows = list(csv.reader(fh))[1:]
        N, M = int(meta["N"]), int(meta["M"])
        vals = np.array([float(r[-1]) for r in rows]).reshape((M,) * N)
        return cls(N, float(meta["L"]), M, vals, float(meta["background"]))

    def to_binary(self, path: Union[str, os.PathLike]) -> None:
        """Flat float64 values in an ``.npz`` with the grid metadata."""
        np.savez(path, values=self.values.ravel(), N=self.N, L=self.L, M=self.M,
                 background=self.background)

    @classmethod
    def from_binary(cls, path: Union[str, os.PathLike]) -> "GridField":
        with np.load(path) as d:
            N, M = int(d["N"]), int(d["M"])
            return cls(N, float(d["L"]), M, d["values"].reshape((M,) * N),
                       float(d["background"]))


# ----------------------------------------------------------------------------
# discretisation
# ----------------------------------------------------------------------------

def _singular_cell_average_1d(profile, a: float, h: float) -> float:
    """``(1/h) int_0^h profile(r) dr`` with the ``r^{-a}`` factor integrated exactly."""
    def regular(r):
        return float(profile(np.asarray(r)) * r ** a) if r > 0 else \
            float(profile(np.asarray(h * 1e-300)) * (h * 1e-300) ** a)
    val, _ = integrate.quad(regular, 0.0, h, weight="alg", wvar=(-a, 0.0),
                            epsabs=0.0, epsrel=1e-11, limit=200)
    return val / h


def _corner_cell_average(profile, N: int, h: float, depth: int = 60, nodes: int = 8) -> float:
    """Average of ``profile(|x|)`` over ``[0, h]^N`` by recursive corner refinement.

    At each level the cube is halved per axis; the sub-cubes away from the
    singular corner get a tensor Gauss-Legendre rule and the corner sub-cube
    is refined again.  The leftover corner is negligible for ``a < N``.
    """
    g, w = np.polynomial.legendre.leggauss(nodes)
    g, w = 0.5 * (g + 1.0), 0.5 * w                      # rule on [0, 1]
    unit = np.array(np.meshgrid(*([g] * N), indexing="ij")).reshape(N, -1).T
    weights = np.prod(np.array(np.meshgrid(*([w] * N), indexing="ij")).reshape(N, -1), axis=0)
    offsets = np.array(np.meshgrid(*([[0, 1]] * N), indexing="ij")).reshape(N, -1).T[1:]
    total, size = 0.0, h
    for _ in range(depth):
        half = size / 2.0
        pts = (offsets[:, None, :] + unit[None, :, :]) * half
        rr = np.sqrt(np.sum(pts ** 2, axis=-1))
        total += float(np.sum(profile(rr) * weights)) * half ** N
        size = half
    return total / h ** N


def discretize(mu: DataSpec, N: int, L: float, M: int, nodes: int = 4) -> GridField:
    """Cell averages of ``mu`` on the grid of ``[-L, L]^N`` with M cells per axis.

    Regular cells use a tensor Gauss-Legendre rule; cells touching a
    declared singularity at the origin get an accurate singular average
    (exact weight integration in 1D, recursive corner refinement for N >= 2).

    Raises
    ------
    NonIntegrableSingularity
        If the declared exponent is at least N.
    """
    if isinstance(mu, (int, float)):
        c = float(mu)
        return GridField(N, L, M, np.full((M,) * N, c), c, (), c)
    if hasattr(mu, "as_data"):
        mu = mu.as_data()
    h = 2.0 * L / M
    g, wg = np.polynomial.legendre.leggauss(nodes)
    sub = 0.5 * h * g
    axis = -L + (np.arange(M) + 0.5) * h
    if N == 1:
        pts = axis[:, None] + sub[None, :]
        wts = 0.5 * wg
    else:
        pts = None
    if isinstance(mu, RadialData):
        prof = mu.profile
        if N == 1:
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.sum(prof(np.abs(pts)) * wts, axis=1)
        else:
            vals = _tensor_average(lambda *xs: prof(np.sqrt(sum(x ** 2 for x in xs))),
                                   axis, sub, wg, N)
    elif isinstance(mu, PointData):
        if N == 1:
            vals = np.sum(mu.func(pts) * wts, axis=1)
        else:
            vals = _tensor_average(mu.func, axis, sub, wg, N)
    else:
        raise SemigroupError(f"unsupported data specification {type(mu).__name__}")
    vals = np.asarray(vals, dtype=float)
    singular = ()
    a = getattr(mu, "singular_exponent", None)
    if a is not None:
        if a >= N:
            raise NonIntegrableSingularity(f"|x|^-{a} is not integrable in dimension {N}")
        if N == 1:
            avg = _singular_cell_average_1d(mu.profile, a, h)
        else:
            avg = _corner_cell_average(mu.profile, N, h)
        centre = M // 2
        idx = [(centre - 1, centre)] * N
        corner = np.array(np.meshgrid(*idx, indexing="ij")).reshape(N, -1).T
        for cell in corner:
            vals[tuple(cell)] = avg
        singular = tuple(tuple(int(i) for i in cell) for cell in corner)
    bg = float(getattr(mu, "background", 0.0))
    if np.any(~np.isfinite(vals)) or np.any(vals < 0):
        raise SemigroupError("data must be finite and nonnegative on every cell")
    return GridField(N, L, M, vals, bg, singular, mu)


def _tensor_average(func, axis, sub, wg, N):
    """Tensor Gauss-Legendre cell averages of ``func(x0, ..., x_{N-1})``."""
    M = axis.size
    n = sub.size
    vals = np.zeros((M,) * N)
    w1 = 0.5 * wg
    for idx in np.ndindex(*([n] * N)):
        coords = np.meshgrid(*[axis + sub[i] for i in idx], indexing="ij")
        weight = np.prod([w1[i] for i in idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            vals += weight * func(*coords)
    return vals


# ----------------------------------------------------------------------------
# semigroup
# ----------------------------------------------------------------------------

def cell_masses(k: KernelTable, t: float, M: int, h: float) -> np.ndarray:
    """Kernel mass of every lattice cell, laid out for :func:`convolve_padded`.

    Entry ``j`` (FFT order, ``j in [-M, M)``) is the mass of ``Gamma(., t)``
    in the cell of side h centred at ``j h``.
    """
    N = k.N
    tau = t ** (1.0 / k.theta)
    j = np.fft.fftfreq(2 * M, d=1.0 / (2 * M))
    if N == 1 or k.gaussian:
        lo = (np.abs(j) - 0.5) * h
        hi = (np.abs(j) + 0.5) * h
        if k.gaussian:
            s = 2.0 * math.sqrt(t)
            w1 = 0.5 * (special.erfc(lo / s) - special.erfc(hi / s))
            w1[j == 0] = special.erf(0.5 * h / s)
        else:
            w1 = 0.5 * (k.mass_within(hi / tau) - k.mass_within(lo / tau))
            w1[j == 0] = k.mass_within(np.array([0.5 * h / tau]))[0]
        w1 = np.maximum(w1, 0.0)
        if N == 1:
            return w1
        out = w1
        for _ in range(N - 1):
            out = np.multiply.outer(out, w1)
        return out
    g, wg = np.polynomial.legendre.leggauss(4)
    base = j * h
    masses = np.zeros((2 * M,) * N)
    w1 = 0.5 * wg
    for idx in np.ndindex(*([4] * N)):
        coords = np.meshgrid(*[base + 0.5 * h * g[i] for i in idx], indexing="ij")
        rho = np.sqrt(sum(c ** 2 for c in coords))
        masses += np.prod([w1[i] for i in idx]) * k.profile(rho / tau)
    masses *= tau ** (-N) * h ** N
    if tau < 2.0 * h:
        # under-resolved kernel: the origin cell takes the mass the rule misses
        window = float(k.mass_within(np.array([M * h / tau]))[0])
        rest = np.sum(masses) - masses.flat[0]
        masses.flat[0] = max(window - rest, 0.0)
    return masses


def lattice_masses(N: int, theta: float, t: float, M: int, h: float) -> np.ndarray:
    """Weights of the lattice semigroup ``exp(-t (-Delta_h)^{theta/2})`` on lags ``[-M, M)``.

    ``Delta_h`` is the nearest-neighbour Laplacian on ``hZ^N``, so the
    weights are positive, have unit mass on the full lattice and compose
    exactly: ``W(s) * W(t) = W(s + t)``.  They agree with the continuum
    kernel up to ``O(h^2)`` in the symbol.  Computed on a larger torus and
    cropped, so mass beyond the window is dropped as for the cell masses.
    """
    P = 2 * M * {1: 8, 2: 4, 3: 2}[N]
    full = np.fft.fftfreq(P, d=h) * 2.0 * math.pi
    half = np.fft.rfftfreq(P, d=h) * 2.0 * math.pi
    axes = [full] * (N - 1) + [half]
    grids = np.meshgrid(*axes, indexing="ij", sparse=True)
    lap = sum((2.0 * np.sin(0.5 * h * g) / h) ** 2 for g in grids)
    w = np.fft.irfftn(np.exp(-t * lap ** (0.5 * theta)), (P,) * N, tuple(range(N)))
    lags = np.fft.fftfreq(2 * M, d=1.0 / (2 * M)).astype(int) % P
    out = w[np.ix_(*([lags] * N))]
    return np.maximum(out, 0.0)


def window_leak(k: KernelTable, t: float, L: float) -> float:
    """Mass of ``Gamma(., t)`` outside the ball of radius L."""
    return float(k.mass_outside(np.array([L / t ** (1.0 / k.theta)]))[0])


class SemigroupOperator:
    """Caches transformed kernel weights for repeated application on one grid.

    ``weights="cell"`` uses the continuum kernel mass of every cell and is
    the accurate choice for a single application.  ``weights="lattice"``
    uses :func:`lattice_masses`, whose exact composition suits many short
    steps in a row.
    """

    def __init__(self, k: KernelTable, N: int, L: float, M: int, leak_tol: float = 0.01,
                 weights: str = "cell"):
        if k.N != N:
            raise SemigroupError("kernel and grid dimensions differ")
        if weights not in ("cell", "lattice"):
            raise SemigroupError(f"unknown weights {weights!r}")
        self.k, self.N, self.L, self.M = k, N, L, M
        self.weights = weights
        self.h = 2.0 * L / M
        self.leak_tol = leak_tol
        self._cache: dict = {}

    def transform(self, t: float) -> np.ndarray:
        key = round(float(t), 15)
        hat = self._cache.get(key)
        if hat is None:
            leak = window_leak(self.k, t, self.L)
            if leak > self.leak_tol:
                raise WindowTooSmall(
                    f"{100 * leak:.2f}% of the kernel mass at t={t:g} leaves [-L, L]^N")
            if self.weights == "cell":
                w = cell_masses(self.k, t, self.M, self.h)
            else:
                w = lattice_masses(self.N, self.k.theta, t, self.M, self.h)
            hat = np.fft.rfftn(w, w.shape, tuple(range(w.ndim)))
            self._cache[key] = hat
        return hat

    def apply_values(self, values: np.ndarray, background: float, t: float) -> np.ndarray:
        if t == 0:
            return np.array(values, dtype=float)
        if not np.any(values != background):
            return np.full(values.shape, float(background))  # mass-one kernel fixes constants
        out = convolve_padded(self.transform(t), values - background) + background
        return out

    def __call__(self, u0: GridField, t: float) -> GridField:
        vals = self.apply_values(u0.values, u0.background, t)
        floor = min(float(np.min(u0.values)), u0.background)
        return u0.with_values(np.maximum(vals, floor))


def apply_semigroup(k: KernelTable, u0: GridField, t: float,
                    leak_tol: float = 0.01) -> GridField:
    """``S(t) u0`` by zero-padded FFT convolution with cell-integrated weights.

    The background constant is preserved exactly.  Raises
    :class:`WindowTooSmall` when more than ``leak_tol`` of the kernel mass
    at time t lies outside the window.
    """
    if not t > 0:
        raise SemigroupError("t must be positive")
    return SemigroupOperator(k, u0.N, u0.L, u0.M, leak_tol)(u0, t)


# ----------------------------------------------------------------------------
# decay estimate
# ----------------------------------------------------------------------------

def ball_integrals(u0: GridField, radius: float) -> np.ndarray:
    """``int_{B(x, radius)} mu`` at every cell centre (piecewise-constant mu)."""
    h, N = u0.h, u0.N
    vals = u0.values - u0.background
    if N == 1:
        edges = -u0.L + np.arange(u0.M + 1) * h
        cum = np.concatenate([[0.0], np.cumsum(vals) * h])
        x = u0.axis
        return np.interp(x + radius, edges, cum) - np.interp(x - radius, edges, cum)
    # fraction of each lattice cell inside the ball, by 8^N subsampling
    reach = int(math.ceil(radius / h)) + 1
    off = np.arange(-reach, reach + 1)
    sub = (np.arange(8) + 0.5) / 8 - 0.5
    grids = np.meshgrid(*([off] * N), indexing="ij")
    frac = np.zeros(grids[0].shape)
    for idx in np.ndindex(*([8] * N)):
        rr = np.sqrt(sum((g + sub[i]) ** 2 for g, i in zip(grids, idx))) * h
        frac += rr <= radius
    frac /= 8 ** N
    from scipy.signal import fftconvolve
    return fftconvolve(vals, frac, mode="same") * h ** N


@dataclass(frozen=True)
class DecayFit:
    C: float
    t_grid: np.ndarray = field(repr=False)
    ratios: np.ndarray = field(repr=False)


def check_decay_estimate(k: KernelTable, u0: GridField, t_grid: Sequence[float]) -> DecayFit:
    """Smallest C with ``||S(t)mu||_inf <= C t^{-N/theta} sup_x int_{B(x, t^{1/theta})} mu``."""
    if u0.background != 0.0:
        raise SemigroupError("the decay fit needs compactly supported data")
    op = SemigroupOperator(k, u0.N, u0.L, u0.M)
    ts = np.asarray(t_grid, dtype=float)
    ratios = np.zeros(ts.size)
    for i, t in enumerate(ts):
        top = float(np.max(op(u0, t).values))
        local = float(np.max(ball_integrals(u0, t ** (1.0 / k.theta))))
        if top == 0.0 and local == 0.0:
            ratios[i] = 0.0
        else:
            ratios[i] = top * t ** (u0.N / k.theta) / local
    return DecayFit(float(np.max(ratios)) if ratios.size else 0.0, ts, ratios)


def jensen_gap(k: KernelTable, u0: GridField, phi: Callable, t: float) -> float:
    """Largest ``Phi(S(t)mu) - S(t)Phi(mu)`` over cells, scaled by ``1 + |S(t)Phi(mu)|``.

    Nonpositive (up to roundoff) for convex Phi.
    """
    op = SemigroupOperator(k, u0.N, u0.L, u0.M)
    left = np.asarray(phi(op(u0, t).values), dtype=float)
    img = u0.with_values(np.asarray(phi(u0.values), dtype=float),
                         float(phi(np.array(u0.background))))
    right = op.apply_values(img.values, img.background, t)
    return float(np.max((left - right) / (1.0 + np.abs(right))))
