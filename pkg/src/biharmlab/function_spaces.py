"""Discrete Littlewood-Paley analysis, Triebel-Lizorkin / Lorentz / Hardy norms,
H^1 atomic decomposition and the weighted Y / X norms on uniform grids in R^m."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class SpaceError(ValueError):
    pass


# ---------------------------------------------------------------- grids

@dataclass(frozen=True)
class GridFunction:
    """Cell-centred samples on a uniform box; values[i0,..] sits at origin + (i + 1/2) h."""
    values: np.ndarray
    h: float
    origin: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        o = tuple(float(t) for t in np.broadcast_to(self.origin, (v.ndim,)))
        object.__setattr__(self, "origin", o)
        if self.h <= 0:
            raise SpaceError("grid spacing must be positive")
        if not np.all(np.isfinite(v)):
            raise SpaceError("grid values must be finite")

    @property
    def m(self):
        return self.values.ndim

    @property
    def cell(self):
        return self.h ** self.m

    def axes(self):
        return [self.origin[k] + (np.arange(s) + 0.5) * self.h for k, s in enumerate(self.values.shape)]

    def coords(self):
        """Array of shape values.shape + (m,)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def like(self, values):
        return GridFunction(values, self.h, self.origin)

    def integral(self):
        return float(self.values.sum() * self.cell)

    def lp(self, p):
        return lp_norm(self.values, p, self.cell)

    def __add__(self, other):
        return self.like(self.values + other.values)

    def __mul__(self, c):
        return self.like(self.values * c)

    __rmul__ = __mul__


def grid_from_function(func, m, half_width, h):
    """Sample func (points (..., m) -> values) on the cube [-half_width, half_width]^m."""
    n = int(round(2 * half_width / h))
    g = GridFunction(np.zeros((n,) * m), h, (-half_width,) * m)
    return g.like(func(g.coords()))


def lp_norm(values, p, cell=1.0):
    a = np.abs(np.asarray(values, float)).ravel()
    if p == np.inf:
        return float(a.max(initial=0.0))
    if p <= 0:
        raise SpaceError("p must be positive")
    return float((np.sum(a ** p) * cell) ** (1.0 / p))


def write_csv(g, path):
    X = g.coords().reshape(-1, g.m)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(g.m)] + ["value"])
        for x, v in zip(X, g.values.ravel()):
            w.writerow([repr(float(t)) for t in x] + [repr(float(v))])


def read_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    X, v = data[:, :-1], data[:, -1]
    m = X.shape[1]
    axes = [np.unique(X[:, k]) for k in range(m)]
    h = float(np.min(np.diff(axes[0]))) if len(axes[0]) > 1 else 1.0
    shape = tuple(len(a) for a in axes)
    idx = tuple(np.rint((X[:, k] - axes[k][0]) / h).astype(int) for k in range(m))
    vals = np.zeros(shape)
    vals[idx] = v
    return GridFunction(vals, h, tuple(a[0] - h / 2 for a in axes))


def save_snapshot(g, path):
    np.savez_compressed(path, values=g.values, h=g.h, origin=np.asarray(g.origin))


def load_snapshot(path):
    z = np.load(path)
    return GridFunction(z["values"], float(z["h"]), tuple(z["origin"]))


# ---------------------------------------------------------------- partition of unity

def _smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def psi0(r):
    """Radial cutoff: 1 for |r| <= 1/2, 0 for |r| >= 1."""
    return 1.0 - _smooth_step(2.0 * np.abs(r) - 1.0)


@dataclass(frozen=True)
class LPPartition:
    """psi_0 and psi_j(r) = psi_0(2^-j r) - psi_0(2^-j+1 r), j >= 1."""
    J_max: int = 12

    def psi(self, j, r):
        r = np.abs(np.asarray(r, float))
        if j == 0:
            return psi0(r)
        return psi0(r * 2.0 ** -j) - psi0(r * 2.0 ** (1 - j))

    def tail(self, J, r):
        """1 - sum_{j<=J} psi_j = 1 - psi_0(2^-J r)."""
        return 1.0 - psi0(np.abs(r) * 2.0 ** -J)

    def weight(self, r, sigma, J=None):
        """sum_j psi_j(r) 2^{j sigma}, summed over every band that touches r."""
        r = np.abs(np.asarray(r, float))
        if sigma == 0:
            return np.ones_like(r)
        if J is None:
            J = max(1, int(np.ceil(np.log2(max(float(r.max(initial=1.0)), 1.0)))) + 2)
        out = np.zeros_like(r)
        for j in range(J + 1):
            out += self.psi(j, r) * 2.0 ** (j * sigma)
        return out


# ---------------------------------------------------------------- Littlewood-Paley projections

def _freq_radius(g):
    ks = [np.fft.fftfreq(s, d=g.h) for s in g.values.shape]
    K = np.meshgrid(*ks, indexing="ij", sparse=True)
    return np.sqrt(sum(k * k for k in K))


def max_band(g):
    """Largest j with 2^{j+1} at or below the grid's radial Nyquist frequency."""
    nyq = math.sqrt(g.m) / (2.0 * g.h)
    return int(math.floor(math.log2(nyq))) - 1


def lp_project(g, j, partition=None):
    """S_j f: Fourier multiplier psi_j(|xi|), xi in cycles per unit length."""
    if j < 0 or j > max_band(g):
        raise SpaceError(f"band {j} is not resolvable on a grid with spacing {g.h} "
                         f"(resolvable bands 0..{max_band(g)})")
    P = partition or LPPartition()
    F = np.fft.fftn(g.values)
    return g.like(np.real(np.fft.ifftn(F * P.psi(j, _freq_radius(g)))))


def lp_decompose(g, partition=None):
    """All resolvable bands plus the high-frequency remainder; the list sums to f exactly."""
    P = partition or LPPartition()
    J = max_band(g)
    F = np.fft.fftn(g.values)
    rho = _freq_radius(g)
    bands = [np.real(np.fft.ifftn(F * P.psi(j, rho))) for j in range(J + 1)]
    bands.append(np.real(np.fft.ifftn(F * P.tail(J, rho))))
    return [g.like(b) for b in bands]


def _check_exp(p, name="p", lo=1.0, allow_inf=False):
    if p is None or not np.isfinite(p) and not allow_inf or p < lo:
        raise SpaceError(f"invalid exponent {name}={p}")


def triebel_norm(g, s, p, q, lorentz_r=None, partition=None):
    """|| (sum_j (2^{js} |S_j f|)^q)^{1/q} ||_{L^p} (or L^{p,r} when lorentz_r is given).
    The remainder band beyond the grid is weighted with the next index."""
    _check_exp(p)
    _check_exp(q, "q")
    if not -2.0 <= s <= 2.0:
        raise SpaceError(f"smoothness s={s} outside [-2, 2]")
    bands = lp_decompose(g, partition)
    acc = np.zeros_like(g.values)
    for j, b in enumerate(bands):
        acc += (2.0 ** (j * s) * np.abs(b.values)) ** q
    F = acc ** (1.0 / q)
    if lorentz_r is None:
        return lp_norm(F, p, g.cell)
    return lorentz_norm(g.like(F), p, lorentz_r)


def hardy_norm(g, partition=None):
    """H^1 = F^0_{1,2}."""
    return triebel_norm(g, 0.0, 1.0, 2.0, partition=partition)


def lorentz_norm(g, p, r):
    """(int_0^inf (t^{1/p} f*(t))^r dt/t)^{1/r} from the decreasing rearrangement;
    r = inf gives sup_t t^{1/p} f*(t)."""
    if not (1.0 < p < np.inf):
        raise SpaceError(f"Lorentz p={p} must lie in (1, inf)")
    if not (r == np.inf or r >= 1.0):
        raise SpaceError(f"Lorentz r={r} must lie in [1, inf]")
    v = np.sort(np.abs(g.values).ravel())[::-1]
    T = np.arange(1, v.size + 1) * g.cell
    if r == np.inf:
        return float(np.max(v * T ** (1.0 / p), initial=0.0))
    e = r / p
    dT = T ** e - np.concatenate([[0.0], T[:-1]]) ** e
    return float((np.sum(v ** r * dT) * p / r) ** (1.0 / r))


# ---------------------------------------------------------------- atoms

def ball_volume(m, r):
    return math.pi ** (m / 2) * r ** m / math.gamma(m / 2 + 1)


@dataclass
class Atom:
    lam: float
    center: np.ndarray
    radius: float
    index: tuple          # tuple of slices into the (padded) grid
    values: np.ndarray    # normalized atom values on the slice

    @property
    def level(self):
        """Dyadic size index l with 2^l <= radius < 2^{l+1}."""
        return int(math.floor(math.log2(self.radius)))


def check_atom(atom, g, tol=1e-9):
    """The three atom conditions: support in the ball, zero mean, sup bound."""
    axes = [ax[sl] for ax, sl in zip(g.axes(), atom.index)]
    sub = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    d = np.linalg.norm(sub - atom.center, axis=-1)
    nz = np.abs(atom.values) > 0
    bound = 1.0 / ball_volume(g.m, atom.radius)
    scale = np.max(np.abs(atom.values), initial=0.0) * atom.values.size * g.cell
    return {
        "support": bool(np.all(d[nz] <= atom.radius * (1 + tol))),
        "mean_zero": bool(abs(atom.values.sum() * g.cell) <= tol * max(scale, 1e-300)),
        "size": bool(np.max(np.abs(atom.values), initial=0.0) <= bound * (1 + tol)),
    }


@dataclass
class AtomicDecomposition:
    grid: GridFunction
    atoms: list = field(default_factory=list)
    residual: float = 0.0

    def reconstruct(self):
        out = np.zeros_like(self.grid.values)
        for a in self.atoms:
            out[a.index] += a.lam * a.values
        return self.grid.like(out)

    def coefficient_sum(self):
        return float(sum(abs(a.lam) for a in self.atoms))

    def all_valid(self, tol=1e-9):
        return all(all(check_atom(a, self.grid, tol).values()) for a in self.atoms)

    def split(self, size=0.1):
        """(small, large): atoms with support radius below / at least `size`."""
        small = [a for a in self.atoms if a.radius < size]
        return small, [a for a in self.atoms if a.radius >= size]


def _support_ball(g, mask):
    idx = np.nonzero(mask)
    lo = np.array([np.min(i) for i in idx])
    hi = np.array([np.max(i) for i in idx]) + 1
    org = np.asarray(g.origin)
    a, b = org + lo * g.h, org + hi * g.h
    return (a + b) / 2, float(np.linalg.norm(b - a) / 2), tuple(slice(x, y) for x, y in zip(lo, hi))


def _pad_pow2(g):
    shape = g.values.shape
    n = 1 << max(int(math.ceil(math.log2(max(shape)))), 0)
    v = np.zeros((n,) * g.m)
    v[tuple(slice(0, s) for s in shape)] = g.values
    return g.like(v)


def atomic_decompose(g, mean_tol=1e-10, shortcut=True):
    """Dyadic martingale-difference decomposition into L^inf-normalized H^1 atoms.

    f = sum_k (E_k f - E_{k+1} f) with E_k the average over dyadic cubes of 2^k cells;
    each difference restricted to a level-(k+1) cube has zero mean there and becomes
    one atom on the ball circumscribing the cube."""
    scale = max(np.abs(g.values).sum() * g.cell, 1e-300)
    if abs(g.integral()) > mean_tol * scale:
        raise SpaceError(f"integral {g.integral():.3e} is not zero: not a sum of atoms")
    if shortcut and np.any(g.values):
        z, r, sl = _support_ball(g, g.values != 0)
        lam = float(np.max(np.abs(g.values)) * ball_volume(g.m, r))
        if lam <= 1.0 + 1e-12:
            atom = Atom(lam, z, r, sl, g.values[sl] / lam)
            return AtomicDecomposition(g, [atom], 0.0)
    G = _pad_pow2(g)
    m, n = G.m, G.values.shape[0]
    levels = int(math.log2(n))
    org = np.asarray(G.origin)
    atoms = []
    E = G.values.copy()
    for k in range(levels):
        side = 1 << (k + 1)
        nb = n // side
        # averages over level-(k+1) cubes
        blk = E.reshape(sum(((nb, side) for _ in range(m)), ()))
        mean_axes = tuple(range(1, 2 * m, 2))
        Enext = blk.mean(axis=mean_axes, keepdims=True)
        D = blk - Enext
        D -= D.mean(axis=mean_axes, keepdims=True)   # exact zero mean at the scale of D
        Dm = np.moveaxis(D, mean_axes, tuple(range(m, 2 * m)))
        sup = np.max(np.abs(Dm).reshape((nb,) * m + (-1,)), axis=-1)
        r = math.sqrt(m) * side * G.h / 2
        vol = ball_volume(m, r)
        for cube in zip(*np.nonzero(sup > 1e-15 * max(sup.max(), 1e-300))):
            lam = float(sup[cube] * vol)
            sl = tuple(slice(c * side, (c + 1) * side) for c in cube)
            z = org + (np.array(cube) + 0.5) * side * G.h
            atoms.append(Atom(lam, z, r, sl, Dm[cube] / lam))
        E = np.broadcast_to(Enext, blk.shape).reshape((n,) * m)
    dec = AtomicDecomposition(G, atoms)
    err = dec.reconstruct().values - G.values
    dec.residual = lp_norm(err, 2, G.cell)
    return dec


# ---------------------------------------------------------------- weighted X / Y norms

def center_sequence(m, max_level=2, radius=2.0):
    """Dyadic rationals in the closed ball |a| <= radius, by increasing denominator."""
    seen, out = set(), []
    for d in range(max_level + 1):
        step = 2.0 ** -d
        k = int(radius / step)
        rng = np.arange(-k, k + 1)
        pts = np.stack(np.meshgrid(*([rng] * m), indexing="ij"), -1).reshape(-1, m)
        pts = pts[np.linalg.norm(pts * step, axis=1) <= radius + 1e-12]
        for p in pts:
            key = tuple(int(t) for t in p * (1 << (max_level - d)))
            if key not in seen:
                seen.add(key)
                out.append(p * step)
    return np.array(out)


@dataclass
class XNormSpec:
    sigma: float
    p: float
    n: int | None = None
    max_level: int = 2
    slack: float = 0.3

    def __post_init__(self):
        _check_exp(self.p)
        if self.n is not None:
            lo = -(self.n - 3) / 2 - self.slack
            if not (lo < self.sigma <= 1 + self.slack):
                raise SpaceError(f"sigma={self.sigma} outside ({lo}, {1 + self.slack}] for n={self.n}")

    def centers(self, m):
        return center_sequence(m, self.max_level)


def y_term(f, l, a, sigma, p, partition=None):
    """|| f(x) sum_j psi_j(2^-l |x - a|) 2^{j sigma} ||_{L^p}."""
    return y_term_nodes(f.values.ravel(), f.coords().reshape(-1, f.m),
                        np.full(f.values.size, f.cell), l, a, sigma, p, partition)


def y_term_nodes(values, x, weights, l, a, sigma, p, partition=None):
    """The same Y-term for scattered nodes x with quadrature weights."""
    if l > 0:
        raise SpaceError(f"scale index l={l} must be <= 0")
    P = partition or LPPartition()
    r = np.linalg.norm(np.asarray(x) - np.asarray(a), axis=-1) * 2.0 ** -l
    v = np.abs(np.asarray(values) * P.weight(r, sigma))
    w = np.asarray(weights)
    if p == np.inf:
        return float(v.max(initial=0.0))
    return float(np.sum(v ** p * w) ** (1.0 / p))


def x_norm_upper(spec, parts=None, f=None, partition=None):
    """Y-sum of a given decomposition {(l, m): f_lm}, or of the canonical single-term
    decomposition of f (l = 0, centre nearest the support centroid).  Either way an
    upper bound for the quotient norm."""
    if (parts is None) == (f is None):
        raise SpaceError("give exactly one of parts or f")
    if parts is None:
        m = f.m
        C = spec.centers(m)
        w = np.abs(f.values)
        if not w.any():
            return 0.0
        cen = (f.coords() * w[..., None]).reshape(-1, m).sum(0) / w.sum()
        mi = int(np.argmin(np.linalg.norm(C - cen, axis=1)))
        parts = {(0, mi): f}
    total = 0.0
    for (l, mi), g in parts.items():
        C = spec.centers(g.m)
        if not 0 <= mi < len(C):
            raise SpaceError(f"centre index {mi} not enumerated (have {len(C)})")
        total += y_term(g, l, C[mi], spec.sigma, spec.p, partition)
    return total


# ---------------------------------------------------------------- exponent algebra

def exponent_algebra(p1, s1, p2, s2, theta):
    """Exact interpolation exponents: 1/p = (1-t)/p1 + t/p2, sigma = (1-t) s1 + t s2."""
    t = Fraction(theta)
    if not 0 < t < 1:
        raise SpaceError(f"theta={theta} must lie in (0, 1)")
    p1, p2, s1, s2 = (Fraction(x) for x in (p1, p2, s1, s2))
    inv = (1 - t) / p1 + t / p2
    return 1 / inv, (1 - t) * s1 + t * s2


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("annotations",)]
