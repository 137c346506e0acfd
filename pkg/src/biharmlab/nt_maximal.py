"""Nontangential approach cones, the maximal operator and its near/far split.

Gamma(Q) = {Y in D : |Y - Q| <= a dist(Y, boundary)}, a = 1 + L/10, sampled
on a ladder of tilted rays times geometric heights.  Gamma_0 is the global
upward cone {(x, t) : t > slope |x|} with slope >= 100 max(L, 1).
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


# ---------------------------------------------------------- graph distance

@lru_cache(maxsize=16)
def _patch_tree(domain, delta):
    m, rho = domain.m, domain.rho
    k = int(np.ceil(rho / delta))
    ax = np.arange(-k, k + 1) * delta
    x = np.stack(np.meshgrid(*[ax] * m, indexing="ij"), -1).reshape(-1, m)
    x = x[np.linalg.norm(x, axis=1) <= rho + delta]
    P = np.concatenate([x, domain.phi(x)[:, None]], 1)
    return cKDTree(P), x


def graph_distance(domain, Y, delta=None, sweeps=4):
    """Euclidean distance from points Y to the graph of phi.

    Flat part |x| >= rho in closed form; the curved patch by nearest sample
    on a delta-lattice followed by shrinking local grid searches.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    y, t = Y[:, :-1], Y[:, -1]
    rho = domain.rho
    r = np.linalg.norm(y, axis=1)
    flat = np.where(r >= rho, np.abs(t), np.hypot(np.maximum(rho - r, 0.0), t))
    if domain.profile == "flat" or domain.amplitude == 0.0:
        return np.abs(t)
    m = domain.m
    delta = delta or rho / 20.0
    tree, xs = _patch_tree(domain, delta)
    best, j = tree.query(Y)
    xc = xs[j].copy()
    g1 = np.linspace(-1.0, 1.0, 5)
    offs = np.stack(np.meshgrid(*[g1] * m, indexing="ij"), -1).reshape(-1, m)
    rad = delta
    for _ in range(sweeps):
        cand = xc[:, None, :] + rad * offs[None]
        P = np.concatenate([cand, domain.phi(cand)[..., None]], -1)
        d = np.linalg.norm(P - Y[:, None, :], axis=-1)
        k = np.argmin(d, axis=1)
        xc = cand[np.arange(len(Y)), k]
        best = np.minimum(best, d[np.arange(len(Y)), k])
        rad *= 0.5
    return np.minimum(best, flat)


# ------------------------------------------------------------- cone specs

@dataclass
class ConeSpec:
    """Sample ladder for Gamma(Q): vertical ray plus rings of tilted rays.

    aperture a = 1 + L/10; tilts up to arccos(1/a) off vertical (the flat-case
    cone); heights geometric from t_min to T_max.
    """
    aperture: float
    T_max: float
    t_min: float
    n_heights: int = 24
    n_dirs: int = 8
    n_tilts: int = 2

    @classmethod
    def for_mesh(cls, mesh, T_max=None, t_min=None, **kw):
        L = mesh.domain.lipschitz_L
        T_max = 16.0 * mesh.domain.rho if T_max is None else T_max
        t_min = 3.0 * mesh.h if t_min is None else t_min
        return cls(1.0 + L / 10.0, T_max, t_min, **kw)

    def directions(self, m, seed=0):
        dirs = [np.eye(m + 1)[-1]]
        beta_max = np.arccos(1.0 / self.aperture) if self.aperture > 1 else 0.0
        if beta_max == 0.0:
            return np.array(dirs)
        rng = np.random.default_rng(seed)
        ring = rng.normal(size=(self.n_dirs, m))
        if m == 1:
            ring = np.array([[1.0], [-1.0]])
        elif m == 2:
            a = 2 * np.pi * np.arange(self.n_dirs) / self.n_dirs
            ring = np.stack([np.cos(a), np.sin(a)], 1)
        ring /= np.linalg.norm(ring, axis=1, keepdims=True)
        for b in beta_max * np.arange(1, self.n_tilts + 1) / self.n_tilts:
            dirs.extend(np.concatenate([np.sin(b) * ring, np.full((len(ring), 1), np.cos(b))], 1))
        return np.array(dirs)

    def heights(self):
        if self.n_heights < 1 or self.T_max <= self.t_min:
            raise ValueError("empty sample ladder")
        return np.geomspace(self.t_min, self.T_max, self.n_heights)


def cone_samples(mesh, idx, spec, check=True):
    """Ladder points for nodes idx: array (len(idx), S, n) and membership mask."""
    idx = np.atleast_1d(idx)
    dirs = spec.directions(mesh.m)
    ts = spec.heights()
    steps = (ts[:, None, None] * dirs[None]).reshape(-1, mesh.n)
    Y = mesh.nodes[idx][:, None, :] + steps[None]
    if not check:
        return Y, np.ones(Y.shape[:2], bool)
    flatY = Y.reshape(-1, mesh.n)
    dist = graph_distance(mesh.domain, flatY).reshape(Y.shape[:2])
    above = mesh.domain.inside(flatY).reshape(Y.shape[:2])
    reach = np.linalg.norm(steps, axis=1)[None]
    ok = above & (reach <= spec.aperture * dist * (1 + 1e-9) + 1e-12)
    return Y, ok


# -------------------------------------------------------------- maximal ops

@dataclass
class MaximalEval:
    nodes: np.ndarray
    M: np.ndarray
    M1: np.ndarray = None
    M2: np.ndarray = None
    gamma0_slope: float = None
    ladder: dict = field(default_factory=dict)


def _field_abs(field, Y):
    v = np.asarray(field(Y), dtype=float)
    if v.ndim > 1:
        v = np.sqrt(np.sum(v.reshape(len(Y), -1) ** 2, axis=1))
    return np.abs(v)


def _sampled(field, mesh, spec, idx):
    idx = np.arange(len(mesh)) if idx is None else np.atleast_1d(idx)
    Y, ok = cone_samples(mesh, idx, spec)
    vals = np.zeros(ok.shape)
    pts = Y[ok]
    if len(pts):
        vals[ok] = _field_abs(field, pts)
    return idx, Y, ok, vals


def nt_max(field, mesh, spec, idx=None):
    """Per-node sup of |field| over the sampled cone; returns MaximalEval."""
    idx, Y, ok, vals = _sampled(field, mesh, spec, idx)
    M = np.where(ok, vals, 0.0).max(axis=1)
    return MaximalEval(idx, M, ladder=_ladder_info(spec, ok))


def in_gamma0(Y, slope):
    Y = np.asarray(Y)
    return Y[..., -1] > slope * np.linalg.norm(Y[..., :-1], axis=-1)


def nt_max_split(field, mesh, spec, gamma0_slope=None, idx=None):
    """M1 = sup over Gamma(Q) inside Gamma_0, M2 = sup over the rest (empty sup = 0)."""
    floor = 100.0 * max(mesh.domain.lipschitz_L, 1.0)
    gamma0_slope = floor if gamma0_slope is None else gamma0_slope
    if gamma0_slope < floor:
        raise ValueError(f"gamma0_slope must be >= {floor}")
    idx, Y, ok, vals = _sampled(field, mesh, spec, idx)
    g0 = in_gamma0(Y, gamma0_slope)
    M1 = np.where(ok & g0, vals, 0.0).max(axis=1)
    M2 = np.where(ok & ~g0, vals, 0.0).max(axis=1)
    return MaximalEval(idx, np.maximum(M1, M2), M1, M2, gamma0_slope, _ladder_info(spec, ok))


def _ladder_info(spec, ok):
    return {"aperture": spec.aperture, "t_min": spec.t_min, "T_max": spec.T_max,
            "samples_per_node": int(ok.shape[1]), "mean_in_cone": float(ok.sum(1).mean())}


def region_Lp_norm(density, p, region, weights=None, mesh=None):
    """(sum_{i in region} |v_i|^p w_i)^(1/p); p < 1 gives a quasi-norm (logged)."""
    v = np.asarray(getattr(density, "values", density), dtype=float)
    mesh = mesh or getattr(density, "mesh", None)
    w = mesh.weights if weights is None else np.asarray(weights)
    region = np.asarray(region)
    if region.dtype == bool:
        region = np.flatnonzero(region)
    if len(region) == 0:
        log.warning("empty region; norm set to 0")
        return 0.0
    if p < 1:
        log.info("p=%g < 1: quasi-norm", p)
    if np.isinf(p):
        return float(np.abs(v[region]).max())
    return float(np.sum(np.abs(v[region]) ** p * w[region]) ** (1.0 / p))


def dump_maximal_csv(mesh, ev, path):
    n = mesh.m
    x = mesh.x[ev.nodes]
    M1 = ev.M1 if ev.M1 is not None else np.full(len(ev.M), np.nan)
    M2 = ev.M2 if ev.M2 is not None else np.full(len(ev.M), np.nan)
    data = np.concatenate([x, ev.M[:, None], M1[:, None], M2[:, None]], 1)
    cols = [f"x{k + 1}" for k in range(n)] + ["M", "M1", "M2"]
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="")
