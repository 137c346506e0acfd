"""Lipschitz graph domains D = {(x, t) : t > phi(x)} and their boundary meshes.

Points of R^n are stored as arrays (..., n) with the last coordinate vertical.
The boundary is parametrized by x in R^{m}, m = n - 1, sampled on a uniform
lattice.  An optional dyadic grading doubles the lattice spacing in every
shell beyond a core radius, which keeps the far flat part cheap.
"""
import configparser
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

PROFILES = ("flat", "bump", "cone", "tent")
# the tent's outer kink sits at |x|_1 = TENT_EDGE * rho, off the dyadic lattices
TENT_EDGE = 0.93


def _bump_s(r):
    # C^2 bump on [0, 1]: (1 - r^2)^3
    return np.where(r < 1.0, (1.0 - np.minimum(r, 1.0) ** 2) ** 3, 0.0)


@dataclass(frozen=True)
class GraphDomain:
    """Graph domain with a compactly supported profile.

    profile: "flat" (phi = 0), "bump" (c * s(|x|/rho), s a C^2 bump),
    "cone" (c * (rho - |x|)_+), "tent" (c * (0.93 rho - |x|_1)_+, kinked along
    the coordinate hyperplanes).
    """
    n: int
    profile: str = "flat"
    amplitude: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {PROFILES}")
        if self.rho <= 0:
            raise ValueError("support radius must be positive")

    @property
    def m(self):
        return self.n - 1

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        c, rho = self.amplitude, self.rho
        if self.profile == "flat" or c == 0.0:
            return np.zeros(x.shape[:-1])
        r = np.linalg.norm(x, axis=-1)
        if self.profile == "bump":
            return c * _bump_s(r / rho)
        if self.profile == "cone":
            return c * np.maximum(rho - r, 0.0)
        return c * np.maximum(TENT_EDGE * rho - np.abs(x).sum(axis=-1), 0.0)

    def grad_phi_exact(self, x):
        """Analytic gradient (one-sided choice at kinks); used for checks only."""
        x = np.asarray(x, dtype=float)
        c, rho = self.amplitude, self.rho
        g = np.zeros_like(x)
        if self.profile == "flat" or c == 0.0:
            return g
        r = np.linalg.norm(x, axis=-1)
        rs = np.where(r > 0, r, 1.0)
        if self.profile == "bump":
            u = r / rho
            ds = np.where(u < 1, -6.0 * u * (1 - u * u) ** 2, 0.0)
            return (c * ds / rho / rs)[..., None] * x
        if self.profile == "cone":
            return np.where((r < rho)[..., None], -c * x / rs[..., None], 0.0)
        inside = np.abs(x).sum(axis=-1) < TENT_EDGE * rho
        return np.where(inside[..., None], -c * np.sign(x), 0.0)

    @property
    def lipschitz_L(self):
        c = abs(self.amplitude)
        if self.profile == "flat" or c == 0.0:
            return 0.0
        if self.profile == "bump":
            u = 1.0 / np.sqrt(5.0)
            return c * 6.0 * u * (1 - u * u) ** 2 / self.rho
        if self.profile == "cone":
            return c
        return c * np.sqrt(self.m)

    @property
    def phi_max(self):
        if self.profile == "flat":
            return 0.0
        if self.profile == "bump":
            return max(self.amplitude, 0.0)
        return max(self.amplitude * self.rho * (TENT_EDGE if self.profile == "tent" else 1.0), 0.0)

    @property
    def phi_min(self):
        if self.profile == "flat":
            return 0.0
        if self.profile == "bump":
            return min(self.amplitude, 0.0)
        return min(self.amplitude * self.rho * (TENT_EDGE if self.profile == "tent" else 1.0), 0.0)

    def inside(self, X):
        X = np.asarray(X, dtype=float)
        return X[..., -1] > self.phi(X[..., :-1])


def _lattice(m, h, rmax):
    # cell-centred: nodes at (i + 1/2) h, so no node sits on a coordinate plane
    k = int(np.floor(rmax / h + 1e-9)) + 1
    axes = [(np.arange(-k, k) + 0.5) * h] * m
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m)
    return pts


@dataclass(eq=False)
class BoundaryMesh:
    domain: GraphDomain
    x: np.ndarray          # (N, m) parameter points
    spacing: np.ndarray    # (N,) local lattice spacing
    cell_fraction: np.ndarray
    h: float
    R_trunc: float
    core_radius: float = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.domain.n

    @property
    def m(self):
        return self.domain.m

    def __len__(self):
        return len(self.x)

    @cached_property
    def phi(self):
        return self.domain.phi(self.x)

    @cached_property
    def nodes(self):
        return np.concatenate([self.x, self.phi[:, None]], axis=1)

    @cached_property
    def grad_phi(self):
        """Centered differences of phi with step spacing/4; zero outside rho.

        Nodes are cell centres, so a quarter-cell step never straddles a kink
        lying on a cell face.
        """
        d = self.domain
        g = np.zeros_like(self.x)
        if d.profile == "flat" or d.amplitude == 0.0:
            return g
        hs = 0.25 * self.spacing
        for j in range(self.m):
            e = np.zeros(self.m)
            e[j] = 1.0
            g[:, j] = (d.phi(self.x + hs[:, None] * e) - d.phi(self.x - hs[:, None] * e)) / (2 * hs)
        g[np.linalg.norm(self.x, axis=1) >= d.rho] = 0.0
        return g

    @cached_property
    def area_factor(self):
        return np.sqrt(1.0 + np.sum(self.grad_phi ** 2, axis=1))

    @cached_property
    def weights(self):
        return self.spacing ** self.m * self.cell_fraction * self.area_factor

    @cached_property
    def normals(self):
        N = np.concatenate([self.grad_phi, -np.ones((len(self), 1))], axis=1)
        return N / self.area_factor[:, None]

    @cached_property
    def tangents(self):
        """(N, m, n) array, T_j = e_j + (d phi / d x_j) e_n."""
        T = np.zeros((len(self), self.m, self.n))
        T[:, :, :self.m] = np.eye(self.m)
        T[:, :, -1] = self.grad_phi
        return T

    @cached_property
    def metric_inv(self):
        """Inverse of g_ab = delta_ab + phi_a phi_b, per node."""
        gp = self.grad_phi
        return np.eye(self.m)[None] - gp[:, :, None] * gp[:, None, :] / (self.area_factor ** 2)[:, None, None]

    @cached_property
    def tree(self):
        return cKDTree(self.x)

    @cached_property
    def diff_matrices(self):
        """Sparse D_a, a < m: derivative of the pullback in the x_a direction."""
        return _diff_matrices(self)

    @cached_property
    def surface_grad_matrices(self):
        """Sparse G_k, k < n: k-th ambient component of the surface gradient."""
        coef = np.einsum("iab,ibk->iak", self.metric_inv, self.tangents)  # (N, m, n)
        out = []
        for k in range(self.n):
            M = None
            for a in range(self.m):
                term = sp.diags(coef[:, a, k]) @ self.diff_matrices[a]
                M = term if M is None else M + term
            out.append(sp.csr_matrix(M))
        return out

    def tau(self, j, k):
        """Tangential operator N^j d_k - N^k d_j (0-based ambient indices)."""
        N = self.normals
        Gs = self.surface_grad_matrices
        return sp.csr_matrix(sp.diags(N[:, j]) @ Gs[k] - sp.diags(N[:, k]) @ Gs[j])

    def radius(self):
        return np.linalg.norm(self.x, axis=1)

    def integrate(self, f):
        return float(np.sum(np.asarray(f) * self.weights))

    def describe(self):
        return {"n": self.n, "profile": self.domain.profile, "amplitude": self.domain.amplitude,
                "rho": self.domain.rho, "h": self.h, "R_trunc": self.R_trunc,
                "core_radius": self.core_radius, "nodes": len(self)}


def _diff_matrices(mesh):
    x, hs = mesh.x, mesh.spacing
    N, m = x.shape
    tree = mesh.tree
    mats = []
    # exact centred differences where both axis neighbours at the node's spacing exist
    for a in range(m):
        e = np.zeros(m)
        e[a] = 1.0
        dp, ip = tree.query(x + hs[:, None] * e)
        dm, im = tree.query(x - hs[:, None] * e)
        ok = (dp < 1e-6 * hs) & (dm < 1e-6 * hs)
        rows = np.repeat(np.flatnonzero(ok), 2)
        cols = np.stack([ip[ok], im[ok]], axis=1).ravel()
        vals = np.stack([1 / (2 * hs[ok]), -1 / (2 * hs[ok])], axis=1).ravel()
        mats.append([rows, cols, vals, ok])
    # least-squares linear fit elsewhere
    bad = np.flatnonzero(~np.all(np.stack([mt[3] for mt in mats]), axis=0))
    extra = [[[], [], []] for _ in range(m)]
    for i in bad:
        nb = tree.query_ball_point(x[i], 2.05 * hs[i])
        nb = [k for k in nb if k != i]
        rad = 2.05 * hs[i]
        while len(nb) < m + 1:
            rad *= 1.5
            nb = [k for k in tree.query_ball_point(x[i], rad) if k != i]
        dx = x[nb] - x[i]
        w = 1.0 / np.sum(dx ** 2, axis=1)
        A = dx * np.sqrt(w)[:, None]
        pinv = np.linalg.pinv(A) * np.sqrt(w)[None, :]  # (m, k): grad = pinv @ (f_nb - f_i)
        for a in range(m):
            if mats[a][3][i]:
                continue
            extra[a][0] += [i] * (len(nb) + 1)
            extra[a][1] += list(nb) + [i]
            extra[a][2] += list(pinv[a]) + [-pinv[a].sum()]
    out = []
    for a in range(m):
        r = np.concatenate([mats[a][0], np.asarray(extra[a][0], dtype=int)])
        c = np.concatenate([mats[a][1], np.asarray(extra[a][1], dtype=int)])
        v = np.concatenate([mats[a][2], np.asarray(extra[a][2], dtype=float)])
        out.append(sp.csr_matrix((v, (r, c)), shape=(N, N)))
    return out


def build_mesh(domain, h, R_trunc, core_radius=None):
    """Uniform lattice of spacing h over |x| <= R_trunc.

    With core_radius set, the spacing is h for |x| <= core_radius and doubles
    in every dyadic shell (core_radius 2^{s-1}, core_radius 2^s].
    """
    if not h > 0:
        raise ValueError("mesh spacing h must be positive")
    if R_trunc < domain.rho:
        raise ValueError(f"R_trunc={R_trunc} cuts the graph support rho={domain.rho}")
    if R_trunc < 4 * domain.rho:
        log.warning("R_trunc=%g below the recommended 4*rho=%g", R_trunc, 4 * domain.rho)
    m = domain.m
    if core_radius is None or core_radius >= R_trunc:
        x = _lattice(m, h, R_trunc)
        x = x[np.linalg.norm(x, axis=1) <= R_trunc + 1e-12]
        return BoundaryMesh(domain, x, np.full(len(x), h), np.ones(len(x)), h, R_trunc)
    if core_radius < domain.rho:
        raise ValueError("core_radius must contain the graph support")
    from math import gamma, pi
    ball = pi ** (m / 2) / gamma(m / 2 + 1)  # volume of the unit m-ball
    xs, hs, fr = [], [], []
    rlo, rhi, hcur = 0.0, core_radius, h
    while rlo < R_trunc:
        rhi = min(rhi, R_trunc)
        pts = _lattice(m, hcur, rhi)
        r = np.linalg.norm(pts, axis=1)
        pts = pts[(r > rlo) & (r <= rhi + 1e-12)] if rlo > 0 else pts[r <= rhi + 1e-12]
        # rescale the shell so its cells carry the exact annulus measure
        exact = ball * (rhi ** m - rlo ** m)
        frac = exact / (len(pts) * hcur ** m) if rlo > 0 else 1.0
        xs.append(pts); hs.append(np.full(len(pts), hcur)); fr.append(np.full(len(pts), frac))
        rlo, rhi, hcur = rhi, 2 * rhi, 2 * hcur
    x = np.concatenate(xs)
    return BoundaryMesh(domain, x, np.concatenate(hs), np.concatenate(fr), h, R_trunc, core_radius)


def tangential_derivative(mesh, f, j):
    """Derivative along T_j of f, i.e. d/dx_j of f(x, phi(x)); j is 1-based."""
    if not 1 <= j <= mesh.m:
        raise IndexError(f"tangent direction j must be in 1..{mesh.m}, got {j}")
    return mesh.diff_matrices[j - 1] @ np.asarray(getattr(f, "values", f), dtype=float)


def annulus_nodes(mesh, j):
    """Indices with 2^{j-1} < |x| <= 2^{j+1}."""
    if 2.0 ** (j + 1) > mesh.R_trunc + 1e-12:
        raise ValueError(f"annulus j={j} needs R_trunc >= {2.0 ** (j + 1)}, mesh has {mesh.R_trunc}")
    r = mesh.radius()
    return np.flatnonzero((r > 2.0 ** (j - 1)) & (r <= 2.0 ** (j + 1)))


def read_domain_config(path_or_text):
    """Parse 'key = value' lines: dim, profile, amplitude, rho, h, R_trunc, core_radius."""
    text = path_or_text
    if "\n" not in text and "=" not in text:
        with open(text) as fh:
            text = fh.read()
    cp = configparser.ConfigParser()
    cp.read_string("[domain]\n" + text)
    s = cp["domain"]
    dom = GraphDomain(n=s.getint("dim"), profile=s.get("profile", "flat"),
                      amplitude=s.getfloat("amplitude", 0.0), rho=s.getfloat("rho", 1.0))
    params = {"h": s.getfloat("h", 0.25), "R_trunc": s.getfloat("R_trunc", 4 * dom.rho)}
    if "core_radius" in s:
        params["core_radius"] = s.getfloat("core_radius")
    return dom, params


def dump_mesh_csv(mesh, path):
    n = mesh.n
    cols = [f"X{k + 1}" for k in range(n)] + ["weight"] + [f"N{k + 1}" for k in range(n)]
    data = np.concatenate([mesh.nodes, mesh.weights[:, None], mesh.normals], axis=1)
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="")
