"""Single and double layer potentials on a boundary mesh.

Conventions (G > 0, Lap G = -delta, N the outward unit normal pointing below
the graph):

    S f(X)  = int G(X - P) f(P) dsigma(P)
    D f(X)  = int <N_P, grad G(X - P)> f(P) dsigma(P)      (D 1 = 1/2 in D)
    K f(Q)  = p.v. int <N_P, grad G(Q - P)> f(P) dsigma(P)
    K* f(Q) = p.v. int <N_Q, grad G(Q - P)> f(P) dsigma(P)

Jump relations:  D f_(+/-) = +/- f/2 + K f,   dS f/dN_(+/-) = +/- f/2 + K* f,
grad S f_(+/-) = +/- f N / 2 + p.v. int grad G(Q - P) f(P) dsigma(P).
Here + is the limit from D.  With this reading, <K f, g> = -<f, K* g>.
"""
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .kernels import kernel_table

log = logging.getLogger(__name__)

CHUNK_BYTES = 64 * 2 ** 20


def _values(f):
    return np.asarray(getattr(f, "values", f), dtype=float)


@dataclass
class BoundaryDensity:
    mesh: object
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.mesh),):
            raise ValueError("density must have one value per mesh node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density has non-finite values")

    def lp_norm(self, p=2.0):
        w = self.mesh.weights
        if np.isinf(p):
            return float(np.abs(self.values).max())
        return float(np.sum(np.abs(self.values) ** p * w) ** (1.0 / p))


def inner(mesh, f, g):
    return float(np.sum(_values(f) * _values(g) * mesh.weights))


def _row_chunks(nt, ns, width):
    step = max(1, int(CHUNK_BYTES // (8 * max(ns, 1) * max(width, 1))))
    for i0 in range(0, nt, step):
        yield i0, min(nt, i0 + step)


# ---------------------------------------------------------------- self cells

def _outer_subcell_offsets(m, sub):
    """Midpoint points of the 3^m - 1 outer subcubes of [-1/2, 1/2]^m."""
    g1 = (np.arange(sub) + 0.5) / (3 * sub) - 1.0 / 6.0
    base = np.stack(np.meshgrid(*[g1] * m, indexing="ij"), axis=-1).reshape(-1, m)
    shifts = np.stack(np.meshgrid(*[np.array([-1.0, 0.0, 1.0]) / 3.0] * m, indexing="ij"), axis=-1).reshape(-1, m)
    shifts = shifts[np.any(shifts != 0, axis=1)]
    pts = (shifts[:, None, :] + base[None]).reshape(-1, m)
    return pts, (1.0 / (3 * sub)) ** m


def self_cell_integrals(mesh, func, degree, sub=4):
    """int_cell func(Y - Q) dsigma(Y) for every node, cell mapped to the tangent plane.

    func maps (..., n) displacements to (..., c) values and must be homogeneous
    of the given degree (> -m); the central subcube is eliminated by scaling.
    """
    m = mesh.m
    if degree <= -m:
        raise ValueError("kernel not integrable on a cell")
    pts, w = _outer_subcell_offsets(m, sub)
    T = mesh.tangents  # (N, m, n)
    disp = np.einsum("qa,ian->iqn", pts, T)  # unit cell
    vals = func(disp)  # (N, q, ...) on the unit cell
    unit = vals.sum(axis=1) * w / (1.0 - 3.0 ** (-(m + degree)))
    scale = mesh.spacing ** (m + degree) * mesh.area_factor * mesh.cell_fraction
    return unit * scale.reshape((-1,) + (1,) * (unit.ndim - 1))


def neighbour_pairs(mesh, K=2):
    """(i, j) pairs of distinct same-spacing nodes with |x_i - x_j|_inf <= K spacing.

    Pairs across shell interfaces are left to the midpoint rule: the shells'
    lattices are not nested, so the cells there do not tile.
    """
    key = ("_nbr", K)
    if key not in mesh.meta:
        hs = mesh.spacing
        nb = mesh.tree.query_ball_point(mesh.x, (K + 0.01) * np.sqrt(mesh.m) * hs)
        ii = np.repeat(np.arange(len(mesh)), [len(b) for b in nb])
        jj = np.concatenate([np.asarray(b, dtype=int) for b in nb])
        ok = ((ii != jj) & np.isclose(hs[ii], hs[jj])
              & (np.abs(mesh.x[ii] - mesh.x[jj]).max(axis=1) <= (K + 0.01) * hs[ii]))
        mesh.meta[key] = (ii[ok], jj[ok])
    return mesh.meta[key]


def neighbour_cell_integrals(mesh, func, K=2, sub=6):
    """int over cell j of func(Q_i - P) dsigma(P) for neighbour pairs, on the exact graph.

    func maps (..., n) displacements to (..., c).  Returns (ii, jj, values).
    """
    ii, jj = neighbour_pairs(mesh, K)
    m = mesh.m
    g1 = (np.arange(sub) + 0.5) / sub - 0.5
    offs = np.stack(np.meshgrid(*[g1] * m, indexing="ij"), -1).reshape(-1, m)
    d = mesh.domain
    out = []
    step = max(1, int(2 ** 22 // len(offs)))
    for a in range(0, len(ii), step):
        i, j = ii[a:a + step], jj[a:a + step]
        hs = mesh.spacing[j]
        x = mesh.x[j][:, None, :] + hs[:, None, None] * offs[None]
        gp = d.grad_phi_exact(x)
        P = np.concatenate([x, d.phi(x)[..., None]], -1)
        w = (hs / sub) ** m * mesh.cell_fraction[j]
        w = w[:, None] * np.sqrt(1.0 + np.sum(gp ** 2, -1))
        v = func(mesh.nodes[i][:, None, :] - P)
        out.append(np.einsum("pq,pq...->p...", w, v))
    return ii, jj, np.concatenate(out)


# ----------------------------------------------------------- boundary ops

def single_layer_matrix(mesh, sources=None):
    kt = kernel_table(mesh.n)
    Q, w = mesh.nodes, mesh.weights
    N = len(Q)
    A = np.empty((N, N))
    for i0, i1 in _row_chunks(N, N, mesh.n):
        d = Q[i0:i1, None, :] - Q[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        idx = np.arange(i0, i1)
        r2[idx - i0, idx] = 1.0
        A[i0:i1] = kt.G.value_r2(r2) * w
        A[idx, idx] = 0.0
    if mesh.n == 2:
        diag = _log_self_cell(mesh)
    else:
        diag = self_cell_integrals(mesh, lambda d: kt.G(d), 2.0 - mesh.n)
        # neighbouring cells: the kernel is too peaked for the midpoint rule
        ii, jj, v = neighbour_cell_integrals(mesh, lambda d: kt.G(d))
        A[ii, jj] = v
    A[np.arange(N), np.arange(N)] = diag
    return A


def _log_self_cell(mesh):
    # n = 2: int_{-a}^{a} -log(c|s|)/(2 pi) ds, a = h/2 along the tangent of length c
    a = 0.5 * mesh.spacing
    c = mesh.area_factor
    return -(2 * a * (np.log(c * a) - 1.0)) / (2 * np.pi) * c * mesh.cell_fraction


def grad_single_layer_matrix(mesh, k, rows=None, corrected=True):
    """p.v. matrix of d_k G(Q_i - P_j) w_j (self cell replaced by -d_i N_i^k)."""
    kt = kernel_table(mesh.n)
    Q, w = mesh.nodes, mesh.weights
    rows = np.arange(len(Q)) if rows is None else np.asarray(rows)
    A = np.empty((len(rows), len(Q)))
    for i0, i1 in _row_chunks(len(rows), len(Q), mesh.n):
        r = rows[i0:i1]
        d = Q[r, None, :] - Q[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r2[np.arange(i1 - i0), r] = 1.0
        (a1,) = kt.G.coeffs_r2(r2, 1)
        A[i0:i1] = a1 * d[..., k] * w
        A[np.arange(i0, i1), r] = 0.0
    if corrected:
        A[np.arange(len(rows)), rows] = -double_layer_defect(mesh, rows) * mesh.normals[rows, k]
    return A


def double_layer_matrix(mesh, rows=None, corrected=True):
    """K[i, j] = <N_j, grad G(Q_i - P_j)> w_j, punctured (plus the defect diagonal)."""
    kt = kernel_table(mesh.n)
    Q, w, Nn = mesh.nodes, mesh.weights, mesh.normals
    rows = np.arange(len(Q)) if rows is None else np.asarray(rows)
    A = np.empty((len(rows), len(Q)))
    for i0, i1 in _row_chunks(len(rows), len(Q), mesh.n):
        r = rows[i0:i1]
        d = Q[r, None, :] - Q[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r2[np.arange(i1 - i0), r] = 1.0
        (a1,) = kt.G.coeffs_r2(r2, 1)
        A[i0:i1] = a1 * np.einsum("ijk,jk->ij", d, Nn) * w
        A[np.arange(i0, i1), r] = 0.0
    if corrected:
        A[np.arange(len(rows)), rows] = double_layer_defect(mesh, rows)
    return A


def adjoint_double_layer_matrix(mesh, rows=None, corrected=True):
    """K*[i, j] = <N_i, grad G(Q_i - P_j)> w_j, punctured (minus the defect diagonal)."""
    kt = kernel_table(mesh.n)
    Q, w, Nn = mesh.nodes, mesh.weights, mesh.normals
    rows = np.arange(len(Q)) if rows is None else np.asarray(rows)
    A = np.empty((len(rows), len(Q)))
    for i0, i1 in _row_chunks(len(rows), len(Q), mesh.n):
        r = rows[i0:i1]
        d = Q[r, None, :] - Q[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r2[np.arange(i1 - i0), r] = 1.0
        (a1,) = kt.G.coeffs_r2(r2, 1)
        A[i0:i1] = a1 * np.einsum("ijk,ik->ij", d, Nn[r]) * w
        A[np.arange(i0, i1), r] = 0.0
    if corrected:
        A[np.arange(len(rows)), rows] = -double_layer_defect(mesh, rows)
    return A


def double_layer_defect(mesh, rows=None):
    """Diagonal correction d_i = K1(Q_i) - sum_j K_ij for the punctured K rows.

    K applied to 1 is known exactly (minus the flux through the flat exterior
    beyond R_trunc), so adding d_i on the diagonal is singularity subtraction:
    K g(Q_i) ~ sum_j K_ij (g_j - g_i) + g_i K1(Q_i).  K* and grad S share the
    defect with the opposite sign along N_Q, since K*(Q, P) = -K(P, Q).
    """
    kt = kernel_table(mesh.n)
    Q, w, Nn = mesh.nodes, mesh.weights, mesh.normals
    rows = np.arange(len(Q)) if rows is None else np.asarray(rows)
    full = len(rows) == len(Q)
    cache = mesh.meta.setdefault("_defect", None) if full else None
    if cache is not None:
        return cache
    rs = np.empty(len(rows))
    for i0, i1 in _row_chunks(len(rows), len(Q), mesh.n):
        r = rows[i0:i1]
        d = Q[r, None, :] - Q[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r2[np.arange(i1 - i0), r] = 1.0
        (a1,) = kt.G.coeffs_r2(r2, 1)
        A = a1 * np.einsum("ijk,jk->ij", d, Nn) * w
        A[np.arange(i1 - i0), r] = 0.0
        rs[i0:i1] = A.sum(1)
    out = -flat_exterior_flux(Q[rows], mesh.R_trunc, mesh.n) - rs
    if full:
        mesh.meta["_defect"] = out
    return out


@dataclass
class LayerOperator:
    kind: str
    side: str
    matrix: np.ndarray
    mesh: object

    def __call__(self, f):
        return self.matrix @ _values(f)


def assemble(mesh, kind, side=None):
    """kind in {S, K, Kstar, DnS, gradS}; side '+' (from D) or '-' for K, Kstar, DnS."""
    N = len(mesh)
    half = {"+": 0.5, "-": -0.5, None: 0.0}[side]
    if kind == "S":
        return LayerOperator(kind, side, single_layer_matrix(mesh), mesh)
    if kind == "K":
        A = double_layer_matrix(mesh)
        A[np.arange(N), np.arange(N)] += half
        return LayerOperator(kind, side, A, mesh)
    if kind == "Kstar":
        A = adjoint_double_layer_matrix(mesh)
        A[np.arange(N), np.arange(N)] += half
        return LayerOperator(kind, side, A, mesh)
    if kind == "DnS":
        A = grad_single_layer_matrix(mesh, mesh.n - 1)
        A[np.arange(N), np.arange(N)] += half * mesh.normals[:, -1]
        return LayerOperator(kind, side, A, mesh)
    if kind == "gradS":
        A = np.stack([grad_single_layer_matrix(mesh, k) for k in range(mesh.n)])
        if side is not None:
            for k in range(mesh.n):
                A[k][np.arange(N), np.arange(N)] += half * mesh.normals[:, k]
        return LayerOperator(kind, side, A, mesh)
    raise ValueError(f"unknown operator kind {kind!r}")


def boundary_K(mesh, f, side=None):
    return assemble(mesh, "K", side)(f)


def boundary_Kstar(mesh, f, side=None):
    return assemble(mesh, "Kstar", side)(f)


def boundary_DnS_trace(mesh, f, side):
    return assemble(mesh, "DnS", side)(f)


# ------------------------------------------------------- off-boundary eval

def height_lower_bound(mesh, X):
    """Lower bound of dist(X, boundary) from the vertical gap (Lipschitz cone)."""
    X = np.atleast_2d(X)
    gap = np.abs(X[:, -1] - mesh.domain.phi(X[:, :-1]))
    return gap / np.sqrt(1.0 + mesh.domain.lipschitz_L ** 2)


def _check_far(mesh, X, check):
    if not check:
        return
    dist = height_lower_bound(mesh, X)
    _, idx = mesh.tree.query(X[:, :-1])
    if np.any(dist <= 2 * mesh.spacing[idx]):
        raise ValueError("evaluation point within 2h of the boundary; use the boundary-trace "
                         "operators or boundary_limit instead")


# ------------------------------------------------------ near-field upsampling

class NearField:
    """Local upsampling for evaluation points closer than a few cells to the boundary.

    The coarse contribution of the nodes whose x lies within radius*h of the
    foot of X is replaced by a sub-lattice sum (refine^m points per cell) on
    the exact graph.  Densities are upsampled once per call by separable
    four-point Lagrange interpolation on the uniform core lattice.
    """

    def __init__(self, mesh, radius=3.0, refine=4):
        self.mesh, self.radius, self.refine = mesh, radius, refine
        h = mesh.h
        core = np.flatnonzero(np.isclose(mesh.spacing, h))
        ij = np.rint(mesh.x[core] / h - 0.5).astype(int)
        self.lo = ij.min(axis=0)
        shape = tuple(ij.max(axis=0) - self.lo + 1)
        self.index = -np.ones(shape, dtype=int)
        self.index[tuple((ij - self.lo).T)] = core
        self.lattice = -np.ones(len(mesh), dtype=int)
        self.node_ij = np.zeros((len(mesh), mesh.m), dtype=int)
        self.node_ij[core] = ij - self.lo
        # prefilter only; patches whose stencil leaves the lattice are skipped by the NaN check
        self.core_radius = np.linalg.norm(mesh.x[core], axis=1).max() - radius * h
        a = np.arange(refine)
        self.sub_idx = np.stack(np.meshgrid(*[a] * mesh.m, indexing="ij"), -1).reshape(-1, mesh.m)
        self.sub = (self.sub_idx + 0.5) / refine - 0.5
        self._weights_1d = self._lagrange_weights(refine)
        self._geom = {}

    @staticmethod
    def _lagrange_weights(refine):
        out = []
        for a in range(refine):
            d = (a + 0.5) / refine - 0.5
            nodes = np.array([-1, 0, 1, 2]) if d >= 0 else np.array([-2, -1, 0, 1])
            w = np.ones(4)
            for k in range(4):
                for l in range(4):
                    if l != k:
                        w[k] *= (d - nodes[l]) / (nodes[k] - nodes[l])
            out.append((nodes, w))
        return out

    def upsample(self, f):
        key = hash(f.tobytes())
        if getattr(self, "_up_key", None) == key:
            return self._up
        self._up_key, self._up = key, self._upsample(f)
        return self._up

    def _upsample(self, f):
        vals = np.full(self.index.shape, np.nan)
        ok = self.index >= 0
        vals[ok] = f[self.index[ok]]
        r = self.refine
        for ax in range(vals.ndim):
            n_ax = vals.shape[ax]
            pad = [(0, 0)] * vals.ndim
            pad[ax] = (2, 2)
            vp = np.pad(vals, pad, constant_values=np.nan)
            pieces = []
            for nodes, w in self._weights_1d:
                acc = 0.0
                for k in range(4):
                    sl = [slice(None)] * vals.ndim
                    sl[ax] = slice(2 + nodes[k], 2 + nodes[k] + n_ax)
                    acc = acc + w[k] * vp[tuple(sl)]
                pieces.append(acc)
            st = np.stack(pieces, axis=ax + 1)
            shp = list(vals.shape)
            shp[ax] = n_ax * r
            vals = st.reshape(shp)
        return vals

    def patch(self, xc):
        mesh, h = self.mesh, self.mesh.h
        J = np.asarray(mesh.tree.query_ball_point(xc, self.radius * h), dtype=int)
        J = J[np.isclose(mesh.spacing[J], h)]
        xs = (mesh.x[J][:, None, :] + h * self.sub[None]).reshape(-1, mesh.m)
        fine = (self.node_ij[J][:, None, :] * self.refine + self.sub_idx[None]).reshape(-1, mesh.m)
        d = mesh.domain
        ph = d.phi(xs)
        gp = np.zeros_like(xs)
        st = 0.25 * h / self.refine
        for a in range(mesh.m):
            e = np.zeros(mesh.m)
            e[a] = st
            gp[:, a] = (d.phi(xs + e) - d.phi(xs - e)) / (2 * st)
        gp[np.linalg.norm(xs, axis=1) >= d.rho] = 0.0
        af = np.sqrt(1 + np.sum(gp ** 2, 1))
        P = np.concatenate([xs, ph[:, None]], 1)
        Nrm = np.concatenate([gp, -np.ones((len(xs), 1))], 1) / af[:, None]
        w = (h / self.refine) ** mesh.m * af
        return J, tuple(fine.T), P, Nrm, w

    def correction(self, X, f, kern, shape=(), center=None):
        """Sum over points of (fine - coarse) contributions of kern(d, N_src) * f."""
        mesh = self.mesh
        up = self.upsample(f)
        out = np.zeros((len(X),) + shape)
        rad = np.linalg.norm(X[:, :-1], axis=1)
        for i in np.flatnonzero(rad <= self.core_radius):
            J, fine, P, Nrm, w = self.patch(X[i, :-1])
            fs = up[fine]
            if np.any(np.isnan(fs)):
                continue
            fc = f[J]
            if center is not None:
                fs = fs - center[i]
                fc = fc - center[i]
            coarse = kern(X[i] - mesh.nodes[J], mesh.normals[J])
            fine_k = kern(X[i] - P, Nrm)
            out[i] = np.tensordot(fs * w, fine_k, axes=(0, 0)) - np.tensordot(fc * mesh.weights[J], coarse, axes=(0, 0))
        return out


_NEAR_CACHE = {}


def near_field(mesh, refine=4):
    key = (id(mesh), refine)
    if key not in _NEAR_CACHE or _NEAR_CACHE[key][0] is not mesh:
        _NEAR_CACHE[key] = (mesh, NearField(mesh, refine=refine))
    return _NEAR_CACHE[key][1]


def _near_mask(mesh, X, factor=5.0):
    _, idx = mesh.tree.query(X[:, :-1])
    return height_lower_bound(mesh, X) < factor * mesh.spacing[idx]


def _layer_kernel(n, layer, order):
    G = kernel_table(n).G

    def kern(d, Nsrc):
        r2 = np.einsum("...k,...k->...", d, d)
        if layer == "S":
            if order == 0:
                return G.value_r2(r2)
            if order == 1:
                (a1,) = G.coeffs_r2(r2, 1)
                return a1[..., None] * d
            a1, a2 = G.coeffs_r2(r2, 2)
            return a1[..., None, None] * np.eye(n) + a2[..., None, None] * d[..., :, None] * d[..., None, :]
        if order == 0:
            (a1,) = G.coeffs_r2(r2, 1)
            return a1 * np.einsum("...k,...k->...", d, Nsrc)
        a1, a2 = G.coeffs_r2(r2, 2)
        dn = np.einsum("...k,...k->...", d, Nsrc)
        return a1[..., None] * Nsrc + (a2 * dn)[..., None] * d
    return kern


def _apply_near(mesh, X, f, layer, order, out, center=None, refine=4):
    mask = _near_mask(mesh, X)
    if not np.any(mask) or len(mesh) < 8:
        return out
    nf = near_field(mesh, refine)
    kern = _layer_kernel(mesh.n, layer, order)
    shape = out.shape[1:]
    out[mask] += nf.correction(X[mask], f, kern, shape,
                               None if center is None else center[mask])
    return out


def eval_single_layer(mesh, f, X, order=0, check=True, near=True, refine=4):
    """S f and its derivatives: order 0 value, 1 gradient, 2 Hessian.

    check=True rejects points within 2h of the boundary; with check=False the
    near-field upsampling (near=True, refine^m sub-points per cell) handles them.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_far(mesh, X, check)
    f = _values(f)
    out = _eval_kernel_sum(mesh, kernel_table(mesh.n).G, f * mesh.weights, X, order)
    if near and not check:
        _apply_near(mesh, X, f, "S", order, out, refine=refine)
    return out


def _eval_kernel_sum(mesh, kern, q, X, order):
    Q = mesh.nodes
    n = mesh.n
    shape = [(), (n,), (n, n)][order]
    out = np.zeros((len(X),) + shape)
    nz = q != 0
    Q, q = Q[nz], q[nz]
    for i0, i1 in _row_chunks(len(X), len(Q), n * (order + 1)):
        d = X[i0:i1, None, :] - Q[None]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        if order == 0:
            out[i0:i1] = kern.value_r2(r2) @ q
        elif order == 1:
            (a1,) = kern.coeffs_r2(r2, 1)
            out[i0:i1] = np.einsum("ij,ijk->ik", a1 * q, d)
        else:
            a1, a2 = kern.coeffs_r2(r2, 2)
            out[i0:i1] = (a1 @ q)[:, None, None] * np.eye(n) + np.einsum("ij,ijk,ijl->ikl", a2 * q, d, d)
    return out


def eval_double_layer(mesh, f, X, order=0, check=True, center=None, near=True, refine=4):
    """D f (order 0), its gradient (order 1) or Hessian (order 2) off the boundary.

    center: optional per-point density value f_c to subtract; the constant part
    is then added back exactly (D 1 = +-1/2 minus the flux through the flat
    exterior beyond R_trunc).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_far(mesh, X, check)
    f = _values(f)
    kt = kernel_table(mesh.n)
    Q, w, Nn = mesh.nodes, mesh.weights, mesh.normals
    n = mesh.n
    out = np.zeros((len(X),) + ((n,) * order))
    for i0, i1 in _row_chunks(len(X), len(Q), (2 + order) * n):
        d = X[i0:i1, None, :] - Q[None]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        q = f[None, :] * w if center is None else (f[None, :] - center[i0:i1, None]) * w
        dn = np.einsum("ijk,jk->ij", d, Nn)
        if order == 0:
            (a1,) = kt.G.coeffs_r2(r2, 1)
            out[i0:i1] = np.sum(a1 * dn * q, axis=1)
        elif order == 1:
            a1, a2 = kt.G.coeffs_r2(r2, 2)
            out[i0:i1] = np.einsum("ij,jk->ik", a1 * q, Nn) + np.einsum("ij,ijk->ik", a2 * dn * q, d)
        else:
            # sum_k N_k d_ijk G = a2 (d_ij dn + x_i N_j + x_j N_i) + a3 x_i x_j dn
            _, a2, a3 = kt.G.coeffs_r2(r2, 3)
            xn = np.einsum("ij,ijk,jl->ikl", a2 * q, d, Nn)
            out[i0:i1] = ((a2 * dn * q).sum(1)[:, None, None] * np.eye(n) + xn + xn.transpose(0, 2, 1)
                          + np.einsum("ij,ijk,ijl->ikl", a3 * dn * q, d, d))
    if order == 2 and center is not None:
        raise ValueError("centre subtraction is only supported for orders 0 and 1")
    if near and not check and order < 2:
        _apply_near(mesh, X, f, "D", order, out, center, refine)
    if center is not None:
        inside = mesh.domain.inside(X)
        if order == 0:
            out += center * (np.where(inside, 0.5, -0.5) - flat_exterior_flux(X, mesh.R_trunc, n))
        else:
            out -= center[:, None] * flat_exterior_flux(X, mesh.R_trunc, n, grad=True)
    return out


def _sphere_rule(m, k=24):
    """Directions and weights integrating over S^{m-1} (m <= 3)."""
    if m == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if m == 2:
        a = 2 * np.pi * (np.arange(2 * k) + 0.5) / (2 * k)
        return np.stack([np.cos(a), np.sin(a)], 1), np.full(2 * k, np.pi / k)
    if m == 3:
        z, wz = np.polynomial.legendre.leggauss(k)
        a = 2 * np.pi * (np.arange(2 * k) + 0.5) / (2 * k)
        s = np.sqrt(1 - z ** 2)
        dirs = np.stack([np.outer(s, np.cos(a)), np.outer(s, np.sin(a)),
                         np.outer(z, np.ones_like(a))], -1).reshape(-1, 3)
        return dirs, np.outer(wz, np.full(2 * k, np.pi / k)).ravel()
    raise NotImplementedError


def flat_exterior_flux(X, R, n, grad=False, nrad=48):
    """Double layer of 1 over the flat plane outside |y| > R, evaluated at X.

    Equals int_{|y|>R} X_n / (omega_n |X - (y,0)|^n) dy.  Exact quadrature for
    n <= 4; leading far-field term for larger n.
    """
    X = np.atleast_2d(X)
    m = n - 1
    kt = kernel_table(n)
    if m > 3:
        from .kernels import omega
        val = X[:, -1] * omega(m) / (omega(n) * R)
        if grad:
            g = np.zeros_like(X)
            g[:, -1] = omega(m) / (omega(n) * R)
            return g
        return val
    dirs, wd = _sphere_rule(m)
    u, wu = np.polynomial.legendre.leggauss(nrad)
    u = 0.5 * (u + 1)
    wu = 0.5 * wu
    r = R / u
    wr = wu * R / u ** 2 * r ** (m - 1)
    Y = (r[:, None, None] * dirs[None]).reshape(-1, m)
    wy = (wr[:, None] * wd[None]).ravel()
    Y = np.concatenate([Y, np.zeros((len(Y), 1))], 1)
    out = np.zeros((len(X), n) if grad else len(X))
    for i0, i1 in _row_chunks(len(X), len(Y), n):
        d = X[i0:i1, None, :] - Y[None]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        if grad:
            a1, a2 = kt.G.coeffs_r2(r2, 2)
            # grad_X of -d_n G(X - y)
            g = -(a2[..., None] * d * d[..., -1:])
            g[..., -1] -= a1
            out[i0:i1] = np.einsum("ijk,j->ik", g, wy)
        else:
            (a1,) = kt.G.coeffs_r2(r2, 1)
            out[i0:i1] = (-a1 * d[..., -1]) @ wy
    return out


# ------------------------------------------------------ boundary limits

def axis_points(mesh, idx, t, side="+"):
    """Q_i + t*nu with nu the inward (side '+') or outward (side '-') normal."""
    sgn = -1.0 if side == "+" else 1.0
    return mesh.nodes[idx] + sgn * t * mesh.normals[idx]


def richardson_limit(ts, vals):
    """Polynomial extrapolation to t = 0 from samples at heights ts (first axis)."""
    ts = np.asarray(ts, dtype=float)
    V = np.vander(ts, len(ts), increasing=True)
    coef = np.linalg.solve(V, np.asarray(vals).reshape(len(ts), -1))
    return coef[0].reshape(np.asarray(vals).shape[1:])


def boundary_limit(mesh, evaluator, idx=None, side="+", t0=None, levels=4):
    """Extrapolate evaluator(points, idx) along the cone axis, heights t0 2^{-k}.

    evaluator(X, idx) -> values at the points X associated with node indices idx.
    """
    idx = np.arange(len(mesh)) if idx is None else np.asarray(idx)
    hs = mesh.spacing[idx]
    t0 = 2.0 * hs if t0 is None else t0 * np.ones(len(idx))
    ts = [2.0 ** (-k) for k in range(levels)]
    vals = [evaluator(axis_points(mesh, idx, (t0 * s)[:, None], side), idx) for s in ts]
    return richardson_limit(ts, vals)


def double_layer_limit(mesh, f, side="+", idx=None, levels=4):
    f = _values(f)

    def ev(X, ii):
        return eval_double_layer(mesh, f, X, check=False, center=f[ii])
    return boundary_limit(mesh, ev, idx, side, levels=levels)


def grad_single_layer_limit(mesh, f, side="+", idx=None, levels=4, refine=8):
    """Limits of grad S f along the cone axis.

    The lowest height is h/4; without centre subtraction the near-field
    sub-lattice must be finer than that (refine 8) to keep the limit unbiased.
    """
    f = _values(f)

    def ev(X, ii):
        return eval_single_layer(mesh, f, X, order=1, check=False, refine=refine)
    return boundary_limit(mesh, ev, idx, side, levels=levels)


def normal_grad_single_layer_limit(mesh, f, side="+", idx=None, levels=4, refine=8):
    idx = np.arange(len(mesh)) if idx is None else np.asarray(idx)
    g = grad_single_layer_limit(mesh, f, side, idx, levels, refine)
    return np.einsum("ik,ik->i", g, mesh.normals[idx])


# ------------------------------------------------------ volume potential

@dataclass
class VolumeGrid:
    """Boundary-fitted grid Y = (x, phi(x) + s) over |x| <= R_vol, 0 < s < height.

    The shear map has unit Jacobian, so weights are h_v^m times the s-rule.
    """
    points: np.ndarray
    weights: np.ndarray
    base_index: np.ndarray
    s: np.ndarray
    h_v: float
    R_vol: float
    height: float


def volume_grid(domain, h_v, R_vol, height, s_first=None, per_panel=4):
    m = domain.m
    k = int(np.floor(R_vol / h_v))
    axes = [np.arange(-k, k + 1) * h_v] * m
    x = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, m)
    x = x[np.linalg.norm(x, axis=1) <= R_vol]
    s_first = h_v if s_first is None else s_first
    edges = [0.0, s_first]
    while edges[-1] < height:
        edges.append(min(2 * edges[-1], height))
    g, wg = np.polynomial.legendre.leggauss(per_panel)
    s, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        s.append(a + (b - a) * 0.5 * (g + 1))
        ws.append(0.5 * (b - a) * wg)
    s, ws = np.concatenate(s), np.concatenate(ws)
    ph = domain.phi(x)
    pts = np.concatenate([np.repeat(x, len(s), 0), (ph[:, None] + s[None]).reshape(-1, 1)], 1)
    wts = np.tile(ws, len(x)) * h_v ** m
    base = np.repeat(np.arange(len(x)), len(s))
    return VolumeGrid(pts, wts, base, np.tile(s, len(x)), h_v, R_vol, height)


def volume_potential_corrected(field_values, X, X0, grid, n=None):
    """(1/((n-2) omega_n)) int (|X-Y|^{2-n} - |X0-Y|^{2-n}) field(Y) dY on the grid.

    field_values: array on grid.points, or a callable evaluated there.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X0 = np.asarray(X0, dtype=float)
    n = n or X.shape[1]
    Y = grid.points
    F = field_values(Y) if callable(field_values) else np.asarray(field_values)
    G = kernel_table(n).G
    q = F * grid.weights
    d2 = np.sum((Y - X0) ** 2, axis=1)
    ref = G.value_r2(d2) @ q
    out = np.empty(len(X))
    for i0, i1 in _row_chunks(len(X), len(Y), n):
        d = X[i0:i1, None, :] - Y[None]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        bad = r2 < 1e-24
        if np.any(bad):
            log.info("evaluation point on a volume node; dropping the singular cell")
            r2 = np.where(bad, 1.0, r2)
        val = G.value_r2(r2)
        val[bad] = 0.0
        out[i0:i1] = val @ q
    return out - ref


# ------------------------------------------------------ binary export

MAGIC = b"BHLMAT01"


def export_matrix(path, A, n, kind):
    A = np.ascontiguousarray(A, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qqq", n, A.shape[0], A.shape[1]))
        fh.write(kind.encode()[:16].ljust(16, b"\0"))
        fh.write(A.tobytes(order="C"))


def import_matrix(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError("not a matrix snapshot")
        n, r, c = struct.unpack("<qqq", fh.read(24))
        kind = fh.read(16).rstrip(b"\0").decode()
        A = np.frombuffer(fh.read(), dtype="<f8").reshape(r, c).copy()
    return A, n, kind
