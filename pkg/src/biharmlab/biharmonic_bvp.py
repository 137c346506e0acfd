"""Biharmonic Dirichlet and regularity problems on graph domains.

Building block: for a harmonic F in D with boundary trace F and normal
derivative dF/dN, the volume potential

    W_F(X) = int_D G(X - Y) D_n F(Y) dY

equals the boundary integral (Green's identities, valid on both sides of dD)

    V[c](X) = int <grad B(X - P), c(P)> dsigma(P),
    c = (tau_{1n} F, ..., tau_{n-1,n} F, dF/dN),  tau_{jk} = N^j d_k - N^k d_j,

so Lap W_F = -D_n F in D and W_F is biharmonic there.  The operators are

    T rho    = D_n trace of V[c(D rho)]                      (Dirichlet side)
    T* f     = d/dN from below of D_n V[c(S f)]              (regularity side)

D_n V[c(S f)] is harmonic below the graph, so T* = (-1/2 + K*) S^{-1} Tt with
Tt f the D_n trace of V[c(S f)].  The kernels grad B and grad^2 B are weakly
singular on the boundary, so traces need no principal values.

Reduced regularity problem (D_n u = 0, second-order functional = a):
h = S a, H its vertical primitive, T* f = dS_- a / dN, u = H - V[c(S f)].
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .harmonic_bvp import (_cached, _lu, dn_map_matrix, dtn_matrix, solve_dirichlet as harmonic_dirichlet,
                           solve_regularity)
from .kernels import kernel_table, omega
from .layer_potentials import (_row_chunks, _values, assemble, eval_single_layer,
                               neighbour_cell_integrals, self_cell_integrals)

log = logging.getLogger(__name__)


def _Bk(n):
    B = kernel_table(n).B
    if B is None:
        raise ValueError(f"biharmonic operators need n >= 4, got n={n}")
    return B


# ------------------------------------------------------------ vector layer

def vector_layer_eval(mesh, c, X, order=0):
    """V[c] (order 0), grad (1) or Hessian (2) at points X; c has shape (n, N)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = _Bk(mesh.n)
    n = mesh.n
    q = np.asarray(c) * mesh.weights  # (n, N)
    nz = np.any(q != 0, axis=0)
    P, q = mesh.nodes[nz], q[:, nz]
    out = np.zeros((len(X),) + (n,) * order)
    for i0, i1 in _row_chunks(len(X), len(P), (2 + order) * n):
        d = X[i0:i1, None, :] - P[None]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        a = B.coeffs_r2(r2, order + 1)
        dc = np.einsum("ijk,kj->ij", d, q)  # x . c
        if order == 0:
            out[i0:i1] = np.sum(a[0] * dc, 1)
        elif order == 1:
            out[i0:i1] = a[0] @ q.T + np.einsum("ij,ijk->ik", a[1] * dc, d)
        else:
            xc = np.einsum("ij,ijk,lj->ikl", a[1], d, q)
            out[i0:i1] = ((a[1] * dc).sum(1)[:, None, None] * np.eye(n) + xc + xc.transpose(0, 2, 1)
                          + np.einsum("ij,ijk,ijl->ikl", a[2] * dc, d, d))
    return out


def _trace_kernel_rows(mesh, rows, kind):
    """Per-component boundary matrices (n, len(rows), N) for V[c] traces.

    kind 'value': d_j B(Q_i - P_k) w_k (self cell vanishes by oddness);
    kind 'dn': d_n d_j B(Q_i - P_k) w_k with the self cell integrated exactly.
    """
    B = _Bk(mesh.n)
    n = mesh.n
    Q, w = mesh.nodes, mesh.weights
    out = np.empty((n, len(rows), len(Q)))
    for i0, i1 in _row_chunks(len(rows), len(Q), 3 * n):
        r = rows[i0:i1]
        d = Q[r, None, :] - Q[None]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r2[np.arange(i1 - i0), r] = 1.0
        a1, a2 = B.coeffs_r2(r2, 2)
        for j in range(n):
            if kind == "value":
                out[j, i0:i1] = a1 * d[..., j] * w
            else:
                out[j, i0:i1] = ((a1 if j == n - 1 else 0.0) + a2 * d[..., j] * d[..., -1]) * w
        out[:, np.arange(i0, i1), r] = 0.0
    ii, jj, v = _neighbour(mesh, kind)
    sel = np.isin(ii, rows)
    pos = np.searchsorted(rows, ii[sel])
    out[:, pos, jj[sel]] = v[sel].T
    if kind == "dn":
        sc = self_cell_integrals(mesh, lambda dd: B.hess(dd)[..., -1, :], 2.0 - n)
        out[:, np.arange(len(rows)), rows] = sc[rows].T
    return out


def _neighbour(mesh, kind):
    """Exact neighbour-cell integrals of the trace kernels (cached per mesh)."""
    B = _Bk(mesh.n)
    if kind == "dn":
        fn = lambda dd: B.hess(dd)[..., -1, :]
    else:
        fn = B.grad
    return _cached(mesh, ("bnbr", kind), lambda: neighbour_cell_integrals(mesh, fn))


def harmonic_density(mesh, trace, dn):
    """c = (tau_{jn} F for j < n, dF/dN) from the trace and normal derivative of F."""
    n = mesh.n
    c = np.empty((n, len(mesh)))
    for j in range(n - 1):
        c[j] = mesh.tau(j, n - 1) @ trace
    c[n - 1] = dn
    return c


class BiharmonicOperators:
    """Dense boundary operators on one mesh (built lazily, cached).

    Mdn F = D_n trace of V[c(F)] and Mval F = trace of V[c(F)] for the harmonic
    F with boundary trace F (normal derivative through the DtN map).
    """

    def __init__(self, mesh):
        if mesh.n < 4:
            raise ValueError("biharmonic operators need n >= 4")
        self.mesh = mesh
        self._m = {}

    def _get(self, key, build):
        if key not in self._m:
            self._m[key] = build()
        return self._m[key]

    def _compose(self, kind):
        mesh = self.mesh
        n, N = mesh.n, len(mesh)
        taus = [mesh.tau(j, n - 1) for j in range(n - 1)]
        dtn = dtn_matrix(mesh)
        out = np.empty((N, N))
        step = max(1, int(2 ** 27 // (8 * N * n)))
        for i0 in range(0, N, step):
            rows = np.arange(i0, min(N, i0 + step))
            A = _trace_kernel_rows(mesh, rows, kind)
            acc = A[n - 1] @ dtn
            for j in range(n - 1):
                acc += (taus[j].T @ A[j].T).T
            out[rows] = acc
        return out

    @property
    def Mdn(self):
        return self._get("Mdn", lambda: self._compose("dn"))

    @property
    def Mval(self):
        return self._get("Mval", lambda: self._compose("value"))

    @property
    def Kplus(self):
        return _lu(self.mesh, "K+")[0]

    @property
    def S(self):
        return _lu(self.mesh, "S")[0]

    @property
    def T(self):
        return self._get("T", lambda: self.Mdn @ self.Kplus)

    @property
    def W0(self):
        """Trace of V[c(D rho)] as a matrix in rho."""
        return self._get("W0", lambda: self.Mval @ self.Kplus)

    @property
    def Ttilde(self):
        """D_n trace of V[c(S f)]."""
        return self._get("Tt", lambda: self.Mdn @ self.S)

    @property
    def Tstar(self):
        def build():
            lu = _lu(self.mesh, "S")[1]
            Km = assemble(self.mesh, "Kstar", "-").matrix
            return Km @ sla.lu_solve(lu, self.Ttilde)
        return self._get("Tstar", build)


def operators(mesh):
    return _cached(mesh, "biharm_ops", lambda: BiharmonicOperators(mesh))


def operator_T(mesh, f):
    return operators(mesh).T @ _values(f)


def operator_Tstar(mesh, f, method="boundary", idx=None, grid=None):
    """T* f.  method 'boundary': exterior DtN of the D_n trace (all nodes).

    method 'volume': D_n of the volume potential of D_n S f on a boundary-fitted
    grid, differentiated along the outward normal below the graph and
    extrapolated to the boundary (nodes idx only; slow, for cross-checks).
    """
    f = _values(f)
    if method == "boundary":
        out = operators(mesh).Tstar @ f
        return out if idx is None else out[idx]
    if method != "volume":
        raise ValueError(f"unknown method {method!r}")
    return _tstar_volume(mesh, f, idx, grid)


def _tstar_volume(mesh, f, idx, grid):
    from .layer_potentials import boundary_limit, volume_grid
    d = mesh.domain
    n = mesh.n
    idx = np.arange(len(mesh)) if idx is None else np.asarray(idx)
    if grid is None:
        grid = volume_grid(d, mesh.h / 2, 8 * d.rho, 4 * d.rho, s_first=mesh.h / 8)
    psi = eval_single_layer(mesh, f, grid.points, order=1, check=False)[:, -1]
    q = psi * grid.weights
    G = kernel_table(n).G

    def ev(X, ii):
        # grad of D_n W at X below the graph: sum d_k d_n G(X - Y) psi(Y) dY
        out = np.zeros((len(X), n))
        for i0, i1 in _row_chunks(len(X), len(q), 2 * n):
            dd = X[i0:i1, None, :] - grid.points[None]
            r2 = np.einsum("ijk,ijk->ij", dd, dd)
            a1, a2 = G.coeffs_r2(r2, 2)
            out[i0:i1] = np.einsum("ij,ijk->ik", a2 * dd[..., -1] * q, dd)
            out[i0:i1, -1] += (a1 * q).sum(1)
        return out

    g = boundary_limit(mesh, ev, idx, "-", t0=2 * grid.h_v)
    return np.einsum("ik,ik->i", g, mesh.normals[idx])


# ------------------------------------------------------------- primitive H

@dataclass
class PrimitiveSpec:
    """Anchors of the vertical primitive: t0 > 2 max phi, x0, exterior X0."""
    t0: float
    x0: np.ndarray
    X0: np.ndarray
    tail_T: float = 400.0
    panels: int = 8

    @classmethod
    def for_domain(cls, domain, tail_T=400.0):
        t0 = 2.0 * max(domain.phi_max, 0.0) + 1.0
        x0 = np.zeros(domain.m)
        X0 = np.concatenate([x0, [min(domain.phi_min, 0.0) - 1.0]])
        return cls(t0, x0, X0, tail_T)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.X0 = np.asarray(self.X0, dtype=float)


def _graded_rule(a, b, first, per_panel=8):
    """Gauss panels on [a, b] geometrically graded away from a (first width ~ first)."""
    edges = [a]
    width = first
    while edges[-1] + width < b:
        edges.append(edges[-1] + width)
        width *= 2.0
    edges.append(b)
    g, wg = np.polynomial.legendre.leggauss(per_panel)
    s, w = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        s.append(lo + (hi - lo) * 0.5 * (g + 1))
        w.append(0.5 * (hi - lo) * wg)
    return np.concatenate(s), np.concatenate(w)


class PrimitiveH:
    """H(x, t) = int_{t0}^{t} h(x, s) ds - int_{t0}^{T} (h(x, s) - h(x0, s)) ds.

    h exposes value/grad/hess(X, check=...) (a HarmonicSolution or alike).
    D_n H = h; grad_x H = -int_t^T grad_x h ds; the x0 column only fixes the constant.
    """

    def __init__(self, h, spec, domain, min_panel=None):
        if domain.n < 4:
            raise ValueError("the primitive converges only for n >= 4")
        if spec.t0 <= 2 * domain.phi_max:
            raise ValueError("t0 must exceed 2 max phi")
        if domain.inside(spec.X0[None])[0]:
            raise ValueError("X0 must lie below the graph")
        self.h, self.spec, self.domain = h, spec, domain
        mesh = getattr(h, "mesh", None)
        # points on the boundary: the first panel spans half a cell so that no
        # quadrature node sits on top of a boundary node
        self.min_panel = min_panel if min_panel is not None else (0.5 * mesh.h if mesh is not None else 1e-3)
        self._const = None

    def _column(self, X, lo_to_T=True):
        """Quadrature nodes along the vertical column above X up to T (per point)."""
        d = self.domain
        out = []
        for Xi in X:
            gap = Xi[-1] - d.phi(Xi[None, :-1])[0]
            s, w = _graded_rule(Xi[-1], self.spec.tail_T, max(0.5 * gap, self.min_panel))
            out.append((s, w))
        return out

    def _hcall(self, Y, order):
        f = [self.h.value, self.h.grad, self.h.hess][order]
        return f(Y, check=False)

    def _integrate(self, X, order):
        """int_t^T (d^order h)(x, s) ds for each point."""
        cols = self._column(X)
        Y = np.concatenate([np.column_stack([np.repeat(Xi[None, :-1], len(s), 0), s])
                            for Xi, (s, _) in zip(X, cols)])
        vals = self._hcall(Y, order)
        out, k = [], 0
        for s, w in cols:
            out.append(np.tensordot(w, vals[k:k + len(s)], axes=(0, 0)))
            k += len(s)
        return np.array(out)

    def constant(self):
        """int_{t0}^{T} h(x0, s) ds, the anchor term."""
        if self._const is None:
            sp = self.spec
            s, w = _graded_rule(sp.t0, sp.tail_T, 0.5 * (sp.t0 - self.domain.phi_max))
            Y = np.column_stack([np.repeat(sp.x0[None], len(s), 0), s])
            self._const = float(w @ self._hcall(Y, 0))
        return self._const

    def value(self, X, check=True):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -self._integrate(X, 0) + self.constant()

    def grad(self, X, check=True):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        g = -self._integrate(X, 1)
        g[:, -1] = self._hcall(X, 0)
        return g

    def hess(self, X, check=True):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Hs = -self._integrate(X, 2)
        gh = self._hcall(X, 1)
        Hs[:, -1, :] = gh
        Hs[:, :, -1] = gh
        return Hs

    def column_all(self, xi, ts):
        """Value, gradient and Hessian of H at (xi, t) for every t in ts (one column).

        The column is integrated once: Gauss panels on each gap between
        consecutive heights, then a reverse cumulative sum gives int_t^T.
        """
        ts = np.asarray(ts, dtype=float)
        order = np.argsort(ts)
        t_sorted = ts[order]
        edges = np.append(t_sorted, self.spec.tail_T)
        if np.any(np.diff(edges) < 0):
            raise ValueError("column heights exceed the primitive's tail_T")
        base = self.domain.phi(xi[None])[0]
        s_all, w_all, seg = [], [], []
        for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
            if b <= a:
                continue
            s, w = _graded_rule(a, b, max(0.5 * (a - base), self.min_panel))
            s_all.append(s)
            w_all.append(w)
            seg.append(np.full(len(s), k))
        n = self.domain.n
        K = len(ts)
        ints = [np.zeros(K), np.zeros((K, n)), np.zeros((K, n, n))]
        if s_all:
            s, w, sg = np.concatenate(s_all), np.concatenate(w_all), np.concatenate(seg)
            Y = np.column_stack([np.repeat(xi[None], len(s), 0), s])
            for o in range(3):
                v = self._hcall(Y, o) * w.reshape((-1,) + (1,) * o)
                per = np.zeros((K,) + v.shape[1:])
                np.add.at(per, sg, v)
                ints[o] = np.cumsum(per[::-1], axis=0)[::-1]
        X = np.column_stack([np.repeat(xi[None], K, 0), t_sorted])
        val = -ints[0] + self.constant()
        grad = -ints[1]
        h0 = self._hcall(X, 0)
        h1 = self._hcall(X, 1)
        grad[:, -1] = h0
        hess = -ints[2]
        hess[:, -1, :] = h1
        hess[:, :, -1] = h1
        inv = np.empty_like(order)
        inv[order] = np.arange(K)
        return val[inv], grad[inv], hess[inv]

    def boundary_value(self, mesh, idx=None, lift=2.0):
        """H at boundary nodes: H(Q + delta e_n) minus Simpson on [0, delta].

        delta = lift * spacing; the bottom value of h is its boundary trace
        (h must provide boundary_trace()), so no quadrature node sits near Q.
        """
        idx = np.arange(len(mesh)) if idx is None else np.asarray(idx)
        Q = mesh.nodes[idx]
        delta = lift * mesh.spacing[idx]
        up = Q.copy()
        up[:, -1] += delta
        mid = Q.copy()
        mid[:, -1] += 0.5 * delta
        h0 = self.h.boundary_trace()[idx]
        seg = delta / 6.0 * (h0 + 4.0 * self._hcall(mid, 0) + self._hcall(up, 0))
        return self.value(up) - seg

    def tail_estimate(self, X, order=1):
        """Size of the neglected int_T^inf from the last dyadic panel [T/2, T]."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = self.spec.tail_T
        s, w = _graded_rule(T / 2, T, T / 2)
        out = []
        for Xi in X:
            Y = np.column_stack([np.repeat(Xi[None, :-1], len(s), 0), s])
            v = np.tensordot(w, self._hcall(Y, order), axes=(0, 0))
            out.append(np.linalg.norm(v))
        return np.array(out)


def primitive_H(h, spec, domain, tol=None, probe=None):
    """Build H; with tol set, raise if the tail estimate at probe exceeds it."""
    H = PrimitiveH(h, spec, domain)
    if tol is not None:
        probe = np.atleast_2d(probe if probe is not None else np.r_[spec.x0, spec.t0])
        tail = H.tail_estimate(probe).max()
        if tail > tol:
            raise ValueError(f"primitive tail {tail:.2e} above {tol:.1e}; "
                             f"try tail_T >= {4 * spec.tail_T:g}")
    return H


# ------------------------------------------------------------- solutions

@dataclass
class Part:
    coef: float
    ev: object


class VectorLayer:
    def __init__(self, mesh, c):
        self.mesh, self.c = mesh, np.asarray(c)

    def value(self, X, check=True):
        return vector_layer_eval(self.mesh, self.c, X, 0)

    def grad(self, X, check=True):
        return vector_layer_eval(self.mesh, self.c, X, 1)

    def hess(self, X, check=True):
        return vector_layer_eval(self.mesh, self.c, X, 2)


@dataclass
class BiharmonicSolution:
    parts: list
    provenance: str
    mesh: object
    density: np.ndarray = None
    harmonic_part: object = None
    report: dict = field(default_factory=dict)

    def _sum(self, X, name, check):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return sum(p.coef * getattr(p.ev, name)(X, check=check) for p in self.parts)

    def value(self, X, check=True):
        return self._sum(X, "value", check)

    def grad(self, X, check=True):
        return self._sum(X, "grad", check)

    def hess(self, X, check=True):
        return self._sum(X, "hess", check)

    __call__ = value

    def columns_all(self, x, ts_list):
        """(value, grad, hess) at the points (x_i, t) for t in ts_list[i], stacked in order.
        Primitive parts are integrated column by column; the rest pointwise."""
        X = np.concatenate([np.column_stack([np.repeat(xi[None], len(ts), 0), ts])
                            for xi, ts in zip(x, ts_list)])
        out = [0.0, 0.0, 0.0]
        for p in self.parts:
            if isinstance(p.ev, PrimitiveH):
                cols = [p.ev.column_all(xi, ts) for xi, ts in zip(x, ts_list)]
                vals = [np.concatenate([c[o] for c in cols]) for o in range(3)]
            else:
                vals = [p.ev.value(X, check=False), p.ev.grad(X, check=False), p.ev.hess(X, check=False)]
            out = [o + p.coef * v for o, v in zip(out, vals)]
        return out

    def laplacian(self, X, check=True):
        return np.trace(self.hess(X, check), axis1=1, axis2=2)

    def bilaplacian(self, X):
        """Analytic Lap^2 u: every part is a sum of biharmonic kernels.

        Vector layers: <grad Lap^2 B, c> with Lap^2 B's radial coefficient
        computed in closed form (exactly zero away from the boundary).
        Harmonic parts: zero.  Primitive: Lap H = D_n h(x, T), whose Laplacian
        in x is below the tail tolerance and is omitted.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(len(X))
        for p in self.parts:
            if isinstance(p.ev, VectorLayer):
                L2 = _Bk(self.mesh.n).laplacian().laplacian()
                q = p.ev.c * self.mesh.weights
                d = X[:, None, :] - self.mesh.nodes[None]
                r2 = np.einsum("ijk,ijk->ij", d, d)
                (a1,) = L2.coeffs_r2(r2, 1)
                out += p.coef * np.sum(a1 * np.einsum("ijk,kj->ij", d, q), 1)
        return out

    def to_json(self, path=None):
        rep = {"provenance": self.provenance, "mesh": self.mesh.describe(), **self.report}
        text = json.dumps(rep, indent=2, default=float)
        if path:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _single_layer_ev(mesh, a):
    class _S:
        def value(self, X, check=True):
            return eval_single_layer(mesh, a, X, 0, check=check)

        def grad(self, X, check=True):
            return eval_single_layer(mesh, a, X, 1, check=check)

        def hess(self, X, check=True):
            return eval_single_layer(mesh, a, X, 2, check=check)

        def boundary_trace(self):
            return _lu(mesh, "S")[0] @ a
    ev = _S()
    ev.mesh = mesh
    return ev


def solve_reduced_regularity(mesh, a, spec=None, support_radius=None, tol=1e-6):
    """D_n u = 0 and second-order functional a (dsigma-density) on the boundary."""
    a = _values(a)
    rad = mesh.radius()
    R_sup = support_radius if support_radius is not None else mesh.R_trunc / 2
    if np.any(a[rad > R_sup] != 0):
        raise ValueError(f"data must be compactly supported in |x| <= {R_sup}")
    ops = operators(mesh)
    spec = spec or PrimitiveSpec.for_domain(mesh.domain)
    rhs = assemble(mesh, "Kstar", "-").matrix @ a
    Ts = ops.Tstar
    fden = np.linalg.solve(Ts, rhs)
    res = np.linalg.norm(Ts @ fden - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if res > tol:
        raise RuntimeError(f"T* solve residual {res:.2e}")
    hev = _single_layer_ev(mesh, a)
    H = PrimitiveH(hev, spec, mesh.domain)
    Sf = ops.S @ fden
    c = harmonic_density(mesh, Sf, 0.5 * fden + assemble(mesh, "Kstar").matrix @ fden)
    parts = [Part(1.0, H), Part(-1.0, VectorLayer(mesh, c))]
    dn_res = ops.S @ a - ops.Ttilde @ fden
    rep = {"tstar_residual": float(res),
           "dn_residual_L2": float(np.sqrt(np.sum(dn_res ** 2 * mesh.weights))),
           "data_L2": float(np.sqrt(np.sum(a ** 2 * mesh.weights)))}
    return BiharmonicSolution(parts, "reduced", mesh, fden, H, rep)


def solve_full_regularity(mesh, f, g, spec=None):
    """D_n u = f and second-order functional g (dsigma-density).

    h: harmonic Dirichlet solution with data f; H its primitive;
    the reduced problem absorbs a~ = g - dh/dN.
    """
    f, g = _values(f), _values(g)
    spec = spec or PrimitiveSpec.for_domain(mesh.domain)
    parts = []
    rep = {}
    if np.any(f != 0):
        hsol = solve_regularity(mesh, f)
        H = PrimitiveH(hsol, spec, mesh.domain)
        parts.append(Part(1.0, H))
        at = g - assemble(mesh, "Kstar", "+").matrix @ hsol.density
    else:
        H, at = None, g
    red = solve_reduced_regularity(mesh, at, spec, support_radius=np.inf)
    parts += red.parts
    rep.update({"reduced": red.report})
    return BiharmonicSolution(parts, "full_regularity", mesh, red.density, H, rep)


def dirichlet_rhs(mesh, f, g):
    """D_n trace of u from the trace f and normal derivative g: G_n f + N^n g."""
    return mesh.surface_grad_matrices[-1] @ _values(f) + mesh.normals[:, -1] * _values(g)


def solve_dirichlet(mesh, f, g, tol=1e-6):
    """u = f and du/dN = g on the boundary.

    u = V[c(D rho)] + D sigma; trace: W0 rho + K_+ sigma = f;
    D_n trace: T rho + Lambda K_+ sigma = G_n f + N^n g, Lambda the harmonic
    Dirichlet-to-D_n map.  Eliminating sigma: (T - Lambda W0) rho = g_n - Lambda f.
    """
    f, g = _values(f), _values(g)
    ops = operators(mesh)
    Lam = dn_map_matrix(mesh)
    A = ops.T - Lam @ ops.W0
    rhs = dirichlet_rhs(mesh, f, g) - Lam @ f
    rho = np.linalg.solve(A, rhs)
    res = np.linalg.norm(A @ rho - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if res > tol:
        raise RuntimeError(f"T system residual {res:.2e}")
    Kp = ops.Kplus
    F = Kp @ rho
    c = harmonic_density(mesh, F, dtn_matrix(mesh) @ F)
    sol_h = harmonic_dirichlet(mesh, f - ops.W0 @ rho)
    parts = [Part(1.0, VectorLayer(mesh, c)), Part(1.0, sol_h)]
    cond = None
    if len(mesh) <= 3000:
        cond = float(np.linalg.cond(A))
    rep = {"t_residual": float(res), "condition": cond}
    return BiharmonicSolution(parts, "dirichlet", mesh, rho, None, rep)


# ------------------------------------------------------------- tilde u

def tilde_u(mesh, a, x, order=0, measure="dy"):
    """(1/((n-3) omega_{n-1})) int a(y) |x - y|^{3-n} dy and its x-derivatives.

    measure 'dy' integrates against the parameter measure (cell volumes),
    'dsigma' against surface measure.  Points x on a data node are punctured.
    """
    n = mesh.n
    if n < 4:
        raise ValueError("tilde_u needs n >= 4")
    m = n - 1
    a = _values(a)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = mesh.weights if measure == "dsigma" else mesh.spacing ** m * mesh.cell_fraction
    q = a * w
    nz = q != 0
    y, q = mesh.x[nz], q[nz]
    from .kernels import RadialKernel
    K = RadialKernel(m, 1.0 / ((n - 3) * omega(m)), 3.0 - n)
    out = np.zeros((len(x),) + (m,) * order)
    d = x[:, None, :] - y[None]
    r2 = np.einsum("ijk,ijk->ij", d, d)
    bad = r2 < 1e-24
    if np.any(bad):
        log.info("tilde_u evaluated on a data node; punctured")
        r2 = np.where(bad, 1.0, r2)
    qq = np.where(bad, 0.0, q[None, :])
    if order == 0:
        return K.value_r2(r2) @ q if not np.any(bad) else np.sum(K.value_r2(r2) * qq, 1)
    a1, a2 = K.coeffs_r2(r2, 2)
    if order == 1:
        return np.einsum("ij,ijk->ik", a1 * qq, d)
    return (a1 * qq).sum(1)[:, None, None] * np.eye(m) + np.einsum("ij,ijk,ijl->ikl", a2 * qq, d, d)


def affine_gauge(x, vals, ref_mask=None):
    """Least-squares affine fit c0 + c.x over ref_mask; returns vals minus the fit."""
    x = np.atleast_2d(x)
    ref = np.ones(len(x), bool) if ref_mask is None else ref_mask
    A = np.column_stack([np.ones(len(x)), x])
    coef, *_ = np.linalg.lstsq(A[ref], vals[ref], rcond=None)
    return vals - A @ coef, coef
