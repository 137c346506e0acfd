"""Harmonic Dirichlet and regularity problems on graph domains.

Dirichlet: u = D g with (1/2 + K) g = f.  Regularity: u = S psi with S psi = f.
Both solves are dense LU at desk scale (GMRES to 1e-10 optional).
"""
import logging
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .layer_potentials import (_values, adjoint_double_layer_matrix, assemble, boundary_limit,
                               eval_double_layer, eval_single_layer)

log = logging.getLogger(__name__)

_CACHE = weakref.WeakKeyDictionary()


def _cached(mesh, key, build):
    d = _CACHE.setdefault(mesh, {})
    if key not in d:
        d[key] = build()
    return d[key]


def _lu(mesh, kind):
    def build():
        if kind == "K+":
            A = assemble(mesh, "K", "+").matrix
        else:
            A = assemble(mesh, "S").matrix
        return A, sla.lu_factor(A)
    return _cached(mesh, kind, build)


class SolveError(RuntimeError):
    pass


def _solve(mesh, kind, rhs, method, tol):
    A, lu = _lu(mesh, kind)
    if method == "direct":
        x = sla.lu_solve(lu, rhs)
    elif method == "gmres":
        x, info = spla.gmres(A, rhs, rtol=1e-10, atol=0.0, restart=200, maxiter=2000)
        if info != 0:
            raise SolveError(f"GMRES did not converge (info={info})")
    else:
        raise ValueError(f"unknown method {method!r}")
    res = np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if res > tol:
        raise SolveError(f"boundary solve residual {res:.2e} above tolerance {tol:.1e}")
    return x, res


@dataclass
class HarmonicSolution:
    """u = D g (representation 'double_layer') or u = S psi ('single_layer')."""
    representation: str
    density: np.ndarray
    mesh: object
    residual: float
    meta: dict = field(default_factory=dict)

    def _eval(self, X, order, check):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.representation == "double_layer":
            return eval_double_layer(self.mesh, self.density, X, order, check=check)
        return eval_single_layer(self.mesh, self.density, X, order, check=check)

    def value(self, X, check=True):
        return self._eval(X, 0, check)

    def grad(self, X, check=True):
        return self._eval(X, 1, check)

    def hess(self, X, check=True):
        return self._eval(X, 2, check)

    __call__ = value

    def boundary_trace(self):
        """Nontangential trace from D at the nodes (Nystrom form)."""
        A = (_lu(self.mesh, "K+") if self.representation == "double_layer" else _lu(self.mesh, "S"))[0]
        return A @ self.density


def solve_dirichlet(mesh, f, method="direct", tol=1e-8):
    """Invert 1/2 + K; u = D g."""
    f = _values(f)
    g, res = _solve(mesh, "K+", f, method, tol)
    return HarmonicSolution("double_layer", g, mesh, res, {"method": method})


def solve_regularity(mesh, f, method="direct", tol=1e-8):
    """Invert S on the boundary; u = S psi."""
    f = _values(f)
    psi, res = _solve(mesh, "S", f, method, tol)
    return HarmonicSolution("single_layer", psi, mesh, res, {"method": method})


# ------------------------------------------------------ normal derivatives

def dtn_matrix(mesh):
    """Dirichlet-to-Neumann map (1/2 + K*) S^{-1}: trace of a harmonic u in D to d u/dN.

    Only the normal part of grad S is a layer operator here; tangential parts
    always come from surface differences of the trace, which keeps the map
    free of odd-kernel principal values.
    """
    def build():
        S, lu = _lu(mesh, "S")
        Ks = assemble(mesh, "Kstar", "+").matrix
        return sla.lu_solve(lu, Ks.T, trans=1).T
    return _cached(mesh, "dtn", build)


def dn_map_matrix(mesh):
    """Dirichlet-to-D_n map: D_n u = G_n f + N^n d u/dN for the harmonic u with trace f."""
    def build():
        A = mesh.normals[:, -1][:, None] * dtn_matrix(mesh)
        A += mesh.surface_grad_matrices[-1].toarray()
        return A
    return _cached(mesh, "dnmap", build)


def normal_derivative(sol, mesh=None, method="limit", idx=None):
    """d u / d N from D at nodes idx.

    method 'limit': cone-axis extrapolation of <grad u, N> (near-field upsampled).
    method 'pv': the boundary Dirichlet-to-Neumann map applied to the trace.
    """
    mesh = mesh or sol.mesh
    idx = np.arange(len(mesh)) if idx is None else np.asarray(idx)
    if method == "limit":
        if sol.representation == "double_layer":
            def ev(X, ii):
                return eval_double_layer(mesh, sol.density, X, 1, check=False, center=sol.density[ii])
        else:
            def ev(X, ii):
                return eval_single_layer(mesh, sol.density, X, 1, check=False)
        g = boundary_limit(mesh, ev, idx, "+")
        out = np.einsum("ik,ik->i", g, mesh.normals[idx])
        if not np.all(np.isfinite(out)):
            raise SolveError(f"extrapolation diverged at nodes {idx[~np.isfinite(out)][:5]}")
        return out
    if method != "pv":
        raise ValueError(f"unknown method {method!r}")
    if sol.representation == "single_layer":
        A = adjoint_double_layer_matrix(mesh, rows=idx)
        return 0.5 * sol.density[idx] + A @ sol.density
    return (dtn_matrix(mesh) @ sol.boundary_trace())[idx]


def dn_trace(sol, mesh=None):
    """Vertical derivative D_n u from D at every node (boundary formulas)."""
    mesh = mesh or sol.mesh
    f = sol.boundary_trace()
    dn = normal_derivative(sol, mesh, method="pv")
    return mesh.surface_grad_matrices[-1] @ f + mesh.normals[:, -1] * dn


# ------------------------------------------------------ diagnostics

def condition_number(mesh):
    """2-norm condition number of 1/2 + K (dense SVD; small meshes)."""
    A = _lu(mesh, "K+")[0]
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[0] / s[-1])


def estimate_constant(mesh, data, p_list=(4.0 / 3.0, 2.0), spec=None, idx=None):
    """Empirical C in ||M(grad u)||_p <= C (||f||_p + ||grad_T f||_p) for Dirichlet data.

    data: list of boundary densities.  Returns {p: max ratio} over the family.
    """
    from .nt_maximal import ConeSpec, nt_max
    spec = spec or ConeSpec.for_mesh(mesh, T_max=4.0 * mesh.domain.rho, n_heights=10)
    idx = np.flatnonzero(mesh.radius() <= 2.0 * mesh.domain.rho) if idx is None else idx
    w = mesh.weights[idx]
    out = {p: 0.0 for p in p_list}
    for f in data:
        f = _values(f)
        sol = solve_dirichlet(mesh, f)
        M = nt_max(lambda Y: sol.grad(Y, check=False), mesh, spec, idx).M
        gT = np.sqrt(sum((Gk @ f) ** 2 for Gk in mesh.surface_grad_matrices))
        for p in p_list:
            lhs = np.sum(M ** p * w) ** (1 / p)
            rhs = np.sum(np.abs(f[idx]) ** p * w) ** (1 / p) + np.sum(gT[idx] ** p * w) ** (1 / p)
            out[p] = max(out[p], lhs / rhs)
    return out


def stein_ratio(mesh, psi, spec=None, idx=None):
    """||M(grad S psi)||_2 / ||M(D_n S psi)||_2 on a common ladder."""
    from .nt_maximal import ConeSpec, nt_max
    spec = spec or ConeSpec.for_mesh(mesh, T_max=4.0 * mesh.domain.rho, n_heights=10)
    idx = np.flatnonzero(mesh.radius() <= 2.0 * mesh.domain.rho) if idx is None else idx
    psi = _values(psi)

    def grad(Y):
        return eval_single_layer(mesh, psi, Y, 1, check=False)
    Mg = nt_max(grad, mesh, spec, idx).M
    Mn = nt_max(lambda Y: grad(Y)[:, -1], mesh, spec, idx).M
    w = mesh.weights[idx]
    return float(np.sqrt(np.sum(Mg ** 2 * w) / np.sum(Mn ** 2 * w)))
