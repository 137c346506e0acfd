import numpy as np
import pytest

from biharmlab.biharmonic_bvp import (PrimitiveH, PrimitiveSpec, affine_gauge, operators, solve_dirichlet,
                                      solve_full_regularity, solve_reduced_regularity, tilde_u)
from biharmlab.graph_domain import GraphDomain, build_mesh
from biharmlab.kernels import kernel_table
from biharmlab.experiments import biharmonic_mms_errors


def test_T_signed_adjointness(bump4):
    ops = operators(bump4)
    rng = np.random.default_rng(0)
    w, r = bump4.weights, bump4.radius()
    for _ in range(5):
        f = rng.normal(size=len(bump4)) * np.exp(-r ** 2)
        g = rng.normal(size=len(bump4)) * np.exp(-r ** 2)
        a, b = np.sum(w * (ops.T @ f) * g), np.sum(w * f * (ops.Tstar @ g))
        assert abs(a + b) <= 0.05 * np.sqrt(np.sum(w * f * f) * np.sum(w * g * g))


def test_manufactured_coarse(bump4):
    e = biharmonic_mms_errors(bump4)
    assert e["dirichlet_grad"] < 0.10
    assert e["full_hess"] < 0.10
    assert e["t_residual"] < 1e-8


def test_solutions_are_biharmonic(bump4):
    a = np.where(bump4.radius() < 1, (1 - bump4.radius() ** 2) ** 2, 0.0)
    sol = solve_reduced_regularity(bump4, a, PrimitiveSpec.for_domain(bump4.domain, tail_T=200.0))
    X = np.array([[0.3, 0.1, -0.2, 1.2], [1.5, 0.0, 0.4, 0.8]])
    lap = sol.laplacian(X)
    assert np.all(np.isfinite(lap))
    assert np.max(np.abs(sol.bilaplacian(X))) < 1e-6 * max(1.0, np.max(np.abs(lap)))
    assert sol.report["tstar_residual"] < 1e-8


def test_reduced_rejects_unsupported_data(bump4):
    with pytest.raises(ValueError):
        solve_reduced_regularity(bump4, np.ones(len(bump4)))


def test_primitive_columns_match_pointwise(bump4):
    class Lin:  # harmonic h = x_1 - 2 t, exact primitive derivatives
        def value(self, X, check=True):
            return X[:, 0] - 2 * X[:, -1]

        def grad(self, X, check=True):
            g = np.zeros_like(X); g[:, 0] = 1; g[:, -1] = -2
            return g

        def hess(self, X, check=True):
            return np.zeros((len(X), X.shape[1], X.shape[1]))
    spec = PrimitiveSpec.for_domain(bump4.domain, tail_T=50.0)
    H = PrimitiveH(Lin(), spec, bump4.domain)
    xi = np.array([0.2, -0.1, 0.3])
    ts = np.array([1.0, 2.0, 5.0])
    val, grad, hess = H.column_all(xi, ts)
    X = np.c_[np.tile(xi, (3, 1)), ts]
    assert np.allclose(val, H.value(X, check=False), rtol=1e-10, atol=1e-10)
    assert np.allclose(grad, H.grad(X, check=False), rtol=1e-10, atol=1e-10)
    # D_t H = h
    assert np.allclose(grad[:, -1], Lin().value(X))


def test_primitive_needs_n4():
    d = GraphDomain(3, "bump", 0.2)
    with pytest.raises(ValueError):
        PrimitiveH(None, PrimitiveSpec.for_domain(d), d)


def test_tilde_u_point_mass_far_field():
    # outside the support of a radial mean-one density, u~ is the point-mass potential
    m = build_mesh(GraphDomain(4), 0.1, 4.0)
    r = m.radius()
    a = np.where(r < 0.5, 1.0, 0.0)
    mass = np.sum(a * m.spacing ** 3 * m.cell_fraction)
    x = np.array([[3.0, 0.0, 0.0], [0.0, 2.0, 2.0]])
    ref = mass / (4 * np.pi * np.linalg.norm(x, axis=1))  # (n-3) omega_3 = 4 pi
    assert np.allclose(tilde_u(m, a, x), ref, rtol=1e-3)
    g = tilde_u(m, a, x, order=1)
    assert np.allclose(g, -ref[:, None] * x / np.sum(x ** 2, 1)[:, None], rtol=2e-3, atol=1e-8)


def test_affine_gauge_removes_affine():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    resid, coef = affine_gauge(x, 1.5 + x @ [1.0, -2.0, 0.5])
    assert np.allclose(resid, 0, atol=1e-12) and np.allclose(coef, [1.5, 1.0, -2.0, 0.5])
