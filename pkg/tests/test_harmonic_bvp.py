import numpy as np
import pytest

from biharmlab.graph_domain import GraphDomain, build_mesh
from biharmlab.harmonic_bvp import (condition_number, dn_trace, normal_derivative, solve_dirichlet,
                                    solve_regularity)
from biharmlab.kernels import kernel_table

P = np.array([0.2, 0.0, -0.6])
G = kernel_table(3).G


@pytest.fixture(scope="module")
def setup(bump3):
    f = G(bump3.nodes - P)
    return bump3, f


def probes(dom, k=15):
    rng = np.random.default_rng(3)
    X = np.c_[rng.uniform(-1, 1, (k, 2)), np.zeros(k)]
    X[:, -1] = dom.phi(X[:, :2]) + rng.uniform(0.6, 1.5, k)
    return X


@pytest.mark.parametrize("solver", [solve_dirichlet, solve_regularity])
def test_manufactured_solution_interior(setup, solver):
    mesh, f = setup
    sol = solver(mesh, f)
    X = probes(mesh.domain)
    assert np.linalg.norm(sol.value(X) - G(X - P)) / np.linalg.norm(G(X - P)) < 2e-2  # truncation offset at R = 16
    assert np.linalg.norm(sol.grad(X) - G.grad(X - P)) / np.linalg.norm(G.grad(X - P)) < 2e-2


def test_boundary_derivatives(setup):
    mesh, f = setup
    sol = solve_dirichlet(mesh, f)
    idx = np.flatnonzero(mesh.radius() < 1.5)
    w = mesh.weights[idx]
    ex = G.grad(mesh.nodes[idx] - P)
    err = lambda a, b: np.sqrt(np.sum(w * (a - b) ** 2) / np.sum(w * b ** 2))
    assert err(normal_derivative(sol, method="pv", idx=idx), np.sum(ex * mesh.normals[idx], 1)) < 0.02
    assert err(dn_trace(sol)[idx], ex[:, -1]) < 0.05
    with pytest.raises(ValueError):
        normal_derivative(sol, method="bogus")


def test_trace_reproduced(setup):
    mesh, f = setup
    sol = solve_regularity(mesh, f)
    assert np.allclose(sol.boundary_trace(), f, atol=1e-8 * np.abs(f).max())


def test_conditioning_small_mesh():
    m = build_mesh(GraphDomain(3, "cone", 0.5, 1.0), 0.4, 4.0)
    c = condition_number(m)
    assert 1.0 <= c < 50.0
