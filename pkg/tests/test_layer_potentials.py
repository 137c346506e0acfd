import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biharmlab.graph_domain import GraphDomain, build_mesh
from biharmlab.layer_potentials import (adjoint_double_layer_matrix, double_layer_limit, double_layer_matrix,
                                        eval_double_layer, eval_single_layer, export_matrix, flat_exterior_flux,
                                        grad_single_layer_limit, import_matrix, richardson_limit,
                                        single_layer_matrix)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(0.1, 1.0))
def test_richardson_exact_on_quadratics(c, t0):
    ts = t0 * 2.0 ** -np.arange(3)
    vals = c[0] + c[1] * ts + c[2] * ts ** 2
    assert richardson_limit(ts, vals) == pytest.approx(c[0], abs=1e-9 * (1 + np.abs(c).sum()))


def test_flat_disc_single_layer(flat3):
    # int_{|y|<R} 1/(4 pi |y|) dy = R/2 at the centre of a flat disc
    S = single_layer_matrix(flat3)
    i = np.argmin(flat3.radius())
    x0 = flat3.x[i]
    assert S[i].sum() == pytest.approx(8.0 / 2, rel=5e-3)
    assert np.linalg.norm(x0) < 0.2


def test_flat_K_vanishes(flat3):
    rows = np.arange(0, len(flat3), 97)
    assert np.abs(double_layer_matrix(flat3, rows=rows)).max() == 0.0
    assert np.abs(adjoint_double_layer_matrix(flat3, rows=rows)).max() == 0.0


def test_double_layer_of_one(bump3):
    # D 1 = 1/2 inside minus the flux through the missing flat exterior
    rng = np.random.default_rng(0)
    X = np.c_[rng.uniform(-1, 1, (10, 2)), np.zeros(10)]
    X[:, -1] = bump3.domain.phi(X[:, :2]) + rng.uniform(0.5, 2.0, 10)
    val = eval_double_layer(bump3, np.ones(len(bump3)), X)
    ref = 0.5 - flat_exterior_flux(X, bump3.R_trunc, 3)
    assert np.allclose(val, ref, atol=5e-3)  # graded far cells
    below = X.copy()
    below[:, -1] = bump3.domain.phi(X[:, :2]) - 1.0
    ref_b = -0.5 - flat_exterior_flux(below, bump3.R_trunc, 3)
    assert np.allclose(eval_double_layer(bump3, np.ones(len(bump3)), below), ref_b, atol=5e-3)


def test_jump_relations_small(bump3):
    f = np.exp(-np.sum(bump3.x ** 2, 1))
    idx = np.flatnonzero(bump3.radius() < 0.8)[::9]
    Dp, Dm = double_layer_limit(bump3, f, "+", idx), double_layer_limit(bump3, f, "-", idx)
    assert np.linalg.norm(Dp - Dm - f[idx]) / np.linalg.norm(f[idx]) < 0.01
    Kf = double_layer_matrix(bump3, rows=idx) @ f
    assert np.linalg.norm(0.5 * (Dp + Dm) - Kf) / np.linalg.norm(f[idx]) < 0.01
    gp, gm = grad_single_layer_limit(bump3, f, "+", idx), grad_single_layer_limit(bump3, f, "-", idx)
    jump = np.sum((gp - gm) * bump3.normals[idx], 1)
    assert np.linalg.norm(jump - f[idx]) / np.linalg.norm(f[idx]) < 0.01


def test_far_evaluation_rejected(flat3):
    with pytest.raises(ValueError):
        eval_single_layer(flat3, np.ones(len(flat3)), [[0.0, 0.0, 0.01]])


def test_single_layer_far_field(flat3):
    # far away, S f ~ G(X) * int f
    f = np.exp(-4 * np.sum(flat3.x ** 2, 1))
    X = np.array([[0.0, 0.0, 50.0]])
    mass = np.sum(f * flat3.weights)
    assert eval_single_layer(flat3, f, X)[0] == pytest.approx(mass / (4 * np.pi * 50), rel=1e-3)


def test_matrix_roundtrip(tmp_path):
    A = np.random.default_rng(0).normal(size=(4, 6))
    export_matrix(tmp_path / "a.bin", A, 3, "K")
    B, n, kind = import_matrix(tmp_path / "a.bin")
    assert np.array_equal(A, B) and n == 3 and kind == "K"
    (tmp_path / "b.bin").write_bytes(b"garbage")
    with pytest.raises(ValueError):
        import_matrix(tmp_path / "b.bin")
