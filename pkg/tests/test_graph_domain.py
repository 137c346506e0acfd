import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from math import pi

from biharmlab.graph_domain import (GraphDomain, annulus_nodes, build_mesh, read_domain_config,
                                    tangential_derivative)


@pytest.mark.parametrize("profile", ["flat", "bump", "cone", "tent"])
def test_profile_compact_support(profile):
    d = GraphDomain(3, profile, 0.4, 1.0)
    x = np.array([[1.2, 0.0], [0.0, -3.0], [5.0, 5.0]])
    assert np.allclose(d.phi(x), 0.0)


def test_cone_lipschitz_constant():
    d = GraphDomain(3, "cone", 0.4, 1.0)
    assert d.lipschitz_L == pytest.approx(0.4, rel=1e-2)


def test_invalid_domains():
    with pytest.raises(ValueError):
        GraphDomain(3, "spiral", 0.1)
    with pytest.raises(ValueError):
        GraphDomain(1)
    with pytest.raises(ValueError):
        build_mesh(GraphDomain(3), 0.0, 4.0)


def test_flat_mesh_area_and_normals():
    m = build_mesh(GraphDomain(3, "flat"), 0.25, 8.0, core_radius=2.0)
    # shells carry the exact annulus measure; the core is the plain lattice
    core = m.spacing == 0.25
    assert m.weights[~core].sum() == pytest.approx(pi * (64 - 4), rel=1e-9)
    assert m.weights[core].sum() == pytest.approx(pi * 4, rel=5e-2)
    assert np.allclose(m.normals, [0, 0, -1])


def test_bump_surface_area_matches_quadrature():
    # surface area of the bump over |x| < 1 against a fine polar quadrature
    d = GraphDomain(3, "bump", 0.5, 1.0)
    m = build_mesh(d, 0.05, 2.0)
    inner = m.radius() < 1.0 - 1e-9
    r = np.linspace(0, 1, 2001)[1:]
    x = np.stack([r, 0 * r], 1)
    dr = 1e-6
    slope = (d.phi(x + [dr, 0]) - d.phi(x - [dr, 0])) / (2 * dr)
    ref = np.trapezoid(2 * pi * r * np.sqrt(1 + slope ** 2), r)
    got = m.weights[inner].sum() + (pi - m.cell_fraction[inner].sum() * 0.05 ** 2)
    assert got == pytest.approx(ref, rel=5e-3)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.6), st.sampled_from(["bump", "cone", "tent"]))
def test_normals_unit_and_downward(amp, profile):
    m = build_mesh(GraphDomain(3, profile, amp, 1.0), 0.25, 4.0)
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1.0)
    assert np.all(m.normals[:, -1] < 0)
    # tangents are orthogonal to the normal
    assert np.allclose(np.einsum("ijk,ik->ij", m.tangents, m.normals), 0.0, atol=1e-12)


def test_tangential_derivative_of_linear_function():
    m = build_mesh(GraphDomain(3, "flat"), 0.25, 4.0)
    f = 2.0 * m.x[:, 0] - m.x[:, 1]
    inner = m.radius() < 3.0
    assert np.allclose(tangential_derivative(m, f, 1)[inner], 2.0)
    assert np.allclose(tangential_derivative(m, f, 2)[inner], -1.0)
    with pytest.raises(IndexError):
        tangential_derivative(m, f, 3)


def test_graded_mesh_shell_measure():
    m = build_mesh(GraphDomain(4, "flat"), 0.5, 8.0, core_radius=2.0)
    core = m.spacing == 0.5
    assert m.weights[~core].sum() == pytest.approx(4 / 3 * pi * (8 ** 3 - 2 ** 3), rel=1e-9)
    assert set(np.unique(m.spacing)) == {0.5, 1.0, 2.0}


def test_annulus_and_config():
    dom, params = read_domain_config("dim = 3\nprofile = bump\namplitude = 0.3\nh = 0.5\nR_trunc = 8")
    assert dom.n == 3 and params["h"] == 0.5
    m = build_mesh(dom, params["h"], params["R_trunc"])
    idx = annulus_nodes(m, 1)
    r = m.radius()[idx]
    assert r.min() > 1 and r.max() <= 4
    with pytest.raises(ValueError):
        annulus_nodes(m, 3)
