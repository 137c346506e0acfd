import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biharmlab.graph_domain import GraphDomain, build_mesh
from biharmlab.nt_maximal import (ConeSpec, cone_samples, graph_distance, in_gamma0, nt_max, nt_max_split,
                                  region_Lp_norm)

BUMP = GraphDomain(3, "bump", 0.5, 1.0)


def brute_distance(dom, Y, k=801):
    ax = np.linspace(-1.6, 1.6, k)
    x = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    P = np.c_[x, dom.phi(x)]
    return np.min(np.linalg.norm(P[None] - Y[:, None], axis=2), axis=1)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2), st.floats(0.05, 1.0))
def test_graph_distance_against_brute_force(a, b, t):
    Y = np.array([[a, b, BUMP.phi(np.array([[a, b]]))[0] + t]])
    assert graph_distance(BUMP, Y)[0] == pytest.approx(brute_distance(BUMP, Y)[0], abs=5e-3)


def test_flat_distance_is_height():
    d = GraphDomain(3)
    Y = np.array([[0.3, -2.0, 0.7], [5.0, 1.0, 2.5]])
    assert np.allclose(graph_distance(d, Y), [0.7, 2.5])


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(BUMP, 0.25, 4.0)


def test_cone_membership(mesh):
    spec = ConeSpec.for_mesh(mesh)
    idx = np.arange(0, len(mesh), 11)
    Y, ok = cone_samples(mesh, idx, spec)
    reach = np.linalg.norm(Y - mesh.nodes[idx][:, None], axis=2)
    dist = graph_distance(mesh.domain, Y.reshape(-1, 3)).reshape(ok.shape)
    assert np.all(reach[ok] <= spec.aperture * dist[ok] * (1 + 1e-8))
    flat = np.linalg.norm(mesh.x[idx], axis=1) > 1.1
    assert ok[flat, 0].all()  # vertical samples over the flat part are inside


def test_constant_and_height_fields(mesh):
    spec = ConeSpec.for_mesh(mesh, T_max=8.0)
    ev = nt_max(lambda Y: np.full(len(Y), -3.0), mesh, spec, idx=[0, 5, 9])
    assert np.allclose(ev.M, 3.0)
    idx = np.arange(0, len(mesh), 13)
    ev = nt_max(lambda Y: Y[:, -1], mesh, spec, idx=idx)
    Y, ok = cone_samples(mesh, idx, spec)
    assert np.allclose(ev.M, np.where(ok, np.abs(Y[..., -1]), 0).max(1))


def test_split_consistency(mesh):
    spec = ConeSpec.for_mesh(mesh, T_max=400.0, n_heights=30)
    f = lambda Y: 1.0 / (1.0 + np.sum(Y ** 2, 1))
    ev = nt_max_split(f, mesh, spec, idx=np.arange(0, len(mesh), 7))
    assert np.allclose(ev.M, np.maximum(ev.M1, ev.M2))
    with pytest.raises(ValueError):
        nt_max_split(f, mesh, spec, gamma0_slope=1.0)
    assert in_gamma0(np.array([0.0, 0.0, 1.0]), 100.0)
    assert not in_gamma0(np.array([1.0, 0.0, 1.0]), 100.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 4.0))
def test_region_norm(p):
    class M:
        weights = np.array([1.0, 2.0, 3.0])
    v = np.array([1.0, -2.0, 0.5])
    ref = (1 + 2 * 2 ** p + 3 * 0.5 ** p) ** (1 / p)
    assert region_Lp_norm(v, p, np.array([True, True, True]), mesh=M) == pytest.approx(ref)
    assert region_Lp_norm(v, np.inf, [0, 1], mesh=M) == 2.0
    assert region_Lp_norm(v, p, [], mesh=M) == 0.0
