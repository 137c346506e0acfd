import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from math import pi

from biharmlab.kernels import kernel_table, omega, mollified_identity

points = st.lists(st.floats(-2, 2), min_size=5, max_size=5).filter(lambda v: np.linalg.norm(v[:3]) > 0.3)


def fd_grad(f, x, h=1e-5):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])


def fd_lap(f, x, h=1e-3):
    return sum((f(x + h * e) - 2 * f(x) + f(x - h * e)) / h ** 2 for e in np.eye(len(x)))


def test_sphere_areas():
    assert omega(2) == pytest.approx(2 * pi)
    assert omega(3) == pytest.approx(4 * pi)
    assert omega(4) == pytest.approx(2 * pi ** 2)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_laplace_flux_is_one(n):
    # -int_{|x|=r} dG/dr dS = 1 for the fundamental solution of -Lap
    G = kernel_table(n).G
    for r in (0.5, 2.0):
        x = np.zeros(n); x[0] = r
        dGdr = G.grad(x[None])[0, 0]
        assert -dGdr * omega(n) * r ** (n - 1) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(points)
def test_G_harmonic_and_gradient(v):
    x = np.array(v[:3])
    G = kernel_table(3).G
    f = lambda y: float(G(y[None])[0])
    assert np.allclose(G.grad(x[None])[0], fd_grad(f, x), rtol=1e-5, atol=1e-8)
    assert abs(fd_lap(f, x)) < 1e-4 * max(1.0, abs(f(x)) / np.dot(x, x))


@pytest.mark.parametrize("n", [4, 5, 6])
def test_B_hessian_trace_is_minus_G(n):
    # Lap B = -G with this sign convention, so Lap^2 B = delta
    rng = np.random.default_rng(n)
    kt = kernel_table(n)
    X = rng.normal(size=(10, n))
    lapB = np.trace(kt.B.hess(X), axis1=1, axis2=2)
    G = kt.G(X)
    ratio = lapB / G
    assert np.allclose(ratio, ratio[0], rtol=1e-10)
    assert abs(abs(ratio[0]) - 1) < 1e-10


@pytest.mark.parametrize("n", [4, 5])
def test_B_hess_matches_fd(n):
    B = kernel_table(n).B
    x = np.linspace(0.3, 0.9, n)
    g = lambda y: B.grad(y[None])[0]
    H = np.array([(g(x + 1e-5 * e) - g(x - 1e-5 * e)) / 2e-5 for e in np.eye(n)])
    assert np.allclose(B.hess(x[None])[0], H, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_G_mollified_identity(n):
    # int G (-Lap phi) = phi(0) for a C^inf bump
    val, phi0 = mollified_identity(kernel_table(n).G, n, 1)
    assert abs(abs(val) - phi0) < 1e-7


def test_low_dimension_rejected():
    with pytest.raises(ValueError):
        kernel_table(1)
    assert kernel_table(3).B is None
