import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given, settings, strategies as st

from biharmlab import function_spaces as fs


def gauss(m=2, half=4.0, h=1 / 16, w=0.7):
    return fs.grid_from_function(lambda X: np.exp(-np.sum(X ** 2, -1) / w ** 2), m, half, h)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5000))
def test_partition_of_unity(r):
    P = fs.LPPartition()
    total = sum(P.psi(j, r) for j in range(P.J_max + 1)) + P.tail(P.J_max, r)
    assert total == pytest.approx(1.0, abs=1e-14)
    assert all(P.psi(j, r) >= -1e-15 for j in range(P.J_max + 1))


def test_decomposition_and_parseval():
    g = gauss()
    bands = fs.lp_decompose(g)
    assert np.max(np.abs(sum(b.values for b in bands) - g.values)) < 1e-12
    # sum_j psi_j^2 lies in [1/2, 1], so ||(sum |S_j f|^2)^{1/2}||_2 / ||f||_2 does too
    ratio = fs.triebel_norm(g, 0, 2, 2) / g.lp(2)
    assert np.sqrt(0.5) - 1e-9 <= ratio <= 1 + 1e-9


def test_band_localisation():
    # cos(2 pi k x) has |xi| = k: it lives in the bands whose support contains k
    h, half, k = 1 / 32, 4.0, 5.0
    g = fs.grid_from_function(lambda X: np.cos(2 * np.pi * k * X[..., 0]), 2, half, h)
    P = fs.LPPartition()
    for j in range(fs.max_band(g) + 1):
        b = fs.lp_project(g, j)
        expect = P.psi(j, k)
        assert np.max(np.abs(b.values - expect * g.values)) < 1e-10
    with pytest.raises(fs.SpaceError):
        fs.lp_project(g, fs.max_band(g) + 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 200), st.floats(1.1, 6.0), st.floats(1.0, 8.0))
def test_lorentz_indicator(count, p, r):
    v = np.zeros(400); v[:count] = 1.0
    g = fs.GridFunction(v.reshape(20, 20), 0.1, (0.0, 0.0))
    meas = count * g.cell
    assert fs.lorentz_norm(g, p, r) == pytest.approx((p / r) ** (1 / r) * meas ** (1 / p), rel=1e-9)
    assert fs.lorentz_norm(g, p, np.inf) == pytest.approx(meas ** (1 / p), rel=1e-9)


def test_lorentz_pp_is_lp():
    g = gauss()
    for p in (1.5, 2.0, 3.0):
        assert fs.lorentz_norm(g, p, p) == pytest.approx(g.lp(p), rel=1e-9)
    with pytest.raises(fs.SpaceError):
        fs.lorentz_norm(g, 1.0, 2.0)


def test_exponent_checks():
    g = gauss()
    with pytest.raises(fs.SpaceError):
        fs.triebel_norm(g, 3.0, 2, 2)
    with pytest.raises(fs.SpaceError):
        fs.triebel_norm(g, 0.0, 0.5, 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_atomic_decomposition(seed):
    rng = np.random.default_rng(seed)
    base = fs.GridFunction(np.zeros((16, 16)), 0.25, (-2.0, -2.0))
    v = rng.normal(size=(16, 16)) * (rng.random((16, 16)) < 0.5)
    g = base.like(v - v.mean())
    d = fs.atomic_decompose(g)
    assert np.max(np.abs(d.reconstruct().values - g.values)) <= 1e-8 * np.abs(g.values).max()
    assert d.all_valid()
    for a in d.atoms[:5]:
        chk = fs.check_atom(a, g)
        assert chk["support"] and chk["mean_zero"] and chk["size"]


def test_atomic_rejects_nonzero_mean():
    with pytest.raises(fs.SpaceError):
        fs.atomic_decompose(gauss())


def test_valid_atom_shortcut():
    g = fs.GridFunction(np.zeros((8, 8)), 0.25, (-1.0, -1.0))
    v = np.zeros((8, 8)); v[3, 3], v[3, 4] = 0.1, -0.1
    d = fs.atomic_decompose(g.like(v))
    assert len(d.atoms) == 1 and d.all_valid()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1.0, 4 / 3, 2.0, 3.0]))
def test_embedding_lower_bound(seed, p):
    rng = np.random.default_rng(seed)
    base = fs.GridFunction(np.zeros((16, 16)), 0.25, (-2.0, -2.0))
    parts = {(-int(rng.integers(0, 3)), int(rng.integers(0, 15))): base.like(rng.normal(size=(16, 16)))
             for _ in range(int(rng.integers(1, 4)))}
    total = sum(parts.values(), base.like(np.zeros((16, 16))))
    assert fs.x_norm_upper(fs.XNormSpec(0.0, p), parts=parts) >= total.lp(p) * (1 - 1e-12)


def test_y_term_sigma_zero_is_lp():
    g = gauss()
    assert fs.y_term(g, 0, np.zeros(2), 0.0, 2.0) == pytest.approx(g.lp(2.0), rel=1e-14)
    with pytest.raises(fs.SpaceError):
        fs.XNormSpec(3.0, 2.0, n=4)


def test_exponent_algebra_exact():
    p, s = fs.exponent_algebra(Fraction(6, 5), Fraction(-1, 4), 2, 1, Fraction(1, 2))
    assert 1 / p == Fraction(1, 2) * (Fraction(5, 6) + Fraction(1, 2)) and s == Fraction(3, 8)
    with pytest.raises(fs.SpaceError):
        fs.exponent_algebra(2, 0, 4, 1, 1)


def test_io_roundtrip(tmp_path):
    g = gauss(half=1.0, h=0.25)
    fs.write_csv(g, tmp_path / "g.csv")
    back = fs.read_csv(tmp_path / "g.csv")
    assert np.allclose(back.values, g.values) and back.h == g.h
    fs.save_snapshot(g, tmp_path / "g.npz")
    snap = fs.load_snapshot(tmp_path / "g.npz")
    assert np.array_equal(snap.values, g.values) and tuple(snap.origin) == tuple(g.origin)
