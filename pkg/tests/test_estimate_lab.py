import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given, settings, strategies as st

from biharmlab import estimate_lab as el
from biharmlab.graph_domain import GraphDomain
from biharmlab.kernels import kernel_table


def test_exponent_table_exact():
    rows = el.exponent_table(range(4, 21))
    for r in rows:
        n = r["n"]
        assert r["dirichlet_upper"] == Fraction(2 * (n - 1), n - 3)
        assert 1 / r["dirichlet_upper"] + 1 / r["regularity_lower"] == 1
        assert r["duality_ok"]
    assert (rows[0]["regularity_lower"], rows[0]["dirichlet_upper"]) == (Fraction(6, 5), 6)
    assert (rows[1]["regularity_lower"], rows[1]["dirichlet_upper"]) == (Fraction(4, 3), 4)
    with pytest.raises(ValueError):
        el.exponent_table([3])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_hiding_certificates_dominate(seed):
    inp = el.random_hiding_input(np.random.default_rng(seed))
    res = el.hiding_bound(inp)
    assert res.ok and res.eps_prime > 0
    k = np.arange(len(inp.b))
    assert np.all(inp.b ** 2 <= res.C * inp.B * 2.0 ** (-k * res.eps_prime) * (1 + 1e-12))
    assert res.C_interior <= res.C * (1 + 1e-12)


def test_hiding_violator_index():
    b = np.ones(30)
    b[7] = 50.0  # b_7^2 far above the recursion right-hand side
    inp = el.HidingInput(b, 1e6, 1.0, 1.0, 0.5, 1)
    with pytest.raises(el.HypothesisError) as e:
        el.hiding_bound(inp)
    assert e.value.k == 7
    grow = el.HidingInput(np.array([1.0, 1.0, 100.0]), 1.0, 1.0, 1e9, 0.5, 0)
    with pytest.raises(el.HypothesisError) as e:
        el.hiding_bound(grow)
    assert e.value.k == 2


def test_hiding_nonpositive_eps():
    inp = el.HidingInput(np.full(5, 0.5), 1.0, 1.0, 1.0, 0.0, 0)
    assert not el.hiding_bound(inp).ok


@pytest.mark.parametrize("n", [4, 5])
def test_surrogate_slopes(n):
    s = el.surrogate_slopes(n)
    for k in (0, 1, 2):
        assert abs(s[k] - s["targets"][k]) <= 0.2


def test_fit_recovers_power_law():
    js = [2, 3, 4, 5]
    slope, err = el._fit(js, [3.0 * 2.0 ** (-1.7 * j) for j in js])
    assert slope == pytest.approx(-1.7) and err < 1e-10


def test_carleson_spec():
    with pytest.raises(ValueError):
        el.CarlesonSpec(4.0, 2.5)
    s = el.CarlesonSpec(4.0, 1.5, L=0.3)
    assert s.top == pytest.approx(100 * 1.5 * 4.0)
    inner, outer = el.CarlesonSpec(4.0, 1.2), el.CarlesonSpec(4.0, 2.0)
    assert el.box_distance(inner, outer) > 0


def test_caccioppoli_analytic_field():
    dom = GraphDomain(4)
    P = np.array([0.0, 0.0, 0.0, -0.5])
    field = el.AnalyticField(kernel_table(4).B, P)
    inner, outer = el.CarlesonSpec(2.0, 1.2), el.CarlesonSpec(2.0, 2.0)
    d = el.box_distance(inner, outer)
    out = el.caccioppoli_check(field, inner, outer, dom, hx=d, M_Lp=1.0)
    assert out["finite"] and out["constant"] > 0
    with pytest.raises(ValueError):
        el.caccioppoli_check(field, outer, inner, dom)
