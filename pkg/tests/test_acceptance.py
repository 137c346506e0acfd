"""Acceptance criteria 1-9 at the smoke profile.

Each test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary, or directly when this file is run as a script.
"""
import sys
import time

import pytest

from biharmlab import experiments as ex

RESULTS = {}
PROFILE = "smoke"


def record(k, name, result, detail=""):
    failed = sorted(g for g, ok in result["gates"].items() if not ok)
    ok = not failed
    RESULTS[k] = f"criterion {k} {'PASS' if ok else 'FAIL'}  {name}  {detail}" + (f"  failed: {failed}" if failed else "")
    return ok


def timed(fn, **kw):
    t = time.time()
    out = fn(**kw)
    return out, time.time() - t


def test_1_exponents():
    r, dt = timed(ex.run_exponents)
    assert record(1, "exponent tables", r, f"({dt:.3f}s)")


def test_2_jump_relations():
    r, dt = timed(ex.run_jump_relations, profile=PROFILE)
    assert record(2, "jump relations", r, f"max err {r['metrics']['max_err']:.2e} ({dt:.0f}s)")


def test_3_adjointness():
    r, dt = timed(ex.run_adjointness, profile=PROFILE)
    assert record(3, "T/T* adjointness", r, f"worst defect {r['metrics']['worst_defect']:.1e} ({dt:.0f}s)")


def test_4_manufactured_solutions():
    h, dt1 = timed(ex.run_harmonic_mms, profile=PROFILE)
    b, dt2 = timed(ex.run_biharmonic_mms, profile=PROFILE)
    merged = {"gates": {**{f"harmonic-{k}": v for k, v in h["gates"].items()},
                        **{f"biharmonic-{k}": v for k, v in b["gates"].items()}}}
    hr, br = h["tables"]["harmonic_mms"], b["tables"]["biharmonic_mms"][-1]
    detail = (f"harmonic grad {max(x['grad_err'] for x in hr):.2%}, biharmonic grad {br['dirichlet_grad']:.2%}, "
              f"hess {br['full_hess']:.2%} ({dt1 + dt2:.0f}s)")
    assert record(4, "manufactured solutions", merged, detail)


def test_5_tilde_decay():
    r, dt = timed(ex.run_tilde_decay)
    worst = max(abs(x["slope"] - x["target"]) for x in r["tables"]["tilde_decay"] if x["order"] != "hessian_annulus")
    assert record(5, "u~ decay slopes", r, f"worst deviation {worst:.3f} ({dt:.1f}s)")


def test_6_bootstrap():
    r, dt = timed(ex.run_bootstrap4d, profile=PROFILE)
    s1, s2 = r["metrics"]["stage1"], r["metrics"]["stage2"]
    detail = (f"M2 slope {s1['slope']:.2f}, chain slopes {s1['chain_slope']:.2f} -> {s2['chain_slope']:.2f} "
              f"(target -2: {'met' if r['gates']['stage2-target'] else 'missed'}) ({dt:.0f}s)")
    assert record(6, "n=4 decay and bootstrap", r, detail)


def test_7_hiding():
    r, dt = timed(ex.run_hiding)
    assert record(7, "hiding lemma", r, f"{r['metrics']['failures']} failures in 1000 ({dt:.1f}s)")


def test_8_function_spaces():
    r, dt = timed(ex.run_norms_selftest)
    assert record(8, "function-space suite", r, f"({dt:.1f}s)")


def test_9_atomic_xnorm():
    r, dt = timed(ex.run_atomic_xnorm, profile=PROFILE)
    m = r["metrics"]
    detail = (f"H1 max/median {m['ratio_h1']['max'] / m['ratio_h1']['median']:.2f}, "
              f"L2 max/median {m['ratio_l2']['max'] / m['ratio_l2']['median']:.2f} ({dt:.0f}s)")
    assert record(9, "atomic X-norm uniformity", r, detail)


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    ok = True
    for t in tests:
        try:
            t()
        except AssertionError:
            ok = False
        k = int(t.__name__.split("_")[1])
        print(RESULTS.get(k, f"criterion {k} FAIL  (error)"), flush=True)
    sys.exit(0 if ok else 1)
