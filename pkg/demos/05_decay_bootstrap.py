"""Decay of the maximal Hessian over dyadic annuli for an n = 4 reduced problem (several minutes).

Stage 1 and stage 2 differ in the exponent fed to the local energy chain.
"""
from biharmlab import estimate_lab as el

print("u~ surrogate slopes (n=4):", {k: round(v, 3) for k, v in el.surrogate_slopes(4).items() if k != "targets"})
cfg = el.DecayConfig(h=0.5, R_trunc=32.0, core_radius=3.0, js=(2, 3, 4), per_bin=4)
s1, s2 = el.bootstrap_4d(cfg)
print("annulus integrals I_j:", [f"{x:.2e}" for x in s1.integrals])
print(f"fitted slope {s1.slope:.2f} +- {s1.slope_stderr:.2f}")
for s in (s1, s2):
    print(f"p={s.p:.3f}: chain bounds {[f'{b:.2e}' for b in s.chain_bounds]}, slope {s.chain_slope:.2f}")
