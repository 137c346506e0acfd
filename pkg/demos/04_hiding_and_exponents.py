"""Critical exponents and the constructive hiding bound."""
import numpy as np

from biharmlab import estimate_lab as el

for row in el.table_to_json(el.exponent_table(range(4, 9))):
    print(f"n={row['n']}: regularity from p > {row['regularity_lower']}, Dirichlet up to p < {row['dirichlet_upper']}")

inp = el.random_hiding_input(np.random.default_rng(1), K=30, l=2, eps=0.4)
res = el.hiding_bound(inp)
print(f"hiding: eps' = {res.eps_prime:.3f}, C = {res.C:.3g} (interior {res.C_interior:.3g}), "
      f"{res.passes} envelope passes, certificate ok: {res.ok}")
bad = el.HidingInput(np.r_[np.ones(5), 40.0, np.ones(5)], 1e6, 1.0, 1.0, 0.5, 1)
try:
    el.hiding_bound(bad)
except el.HypothesisError as e:
    print(f"violator rejected at k={e.k}: {e}")
