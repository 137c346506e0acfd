"""Littlewood-Paley bands, Triebel-Lizorkin and Lorentz norms, and atoms on a 2-D grid."""
import numpy as np

from biharmlab import function_spaces as fs

g = fs.grid_from_function(lambda X: np.exp(-np.sum(X ** 2, -1)) * np.cos(3 * X[..., 0]), 2, 8.0, 1 / 16)
bands = fs.lp_decompose(g)
print(f"{len(bands)} bands, reconstruction error {np.abs(sum(b.values for b in bands) - g.values).max():.1e}")
for p in (4 / 3, 2.0):
    print(f"p={p:.3f}: F^0_(p,2) / L^p = {fs.triebel_norm(g, 0, p, 2) / g.lp(p):.3f}")
print(f"Lorentz L^(2,1) = {fs.lorentz_norm(g, 2.0, 1.0):.4f},  L^2 = {g.lp(2):.4f}")

rng = np.random.default_rng(0)
v = rng.normal(size=(32, 32)) * np.exp(-np.sum(fs.GridFunction(np.zeros((32, 32)), 0.125, (-2, -2)).coords() ** 2, -1))
h = fs.GridFunction(v - v.mean(), 0.125, (-2.0, -2.0))
dec = fs.atomic_decompose(h)
print(f"atomic decomposition: {len(dec.atoms)} atoms, sum |lambda| = {dec.coefficient_sum():.3f}, "
      f"residual {dec.residual:.1e}, all valid: {dec.all_valid()}")
