"""Double and single layer potentials on a bumped graph in R^3.

Builds a graded boundary mesh, applies the double layer to a Gaussian density,
and compares the limits from above and below with +-f/2 + K f.
"""
import numpy as np

from biharmlab.graph_domain import GraphDomain, build_mesh
from biharmlab.layer_potentials import double_layer_limit, double_layer_matrix, grad_single_layer_limit

dom = GraphDomain(3, "bump", 0.3, 1.0)
mesh = build_mesh(dom, 0.2, 8.0, core_radius=3.0)
print(mesh.describe() if hasattr(mesh, "describe") else f"{len(mesh)} nodes")

f = np.exp(-np.sum((mesh.x - 0.3) ** 2, 1))
idx = np.flatnonzero(mesh.radius() < 1.0)[::5]
Kf = double_layer_matrix(mesh, rows=idx) @ f
up, down = double_layer_limit(mesh, f, "+", idx), double_layer_limit(mesh, f, "-", idx)
rel = lambda a, b: np.linalg.norm(a - b) / np.linalg.norm(b)
print(f"limit from inside  vs  f/2 + Kf : {rel(up, 0.5 * f[idx] + Kf):.2e}")
print(f"limit from outside vs -f/2 + Kf : {rel(down, -0.5 * f[idx] + Kf):.2e}")

gp, gm = grad_single_layer_limit(mesh, f, "+", idx), grad_single_layer_limit(mesh, f, "-", idx)
jump = np.sum((gp - gm) * mesh.normals[idx], 1)
print(f"jump of the normal derivative of S f vs f : {rel(jump, f[idx]):.2e}")
