"""Harmonic and biharmonic boundary value problems with known solutions.

The data come from fundamental solutions centred below the graph, so the
exact solution is known inside the domain.
"""
import numpy as np

from biharmlab.experiments import biharmonic_mms_errors, harmonic_mms_error
from biharmlab.graph_domain import GraphDomain, build_mesh

for kind in ("dirichlet", "regularity"):
    for h in (0.2, 0.1):
        nodes, err = harmonic_mms_error(kind, 3, h, 32.0, 2.0, 0.5)
        print(f"harmonic {kind:10s} h={h:<5} nodes={nodes:5d}  interior grad error {err:.2%}")

mesh = build_mesh(GraphDomain(4, "bump", 0.3, 1.0), 0.5, 8.0, core_radius=1.5)
e = biharmonic_mms_errors(mesh)
print(f"biharmonic n=4 h=0.5: Dirichlet grad error {e['dirichlet_grad']:.2%}, "
      f"full regularity Hessian error {e['full_hess']:.2%}")
print("(run `biharmlab biharmonic-mms` for the h = 0.25 level)")
