"""Numerical laboratory for harmonic and biharmonic boundary value problems on Lipschitz graph domains."""
from . import (biharmonic_bvp, estimate_lab, function_spaces, graph_domain, harmonic_bvp, kernels,
               layer_potentials, nt_maximal)
from .graph_domain import GraphDomain, build_mesh
from .kernels import kernel_table

__version__ = "0.1.0"
__all__ = ["GraphDomain", "build_mesh", "kernel_table", "kernels", "graph_domain", "layer_potentials",
           "nt_maximal", "harmonic_bvp", "biharmonic_bvp", "function_spaces", "estimate_lab"]
