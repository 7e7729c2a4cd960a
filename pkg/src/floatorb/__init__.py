"""Floating-orbital electron densities as signed anisotropic Gaussian mixtures."""
from .geometry import Molecule, build_neighbor_graph, symmetry_breaking_frame
from .mixture import (
    DensityGrid,
    Gaussian,
    GridSpec,
    Mixture,
    eval_point,
    integrate,
    nmae,
    normalize,
    rasterize,
)
from .network import NetworkConfig, forward, init_params
from .fit import FitConfig, fit
from .io import parse_chgcar, parse_xyz, read_mixture, write_chgcar, write_mixture

__version__ = "0.1.0"

__all__ = [
    "DensityGrid",
    "FitConfig",
    "Gaussian",
    "GridSpec",
    "Mixture",
    "Molecule",
    "NetworkConfig",
    "build_neighbor_graph",
    "eval_point",
    "fit",
    "forward",
    "init_params",
    "integrate",
    "nmae",
    "normalize",
    "parse_chgcar",
    "parse_xyz",
    "rasterize",
    "read_mixture",
    "symmetry_breaking_frame",
    "write_chgcar",
    "write_mixture",
]
