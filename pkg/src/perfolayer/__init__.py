"""Multiscale toolkit for thin perforated elastic layers.

Builds voxel cell geometries, solves the periodic cell problems, assembles
the homogenized plate model and the reference micro wave model, and
estimates the uniform constants of the underlying inequalities.
"""

from .fem import ElasticityTensor4
from .geometry import (
    build_cell_geometry,
    build_cell_mesh,
    build_layer_mesh,
    build_plate_mesh,
)

__version__ = "0.1.0"

__all__ = [
    "ElasticityTensor4",
    "build_cell_geometry",
    "build_cell_mesh",
    "build_layer_mesh",
    "build_plate_mesh",
    "__version__",
]
