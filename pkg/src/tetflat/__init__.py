"""Locally injective volumetric flattening of slab-like tetrahedral meshes.

The library maps curved solids onto canonical flattened templates (parallel
planes, a single plane, or an ellipsoid) by minimizing a template-match plus
symmetric-Dirichlet objective with a flip-preventing line search, then moves
scalar volumes through the resulting piecewise-affine map.
"""

from .energy import (
    DeformationCache,
    Ellipsoid,
    EnergyModel,
    FlippedTetError,
    ParallelPlanes,
    SinglePlane,
    basis_matrix,
    dirichlet_density,
    fd_check,
    grad_objective,
    jacobian,
    objective,
)
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateTetError,
    MeshFormatError,
    NonManifoldError,
    ParcellationError,
    VolumeFormatError,
)
from .flattener import TemplateFlattener
from .io import load_mesh, load_volume, write_node_ele, write_vtk, write_volume
from .mesh import BoundaryTopology, TetMesh, boundary_topology, vertex_normals
from .optimizer import (
    FlatteningResult,
    OptimizerParams,
    descend,
    flatten,
    max_step_flip_free,
    smallest_positive_root,
)
from .parcellation import (
    FETAL,
    MARGIN,
    MATERNAL,
    BoundaryParcellation,
    BoundaryParcellator,
    parcellate,
)
from .resample import PointLocator, barycentric, locate, pull_back
from .volume import ScalarVolume

__version__ = "0.1.0"

__all__ = [
    "BoundaryParcellation",
    "BoundaryParcellator",
    "BoundaryTopology",
    "ConvergenceError",
    "DataError",
    "DeformationCache",
    "DegenerateTetError",
    "Ellipsoid",
    "EnergyModel",
    "FETAL",
    "FlatteningResult",
    "FlippedTetError",
    "MARGIN",
    "MATERNAL",
    "MeshFormatError",
    "NonManifoldError",
    "OptimizerParams",
    "ParallelPlanes",
    "ParcellationError",
    "PointLocator",
    "ScalarVolume",
    "SinglePlane",
    "TemplateFlattener",
    "TetMesh",
    "VolumeFormatError",
    "barycentric",
    "basis_matrix",
    "boundary_topology",
    "descend",
    "dirichlet_density",
    "fd_check",
    "flatten",
    "grad_objective",
    "jacobian",
    "load_mesh",
    "load_volume",
    "locate",
    "max_step_flip_free",
    "objective",
    "parcellate",
    "pull_back",
    "smallest_positive_root",
    "vertex_normals",
    "write_node_ele",
    "write_volume",
    "write_vtk",
]
