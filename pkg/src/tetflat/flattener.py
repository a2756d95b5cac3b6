"""Estimator-style front end for the flattening pipeline.

``TemplateFlattener.fit(mesh)`` computes the volumetric map;
``transform`` / ``inverse_transform`` carry points across it through the
piecewise-affine correspondence, and ``pull_back`` resamples a scalar
volume into template space.  Hyper-parameters follow scikit-learn
conventions (stored verbatim, fitted state in trailing-underscore
attributes), so cloning and grid search compose as usual.
"""

import numpy as np
from sklearn.base import BaseEstimator

from .energy import TEMPLATE_KINDS
from .errors import ConvergenceError
from .mesh import TetMesh
from .optimizer import OptimizerParams, flatten
from .resample import PointLocator, locate, pull_back


class TemplateFlattener(BaseEstimator):
    """Maps a tetrahedral mesh onto a flattened template.

    Parameters
    ----------
    template : {"planes", "single-plane", "ellipsoid"}
    lam : float
        Trade-off between template match and distortion.
    beta, rho, eps, max_iters : line-search and stopping controls.
    gamma : float
        Spectral parcellation affinity sharpness (plane templates).
    margin_mm : float
        Geodesic half-width of the unconstrained margin band.
    voxel_mm : float
        Voxel size used when reporting template error in voxels.
    seed : int
        Seed for the eigensolver start vector.
    h0, radii0 : optional manual template initialization overrides.
    threads : int
        Worker threads for volume resampling.

    Attributes (after fit)
    ----------------------
    result_ : FlatteningResult
    mesh_z_ : TetMesh            aligned original mesh
    mesh_x_ : TetMesh            flattened mesh
    x_ : (N, 3) array            flattened vertex coordinates
    template_ : template object  final parameters
    parcellation_ : BoundaryParcellation or None
    rotation_, translation_ :    original -> aligned frame map
    converged_ : bool
    n_iter_ : int
    """

    def __init__(self, template="planes", lam=1.0, beta=0.9, rho=0.5,
                 eps=1e-4, max_iters=20000, gamma=20.0, margin_mm=15.0,
                 voxel_mm=3.0, seed=0, h0=None, radii0=None, threads=1):
        self.template = template
        self.lam = lam
        self.beta = beta
        self.rho = rho
        self.eps = eps
        self.max_iters = max_iters
        self.gamma = gamma
        self.margin_mm = margin_mm
        self.voxel_mm = voxel_mm
        self.seed = seed
        self.h0 = h0
        self.radii0 = radii0
        self.threads = threads

    def _params(self):
        return OptimizerParams(
            lam=self.lam, beta=self.beta, rho=self.rho, eps=self.eps,
            max_iters=self.max_iters,
        )

    def fit(self, mesh, y=None, volume=None, parcellation=None):
        """Compute the flattening map for a mesh in original coordinates."""
        if not isinstance(mesh, TetMesh):
            raise TypeError("fit expects a TetMesh")
        if self.template not in TEMPLATE_KINDS:
            raise ValueError(
                f"template must be one of {sorted(TEMPLATE_KINDS)}, "
                f"got {self.template!r}"
            )
        result = flatten(
            mesh, template=self.template, params=self._params(),
            gamma=self.gamma, margin_mm=self.margin_mm, seed=self.seed,
            volume=volume, h0=self.h0, radii0=self.radii0,
            parcellation=parcellation,
        )
        self.result_ = result
        self.mesh_z_ = result.mesh_z
        self.mesh_x_ = result.mesh_x
        self.x_ = result.x
        self.template_ = result.template
        self.parcellation_ = result.parcellation
        self.rotation_ = result.rotation
        self.translation_ = result.translation
        self.converged_ = result.converged
        self.n_iter_ = result.n_iterations
        self._locator_z = None
        self._locator_x = None
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise ConvergenceError("flattener is not fitted; call fit first")

    def _to_aligned(self, points):
        return np.atleast_2d(points) @ self.rotation_ + self.translation_

    def _from_aligned(self, points):
        return (np.atleast_2d(points) - self.translation_) @ self.rotation_.T

    def transform(self, points):
        """Map original-space points into template coordinates.

        Points outside the mesh come back as NaN rows.
        """
        self._check_fitted()
        if self._locator_z is None:
            self._locator_z = PointLocator(self.mesh_z_)
        aligned = self._to_aligned(np.asarray(points, dtype=np.float64))
        tet_idx, alpha = locate(aligned, self.mesh_z_, self._locator_z)
        out = np.full(aligned.shape, np.nan)
        inside = tet_idx >= 0
        if inside.any():
            corners = self.x_[self.mesh_z_.tets[tet_idx[inside]]]
            out[inside] = np.einsum("nc,ncd->nd", alpha[inside], corners)
        return out

    def inverse_transform(self, points):
        """Map template-space points back to the original coordinates."""
        self._check_fitted()
        if self._locator_x is None:
            self._locator_x = PointLocator(self.mesh_x_)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        tet_idx, alpha = locate(pts, self.mesh_x_, self._locator_x)
        out = np.full(pts.shape, np.nan)
        inside = tet_idx >= 0
        if inside.any():
            corners = self.mesh_z_.vertices[self.mesh_x_.tets[tet_idx[inside]]]
            aligned = np.einsum("nc,ncd->nd", alpha[inside], corners)
            out[inside] = self._from_aligned(aligned)
        return out

    def fit_transform(self, mesh, y=None, **fit_kwargs):
        """Fit and return the flattened vertex coordinates."""
        return self.fit(mesh, **fit_kwargs).x_

    def pull_back(self, volume, spacing=None):
        """Resample an original-space scalar volume into template space.

        The input raster lives in the ORIGINAL (unaligned) coordinates, so
        samples are drawn at the rigidly-unaligned positions.
        """
        self._check_fitted()
        # world positions in the input raster are reached by undoing the
        # alignment; pull_back composes z = Z_k alpha (aligned) with that
        unaligned = self.mesh_z_.with_vertices(
            self._from_aligned(self.mesh_z_.vertices)
        )
        return pull_back(
            volume, unaligned, self.mesh_x_, spacing=spacing,
            threads=self.threads,
        )
