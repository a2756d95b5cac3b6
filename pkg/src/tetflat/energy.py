"""Objective energy: template match + symmetric Dirichlet distortion.

The map is piecewise affine over tets.  For tet k with original corner
matrix Z_k (3x4, columns are corners) and mapped corners X_k, the Jacobian
is J = (X_k B)(Z_k B)^{-1}, where the constant 4x3 matrix B stacks the
three edge vectors out of the first corner.  Distortion density is the
symmetric Dirichlet energy ||J||_F^2 + ||J^{-1}||_F^2, which is >= 6 with
equality exactly at rotations and blows up at collapse or inversion.

The inverse Frobenius norm is evaluated from the adjugate and determinant
(no SVD and no explicit inverse in the hot path); an SVD path is kept for
diagnostics.  All reductions are fixed-order and deterministic.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .mesh import det3, tet_edge_matrices
from .parcellation import FETAL, MARGIN, MATERNAL


class FlippedTetError(RuntimeError):
    """A tet Jacobian determinant is not strictly positive."""


def basis_matrix():
    """The constant 4x3 edge-extraction operator B.

    X_k B has columns x2-x1, x3-x1, x4-x1; the rows summing to zero make
    the product invariant to translation.
    """
    return np.array(
        [[-1.0, -1.0, -1.0],
         [1.0, 0.0, 0.0],
         [0.0, 1.0, 0.0],
         [0.0, 0.0, 1.0]]
    )


def _adjugate3(m):
    """Batched adjugate (transposed cofactors) of (..., 3, 3) matrices."""
    adj = np.empty_like(m)
    adj[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    adj[..., 0, 1] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    adj[..., 0, 2] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    adj[..., 1, 0] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    adj[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    adj[..., 1, 2] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    adj[..., 2, 0] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    adj[..., 2, 1] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    adj[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return adj


def inv3(m, det=None):
    det = det3(m) if det is None else det
    return _adjugate3(m) / det[..., None, None]


def jacobian(x_corners, inv_basis):
    """Jacobian of one tet: (X_k B) (Z_k B)^{-1}.

    Parameters
    ----------
    x_corners : (4, 3) array
        Mapped corner positions (rows).
    inv_basis : (3, 3) array
        Precomputed (Z_k B)^{-1} from the original mesh.
    """
    x_corners = np.asarray(x_corners, dtype=np.float64)
    edge = (x_corners[1:] - x_corners[0]).T  # columns = X_k B
    return edge @ inv_basis


def dirichlet_density(j, method="frobenius"):
    """Symmetric Dirichlet density of one or many Jacobians.

    >= 6 for any nonsingular J; equal to 6 exactly when J^T J = I.
    """
    j = np.asarray(j, dtype=np.float64)
    if method == "svd":
        sigma = np.linalg.svd(j, compute_uv=False)
        return np.sum(sigma ** 2 + sigma ** (-2.0), axis=-1)
    det = det3(j)
    if np.any(det == 0):
        raise FlippedTetError("singular Jacobian (collapsed tet)")
    fro2 = np.sum(j * j, axis=(-2, -1))
    adj2 = np.sum(_adjugate3(j) ** 2, axis=(-2, -1))
    return fro2 + adj2 / det ** 2


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParallelPlanes:
    """Two parallel planes at x3 = +h (fetal) and x3 = -h (maternal)."""

    h: float
    kind = "planes"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("template half-height h must be positive")

    @property
    def theta(self):
        return np.array([self.h])

    def with_theta(self, theta):
        return replace(self, h=float(theta[0]))

    def _deviations(self, xb, labels):
        fetal = labels == FETAL
        maternal = labels == MATERNAL
        dev = np.zeros(len(xb))
        dev[fetal] = xb[fetal, 2] - self.h
        dev[maternal] = xb[maternal, 2] + self.h
        return dev, fetal, maternal

    def term_values(self, xb, labels):
        dev, _, _ = self._deviations(xb, labels)
        return dev ** 2

    def position_grad(self, xb, labels):
        dev, _, _ = self._deviations(xb, labels)
        grad = np.zeros_like(xb)
        grad[:, 2] = 2.0 * dev
        return grad

    def theta_grad(self, xb, labels, area_weights):
        dev, fetal, maternal = self._deviations(xb, labels)
        fetal_sum = float(np.sum(area_weights[fetal] * dev[fetal]))
        maternal_sum = float(np.sum(area_weights[maternal] * dev[maternal]))
        return np.array([-2.0 * (fetal_sum - maternal_sum)])


@dataclass(frozen=True)
class SinglePlane:
    """Parallel planes with the fetal branch weighted zero.

    Only maternal vertices are constrained (to x3 = -h); h stays
    optimizable from the maternal sum alone.
    """

    h: float
    kind = "single-plane"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("template half-height h must be positive")

    @property
    def theta(self):
        return np.array([self.h])

    def with_theta(self, theta):
        return replace(self, h=float(theta[0]))

    def _deviations(self, xb, labels):
        maternal = labels == MATERNAL
        dev = np.zeros(len(xb))
        dev[maternal] = xb[maternal, 2] + self.h
        return dev, maternal

    def term_values(self, xb, labels):
        dev, _ = self._deviations(xb, labels)
        return dev ** 2

    def position_grad(self, xb, labels):
        dev, _ = self._deviations(xb, labels)
        grad = np.zeros_like(xb)
        grad[:, 2] = 2.0 * dev
        return grad

    def theta_grad(self, xb, labels, area_weights):
        dev, maternal = self._deviations(xb, labels)
        maternal_sum = float(np.sum(area_weights[maternal] * dev[maternal]))
        return np.array([2.0 * maternal_sum])


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid template (x^T R x - 1)^2 with R = diag(r^-2).

    Applies to every boundary vertex; no parcellation involved.
    """

    rx: float
    ry: float
    rz: float
    kind = "ellipsoid"

    def __post_init__(self):
        if min(self.rx, self.ry, self.rz) <= 0:
            raise ValueError("ellipsoid radii must be positive")

    @property
    def theta(self):
        return np.array([self.rx, self.ry, self.rz])

    def with_theta(self, theta):
        return replace(
            self, rx=float(theta[0]), ry=float(theta[1]), rz=float(theta[2])
        )

    def _quad(self, xb):
        radii2 = np.array([self.rx, self.ry, self.rz]) ** 2
        return np.sum(xb * xb / radii2, axis=1) - 1.0

    def term_values(self, xb, labels=None):
        return self._quad(xb) ** 2

    def position_grad(self, xb, labels=None):
        radii2 = np.array([self.rx, self.ry, self.rz]) ** 2
        return 4.0 * self._quad(xb)[:, None] * (xb / radii2)

    def theta_grad(self, xb, labels, area_weights):
        # d/dr of (x^T R x - 1)^2 with R = diag(r^-2):
        # -(4 / r_a^3) * (x^T R x - 1) * x_a^2 per axis.  (The factor x_a^2
        # is required for consistency with finite differences.)
        q = self._quad(xb)
        radii = np.array([self.rx, self.ry, self.rz])
        weighted = area_weights * q
        sums = weighted @ (xb * xb)          # per-axis sum A_m q_m x_a^2
        return -4.0 * sums / radii ** 3


TEMPLATE_KINDS = {
    "planes": ParallelPlanes,
    "single-plane": SinglePlane,
    "ellipsoid": Ellipsoid,
}


def template_needs_parcellation(template):
    return not isinstance(template, Ellipsoid)


# ---------------------------------------------------------------------------
# Deformation cache and assembled objective
# ---------------------------------------------------------------------------

class DeformationCache:
    """Frozen per-tet inverse bases and normalized weights of the original mesh.

    Invertibility of every Z_k B is guaranteed by positive tet volumes.
    """

    def __init__(self, mesh, topo=None):
        topo = topo or mesh.boundary
        self.tets = mesh.tets
        basis = tet_edge_matrices(mesh.vertices, mesh.tets)
        self.basis_dets = det3(basis)
        self.inv_basis = inv3(basis, self.basis_dets)
        self.inv_basis_t = np.swapaxes(self.inv_basis, 1, 2).copy()
        self.volume_weights = topo.tet_volume_weights
        self.area_weights = topo.vertex_area_weights
        self.boundary_ids = topo.vertex_ids
        self.n_vertices = mesh.n_vertices
        # flattened scatter targets for bincount-based accumulation
        # (much faster than np.add.at, same fixed order)
        corners = np.repeat(self.tets[:, :, None], 3, axis=2)
        self._scatter = (corners * 3 + np.arange(3)[None, None, :]).ravel()

    @property
    def n_tets(self):
        return len(self.tets)

    def edge_matrices(self, x):
        return tet_edge_matrices(x, self.tets)

    def jacobians(self, x, edges=None):
        edges = self.edge_matrices(x) if edges is None else edges
        return edges @ self.inv_basis

    def jacobian_dets(self, x):
        return det3(self.edge_matrices(x)) / self.basis_dets

    def min_signed_volume(self, x):
        return float(det3(self.edge_matrices(x)).min() / 6.0)


def _labels_for(cache, parcellation, template):
    if not template_needs_parcellation(template):
        return None
    if parcellation is None:
        raise ValueError(f"{template.kind} template requires a parcellation")
    if not np.array_equal(parcellation.vertex_ids, cache.boundary_ids):
        raise ValueError("parcellation does not match the mesh boundary")
    return parcellation.labels


class EnergyModel:
    """Objective phi(X, theta) = sum A_m T(x_m) + lam * sum V_k D(X_k).

    Bundles the frozen mesh data, parcellation labels and the trade-off
    weight so repeated evaluations during optimization stay cheap.
    """

    def __init__(self, mesh, parcellation=None, lam=1.0, topo=None):
        topo = topo or mesh.boundary
        self.cache = DeformationCache(mesh, topo)
        self.lam = float(lam)
        self.parcellation = parcellation
        self._labels_cache = {}

    def labels(self, template):
        key = type(template).__name__
        if key not in self._labels_cache:
            self._labels_cache[key] = _labels_for(
                self.cache, self.parcellation, template
            )
        return self._labels_cache[key]

    def boundary_positions(self, x):
        return x[self.cache.boundary_ids]

    def template_sum(self, xb, template):
        values = template.term_values(xb, self.labels(template))
        return float(self.cache.area_weights @ values)

    def distortion_parts(self, edges):
        """(V-weighted Dirichlet sum, min Jacobian det) without raising.

        Returns (inf, min_det) when any det is nonpositive.
        """
        j = edges @ self.cache.inv_basis
        det = det3(j)
        min_det = float(det.min())
        if min_det <= 0.0:
            return np.inf, min_det
        fro2 = np.einsum("kij,kij->k", j, j)
        adj = _adjugate3(j)
        adj2 = np.einsum("kij,kij->k", adj, adj)
        with np.errstate(over="ignore", divide="ignore"):
            density = fro2 + adj2 / det ** 2
            total = float(self.cache.volume_weights @ density)
        return total, min_det

    def objective_parts(self, x, template):
        edges = self.cache.edge_matrices(x)
        distortion, min_det = self.distortion_parts(edges)
        match = self.template_sum(self.boundary_positions(x), template)
        return match + self.lam * distortion, min_det

    def objective(self, x, template):
        phi, min_det = self.objective_parts(x, template)
        if min_det <= 0.0:
            raise FlippedTetError(
                f"flipped tet encountered (min det J = {min_det:.3e})"
            )
        return phi

    def distortion_gradient(self, x, edges=None):
        """Gradient of lam * sum V_k D(X_k) with respect to X, shape (N, 3).

        Per tet, with E = X_k B, M = (Z_k B)^{-1} and J = E M:
        d||J||^2/dE = 2 J M^T and d||J^{-1}||^2/dE = -2 J^{-T}J^{-1}J^{-T} M^T;
        the corner gradients are B (d/dE)^T rows, scatter-added per vertex.
        """
        cache = self.cache
        edges = cache.edge_matrices(x) if edges is None else edges
        j = edges @ cache.inv_basis
        det = det3(j)
        if det.min() <= 0.0:
            raise FlippedTetError("flipped tet encountered in gradient")
        jinv = _adjugate3(j) / det[:, None, None]
        jinv_t = np.swapaxes(jinv, 1, 2)
        shrink = jinv_t @ jinv @ jinv_t
        weights = (2.0 * self.lam) * cache.volume_weights
        grad_e = weights[:, None, None] * ((j - shrink) @ cache.inv_basis_t)
        # corner rows of B @ grad_e^T without forming B: row 0 is the
        # negated column sum, rows 1..3 are grad_e columns
        corner = np.empty((len(grad_e), 4, 3))
        corner[:, 1:, :] = np.swapaxes(grad_e, 1, 2)
        corner[:, 0, :] = -grad_e.sum(axis=2)
        flat = np.bincount(
            cache._scatter, weights=corner.ravel(), minlength=3 * cache.n_vertices
        )
        return flat.reshape(-1, 3)

    def template_gradient(self, x, template):
        """(dphi_template/dX (N,3), dphi/dtheta) with A_m weights applied."""
        xb = self.boundary_positions(x)
        labels = self.labels(template)
        grad = np.zeros_like(x)
        per_vertex = template.position_grad(xb, labels)
        grad[self.cache.boundary_ids] = (
            self.cache.area_weights[:, None] * per_vertex
        )
        theta_grad = template.theta_grad(xb, labels, self.cache.area_weights)
        return grad, theta_grad

    def gradient(self, x, template, edges=None):
        """Full gradient (d phi/dX, d phi/d theta)."""
        grad, theta_grad = self.template_gradient(x, template)
        grad += self.distortion_gradient(x, edges=edges)
        return grad, theta_grad


def objective(x, template, parcellation, lam=1.0, mesh=None, model=None):
    """Convenience one-shot evaluation of the full objective.

    Either ``mesh`` (original coordinates) or a prebuilt ``model`` must be
    given; prefer :class:`EnergyModel` for repeated evaluations.
    """
    model = model or EnergyModel(mesh, parcellation, lam)
    return model.objective(x, template)


def grad_objective(x, template, parcellation, lam=1.0, mesh=None, model=None):
    model = model or EnergyModel(mesh, parcellation, lam)
    return model.gradient(x, template)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def _max_rel_component_error(analytic, numeric, floor=1e-300):
    """Largest componentwise error relative to the gradient magnitude.

    max_i |a_i - f_i| / max(||a||_inf, ||f||_inf, floor).  Normalizing by
    the largest component rather than each component's own magnitude keeps
    the check meaningful at the pinned FD step: central differences carry
    O(step^2) truncation that dwarfs the near-zero components of even an
    exact gradient, while any wrong formula shows up at O(1).  ``floor``
    guards terms whose true gradient is zero, where the finite differences
    are pure roundoff noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0), floor)
    return float(np.max(np.abs(a - f)) / scale)


def _central_diff_positions(fn, x, step):
    grad = np.zeros_like(x)
    xw = x.copy()
    for i in range(x.shape[0]):
        for c in range(3):
            orig = xw[i, c]
            xw[i, c] = orig + step
            hi = fn(xw)
            xw[i, c] = orig - step
            lo = fn(xw)
            xw[i, c] = orig
            grad[i, c] = (hi - lo) / (2.0 * step)
    return grad


def fd_check(x, template, parcellation, lam=1.0, step=None, mesh=None,
             model=None, gradient_fn=None):
    """Compare analytic gradients against central finite differences.

    Intended for small meshes (cost is two objective evaluations per
    coordinate).  ``gradient_fn``, when given, replaces the analytic
    gradient (used to confirm the checker detects corrupted gradients).

    Returns
    -------
    dict with per-term max relative component errors:
    ``{"distortion": ..., "template": ..., "theta": ..., "max": ...}``.
    The error measure is |a - f| / max(|a|, |f|, 1e-6 * scale) with scale
    the largest gradient component of the term.
    """
    model = model or EnergyModel(mesh, parcellation, lam)
    x = np.asarray(x, dtype=np.float64)
    if step is None:
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        step = 1e-5 * float(np.linalg.norm(hi - lo))

    if gradient_fn is None:
        grad_d = model.distortion_gradient(x)
        grad_t, grad_theta = model.template_gradient(x, template)
    else:
        grad_d, grad_t, grad_theta = gradient_fn(x, template)

    def distortion_value(xq):
        total, min_det = model.distortion_parts(model.cache.edge_matrices(xq))
        if not np.isfinite(total):
            raise FlippedTetError("FD probe flipped a tet; reduce the step")
        return model.lam * total

    def template_value(xq):
        return model.template_sum(model.boundary_positions(xq), template)

    fd_d = _central_diff_positions(distortion_value, x, step)
    fd_t = _central_diff_positions(template_value, x, step)

    theta0 = template.theta
    fd_theta = np.zeros_like(theta0)
    for i in range(len(theta0)):
        th = theta0.copy()
        th[i] = theta0[i] + step
        hi = template_value_with(model, x, template.with_theta(th))
        th[i] = theta0[i] - step
        lo = template_value_with(model, x, template.with_theta(th))
        fd_theta[i] = (hi - lo) / (2.0 * step)

    # a gradient can only be resolved down to the FD noise (eps * |f| /
    # step roundoff) and, at critical points, the natural scale |f| / L of
    # a term worth f over a domain of size L; floor the denominator there
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))

    def noise_floor(value):
        roundoff = 100.0 * np.finfo(float).eps * max(abs(value), 1.0) / step
        characteristic = abs(value) / (10.0 * max(diag, 1e-12))
        return max(roundoff, characteristic)

    report = {
        "distortion": _max_rel_component_error(
            grad_d, fd_d, floor=noise_floor(distortion_value(x))
        ),
        "template": _max_rel_component_error(
            grad_t, fd_t, floor=noise_floor(template_value(x))
        ),
        "theta": _max_rel_component_error(
            grad_theta, fd_theta, floor=noise_floor(template_value(x))
        ),
        "step": step,
    }
    report["max"] = max(report["distortion"], report["template"],
                        report["theta"])
    return report


def template_value_with(model, x, template):
    return model.template_sum(model.boundary_positions(x), template)
