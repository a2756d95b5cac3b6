"""Flip-free gradient descent (backtracking line search bounded by the
smallest step that would invert a tet) and the full flattening pipeline.

Each iteration: the signed volume of tet k after a step of size eta along
the negative gradient is a cubic polynomial of eta; its smallest positive
real root is the step at which that tet flips.  The step starts at beta
times the minimum of those roots over all tets and is halved by rho until
the objective decreases, so every accepted iterate is locally injective
and the objective is strictly monotone.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .energy import (
    Ellipsoid,
    EnergyModel,
    FlippedTetError,
    ParallelPlanes,
    SinglePlane,
    TEMPLATE_KINDS,
)
from .mesh import TetMesh, tet_edge_matrices
from .parcellation import MATERNAL, parcellate
from .parcellation import _boundary_edge_graph

_COEFF_TOL = 1e-13   # relative threshold for degree classification
_STALL_FACTOR = 1e-14


@dataclass(frozen=True)
class OptimizerParams:
    """Descent hyper-parameters (defaults follow the reference settings)."""

    lam: float = 1.0
    beta: float = 0.9
    rho: float = 0.5
    eps: float = 1e-4
    max_iters: int = 20000
    eta_cap_factor: float = 10.0
    plateau_tol: float = 1e-12
    plateau_iters: int = 50
    theta_mode: str = "coupled"   # "coupled" | "literal", see descend()

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.theta_mode not in ("coupled", "literal"):
            raise ValueError("theta_mode must be 'coupled' or 'literal'")


@dataclass
class FlatteningResult:
    """Final map plus the per-iteration trace.

    ``trace`` maps 'objective', 'grad_norm', 'eta', 'min_volume' to arrays
    with one entry per recorded iterate (index 0 = initial state).
    """

    x: np.ndarray
    template: object
    trace: dict
    converged: bool
    reason: str
    n_iterations: int
    mesh_z: TetMesh = None
    mesh_x: TetMesh = None
    parcellation: object = None
    rotation: np.ndarray = None
    translation: np.ndarray = None
    template_initial: object = None
    phases: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Cubic root machinery (Eq.-style flip bound)
# ---------------------------------------------------------------------------

def _real_roots_batch(c3, c2, c1, c0):
    """Real roots of K cubics c3 x^3 + c2 x^2 + c1 x + c0, NaN-padded (K, 3).

    Closed form (trigonometric for three real roots, Cardano otherwise)
    with degenerate quadratic/linear handling, then a Newton polish on the
    original coefficients.
    """
    c3, c2, c1, c0 = np.broadcast_arrays(
        *[np.asarray(c, dtype=np.float64) for c in (c3, c2, c1, c0)]
    )
    k = c3.shape[0]
    roots = np.full((k, 3), np.nan)
    scale = np.maximum(
        np.maximum(np.abs(c3), np.abs(c2)), np.maximum(np.abs(c1), np.abs(c0))
    )
    nonzero = scale > 0
    cubic = nonzero & (np.abs(c3) > _COEFF_TOL * scale)
    quad = nonzero & ~cubic & (np.abs(c2) > _COEFF_TOL * scale)
    lin = nonzero & ~cubic & ~quad & (np.abs(c1) > _COEFF_TOL * scale)

    if np.any(lin):
        roots[lin, 0] = -c0[lin] / c1[lin]

    if np.any(quad):
        a, b, c = c2[quad], c1[quad], c0[quad]
        disc = b * b - 4.0 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        sign_b = np.where(b >= 0, 1.0, -1.0)
        q = -0.5 * (b + sign_b * sq)
        r1 = np.where(ok, q / a, np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(ok & (q != 0), c / np.where(q != 0, q, 1.0), r1)
        block = roots[quad]
        block[:, 0] = r1
        block[:, 1] = r2
        roots[quad] = block

    if np.any(cubic):
        p = c2[cubic] / c3[cubic]
        q = c1[cubic] / c3[cubic]
        r = c0[cubic] / c3[cubic]
        a = q - p * p / 3.0
        b = 2.0 * p ** 3 / 27.0 - p * q / 3.0 + r
        disc = -4.0 * a ** 3 - 27.0 * b * b
        three = disc >= 0
        t = np.full((len(p), 3), np.nan)
        if np.any(three):
            a3, b3 = a[three], b[three]
            m = 2.0 * np.sqrt(np.maximum(-a3 / 3.0, 0.0))
            safe = m > 0
            arg = np.zeros_like(m)
            arg[safe] = np.clip(
                3.0 * b3[safe] / (a3[safe] * m[safe]), -1.0, 1.0
            )
            psi = np.arccos(arg) / 3.0
            tt = np.stack(
                [m * np.cos(psi - 2.0 * np.pi * j / 3.0) for j in range(3)],
                axis=1,
            )
            tt[~safe] = 0.0  # a == b == 0: triple root at zero
            tt[~safe, 1:] = np.nan
            t[three] = tt
        if np.any(~three):
            a1, b1 = a[~three], b[~three]
            s = np.sqrt(np.maximum(b1 * b1 / 4.0 + a1 ** 3 / 27.0, 0.0))
            sign_b = np.where(b1 >= 0, 1.0, -1.0)
            u = np.cbrt(-b1 / 2.0 - sign_b * s)
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.where(u != 0, -a1 / (3.0 * np.where(u != 0, u, 1.0)), 0.0)
            t[~three, 0] = u + v
        roots[cubic] = t + (-p / 3.0)[:, None]

    # Newton polish against the original polynomial
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        for _ in range(2):
            x = roots
            f = ((c3[:, None] * x + c2[:, None]) * x + c1[:, None]) * x + c0[:, None]
            fp = (3.0 * c3[:, None] * x + 2.0 * c2[:, None]) * x + c1[:, None]
            step = np.where(np.abs(fp) > 0, f / np.where(fp != 0, fp, 1.0), 0.0)
            step = np.where(np.isfinite(step), step, 0.0)
            roots = x - step
    return roots


def smallest_positive_roots_batch(c3, c2, c1, c0):
    """Smallest strictly positive real root per row; +inf when none."""
    roots = _real_roots_batch(c3, c2, c1, c0)
    pos = np.where(np.isfinite(roots) & (roots > 0.0), roots, np.inf)
    return pos.min(axis=1)


def smallest_positive_root(c3, c2, c1, c0):
    """Scalar convenience wrapper; returns None when no positive root."""
    value = float(
        smallest_positive_roots_batch(
            np.array([c3]), np.array([c2]), np.array([c1]), np.array([c0])
        )[0]
    )
    return None if np.isinf(value) else value


def _cross_rows(u, v):
    out = np.empty_like(u)
    out[:, 0] = u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1]
    out[:, 1] = u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2]
    out[:, 2] = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    return out


def _dot_rows(u, v):
    return u[:, 0] * v[:, 0] + u[:, 1] * v[:, 1] + u[:, 2] * v[:, 2]


def flip_cubic_coefficients(x, direction, cache, edges=None, dir_edges=None):
    """Per-tet coefficients of det[(X_k - eta * G_k) B] as a cubic in eta.

    Expansion by multilinearity of the determinant over columns:
    the eta^m coefficient is (-1)^m times the sum of determinants with m
    columns of X_k B replaced by columns of G_k B.

    Returns
    -------
    (c3, c2, c1, c0) arrays of length K.  Note c0 = 6 * signed volume.
    """
    ax = tet_edge_matrices(x, cache.tets) if edges is None else edges
    gx = (
        tet_edge_matrices(np.asarray(direction, dtype=np.float64), cache.tets)
        if dir_edges is None else dir_edges
    )
    a1, a2, a3 = ax[:, :, 0], ax[:, :, 1], ax[:, :, 2]
    g1, g2, g3 = gx[:, :, 0], gx[:, :, 1], gx[:, :, 2]

    a2xa3 = _cross_rows(a2, a3)
    g2xa3 = _cross_rows(g2, a3)
    a2xg3 = _cross_rows(a2, g3)
    g2xg3 = _cross_rows(g2, g3)

    c0 = _dot_rows(a1, a2xa3)
    c1 = -(_dot_rows(g1, a2xa3) + _dot_rows(a1, g2xa3) + _dot_rows(a1, a2xg3))
    c2 = _dot_rows(g1, g2xa3) + _dot_rows(g1, a2xg3) + _dot_rows(a1, g2xg3)
    c3 = -_dot_rows(g1, g2xg3)
    return c3, c2, c1, c0


def max_step_flip_free(x, direction, cache, eta_cap_factor=10.0, edges=None,
                       dir_edges=None):
    """Largest step along -direction before any tet volume reaches zero.

    When no tet has a positive flip root the bound is capped at
    ``eta_cap_factor * bbox_diagonal / ||direction||_F`` (infinite for a
    zero direction).

    Returns
    -------
    (eta_max, capped)
    """
    c3, c2, c1, c0 = flip_cubic_coefficients(
        x, direction, cache, edges=edges, dir_edges=dir_edges
    )
    eta = float(smallest_positive_roots_batch(c3, c2, c1, c0).min())
    if np.isfinite(eta):
        return eta, False
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return np.inf, True
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    return eta_cap_factor * float(np.linalg.norm(hi - lo)) / norm, True


# ---------------------------------------------------------------------------
# Descent
# ---------------------------------------------------------------------------

def _line_objective(model, e0, eg, xb0, gb, eta, template):
    """phi at X - eta*G evaluated from precomputed per-iteration parts.

    Returns (phi, min_det); phi is +inf past a flip.
    """
    distortion, min_det = model.distortion_parts(e0 - eta * eg)
    if min_det <= 0.0:
        return np.inf, min_det
    match = model.template_sum(xb0 - eta * gb, template)
    return match + model.lam * distortion, min_det


def descend(mesh, parcellation, template0, params=None, model=None, x0=None):
    """Gradient descent with the flip-free step bound and backtracking.

    The template parameters share the vertex step size: a fresh theta
    candidate is computed for the current eta at every halving
    (theta_mode="coupled", the default, which preserves the descent
    guarantee for the joint variable).  theta_mode="literal" keeps the
    first theta candidate through the backtracking loop, exactly following
    the published pseudocode; it can stall when the initial step grossly
    overshoots theta.

    Stops when ||grad_X phi||_F <= eps, on a floating-point plateau, or at
    max_iters; a stalled line search returns the best iterate with
    converged=False.
    """
    params = params or OptimizerParams()
    model = model or EnergyModel(mesh, parcellation, params.lam)
    cache = model.cache
    x = np.array(mesh.vertices if x0 is None else x0, dtype=np.float64)
    template = template0

    phi, min_det = model.objective_parts(x, template)
    if min_det <= 0.0:
        raise FlippedTetError("initial configuration contains flipped tets")

    # row l of the trace describes accepted iterate l; grad_norm[l] is the
    # gradient at iterate l, filled when the next iteration computes it
    # (NaN on the final iterate unless the gradient test stopped the run)
    trace_phi = [phi]
    trace_gnorm = [np.nan]
    trace_eta = [0.0]
    trace_minvol = [min_det / 6.0]

    converged = False
    reason = "max-iters"
    plateau_run = 0
    e0 = cache.edge_matrices(x)

    for _ in range(params.max_iters):
        grad, theta_grad = model.gradient(x, template, edges=e0)
        gnorm = float(np.linalg.norm(grad))
        trace_gnorm[-1] = gnorm
        if gnorm <= params.eps:
            converged, reason = True, "grad-tol"
            break

        eg = tet_edge_matrices(grad, cache.tets)
        eta_max, _ = max_step_flip_free(
            x, grad, cache, params.eta_cap_factor, edges=e0, dir_edges=eg
        )
        eta0 = params.beta * eta_max
        xb0 = x[cache.boundary_ids]
        gb = grad[cache.boundary_ids]

        def theta_candidate(step):
            try:
                return template.with_theta(template.theta - step * theta_grad)
            except ValueError:
                return None      # invalid theta (e.g. h <= 0): reject

        eta = eta0
        template_first = theta_candidate(eta0)
        accepted = False
        while eta >= _STALL_FACTOR * eta0:
            cand = (
                template_first if params.theta_mode == "literal"
                else theta_candidate(eta)
            )
            if cand is not None:
                phi_new, min_det = _line_objective(
                    model, e0, eg, xb0, gb, eta, cand
                )
                if phi_new < phi:
                    accepted = True
                    break
            eta *= params.rho
        if not accepted:
            converged, reason = False, "stalled"
            break

        x = x - eta * grad
        template = cand
        phi = phi_new
        # edge matrices update linearly along the step; refresh from x
        # periodically to keep float drift out of the flip bound
        if len(trace_phi) % 64 == 0:
            e0 = cache.edge_matrices(x)
        else:
            e0 = e0 - eta * eg
        trace_phi.append(phi)
        trace_gnorm.append(np.nan)
        trace_eta.append(eta)
        trace_minvol.append(min_det / 6.0)

        rel_drop = (trace_phi[-2] - phi) / max(abs(trace_phi[-2]), 1e-300)
        plateau_run = plateau_run + 1 if rel_drop < params.plateau_tol else 0
        if plateau_run >= params.plateau_iters:
            converged, reason = True, "plateau"
            break

    trace = {
        "objective": np.array(trace_phi),
        "grad_norm": np.array(trace_gnorm),
        "eta": np.array(trace_eta),
        "min_volume": np.array(trace_minvol),
    }
    return FlatteningResult(
        x=x,
        template=template,
        trace=trace,
        converged=converged,
        reason=reason,
        n_iterations=len(trace_phi) - 1,
    )


# ---------------------------------------------------------------------------
# Pipeline: centering, principal-axis alignment, theta init, two-phase run
# ---------------------------------------------------------------------------

def principal_alignment(vertices):
    """Centroid and sign-fixed principal-axis rotation (descending spread).

    Returns (centroid, rotation) with aligned = (vertices - centroid) @ rotation;
    column signs are fixed so each axis's largest-magnitude component is
    positive, and the third column is the cross product of the first two
    (proper rotation).
    """
    centroid = vertices.mean(axis=0)
    centered = vertices - centroid
    cov = centered.T @ centered / len(centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    u = eigvecs[:, order]
    for col in range(2):
        anchor = int(np.argmax(np.abs(u[:, col])))
        if u[anchor, col] < 0:
            u[:, col] = -u[:, col]
    u[:, 2] = np.cross(u[:, 0], u[:, 1])
    return centroid, u


def _closest_point_on_triangle(p, a, b, c):
    """Closest point on triangle (a, b, c) to p; all inputs (..., 3)."""
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe_div(num, den):
        return num / np.where(den != 0, den, 1.0)

    v_ab = safe_div(d1, d1 - d3)
    w_ac = safe_div(d2, d2 - d6)
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    denom = va + vb + vc
    v_f = safe_div(vb, denom)
    w_f = safe_div(vc, denom)

    # region cascade (closest point on triangle); applied lowest priority
    # first so the final overrides reproduce the sequential test order
    # A, B, AB, C, AC, BC, face
    closest = a + v_f[..., None] * ab + w_f[..., None] * ac
    in_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    pt_bc = b + w_bc[..., None] * (c - b)
    closest = np.where(in_bc[..., None], pt_bc, closest)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(in_ac[..., None], a + w_ac[..., None] * ac, closest)
    at_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(at_c[..., None], c, closest)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(in_ab[..., None], a + v_ab[..., None] * ab, closest)
    at_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(at_b[..., None], b, closest)
    at_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(at_a[..., None], a, closest)
    return closest


def _point_triangle_distances_paired(p, a, b, c):
    closest = _closest_point_on_triangle(p, a, b, c)
    return np.linalg.norm(p - closest, axis=-1)


def _point_triangle_distances(points, tri_a, tri_b, tri_c):
    """Distance from each point to the nearest of the given triangles
    (full product; used on small inputs and as a test oracle)."""
    p = points[:, None, :]
    d = _point_triangle_distances_paired(
        p, tri_a[None, :, :], tri_b[None, :, :], tri_c[None, :, :]
    )
    return np.min(d, axis=1)


def boundary_distances(points, mesh, topo=None):
    """Exact distance from each point to the mesh boundary surface.

    A KD-tree over triangle centroids prunes the candidate set: the exact
    distance to the nearest-centroid triangle is an upper bound u, and any
    triangle whose centroid is farther than u plus the largest
    centroid-to-vertex radius cannot beat it.
    """
    from scipy.spatial import cKDTree

    topo = topo or mesh.boundary
    tris = topo.triangles
    v = mesh.vertices
    tri_a, tri_b, tri_c = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
    centroids = (tri_a + tri_b + tri_c) / 3.0
    radius = float(
        np.sqrt(
            np.max(
                np.maximum.reduce([
                    np.sum((tri_a - centroids) ** 2, axis=1),
                    np.sum((tri_b - centroids) ** 2, axis=1),
                    np.sum((tri_c - centroids) ** 2, axis=1),
                ])
            )
        )
    )
    tree = cKDTree(centroids)
    points = np.asarray(points, dtype=np.float64)
    _, nearest = tree.query(points)
    upper = _point_triangle_distances_paired(
        points, tri_a[nearest], tri_b[nearest], tri_c[nearest]
    )
    dists = np.empty(len(points))
    groups = tree.query_ball_point(points, upper + radius + 1e-9)
    for i, cand in enumerate(groups):
        cand = np.asarray(cand, dtype=np.int64)
        dists[i] = np.min(
            _point_triangle_distances_paired(
                points[i][None, :].repeat(len(cand), axis=0),
                tri_a[cand], tri_b[cand], tri_c[cand],
            )
        )
    return dists


def depth_histogram_half_thickness(mesh, topo=None, percentile=95.0):
    """Half-thickness estimate: the given percentile of tet-barycenter
    distances to the boundary surface (mesh-intrinsic stand-in for a
    labelmap distance transform)."""
    topo = topo or mesh.boundary
    centers = mesh.vertices[mesh.tets].mean(axis=1)
    dists = boundary_distances(centers, mesh, topo)
    return float(np.percentile(dists, percentile))


def volume_depth_half_thickness(mesh, volume, percentile=95.0):
    """Half-thickness from a raster: distance transform of the voxel
    centers inside the mesh, matching the labelmap-based initialization."""
    from scipy.ndimage import distance_transform_edt

    from .resample import PointLocator, locate

    locator = PointLocator(mesh)
    centers = volume.voxel_centers()
    tet_idx, _ = locate(centers, mesh, locator)
    inside = (tet_idx >= 0).reshape(volume.dims, order="F")
    if not inside.any():
        return depth_histogram_half_thickness(mesh)
    dist = distance_transform_edt(inside, sampling=volume.spacing)
    return float(np.percentile(dist[inside], percentile))


def boundary_geodesic_spread(mesh, topo=None, percentile=95.0):
    """Percentile of all-pairs geodesic distances along boundary edges."""
    topo = topo or mesh.boundary
    graph = _boundary_edge_graph(mesh, topo)
    dist = dijkstra(graph, directed=False)
    vals = dist[np.isfinite(dist) & (dist > 0)]
    return float(np.percentile(vals, percentile))


def initial_template(kind, mesh, topo=None, h0=None, radii0=None, volume=None):
    """Template parameter initialization from the (aligned) mesh geometry."""
    topo = topo or mesh.boundary
    if h0 is None:
        if volume is not None:
            h0 = volume_depth_half_thickness(mesh, volume)
        else:
            h0 = depth_histogram_half_thickness(mesh, topo)
    if kind is ParallelPlanes or kind is SinglePlane:
        return kind(h=h0)
    if kind is Ellipsoid:
        if radii0 is not None:
            return Ellipsoid(*radii0)
        rz = h0
        ry = 0.5 * boundary_geodesic_spread(mesh, topo)
        rx = 3.0 * mesh.volume() / (4.0 * np.pi * ry * rz)
        return Ellipsoid(rx=rx, ry=ry, rz=rz)
    raise ValueError(f"unknown template kind {kind!r}")


def resolve_template_kind(template):
    if isinstance(template, str):
        try:
            return TEMPLATE_KINDS[template]
        except KeyError:
            raise ValueError(
                f"unknown template {template!r}; choose from "
                f"{sorted(TEMPLATE_KINDS)}"
            )
    return template


def flatten(mesh, template="planes", params=None, gamma=20.0, margin_mm=15.0,
            seed=0, volume=None, h0=None, radii0=None, parcellation=None):
    """Full pipeline: center, align principal axes, parcellate, initialize
    the template, and run the descent (two phases for the single-plane
    relaxation, which first maps to parallel planes and then relaxes the
    fetal constraint).

    Returns a :class:`FlatteningResult` whose ``mesh_z`` is the aligned
    original mesh (the frame the distortion is measured against) and
    ``mesh_x`` the flattened mesh.
    """
    params = params or OptimizerParams()
    kind = resolve_template_kind(template)

    centroid, rotation = principal_alignment(mesh.vertices)
    aligned = (mesh.vertices - centroid) @ rotation
    mesh_z = mesh.with_vertices(aligned, frame="original")
    topo = mesh_z.boundary

    parc = parcellation
    if kind is not Ellipsoid:
        if parc is None:
            parc = parcellate(
                mesh_z, gamma=gamma, margin_mm=margin_mm, seed=seed, topo=topo
            )
        # orient the third axis so the maternal side sits at negative x3
        maternal_ids = parc.global_ids(MATERNAL)
        if mesh_z.vertices[maternal_ids, 2].mean() > 0:
            flip = np.diag([1.0, -1.0, -1.0])
            rotation = rotation @ flip
            aligned = aligned @ flip
            mesh_z = mesh.with_vertices(aligned, frame="original")
            topo = mesh_z.boundary

    template0 = initial_template(
        kind, mesh_z, topo, h0=h0, radii0=radii0, volume=volume
    )

    model = EnergyModel(mesh_z, parc, params.lam, topo=topo)
    phases = []
    if kind is SinglePlane:
        phase1 = descend(
            mesh_z, parc, ParallelPlanes(h=template0.h), params, model=model
        )
        phases.append(phase1)
        result = descend(
            mesh_z, parc, SinglePlane(h=phase1.template.h), params,
            model=model, x0=phase1.x,
        )
    else:
        result = descend(mesh_z, parc, template0, params, model=model)

    result.mesh_z = mesh_z
    result.mesh_x = mesh_z.with_vertices(result.x, frame="template")
    result.parcellation = parc
    result.rotation = rotation
    result.translation = -centroid @ rotation
    result.template_initial = template0
    result.phases = phases
    return result
