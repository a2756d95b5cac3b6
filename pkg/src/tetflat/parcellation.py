"""Boundary parcellation into fetal side, maternal side, and margin.

The boundary surface is segmented once, before optimization, by spectral
bipartition of an affinity graph built from boundary vertex normals and
short-range geodesic distances; the side with more convex-hull contact is
labeled maternal, and a geodesic band around the cluster interface becomes
the margin.  Labels never change during optimization.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.sparse.linalg import eigsh
from scipy.spatial import ConvexHull, QhullError
from sklearn.base import BaseEstimator

from ._validation import check_unit_normals
from .errors import ConvergenceError, ParcellationError
from .mesh import vertex_normals

FETAL = 0
MATERNAL = 1
MARGIN = 2

LABEL_NAMES = {FETAL: "fetal", MATERNAL: "maternal", MARGIN: "margin"}


@dataclass(frozen=True)
class BoundaryParcellation:
    """Fixed per-boundary-vertex labels plus the embedding that produced them.

    ``vertex_ids`` are global mesh vertex indices; ``labels`` take values
    FETAL / MATERNAL / MARGIN.
    """

    vertex_ids: np.ndarray
    labels: np.ndarray
    fiedler: np.ndarray
    margin_mm: float
    hull_votes: dict

    def global_ids(self, label):
        return self.vertex_ids[self.labels == label]

    def counts(self):
        return {
            name: int(np.sum(self.labels == value))
            for value, name in LABEL_NAMES.items()
        }


@dataclass(frozen=True)
class AffinityGraph:
    """Sparse symmetric nonnegative affinity over boundary vertices."""

    weights: sp.csr_matrix
    gamma: float

    @property
    def degrees(self):
        return np.asarray(self.weights.sum(axis=1)).ravel()


def _boundary_edge_graph(mesh, topo):
    """CSR graph over boundary vertices (local indices) weighted by length."""
    e = topo.local_index(topo.edges)
    lengths = topo.edge_lengths(mesh.vertices)
    m = topo.n_boundary_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    vals = np.concatenate([lengths, lengths])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def three_ring_geodesics(mesh, topo=None, normalize=True):
    """Geodesic distances between boundary vertices joined by <= 3 edges.

    Distances are shortest-path sums of Euclidean edge lengths over paths
    of at most three boundary edges (Dijkstra restricted to the three-ring
    neighborhood), then divided by the global maximum so values lie in
    (0, 1] (skip with ``normalize=False`` to get millimetres).  The result
    is bitwise symmetric: each unordered pair is computed once and
    mirrored.

    Returns
    -------
    scipy.sparse.csr_matrix over local boundary-vertex indices.
    """
    topo = topo or mesh.boundary
    graph = _boundary_edge_graph(mesh, topo)
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp != 1:
        raise ParcellationError(
            f"boundary has {n_comp} connected components (expected 1)"
        )
    m = topo.n_boundary_vertices
    indptr, indices, weights = graph.indptr, graph.indices, graph.data

    rows, cols, dists = [], [], []
    for s in range(m):
        d = np.full(m, np.inf)
        d[s] = 0.0
        active = np.array([s])
        for _ in range(3):
            # relax every edge out of the active set (one Bellman round:
            # after round r, d holds shortest paths using <= r edges)
            nbr_chunks, cand_chunks = [], []
            for u in active:
                lo, hi = indptr[u], indptr[u + 1]
                nbr_chunks.append(indices[lo:hi])
                cand_chunks.append(d[u] + weights[lo:hi])
            nbr = np.concatenate(nbr_chunks)
            cand = np.concatenate(cand_chunks)
            improved = cand < d[nbr]
            if not np.any(improved):
                break
            tgt, val = nbr[improved], cand[improved]
            np.minimum.at(d, tgt, val)
            active = np.unique(tgt)
        reached = np.flatnonzero(np.isfinite(d))
        reached = reached[reached > s]  # canonical i<j; mirrored below
        rows.append(np.full(len(reached), s, dtype=np.int64))
        cols.append(reached)
        dists.append(d[reached])

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    dists = np.concatenate(dists)
    if len(dists) == 0:
        raise ParcellationError("no three-ring pairs found")
    if normalize:
        dists = dists / dists.max()
    full_rows = np.concatenate([rows, cols])
    full_cols = np.concatenate([cols, rows])
    full_vals = np.concatenate([dists, dists])
    return sp.csr_matrix((full_vals, (full_rows, full_cols)), shape=(m, m))


def build_affinity(normals, geodesics, gamma=20.0):
    """Affinity w_ij = exp(gamma <n_i, n_j> l_ij) over the three-ring pairs.

    The diagonal is left empty: the formula would give w_ii = 1 for every
    vertex regardless of parameters, and dropping self-loops keeps the
    conventional Laplacian structure.
    """
    normals = check_unit_normals(normals)
    geo = geodesics.tocoo()
    dots = np.einsum("ij,ij->i", normals[geo.row], normals[geo.col])
    w = np.exp(gamma * dots * geo.data)
    weights = sp.csr_matrix((w, (geo.row, geo.col)), shape=geo.shape)
    return AffinityGraph(weights=weights, gamma=float(gamma))


def normalized_laplacian(weights):
    """L = I - D^{-1/2} W D^{-1/2} for a sparse symmetric affinity W."""
    if isinstance(weights, AffinityGraph):
        weights = weights.weights
    degrees = np.asarray(weights.sum(axis=1)).ravel()
    if np.any(degrees <= 0):
        bad = int(np.flatnonzero(degrees <= 0)[0])
        raise ParcellationError(f"isolated boundary vertex {bad} (zero degree)")
    inv_sqrt = 1.0 / np.sqrt(degrees)
    scaled = weights.multiply(inv_sqrt[:, None]).multiply(inv_sqrt[None, :])
    lap = sp.identity(weights.shape[0], format="csr") - scaled.tocsr()
    return lap


def fiedler_vector(lap, degrees, seed=0, residual_tol=1e-8, maxiter=10000):
    """Eigenvector of the second-smallest eigenvalue of the normalized Laplacian.

    Uses shift-invert Lanczos (ARPACK) with the known null vector
    D^{1/2} 1 deflated from the start vector and projected out of the
    result.  The sign is fixed so the largest-magnitude entry is positive.

    Returns
    -------
    (eigenvalue, vector) with ||L v - lambda v|| <= residual_tol.
    """
    n = lap.shape[0]
    null = np.sqrt(np.asarray(degrees, dtype=np.float64))
    null = null / np.linalg.norm(null)
    if n < 5:
        # ARPACK needs k < n-1; tiny graphs use the dense factorization
        vals, vecs = np.linalg.eigh(lap.toarray())
        lam, vec = vals[1], vecs[:, 1]
    else:
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(n)
        v0 -= null * (null @ v0)
        try:
            vals, vecs = eigsh(
                lap.tocsc(), k=2, sigma=-1e-3, which="LM", v0=v0,
                maxiter=maxiter, tol=1e-12,
            )
        except Exception as exc:  # ArpackNoConvergence and friends
            raise ConvergenceError(f"Fiedler eigensolve failed: {exc}") from exc
        order = np.argsort(vals)
        lam, vec = vals[order[1]], vecs[:, order[1]]
    vec = vec - null * (null @ vec)
    vec = vec / np.linalg.norm(vec)
    lam = float(vec @ (lap @ vec))
    residual = float(np.linalg.norm(lap @ vec - lam * vec))
    if residual > residual_tol:
        raise ConvergenceError(
            f"Fiedler residual {residual:.3e} exceeds {residual_tol:.0e}"
        )
    anchor = int(np.argmax(np.abs(vec)))
    if vec[anchor] < 0:
        vec = -vec
    return lam, vec


def bipartition_and_assign(mesh, topo, embedding, hull_tol_factor=1e-6):
    """Threshold the embedding at zero and name the clusters.

    The cluster with more vertices on the 3-D convex hull of the boundary
    becomes maternal (the convex side).  A vertex is "on the hull" when its
    distance to the hull surface is below ``hull_tol_factor`` times the
    bounding-box diagonal.  Ties go to the larger cluster.

    Returns
    -------
    (maternal_mask, fetal_mask, votes) over local boundary indices.
    """
    emb = np.asarray(embedding)
    pos = emb > 0.0
    neg = ~pos
    if not pos.any() or not neg.any():
        raise ParcellationError("thresholding produced an empty cluster")

    points = mesh.vertices[topo.vertex_ids]
    try:
        hull = ConvexHull(points)
    except QhullError as exc:
        raise ParcellationError(f"degenerate convex hull: {exc}") from exc
    # signed distance to each facet plane; <= 0 inside
    planes = hull.equations
    dist = planes[:, :3] @ points.T + planes[:, 3:4]
    hull_dist = np.abs(dist.max(axis=0))
    tol = hull_tol_factor * mesh.bbox_diagonal()
    on_hull = hull_dist <= tol

    votes_pos = int(np.sum(on_hull & pos))
    votes_neg = int(np.sum(on_hull & neg))
    if votes_pos != votes_neg:
        maternal = pos if votes_pos > votes_neg else neg
    elif pos.sum() != neg.sum():
        maternal = pos if pos.sum() > neg.sum() else neg
    else:
        # fully symmetric: deterministic tie-break on the lowest vertex id
        maternal = pos if pos[0] else neg
    fetal = ~maternal
    votes = {
        "maternal": votes_pos if maternal is pos else votes_neg,
        "fetal": votes_neg if maternal is pos else votes_pos,
    }
    return maternal, fetal, votes


def expand_margin(mesh, topo, maternal_mask, fetal_mask, half_width_mm,
                  fiedler=None, hull_votes=None):
    """Grow the margin band around the cluster interface.

    Seeds are vertices with an edge-neighbor in the other cluster; the
    margin is every boundary vertex within geodesic distance
    ``half_width_mm`` (millimetres, unnormalized) of a seed.
    """
    if half_width_mm < 0:
        raise ValueError("margin half-width must be >= 0")
    m = topo.n_boundary_vertices
    graph = _boundary_edge_graph(mesh, topo)
    e = topo.local_index(topo.edges)
    cross = maternal_mask[e[:, 0]] != maternal_mask[e[:, 1]]
    seeds = np.unique(e[cross])
    labels = np.where(maternal_mask, MATERNAL, FETAL).astype(np.int64)
    if len(seeds):
        dist = dijkstra(graph, directed=False, indices=seeds, min_only=True)
        labels[dist <= half_width_mm] = MARGIN
    if not np.any(labels == MATERNAL) or not np.any(labels == FETAL):
        raise ParcellationError(
            f"margin half-width {half_width_mm} mm consumed an entire "
            "cluster; shrink it"
        )
    return BoundaryParcellation(
        vertex_ids=topo.vertex_ids,
        labels=labels,
        fiedler=np.zeros(m) if fiedler is None else np.asarray(fiedler),
        margin_mm=float(half_width_mm),
        hull_votes=dict(hull_votes or {}),
    )


def parcellate(mesh, gamma=20.0, margin_mm=15.0, seed=0, hull_tol_factor=1e-6,
               topo=None):
    """Full parcellation pipeline on a mesh in its original coordinates."""
    topo = topo or mesh.boundary
    normals = vertex_normals(mesh, topo)
    geodesics = three_ring_geodesics(mesh, topo)
    affinity = build_affinity(normals, geodesics, gamma)
    lap = normalized_laplacian(affinity.weights)
    _, embedding = fiedler_vector(lap, affinity.degrees, seed=seed)
    maternal, fetal, votes = bipartition_and_assign(
        mesh, topo, embedding, hull_tol_factor
    )
    return expand_margin(
        mesh, topo, maternal, fetal, margin_mm,
        fiedler=embedding, hull_votes=votes,
    )


class BoundaryParcellator(BaseEstimator):
    """Estimator wrapper around :func:`parcellate`.

    Parameters
    ----------
    gamma : float
        Spectral affinity sharpness (Eq. form: exp(gamma * <n_i,n_j> * l)).
    margin_mm : float
        Geodesic half-width of the margin band, in millimetres.
    seed : int
        Seed for the eigensolver start vector.
    hull_tol_factor : float
        On-hull distance tolerance as a fraction of the bbox diagonal.

    Attributes
    ----------
    parcellation_ : BoundaryParcellation
    labels_ : (M,) int array over boundary vertices (FETAL/MATERNAL/MARGIN)
    boundary_vertex_ids_ : (M,) global vertex indices
    fiedler_ : (M,) spectral embedding values
    hull_votes_ : dict
    """

    def __init__(self, gamma=20.0, margin_mm=15.0, seed=0, hull_tol_factor=1e-6):
        self.gamma = gamma
        self.margin_mm = margin_mm
        self.seed = seed
        self.hull_tol_factor = hull_tol_factor

    def fit(self, mesh, y=None):
        parc = parcellate(
            mesh, gamma=self.gamma, margin_mm=self.margin_mm,
            seed=self.seed, hull_tol_factor=self.hull_tol_factor,
        )
        self.parcellation_ = parc
        self.labels_ = parc.labels
        self.boundary_vertex_ids_ = parc.vertex_ids
        self.fiedler_ = parc.fiedler
        self.hull_votes_ = parc.hull_votes
        return self

    def fit_predict(self, mesh, y=None):
        return self.fit(mesh).labels_
