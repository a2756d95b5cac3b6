"""Tetrahedral mesh representation and derived boundary topology.

Conventions
-----------
Vertices are float64 arrays of shape (N, 3) in millimetres; tets are int64
arrays of shape (K, 4).  Every tet is stored positively oriented: the edge
matrix with columns (v1-v0, v2-v0, v3-v0) has positive determinant, and the
signed volume is det/6.  Meshes are immutable after construction and safe to
share across threads.
"""

import numpy as np

from ._validation import check_tets, check_vertices
from .errors import DegenerateTetError, NonManifoldError

# Faces of a positively oriented tet (v0,v1,v2,v3), wound so their normals
# point away from the opposite vertex.
_TET_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)

# Relative volume below which a tet counts as degenerate rather than flipped.
_DEGENERATE_REL = 1e-12


def tet_edge_matrices(vertices, tets):
    """Per-tet 3x3 matrices whose columns are (v1-v0, v2-v0, v3-v0).

    This is the basis each tet spans; its determinant is six times the
    signed volume.

    Returns
    -------
    (K, 3, 3) array.
    """
    corners = vertices[tets]  # (K, 4, 3)
    return np.swapaxes(corners[:, 1:, :] - corners[:, :1, :], 1, 2)


def det3(m):
    """Vectorized determinant of (..., 3, 3) arrays via the triple product."""
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def signed_volumes(vertices, tets):
    """Signed volume of each tet; positive for correctly oriented tets."""
    return det3(tet_edge_matrices(vertices, tets)) / 6.0


class TetMesh:
    """Immutable tetrahedral mesh.

    Parameters
    ----------
    vertices : (N, 3) array_like
        Vertex coordinates in millimetres.
    tets : (K, 4) array_like
        Vertex indices; every tet must already be positively oriented.
        Use :meth:`from_unoriented` for data of unknown orientation.
    frame : str
        Provenance tag, ``"original"`` or ``"template"``.
    """

    def __init__(self, vertices, tets, frame="original"):
        if frame not in ("original", "template"):
            raise ValueError(f"frame must be 'original' or 'template', got {frame!r}")
        v = check_vertices(vertices).copy()
        t = check_tets(tets, len(v)).copy()
        vols = signed_volumes(v, t)
        scale = float(np.abs(vols).max(initial=0.0))
        if np.any(vols <= _DEGENERATE_REL * max(scale, 1e-300)):
            bad = int(np.argmin(vols))
            if abs(vols[bad]) <= _DEGENERATE_REL * max(scale, 1e-300):
                raise DegenerateTetError(
                    f"tet {bad} has zero volume ({vols[bad]:.3e} mm^3)"
                )
            raise ValueError(
                f"tet {bad} has negative volume ({vols[bad]:.3e} mm^3); "
                "fix orientation first (see TetMesh.from_unoriented)"
            )
        v.setflags(write=False)
        t.setflags(write=False)
        self.vertices = v
        self.tets = t
        self.frame = frame
        self._boundary = None

    @classmethod
    def from_unoriented(cls, vertices, tets, frame="original"):
        """Build a mesh, repairing negative tets by swapping two vertices.

        Returns
        -------
        mesh : TetMesh
        n_reoriented : int
            Number of tets whose orientation was fixed.  Zero-volume tets
            are still rejected; orientation is a convention, degeneracy is
            a data error.
        """
        v = check_vertices(vertices)
        t = check_tets(tets, len(v)).copy()
        vols = signed_volumes(v, t)
        flipped = vols < 0
        t[flipped] = t[flipped][:, [0, 1, 3, 2]]
        return cls(v, t, frame=frame), int(flipped.sum())

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def boundary(self):
        """Cached :class:`BoundaryTopology` (safe because meshes are frozen)."""
        if self._boundary is None:
            self._boundary = boundary_topology(self)
        return self._boundary

    def signed_volumes(self):
        return signed_volumes(self.vertices, self.tets)

    def volume(self):
        return float(self.signed_volumes().sum())

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def with_vertices(self, vertices, frame=None):
        """New mesh sharing connectivity but with replaced coordinates."""
        return TetMesh(vertices, self.tets, frame=frame or self.frame)

    def __repr__(self):
        return (
            f"TetMesh(n_vertices={self.n_vertices}, n_tets={self.n_tets}, "
            f"frame={self.frame!r})"
        )


class BoundaryTopology:
    """Derived boundary surface of a :class:`TetMesh`.

    Attributes
    ----------
    triangles : (F, 3) int array
        Outward-oriented boundary triangles.
    vertex_ids : (M,) int array
        Sorted global indices of boundary vertices.
    edges : (E, 2) int array
        Unique boundary edges, each row sorted, rows lexicographic.
    triangle_areas : (F,) array in mm^2.
    vertex_area_weights : (M,) array
        Normalized barycentric area A_m per boundary vertex (sums to 1),
        aligned with ``vertex_ids``.
    tet_volume_weights : (K,) array
        Normalized tet volume V_k (sums to 1).
    """

    def __init__(self, triangles, vertex_ids, edges, triangle_areas,
                 vertex_area_weights, tet_volume_weights):
        self.triangles = triangles
        self.vertex_ids = vertex_ids
        self.edges = edges
        self.triangle_areas = triangle_areas
        self.vertex_area_weights = vertex_area_weights
        self.tet_volume_weights = tet_volume_weights
        # global vertex index -> position in vertex_ids (-1 for interior)
        n = int(vertex_ids.max(initial=-1)) + 1
        lookup = np.full(n, -1, dtype=np.int64)
        lookup[vertex_ids] = np.arange(len(vertex_ids))
        self.vertex_rank = lookup

    @property
    def n_boundary_vertices(self):
        return len(self.vertex_ids)

    def local_index(self, global_ids):
        """Map global vertex ids to rows of ``vertex_ids`` (-1 if interior)."""
        g = np.asarray(global_ids)
        out = np.full(g.shape, -1, dtype=np.int64)
        valid = g < len(self.vertex_rank)
        out[valid] = self.vertex_rank[g[valid]]
        return out

    def edge_lengths(self, vertices):
        e = self.edges
        return np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1)


def boundary_faces(tets):
    """Outward-oriented boundary triangles: faces belonging to exactly one tet."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)  # (4K, 3), oriented
    key = np.sort(faces, axis=1)
    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    key_sorted = key[order]
    new_group = np.ones(len(key_sorted), dtype=bool)
    new_group[1:] = np.any(key_sorted[1:] != key_sorted[:-1], axis=1)
    group_ids = np.cumsum(new_group) - 1
    counts = np.bincount(group_ids)
    if counts.max(initial=1) > 2:
        raise NonManifoldError("a triangle face is shared by more than two tets")
    single = counts[group_ids] == 1
    return faces[order[single]]


def boundary_topology(mesh):
    """Extract the boundary surface and the normalized A_m / V_k weights.

    A_m is one third of the summed areas of the boundary triangles incident
    to vertex m (barycentric lumping), normalized so the weights sum to 1.
    V_k is the tet volume, likewise normalized.

    Raises
    ------
    NonManifoldError
        If any boundary edge does not border exactly two boundary triangles.
    """
    tris = boundary_faces(mesh.tets)
    if len(tris) == 0:
        raise NonManifoldError("mesh has no boundary faces")

    # closed 2-manifold check: every boundary edge in exactly 2 triangles
    raw_edges = np.sort(tris[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
    edges, edge_counts = np.unique(raw_edges, axis=0, return_counts=True)
    if np.any(edge_counts != 2):
        bad = edges[np.flatnonzero(edge_counts != 2)[0]]
        raise NonManifoldError(
            f"boundary edge {tuple(bad.tolist())} borders "
            f"{int(edge_counts[edge_counts != 2][0])} triangles (expected 2)"
        )

    v = mesh.vertices
    cross = np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)

    vertex_ids = np.unique(tris)
    acc = np.zeros(mesh.n_vertices)
    for c in range(3):
        np.add.at(acc, tris[:, c], areas / 3.0)
    weights = acc[vertex_ids]
    weights = weights / weights.sum()

    vols = mesh.signed_volumes()
    vk = vols / vols.sum()

    return BoundaryTopology(tris, vertex_ids, edges, areas, weights, vk)


def triangle_normals(vertices, triangles, normalized=True):
    cross = np.cross(
        vertices[triangles[:, 1]] - vertices[triangles[:, 0]],
        vertices[triangles[:, 2]] - vertices[triangles[:, 0]],
    )
    if not normalized:
        return cross
    return cross / np.linalg.norm(cross, axis=1, keepdims=True)


def vertex_normals(mesh, topo=None):
    """Unit outward normal per boundary vertex.

    Normals of the incident boundary triangles are averaged with weights
    proportional to the triangle areas, then renormalized.  A vertex whose
    area-weighted average cancels falls back to the unweighted average of
    unit face normals; if that is still zero the vertex index is reported.

    Returns
    -------
    (M, 3) array aligned with ``topo.vertex_ids``.
    """
    topo = topo or mesh.boundary
    tris = topo.triangles
    # unnormalized cross products have magnitude 2*area: summing them IS
    # the area-weighted average (up to scale)
    cross = triangle_normals(mesh.vertices, tris, normalized=False)
    acc = np.zeros((mesh.n_vertices, 3))
    for c in range(3):
        np.add.at(acc, tris[:, c], cross)
    normals = acc[topo.vertex_ids]
    lengths = np.linalg.norm(normals, axis=1)

    degenerate = lengths < 1e-12 * max(float(lengths.max(initial=0.0)), 1e-300)
    if np.any(degenerate):
        unit = cross / np.linalg.norm(cross, axis=1, keepdims=True)
        acc2 = np.zeros((mesh.n_vertices, 3))
        for c in range(3):
            np.add.at(acc2, tris[:, c], unit)
        fallback = acc2[topo.vertex_ids[degenerate]]
        fb_len = np.linalg.norm(fallback, axis=1)
        if np.any(fb_len < 1e-12):
            bad = topo.vertex_ids[degenerate][fb_len < 1e-12]
            raise ValueError(
                f"zero-length normal average at boundary vertices {bad.tolist()}"
            )
        normals[degenerate] = fallback
        lengths = np.linalg.norm(normals, axis=1)

    return normals / lengths[:, None]


def boundary_vertex_adjacency(topo):
    """Adjacency lists (index arrays) over boundary vertices, local indexing.

    Returns
    -------
    neighbors : list of int arrays
        ``neighbors[i]`` are local boundary-vertex indices adjacent to i.
    """
    e = topo.local_index(topo.edges)
    m = topo.n_boundary_vertices
    both = np.concatenate([e, e[:, ::-1]])
    order = np.argsort(both[:, 0], kind="stable")
    src = both[order, 0]
    dst = both[order, 1]
    starts = np.searchsorted(src, np.arange(m))
    ends = np.searchsorted(src, np.arange(m) + 1)
    return [dst[s:t] for s, t in zip(starts, ends)]
