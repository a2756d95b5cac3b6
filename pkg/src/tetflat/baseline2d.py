"""Stacked-surface 2D baseline.

Horizontal planes cut the flattened volume into cross-section surfaces
(marching tetrahedra); each section vertex carries its barycentric
coordinates, which transport it back to the original volume.  Every
surface is then flattened independently to a disk: the boundary loop maps
to a circle by cumulative arc length, the interior solves the discrete
Laplace equation (cotangent weights, uniform fallback), disks align by
rotating the highest original-space boundary point to north, and one
global radius scale zeroes the mean log2 areal distortion of the stack.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

logger = logging.getLogger(__name__)

# local corner pairs of the six tet edges
_TET_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


@dataclass
class SliceSurface:
    """One triangulated cross-section with dual coordinates.

    Vertices carry the template-space position, the original-space
    position obtained through the stored (tet, barycentric) pairs, and a
    single ordered boundary loop (disk topology).
    """

    plane_z: float
    vertices_template: np.ndarray
    vertices_original: np.ndarray
    triangles: np.ndarray
    boundary_loop: np.ndarray
    tet_ids: np.ndarray
    alphas: np.ndarray


def _section_topology(triangles):
    """(is_single_component, boundary_loops) of a triangle soup."""
    n = triangles.max() + 1
    edges = np.sort(
        triangles[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1
    )
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    if counts.max(initial=0) > 2:
        return False, []
    # connectivity over vertices
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in uniq:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    used = np.unique(triangles)
    single = len({find(int(v)) for v in used}) == 1

    boundary = uniq[counts == 1]
    loops = []
    if len(boundary):
        nbr = {}
        for a, b in boundary:
            nbr.setdefault(int(a), []).append(int(b))
            nbr.setdefault(int(b), []).append(int(a))
        if any(len(v) != 2 for v in nbr.values()):
            return single, []
        visited = set()
        for start in sorted(nbr):
            if start in visited:
                continue
            loop = [start]
            visited.add(start)
            prev, cur = None, start
            while True:
                nxt = [v for v in nbr[cur] if v != prev]
                if not nxt:
                    break
                prev, cur = cur, nxt[0]
                if cur == start:
                    break
                loop.append(cur)
                visited.add(cur)
            loops.append(np.array(loop, dtype=np.int64))
    return single, loops


def slice_at(mesh_x, mesh_z, z_plane, with_status=False):
    """Marching-tetrahedra section of the flattened mesh at x3 == z_plane.

    Returns a :class:`SliceSurface`, or None when the plane misses the
    mesh or the section is not a single disk (multiple components or
    loops).  With ``with_status=True`` also returns "ok" / "empty" /
    "not-disk".
    """
    def done(surface, status):
        return (surface, status) if with_status else surface

    xv = mesh_x.vertices
    tets = mesh_x.tets
    span = xv[:, 2].max() - xv[:, 2].min()
    # nudge the plane off any vertex to avoid degenerate crossings
    nudge = 1e-9 * max(span, 1e-12)
    z = float(z_plane)
    for _ in range(40):
        if np.min(np.abs(xv[:, 2] - z)) > nudge / 2:
            break
        z += nudge

    values = xv[tets, 2] - z            # (K, 4)
    pos = values > 0
    n_pos = pos.sum(axis=1)
    crossed = (n_pos > 0) & (n_pos < 4)
    if not crossed.any():
        return done(None, "empty")

    edge_vertices = {}
    verts_t, tet_of, alpha_of = [], [], []

    def edge_point(tet_idx, la, lb):
        ga, gb = int(tets[tet_idx, la]), int(tets[tet_idx, lb])
        key = (ga, gb) if ga < gb else (gb, ga)
        found = edge_vertices.get(key)
        if found is not None:
            return found
        va = xv[key[0], 2] - z
        vb = xv[key[1], 2] - z
        t = va / (va - vb)
        point = xv[key[0]] + t * (xv[key[1]] - xv[key[0]])
        alpha = np.zeros(4)
        alpha[np.flatnonzero(tets[tet_idx] == key[0])[0]] = 1.0 - t
        alpha[np.flatnonzero(tets[tet_idx] == key[1])[0]] = t
        idx = len(verts_t)
        verts_t.append(point)
        tet_of.append(tet_idx)
        alpha_of.append(alpha)
        edge_vertices[key] = idx
        return idx

    triangles = []
    for k in np.flatnonzero(crossed):
        sign = pos[k]
        above = np.flatnonzero(sign)
        below = np.flatnonzero(~sign)
        if len(above) == 1 or len(below) == 1:
            lone = above[0] if len(above) == 1 else below[0]
            others = [i for i in range(4) if i != lone]
            triangles.append([edge_point(k, lone, o) for o in others])
        else:
            p1, p2 = above
            n1, n2 = below
            quad = [
                edge_point(k, p1, n1),
                edge_point(k, p1, n2),
                edge_point(k, p2, n2),
                edge_point(k, p2, n1),
            ]
            triangles.append([quad[0], quad[1], quad[2]])
            triangles.append([quad[0], quad[2], quad[3]])

    verts_t = np.array(verts_t)
    triangles = np.array(triangles, dtype=np.int64)
    tet_of = np.array(tet_of, dtype=np.int64)
    alpha_of = np.array(alpha_of)

    # drop exact-degenerate slivers (repeated section vertices)
    keep = (
        (triangles[:, 0] != triangles[:, 1])
        & (triangles[:, 1] != triangles[:, 2])
        & (triangles[:, 0] != triangles[:, 2])
    )
    triangles = triangles[keep]
    if len(triangles) == 0:
        return done(None, "empty")

    # orient consistently: counter-clockwise seen from +x3
    e1 = verts_t[triangles[:, 1], :2] - verts_t[triangles[:, 0], :2]
    e2 = verts_t[triangles[:, 2], :2] - verts_t[triangles[:, 0], :2]
    flop = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    triangles[flop] = triangles[flop][:, [0, 2, 1]]

    single, loops = _section_topology(triangles)
    if not single or len(loops) != 1:
        return done(None, "not-disk")

    verts_o = np.einsum(
        "nc,ncd->nd", alpha_of, mesh_z.vertices[mesh_z.tets[tet_of]]
    )
    return done(
        SliceSurface(
            plane_z=z,
            vertices_template=verts_t,
            vertices_original=verts_o,
            triangles=triangles,
            boundary_loop=loops[0],
            tet_ids=tet_of,
            alphas=alpha_of,
        ),
        "ok",
    )


def slice_surfaces(mesh_x, mesh_z, spacing_mm=3.0):
    """Sections at planes spaced ``spacing_mm`` apart across the x3 range.

    Returns (surfaces, n_skipped): one entry per plane, None where the
    plane missed the mesh; non-disk sections are skipped (with a warning)
    and counted.
    """
    if not np.array_equal(mesh_x.tets, mesh_z.tets):
        raise ValueError("meshes must share connectivity")
    z_lo = mesh_x.vertices[:, 2].min()
    z_hi = mesh_x.vertices[:, 2].max()
    count = int(np.floor((z_hi - z_lo) / spacing_mm)) + 1
    surfaces = []
    n_skipped = 0
    for i in range(count):
        z = z_lo + i * spacing_mm
        surf, status = slice_at(mesh_x, mesh_z, z, with_status=True)
        if status == "not-disk":
            n_skipped += 1
            logger.warning("slice at x3=%.3f is not a disk; skipped", z)
        surfaces.append(surf)
    return surfaces, n_skipped


def _cotangent_weights(vertices, triangles):
    """Symmetric cotangent edge weights of a triangle surface."""
    i, j, k = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    rows, cols, vals = [], [], []
    for a, b, opp in ((i, j, k), (j, k, i), (k, i, j)):
        u = vertices[a] - vertices[opp]
        v = vertices[b] - vertices[opp]
        cos = np.sum(u * v, axis=1)
        sin = np.linalg.norm(np.cross(u, v), axis=1)
        cot = cos / np.maximum(sin, 1e-300)
        rows.append(a)
        cols.append(b)
        vals.append(0.5 * cot)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = len(vertices)
    w = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return w + w.T


def _uniform_weights(vertices, triangles):
    i, j, k = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    rows = np.concatenate([i, j, k])
    cols = np.concatenate([j, k, i])
    n = len(vertices)
    w = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    w = w + w.T
    w.data[:] = 1.0
    return w


def _solve_harmonic(weights, boundary, boundary_uv, n):
    lap = sp.diags(np.asarray(weights.sum(axis=1)).ravel()) - weights
    interior = np.setdiff1d(np.arange(n), boundary)
    uv = np.zeros((n, 2))
    uv[boundary] = boundary_uv
    if len(interior):
        lap = lap.tocsr()
        a = lap[interior][:, interior].tocsc()
        rhs = -lap[interior][:, boundary] @ boundary_uv
        sol = np.column_stack([spsolve(a, rhs[:, 0]), spsolve(a, rhs[:, 1])])
        # one step of iterative refinement: sliver triangles give the
        # cotangent system a rough scale and a raw solve leaves visible
        # residual
        resid = rhs - a @ sol
        sol += np.column_stack(
            [spsolve(a, resid[:, 0]), spsolve(a, resid[:, 1])]
        )
        uv[interior] = sol
    return uv


def _embedding_flips(uv, triangles):
    e1 = uv[triangles[:, 1]] - uv[triangles[:, 0]]
    e2 = uv[triangles[:, 2]] - uv[triangles[:, 0]]
    return int(np.sum(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] <= 0))


def harmonic_disk(surface, radius=1.0):
    """Harmonic parameterization of one slice to a disk.

    The boundary loop (original-space geometry) maps to the circle by
    cumulative arc length; interior vertices solve the cotangent-weight
    Laplace system.  If the cotangent solve fails or produces flipped
    triangles, uniform weights are used instead (Tutte-style convex
    combination map, flip-free for a convex boundary) and the fallback is
    flagged.  Finally the disk rotates so the boundary vertex with maximal
    original x3 lands at angle +90 degrees (north).

    Returns
    -------
    (uv, info) where uv is (n, 2) and info records
    {'used_fallback': bool, 'flipped': int}.
    """
    verts = surface.vertices_original
    loop = surface.boundary_loop
    seg = np.linalg.norm(verts[np.roll(loop, -1)] - verts[loop], axis=1)
    total = seg.sum()
    s = np.concatenate([[0.0], np.cumsum(seg[:-1])])
    angle = 2.0 * np.pi * s / total
    # consistent winding: the loop should run counter-clockwise in the
    # template plane so the disk preserves orientation
    tpl = surface.vertices_template[loop, :2]
    area2 = np.sum(
        tpl[:, 0] * np.roll(tpl[:, 1], -1) - np.roll(tpl[:, 0], -1) * tpl[:, 1]
    )
    if area2 < 0:
        angle = -angle
    boundary_uv = radius * np.column_stack([np.cos(angle), np.sin(angle)])

    n = len(verts)
    info = {"used_fallback": False, "flipped": 0}
    try:
        w = _cotangent_weights(verts, surface.triangles)
        uv = _solve_harmonic(w, loop, boundary_uv, n)
        flips = _embedding_flips(uv, surface.triangles)
    except Exception:
        flips = -1
    if flips != 0:
        info["used_fallback"] = True
        w = _uniform_weights(verts, surface.triangles)
        uv = _solve_harmonic(w, loop, boundary_uv, n)
        info["flipped"] = _embedding_flips(uv, surface.triangles)

    # north alignment: highest original-space boundary point to +90 deg
    top = loop[int(np.argmax(verts[loop, 2]))]
    theta = np.arctan2(uv[top, 1], uv[top, 0])
    rot = np.pi / 2.0 - theta
    c, s_ = np.cos(rot), np.sin(rot)
    uv = uv @ np.array([[c, s_], [-s_, c]])
    return uv, info


def triangle_areas_2d(uv, triangles):
    e1 = uv[triangles[:, 1]] - uv[triangles[:, 0]]
    e2 = uv[triangles[:, 2]] - uv[triangles[:, 0]]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def triangle_areas_3d(verts, triangles):
    cross = np.cross(
        verts[triangles[:, 1]] - verts[triangles[:, 0]],
        verts[triangles[:, 2]] - verts[triangles[:, 0]],
    )
    return 0.5 * np.linalg.norm(cross, axis=1)


def choose_radius_scale(areal_log2):
    """Scale factor zeroing the mean log2 areal distortion.

    Scaling the disk by s multiplies areas by s^2 and shifts every log2
    ratio by 2 log2 s, so s = 2^(-mean/2) exactly.
    """
    mean = float(np.mean(areal_log2))
    return 2.0 ** (-mean / 2.0)


@dataclass
class BaselineResult:
    surfaces: list
    embeddings: list
    radius_scale: float
    areal_log2: np.ndarray
    metric_log2: np.ndarray
    per_slice_areal: list = field(default_factory=list)
    n_skipped: int = 0
    n_fallback: int = 0


def parameterize_stack(mesh_x, mesh_z, spacing_mm=3.0):
    """Run the full baseline: slice, flatten each slice, rescale the stack.

    Distortion is measured against the original-space slice geometry:
    areal per section triangle, metric per section edge.
    """
    surfaces, n_skipped = slice_surfaces(mesh_x, mesh_z, spacing_mm)
    kept = [s for s in surfaces if s is not None]
    if not kept:
        raise ValueError("no disk-topology slices found")
    embeddings = []
    n_fallback = 0
    for surf in kept:
        uv, info = harmonic_disk(surf)
        embeddings.append(uv)
        n_fallback += int(info["used_fallback"])

    areal_parts, metric_parts = [], []
    for surf, uv in zip(kept, embeddings):
        a2 = triangle_areas_2d(uv, surf.triangles)
        a3 = triangle_areas_3d(surf.vertices_original, surf.triangles)
        areal_parts.append(np.log2(a2 / a3))
        edges = np.unique(
            np.sort(
                surf.triangles[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2),
                axis=1,
            ),
            axis=0,
        )
        l2 = np.linalg.norm(uv[edges[:, 0]] - uv[edges[:, 1]], axis=1)
        l3 = np.linalg.norm(
            surf.vertices_original[edges[:, 0]]
            - surf.vertices_original[edges[:, 1]],
            axis=1,
        )
        metric_parts.append(np.log2(l2 / l3))

    scale = choose_radius_scale(np.concatenate(areal_parts))
    embeddings = [uv * scale for uv in embeddings]
    shift = 2.0 * np.log2(scale)
    areal_parts = [a + shift for a in areal_parts]
    metric_parts = [m + np.log2(scale) for m in metric_parts]

    return BaselineResult(
        surfaces=kept,
        embeddings=embeddings,
        radius_scale=scale,
        areal_log2=np.concatenate(areal_parts),
        metric_log2=np.concatenate(metric_parts),
        per_slice_areal=areal_parts,
        n_skipped=n_skipped,
        n_fallback=n_fallback,
    )
