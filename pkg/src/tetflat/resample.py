"""Map scalar volumes through the piecewise-affine map.

Each template-space voxel center is located in the flattened mesh, its
barycentric coordinates transport it to the original mesh (z = Z_k alpha),
and the input volume is sampled there with trilinear interpolation.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .energy import inv3
from .mesh import tet_edge_matrices
from .volume import ScalarVolume

INSIDE_TOL = 1e-9   # barycentric slack for inside/outside decisions


def barycentric(points, corners, inv_basis=None):
    """Barycentric coordinates of points in tets.

    x - x1 = (X_k B) [a2 a3 a4]^T, so the tail weights are
    (X_k B)^{-1} (x - x1) and alpha[0] completes the vector so the weights
    sum to one exactly.  (Solving with the inverse, not its transpose, is
    what makes X_k alpha reproduce x.)

    Parameters
    ----------
    points : (n, 3)
    corners : (n, 4, 3)
        Corner positions, one tet per point.
    inv_basis : (n, 3, 3), optional
        Precomputed (X_k B)^{-1} per tet.

    Returns
    -------
    (n, 4) weights with rows summing to 1 exactly.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    corners = np.asarray(corners, dtype=np.float64)
    if corners.ndim == 2:
        corners = np.broadcast_to(corners[None], (len(points), 4, 3))
    if inv_basis is None:
        edges = np.swapaxes(corners[:, 1:, :] - corners[:, :1, :], 1, 2)
        inv_basis = inv3(edges)
    rel = points - corners[:, 0, :]
    tail = np.einsum("nij,nj->ni", inv_basis, rel)
    alpha = np.empty((len(points), 4))
    alpha[:, 1:] = tail
    alpha[:, 0] = 1.0 - (tail[:, 0] + tail[:, 1] + tail[:, 2])
    return alpha


class PointLocator:
    """Uniform spatial hash over tets.

    Cell size defaults to the mean tet bounding-box extent; every tet is
    registered in all grid cells its (slightly padded) bbox overlaps, so
    query answers do not depend on the cell size.
    """

    def __init__(self, mesh, cell_size=None):
        self.mesh = mesh
        v = mesh.vertices
        corners = v[mesh.tets]
        tet_lo = corners.min(axis=1)
        tet_hi = corners.max(axis=1)
        if cell_size is None:
            cell_size = float((tet_hi - tet_lo).max(axis=1).mean())
        self.cell_size = float(cell_size)
        pad = INSIDE_TOL * mesh.bbox_diagonal() + 1e-12
        self.origin = v.min(axis=0) - pad
        upper = v.max(axis=0) + pad
        self.dims = np.maximum(
            np.ceil((upper - self.origin) / self.cell_size).astype(np.int64), 1
        )

        lo_idx = self._cell_of(tet_lo - pad)
        hi_idx = self._cell_of(tet_hi + pad)
        counts = np.prod(hi_idx - lo_idx + 1, axis=1)
        tet_ids = np.repeat(np.arange(mesh.n_tets), counts)
        cells = np.empty(int(counts.sum()), dtype=np.int64)
        pos = 0
        for k in range(mesh.n_tets):
            lo, hi = lo_idx[k], hi_idx[k]
            ix, iy, iz = np.meshgrid(
                np.arange(lo[0], hi[0] + 1),
                np.arange(lo[1], hi[1] + 1),
                np.arange(lo[2], hi[2] + 1),
                indexing="ij",
            )
            n = ix.size
            cells[pos:pos + n] = self._flat(ix.ravel(), iy.ravel(), iz.ravel())
            pos += n
        order = np.lexsort((tet_ids, cells))
        self._cells_sorted = cells[order]
        self._tets_sorted = tet_ids[order]

        # precomputed barycentric solve data
        edges = tet_edge_matrices(v, mesh.tets)
        self._inv_basis = inv3(edges)
        self._corners0 = corners[:, 0, :].copy()

    def _cell_of(self, points):
        idx = np.floor((points - self.origin) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.dims - 1)

    def _flat(self, ix, iy, iz):
        return ix + self.dims[0] * (iy + self.dims[1] * iz)

    def candidates(self, points):
        """(tet candidate ids, per-point offsets) for a batch of points.

        Candidates for point i sit in ``tets[offsets[i]:offsets[i+1]]``,
        sorted ascending per point.
        """
        points = np.atleast_2d(points)
        cell = self._flat(*self._cell_of(points).T)
        lo = np.searchsorted(self._cells_sorted, cell, side="left")
        hi = np.searchsorted(self._cells_sorted, cell, side="right")
        counts = hi - lo
        offsets = np.concatenate([[0], np.cumsum(counts)])
        gather = np.concatenate(
            [np.arange(a, b) for a, b in zip(lo, hi)]
        ) if counts.sum() else np.empty(0, dtype=np.int64)
        return self._tets_sorted[gather], offsets


def locate(points, mesh, locator=None):
    """Find the containing tet (and barycentric weights) per point.

    Ties on shared faces resolve to the lowest tet index; the answer is
    identical to a brute-force scan over all tets in index order.

    Returns
    -------
    tet_idx : (n,) int array, -1 where outside every tet
    alpha : (n, 4) barycentric weights (0 rows where outside)
    """
    locator = locator or PointLocator(mesh)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cand_tets, offsets = locator.candidates(points)
    point_of = np.repeat(np.arange(len(points)), np.diff(offsets))

    tet_idx = np.full(len(points), -1, dtype=np.int64)
    alpha_out = np.zeros((len(points), 4))
    if len(cand_tets) == 0:
        return tet_idx, alpha_out

    alpha = barycentric(
        points[point_of],
        locator.mesh.vertices[locator.mesh.tets[cand_tets]],
        inv_basis=locator._inv_basis[cand_tets],
    )
    inside = alpha.min(axis=1) >= -INSIDE_TOL

    # first (lowest tet index) hit per point: candidates are sorted per
    # point, so the first inside candidate wins
    hit_points = point_of[inside]
    if len(hit_points):
        first = np.full(len(points), -1, dtype=np.int64)
        rows = np.flatnonzero(inside)[::-1]
        first[hit_points[::-1]] = rows
        has = first >= 0
        tet_idx[has] = cand_tets[first[has]]
        alpha_out[has] = alpha[first[has]]
    return tet_idx, alpha_out


def locate_brute_force(points, mesh):
    """Reference scan over all tets in index order (test oracle)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    edges = tet_edge_matrices(mesh.vertices, mesh.tets)
    inv = inv3(edges)
    tet_idx = np.full(len(points), -1, dtype=np.int64)
    alpha_out = np.zeros((len(points), 4))
    for i, p in enumerate(points):
        alpha = barycentric(
            np.broadcast_to(p, (mesh.n_tets, 3)),
            mesh.vertices[mesh.tets],
            inv_basis=inv,
        )
        inside = np.flatnonzero(alpha.min(axis=1) >= -INSIDE_TOL)
        if len(inside):
            tet_idx[i] = inside[0]
            alpha_out[i] = alpha[inside[0]]
    return tet_idx, alpha_out


def default_output_grid(mesh_x, spacing, pad_voxels=1):
    """Axis-aligned grid covering the template mesh bbox plus padding."""
    spacing = np.asarray(spacing, dtype=np.float64)
    lo, hi = mesh_x.bbox()
    origin = lo - pad_voxels * spacing
    dims = np.ceil((hi - lo) / spacing).astype(np.int64) + 2 * pad_voxels + 1
    return tuple(dims), tuple(origin)


def pull_back(volume, mesh_z, mesh_x, spacing=None, dims=None, origin=None,
              fill=np.nan, threads=1, locator=None):
    """Resample ``volume`` (original space) onto a template-space grid.

    For each output voxel center x: locate x in the flattened mesh, carry
    its barycentric weights to the original mesh (z = Z_k alpha), and
    sample the input volume at z with trilinear interpolation (clamped at
    the raster edge).  Voxels outside the mesh get ``fill`` (recorded in
    the output metadata; NaN by default since 0 is a plausible signal).

    Parameters
    ----------
    spacing : 3-tuple, optional
        Output spacing; defaults to the input volume's.
    dims, origin : optional
        Output grid override; defaults to the mesh_x bbox padded by one
        voxel.
    threads : int
        Worker threads for the voxel sweep (results are merged by index,
        so the output is identical for any thread count).
    """
    if not np.array_equal(mesh_z.tets, mesh_x.tets):
        raise ValueError("original and template meshes must share connectivity")
    spacing = tuple(volume.spacing) if spacing is None else tuple(spacing)
    if dims is None or origin is None:
        dims, origin = default_output_grid(mesh_x, spacing)
    locator = locator or PointLocator(mesh_x)

    nx, ny, nz = (int(d) for d in dims)
    out = np.full((nx, ny, nz), float(fill))
    zs = np.arange(nz)

    def run_slab(iz):
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        centers = np.stack(
            [
                origin[0] + spacing[0] * ix.ravel(),
                origin[1] + spacing[1] * iy.ravel(),
                np.full(ix.size, origin[2] + spacing[2] * iz),
            ],
            axis=1,
        )
        tet_idx, alpha = locate(centers, mesh_x, locator)
        values = np.full(len(centers), float(fill))
        inside = tet_idx >= 0
        if inside.any():
            z_pts = np.einsum(
                "nc,ncd->nd", alpha[inside],
                mesh_z.vertices[mesh_z.tets[tet_idx[inside]]],
            )
            values[inside] = volume.sample_trilinear(z_pts)
        return iz, values.reshape(nx, ny)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for iz, plane in pool.map(run_slab, zs):
                out[:, :, iz] = plane
    else:
        for iz in zs:
            _, plane = run_slab(iz)
            out[:, :, iz] = plane

    meta = dict(volume.metadata)
    meta["fill_value"] = repr(float(fill))
    return ScalarVolume(out, spacing, tuple(origin), metadata=meta)
