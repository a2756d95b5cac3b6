"""Axis-aligned scalar rasters and trilinear sampling."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScalarVolume:
    """Scalar samples on a regular axis-aligned grid.

    ``data[ix, iy, iz]`` is the sample at world position
    ``origin + (ix, iy, iz) * spacing`` (voxel centers).  The on-disk layout
    is x-fastest; in memory the array is indexed (x, y, z).
    """

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {d.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be 3 positive numbers, got {self.spacing}")
        og = tuple(float(o) for o in self.origin)
        if len(og) != 3:
            raise ValueError(f"origin must have 3 components, got {self.origin}")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", og)

    @property
    def dims(self):
        return self.data.shape

    def world_bounds(self):
        lo = np.array(self.origin)
        hi = lo + (np.array(self.dims) - 1) * np.array(self.spacing)
        return lo, hi

    def voxel_centers(self):
        """World coordinates of all voxel centers, x-fastest, shape (n, 3)."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack(
            [ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1
        )
        return np.array(self.origin) + idx * np.array(self.spacing)

    def sample_trilinear(self, points):
        """Trilinear interpolation at world points; clamps to the grid edge."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = (p - np.array(self.origin)) / np.array(self.spacing)
        dims = np.array(self.dims)
        g = np.clip(g, 0.0, dims - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), dims - 2)
        i0 = np.maximum(i0, 0)
        f = g - i0
        # degenerate axes (single slice) interpolate trivially
        for ax in range(3):
            if self.dims[ax] == 1:
                i0[:, ax] = 0
                f[:, ax] = 0.0
        d = self.data
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        x1 = np.minimum(x0 + 1, self.dims[0] - 1)
        y1 = np.minimum(y0 + 1, self.dims[1] - 1)
        z1 = np.minimum(z0 + 1, self.dims[2] - 1)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c000 = d[x0, y0, z0]
        c100 = d[x1, y0, z0]
        c010 = d[x0, y1, z0]
        c110 = d[x1, y1, z0]
        c001 = d[x0, y0, z1]
        c101 = d[x1, y0, z1]
        c011 = d[x0, y1, z1]
        c111 = d[x1, y1, z1]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz


def coordinate_ramp_volume(axis, dims, spacing, origin=(0.0, 0.0, 0.0)):
    """Volume whose value at each voxel equals its own world coordinate.

    Useful as an analytic oracle: trilinear interpolation reproduces the
    coordinate exactly (linear function).
    """
    nx, ny, nz = dims
    coords = [
        origin[0] + spacing[0] * np.arange(nx),
        origin[1] + spacing[1] * np.arange(ny),
        origin[2] + spacing[2] * np.arange(nz),
    ]
    grids = np.meshgrid(*coords, indexing="ij")
    return ScalarVolume(grids[axis], spacing, origin)
