"""Synthetic test solids with known flat ground truth.

Bent slabs (a flat box wrapped isometrically onto a cylinder), hemispherical
shells (a stress case with no exact isometric flattening), and plain boxes.
All are tetrahedralized from hexahedral grids by the 6-tet Kuhn subdivision,
which shares the main cell diagonal so neighboring cells conform without
parity bookkeeping.
"""

import json
from dataclasses import dataclass

import numpy as np

from .mesh import TetMesh

# Kuhn subdivision of the unit cube, local corner id = dx + 2*dy + 4*dz.
# All six tets share the 0-7 main diagonal and are positively oriented.
KUHN_TETS = np.array(
    [[0, 1, 3, 7], [0, 5, 1, 7], [0, 3, 2, 7],
     [0, 2, 6, 7], [0, 4, 5, 7], [0, 6, 4, 7]],
    dtype=np.int64,
)

# Ground-truth side labels recorded per vertex by the generators.
GT_INTERIOR = 0
GT_MATERNAL = 1   # outer / convex side (bottom of the flat slab)
GT_FETAL = 2      # inner side (top of the flat slab)
GT_SIDE = 3       # thin side walls / rim


@dataclass(frozen=True)
class BentSlabSpec:
    """Flat slab [0,L]x[0,W]x[-T/2,T/2] wrapped along its length.

    ``bend_angle`` is the total arc angle in radians (0 = flat); the
    mid-surface is bent isometrically onto a cylinder of radius
    L/bend_angle about an axis parallel to y.
    """

    length: float = 60.0
    width: float = 40.0
    thickness: float = 9.0
    bend_angle: float = 0.0
    resolution: tuple = (24, 16, 3)

    def __post_init__(self):
        if min(self.length, self.width, self.thickness) <= 0:
            raise ValueError("slab dimensions must be positive")
        if not 0.0 <= self.bend_angle < 2.0 * np.pi:
            raise ValueError("bend_angle must lie in [0, 2*pi)")
        if min(self.resolution) < 1 or len(self.resolution) != 3:
            raise ValueError("resolution must be three cells >= 1")
        if self.bend_angle > 0:
            radius = self.length / self.bend_angle
            if radius <= self.thickness / 2.0:
                raise ValueError(
                    f"bend radius {radius:.3g} mm <= half thickness "
                    f"{self.thickness / 2:.3g} mm: slab self-intersects"
                )

    def to_dict(self):
        return {
            "length": self.length,
            "width": self.width,
            "thickness": self.thickness,
            "bend_angle": self.bend_angle,
            "resolution": list(self.resolution),
        }


def _hex_grid_tets(nx, ny, nz):
    """Connectivity of a Kuhn-subdivided (nx, ny, nz)-cell grid."""
    def node_id(ix, iy, iz):
        return ix + (nx + 1) * (iy + (ny + 1) * iz)

    cx, cy, cz = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    cx, cy, cz = cx.ravel(), cy.ravel(), cz.ravel()
    corners = np.empty((len(cx), 8), dtype=np.int64)
    for local in range(8):
        dx, dy, dz = local & 1, (local >> 1) & 1, (local >> 2) & 1
        corners[:, local] = node_id(cx + dx, cy + dy, cz + dz)
    return corners[:, KUHN_TETS].reshape(-1, 4)


def _grid_nodes(nx, ny, nz):
    ix, iy, iz = np.meshgrid(
        np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"
    )
    return (
        ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")
    )


def bent_slab(spec):
    """Generate a bent-slab mesh.

    Returns
    -------
    mesh : TetMesh
    info : dict
        ``flat_reference``: (N, 3) analytic flat coordinates (centered);
        ``gt_labels``: (N,) ground-truth side label per vertex;
        ``spec``: the generating parameters.
    """
    nx, ny, nz = spec.resolution
    ix, iy, iz = _grid_nodes(nx, ny, nz)
    x = spec.length * ix / nx
    y = spec.width * iy / ny
    z = spec.thickness * (iz / nz - 0.5)

    flat = np.stack(
        [x - spec.length / 2.0, y - spec.width / 2.0, z], axis=1
    )

    if spec.bend_angle > 0:
        radius = spec.length / spec.bend_angle
        alpha = (x - spec.length / 2.0) / radius
        verts = np.stack(
            [
                (radius - z) * np.sin(alpha),
                y - spec.width / 2.0,
                radius - (radius - z) * np.cos(alpha),
            ],
            axis=1,
        )
    else:
        verts = flat.copy()

    labels = np.full(len(verts), GT_INTERIOR, dtype=np.int64)
    on_side = (ix == 0) | (ix == nx) | (iy == 0) | (iy == ny)
    labels[on_side] = GT_SIDE
    labels[iz == nz] = GT_FETAL
    labels[iz == 0] = GT_MATERNAL

    tets = _hex_grid_tets(nx, ny, nz)
    mesh, n_fixed = TetMesh.from_unoriented(verts, tets)
    assert n_fixed == 0, "Kuhn pattern should be positively oriented"
    return mesh, {
        "kind": "bent-slab",
        "spec": spec.to_dict(),
        "flat_reference": flat,
        "gt_labels": labels,
    }


def box(length=60.0, width=40.0, thickness=9.0, resolution=(24, 16, 3)):
    """Axis-aligned box (a bent slab with zero bend)."""
    return bent_slab(BentSlabSpec(length, width, thickness, 0.0, resolution))


def _square_to_disk(a, b):
    # Shirley-Chiu concentric mapping: bijective, orientation-preserving,
    # Jacobian bounded away from zero (the elliptical map degenerates at
    # the square corners, which collapses tets there)
    a_branch = a * a > b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(a_branch, a, b)
        phi = np.where(
            a_branch,
            (np.pi / 4.0) * np.where(a != 0, b / np.where(a != 0, a, 1.0), 0.0),
            np.pi / 2.0 - (np.pi / 4.0) * np.where(b != 0, a / np.where(b != 0, b, 1.0), 0.0),
        )
    phi = np.where((a == 0) & (b == 0), 0.0, phi)
    return r * np.cos(phi), r * np.sin(phi)


def hemispherical_shell(outer_radius=40.0, thickness=10.0, resolution=(18, 3),
                        cap_fraction=0.95):
    """Watertight tet mesh of a (near-)hemispherical shell cap: a thick bowl.

    Built by mapping a square grid onto the polar cap through the
    square-to-disk concentric map (no pole degeneracy: grid nodes stay
    distinct), times a radial grid between the inner and outer radii.

    The cap reaches ``cap_fraction`` of a full half-sphere.  An exact
    hemisphere has a flat rim annulus in the equatorial plane, which makes
    the Kuhn tets of the footprint corner cells exactly coplanar; staying
    slightly below 90 degrees keeps the rim conical and every tet solid.

    Parameters
    ----------
    resolution : (na, nr)
        Cells across the square footprint and through the thickness.
    """
    if thickness >= outer_radius:
        raise ValueError("thickness must be smaller than the outer radius")
    if thickness <= 0 or outer_radius <= 0:
        raise ValueError("radius and thickness must be positive")
    if not 0.1 <= cap_fraction < 1.0:
        raise ValueError("cap_fraction must lie in [0.1, 1)")
    na, nr = resolution
    if na < 2 or nr < 1:
        raise ValueError("need at least 2x1 cells")
    inner_radius = outer_radius - thickness

    ia, ib, ir = _grid_nodes(na, na, nr)
    a = 2.0 * ia / na - 1.0
    b = 2.0 * ib / na - 1.0
    r = inner_radius + thickness * ir / nr
    u, v = _square_to_disk(a, b)
    rho = np.sqrt(u * u + v * v)
    theta = rho * (cap_fraction * np.pi / 2.0)
    psi = np.arctan2(v, u)
    sin_t = np.sin(theta)
    verts = np.stack(
        [r * sin_t * np.cos(psi), r * sin_t * np.sin(psi), r * np.cos(theta)],
        axis=1,
    )

    labels = np.full(len(verts), GT_INTERIOR, dtype=np.int64)
    on_rim = (ia == 0) | (ia == na) | (ib == 0) | (ib == na)
    labels[on_rim] = GT_SIDE
    labels[ir == 0] = GT_FETAL      # inner (concave) surface
    labels[ir == nr] = GT_MATERNAL  # outer (convex) surface

    tets = _hex_grid_tets(na, na, nr)
    mesh, n_fixed = TetMesh.from_unoriented(verts, tets)
    return mesh, {
        "kind": "hemispherical-shell",
        "spec": {
            "outer_radius": outer_radius,
            "thickness": thickness,
            "resolution": [na, nr],
            "cap_fraction": cap_fraction,
        },
        "gt_labels": labels,
    }


def shell_cap_volume(outer_radius, thickness, cap_fraction=0.95):
    """Analytic volume of the spherical shell cap."""
    inner = outer_radius - thickness
    height_factor = 1.0 - np.cos(cap_fraction * np.pi / 2.0)
    return 2.0 / 3.0 * np.pi * (outer_radius ** 3 - inner ** 3) * height_factor


def write_sidecar(info, path):
    """JSON sidecar with the generator spec and per-vertex ground truth."""
    payload = {
        "kind": info["kind"],
        "spec": info["spec"],
        "gt_labels": np.asarray(info["gt_labels"]).tolist(),
    }
    if "flat_reference" in info:
        payload["flat_reference"] = np.asarray(info["flat_reference"]).tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    return path


def read_sidecar(path):
    with open(path) as fh:
        payload = json.load(fh)
    if "flat_reference" in payload:
        payload["flat_reference"] = np.array(payload["flat_reference"])
    payload["gt_labels"] = np.array(payload["gt_labels"], dtype=np.int64)
    return payload
