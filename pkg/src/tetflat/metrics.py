"""Distortion and template-fit diagnostics, plus serialized reports.

All distortion measures compare the flattened coordinates X against the
(aligned) original coordinates Z over the same connectivity: per-tet
log2 det J for volume change, per-boundary-triangle log2 area ratios,
per-edge log2 length ratios, the Dirichlet excess over its identity floor
of 6, and the A-weighted template RMS in voxel units.
"""

import csv
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .energy import DeformationCache, dirichlet_density
from .mesh import det3, tet_edge_matrices

DEFAULT_VOXEL_MM = 3.0


def template_rms(x, parcellation, template, topo, voxel_mm=DEFAULT_VOXEL_MM):
    """Square root of the A-weighted template term, in voxels.

    Margin vertices contribute zero mass in the plane variants, so this
    measures only the constrained boundary.
    """
    labels = parcellation.labels if parcellation is not None else None
    xb = np.asarray(x)[topo.vertex_ids]
    values = template.term_values(xb, labels)
    return float(np.sqrt(topo.vertex_area_weights @ values)) / float(voxel_mm)


def dirichlet_excess(x, mesh_z, topo=None, cache=None):
    """Percent by which the V-weighted Dirichlet sum exceeds its floor of 6."""
    cache = cache or DeformationCache(mesh_z, topo or mesh_z.boundary)
    density = dirichlet_density(cache.jacobians(np.asarray(x)))
    total = float(cache.volume_weights @ density)
    return 100.0 * (total - 6.0) / 6.0


def volumetric_distortion(x, mesh_z, cache=None):
    """Per-tet log2 det J (0 = volume preserved, 1 = doubled)."""
    cache = cache or DeformationCache(mesh_z)
    return np.log2(cache.jacobian_dets(np.asarray(x)))


def areal_distortion(x, mesh_z, topo=None):
    """Per-boundary-triangle log2 of flattened/original area."""
    topo = topo or mesh_z.boundary
    tris = topo.triangles

    def areas(v):
        cross = np.cross(
            v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]]
        )
        return 0.5 * np.linalg.norm(cross, axis=1)

    return np.log2(areas(np.asarray(x)) / areas(mesh_z.vertices))


def metric_distortion(x, mesh_z, edges=None):
    """Per-edge log2 of flattened/original length over all tet edges."""
    if edges is None:
        edges = unique_edges(mesh_z.tets)
    x = np.asarray(x)
    new = np.linalg.norm(x[edges[:, 0]] - x[edges[:, 1]], axis=1)
    old = np.linalg.norm(
        mesh_z.vertices[edges[:, 0]] - mesh_z.vertices[edges[:, 1]], axis=1
    )
    return np.log2(new / old)


def unique_edges(tets):
    pairs = tets[:, [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]]
    pairs = np.sort(pairs.reshape(-1, 2), axis=1)
    return np.unique(pairs, axis=0)


def per_vertex_volumetric(x, mesh_z, cache=None):
    """V-weighted average of incident tets' log2 det J per vertex."""
    cache = cache or DeformationCache(mesh_z)
    logdet = np.log2(cache.jacobian_dets(np.asarray(x)))
    weighted = np.zeros(mesh_z.n_vertices)
    mass = np.zeros(mesh_z.n_vertices)
    w = cache.volume_weights
    for c in range(4):
        np.add.at(weighted, cache.tets[:, c], w * logdet)
        np.add.at(mass, cache.tets[:, c], w)
    with np.errstate(invalid="ignore"):
        return np.where(mass > 0, weighted / np.where(mass > 0, mass, 1.0), 0.0)


def spatial_profiles(x, per_vertex, n_bins=10):
    """Binned means of a per-vertex quantity against radius and height.

    Radius is sqrt(x1^2 + x2^2), height is |x3| in template coordinates.

    Returns
    -------
    dict with 'radial' and 'height' entries, each holding bin edges,
    per-bin means, standard deviations, and counts (NaN mean for empty
    bins).
    """
    x = np.asarray(x)
    per_vertex = np.asarray(per_vertex)
    out = {}
    for name, coord in (
        ("radial", np.hypot(x[:, 0], x[:, 1])),
        ("height", np.abs(x[:, 2])),
    ):
        edges = np.linspace(0.0, max(coord.max(), 1e-12), n_bins + 1)
        idx = np.clip(np.digitize(coord, edges) - 1, 0, n_bins - 1)
        means = np.full(n_bins, np.nan)
        sds = np.full(n_bins, np.nan)
        counts = np.bincount(idx, minlength=n_bins)
        for b in range(n_bins):
            sel = idx == b
            if counts[b]:
                means[b] = per_vertex[sel].mean()
                sds[b] = per_vertex[sel].std()
        out[name] = {
            "bin_edges": edges,
            "mean": means,
            "sd": sds,
            "count": counts,
        }
    return out


def summary_stats(values):
    """Mean/sd/quartiles and 1.5-IQR whisker bounds of a sample."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {k: float("nan") for k in (
            "mean", "sd", "q25", "median", "q75", "whisker_low",
            "whisker_high")} | {"n": 0, "n_outliers": 0}
    q25, q50, q75 = np.percentile(v, [25, 50, 75])
    iqr = q75 - q25
    lo_bound = q25 - 1.5 * iqr
    hi_bound = q75 + 1.5 * iqr
    inside = v[(v >= lo_bound) & (v <= hi_bound)]
    return {
        "mean": float(v.mean()),
        "sd": float(v.std()),
        "q25": float(q25),
        "median": float(q50),
        "q75": float(q75),
        "whisker_low": float(inside.min()) if inside.size else float(q25),
        "whisker_high": float(inside.max()) if inside.size else float(q75),
        "n": int(v.size),
        "n_outliers": int(v.size - inside.size),
    }


@dataclass
class DistortionReport:
    """Full diagnostic bundle for one flattening result."""

    voxel_mm: float
    template_kind: str              # "none" when no template context given
    template_theta: list
    template_rms_voxels: float      # None without template context
    dirichlet_excess_percent: float
    volumetric: np.ndarray          # per tet
    areal: np.ndarray               # per boundary triangle
    metric: np.ndarray              # per edge
    edges: np.ndarray               # (E, 2) for the metric rows
    profiles: dict
    stats: dict = field(default_factory=dict)

    def to_json_dict(self):
        def profile_dict(p):
            return {
                "bin_edges": p["bin_edges"].tolist(),
                "mean": _nan_to_none(p["mean"]),
                "sd": _nan_to_none(p["sd"]),
                "count": p["count"].tolist(),
            }

        return {
            "voxel_mm": self.voxel_mm,
            "template": {
                "kind": self.template_kind,
                "theta": list(self.template_theta),
            },
            "template_rms_voxels": self.template_rms_voxels,
            "dirichlet_excess_percent": self.dirichlet_excess_percent,
            "element_counts": {
                "tets": int(len(self.volumetric)),
                "boundary_triangles": int(len(self.areal)),
                "edges": int(len(self.metric)),
            },
            "stats": self.stats,
            "profiles": {
                "radial": profile_dict(self.profiles["radial"]),
                "height": profile_dict(self.profiles["height"]),
            },
        }


def _nan_to_none(arr):
    return [None if not np.isfinite(v) else float(v) for v in arr]


def compute_report(x, mesh_z, parcellation=None, template=None,
                   voxel_mm=DEFAULT_VOXEL_MM, topo=None):
    """Assemble a :class:`DistortionReport` for flattened coordinates x.

    ``template`` (and, for plane variants, ``parcellation``) enable the
    template-RMS entry; without them the report carries distortion only.
    """
    topo = topo or mesh_z.boundary
    cache = DeformationCache(mesh_z, topo)
    x = np.asarray(x)
    vol = volumetric_distortion(x, mesh_z, cache)
    ar = areal_distortion(x, mesh_z, topo)
    edges = unique_edges(mesh_z.tets)
    met = metric_distortion(x, mesh_z, edges)
    per_vertex = per_vertex_volumetric(x, mesh_z, cache)
    report = DistortionReport(
        voxel_mm=float(voxel_mm),
        template_kind=template.kind if template is not None else "none",
        template_theta=(
            [float(t) for t in template.theta] if template is not None else []
        ),
        template_rms_voxels=(
            template_rms(x, parcellation, template, topo, voxel_mm)
            if template is not None else None
        ),
        dirichlet_excess_percent=dirichlet_excess(x, mesh_z, topo, cache),
        volumetric=vol,
        areal=ar,
        metric=met,
        edges=edges,
        profiles=spatial_profiles(x, per_vertex),
    )
    report.stats = {
        "volumetric": summary_stats(vol),
        "areal": summary_stats(ar),
        "metric": summary_stats(met),
    }
    return report


def write_report(report, json_path, csv_prefix=None):
    """Write the JSON report and per-element CSVs.

    CSV rows match element counts exactly: one row per tet (volumetric),
    per boundary triangle (areal), per edge (metric).
    """
    payload = report.to_json_dict()
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written = [str(json_path)]
    if csv_prefix is not None:
        prefix = str(csv_prefix)
        specs = [
            ("volumetric", ["tet", "log2_det_j"],
             ((i, v) for i, v in enumerate(report.volumetric))),
            ("areal", ["triangle", "log2_area_ratio"],
             ((i, v) for i, v in enumerate(report.areal))),
            ("metric", ["vertex_a", "vertex_b", "log2_length_ratio"],
             ((int(e[0]), int(e[1]), v)
              for e, v in zip(report.edges, report.metric))),
        ]
        for name, header, rows in specs:
            path = f"{prefix}_{name}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                for row in rows:
                    writer.writerow([repr(float(v)) if isinstance(v, float)
                                     else int(v) for v in row])
            written.append(path)
    return written


def report_schema():
    """JSON schema the report payload validates against."""
    with resources.files("tetflat").joinpath("report_schema.json").open() as fh:
        return json.load(fh)
