"""Command-line interface wiring the pipeline together.

Subcommands: synth, parcellate, flatten, resample, metrics, baseline2d,
gradcheck.  Every run writes a JSON manifest (config, package versions,
input hashes, wall time) next to its outputs, including on convergence
failures.  Defaults can be overridden by TETFLAT_-prefixed environment
variables (e.g. TETFLAT_LAMBDA=0.5); explicit flags always win.

Exit codes: 0 success, 2 usage error, 3 data error, 4 convergence failure
(artifacts are still written).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, energy, io, metrics, synth
from .baseline2d import parameterize_stack
from .errors import ConvergenceError, DataError
from .io import write_vtk_polydata
from .mesh import TetMesh
from .optimizer import OptimizerParams, flatten
from .parcellation import (
    FETAL,
    LABEL_NAMES,
    MARGIN,
    MATERNAL,
    BoundaryParcellation,
    parcellate,
)
from .resample import pull_back

logger = logging.getLogger("tetflat")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


def _env(name, fallback):
    raw = os.environ.get("TETFLAT_" + name.upper().replace("-", "_"))
    if raw is None:
        return fallback
    return type(fallback)(raw) if fallback is not None else raw


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ManifestWriter:
    """Collects run facts and writes the manifest exactly once."""

    def __init__(self, subcommand, args):
        self.start = time.monotonic()
        self.data = {
            "subcommand": subcommand,
            "config": {
                k: v for k, v in sorted(vars(args).items()) if k != "func"
            },
            "versions": {
                "tetflat": __version__,
                "python": sys.version.split()[0],
                "numpy": np.__version__,
            },
            "input_hashes": {},
            "outputs": [],
        }
        try:
            import scipy
            self.data["versions"]["scipy"] = scipy.__version__
        except ImportError:
            pass
        self.path = None

    def add_input(self, path):
        if path and os.path.exists(path):
            self.data["input_hashes"][str(path)] = _sha256(path)

    def add_output(self, path):
        self.data["outputs"].append(str(path))

    def write(self, exit_code):
        if self.path is None:
            return
        self.data["exit_code"] = exit_code
        self.data["wall_time_s"] = round(time.monotonic() - self.start, 3)
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _load_mesh_pair(manifest, node_path, frame="original"):
    base = node_path[:-5] if node_path.endswith(".node") else node_path
    manifest.add_input(base + ".node")
    manifest.add_input(base + ".ele")
    mesh, _ = io.read_node_ele(base + ".node", frame=frame)
    return mesh


def _parcellation_to_json(parc, gamma):
    return {
        "vertex_ids": parc.vertex_ids.tolist(),
        "labels": parc.labels.tolist(),
        "fiedler": parc.fiedler.tolist(),
        "margin_mm": parc.margin_mm,
        "gamma": gamma,
        "counts": parc.counts(),
        "hull_votes": parc.hull_votes,
    }


def _parcellation_from_json(payload):
    return BoundaryParcellation(
        vertex_ids=np.array(payload["vertex_ids"], dtype=np.int64),
        labels=np.array(payload["labels"], dtype=np.int64),
        fiedler=np.array(payload["fiedler"], dtype=np.float64),
        margin_mm=float(payload["margin_mm"]),
        hull_votes=dict(payload.get("hull_votes", {})),
    )


def _label_field(mesh, parc):
    field = np.full(mesh.n_vertices, -1.0)
    field[parc.vertex_ids] = parc.labels
    return field


# ---------------------------------------------------------------------------
# subcommand handlers; each returns an exit code
# ---------------------------------------------------------------------------

def cmd_synth(args, manifest):
    manifest.path = args.out + "_manifest.json"
    if args.shape == "bent-slab":
        spec = synth.BentSlabSpec(
            length=args.length, width=args.width, thickness=args.thickness,
            bend_angle=args.bend_angle, resolution=tuple(args.resolution),
        )
        mesh, info = synth.bent_slab(spec)
    else:
        mesh, info = synth.hemispherical_shell(
            outer_radius=args.outer_radius, thickness=args.thickness,
            resolution=tuple(args.resolution[:2]),
        )
    node, ele = io.write_node_ele(mesh, args.out)
    sidecar = synth.write_sidecar(info, args.out + "_sidecar.json")
    for p in (node, ele, sidecar):
        manifest.add_output(p)
    logger.info("wrote %s (%d vertices, %d tets)", node, mesh.n_vertices,
                mesh.n_tets)
    return EXIT_OK


def cmd_parcellate(args, manifest):
    manifest.path = args.out + "_manifest.json"
    mesh = _load_mesh_pair(manifest, args.mesh)
    parc = parcellate(
        mesh, gamma=args.gamma, margin_mm=args.margin_mm, seed=args.seed
    )
    labels_path = args.out + "_parcellation.json"
    with open(labels_path, "w") as fh:
        json.dump(_parcellation_to_json(parc, args.gamma), fh, sort_keys=True)
        fh.write("\n")
    fiedler = np.zeros(mesh.n_vertices)
    fiedler[parc.vertex_ids] = parc.fiedler
    vtk_path = io.write_vtk(
        mesh, args.out + "_parcellation.vtk",
        point_data={"label": _label_field(mesh, parc), "fiedler": fiedler},
    )
    summary_path = args.out + "_summary.json"
    with open(summary_path, "w") as fh:
        json.dump(
            {
                "counts": parc.counts(),
                "gamma": args.gamma,
                "margin_mm": args.margin_mm,
                "hull_votes": parc.hull_votes,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    for p in (labels_path, vtk_path, summary_path):
        manifest.add_output(p)
    return EXIT_OK


def _write_flatten_artifacts(args, manifest, result):
    node, ele = io.write_node_ele(result.mesh_x, args.out + "_flat")
    noderef, eleref = io.write_node_ele(result.mesh_z, args.out + "_aligned")
    vol_dist = metrics.volumetric_distortion(result.x, result.mesh_z)
    point_data = {}
    if result.parcellation is not None:
        point_data["label"] = _label_field(result.mesh_x, result.parcellation)
    vtk_path = io.write_vtk(
        result.mesh_x, args.out + "_flat.vtk",
        point_data=point_data, cell_data={"log2_det_j": vol_dist},
    )
    trace_path = args.out + "_trace.json"
    with open(trace_path, "w") as fh:
        json.dump(
            {
                "template": {
                    "kind": result.template.kind,
                    "theta_initial": [
                        float(t) for t in result.template_initial.theta
                    ],
                    "theta_final": [float(t) for t in result.template.theta],
                },
                "converged": result.converged,
                "reason": result.reason,
                "iterations": result.n_iterations,
                "trace": {
                    k: [None if not np.isfinite(x) else float(x) for x in v]
                    for k, v in result.trace.items()
                },
            },
            fh, sort_keys=True,
        )
        fh.write("\n")
    outputs = [node, ele, noderef, eleref, vtk_path, trace_path]
    if result.parcellation is not None:
        parc_path = args.out + "_parcellation.json"
        with open(parc_path, "w") as fh:
            json.dump(
                _parcellation_to_json(result.parcellation, args.gamma),
                fh, sort_keys=True,
            )
            fh.write("\n")
        outputs.append(parc_path)
    for p in outputs:
        manifest.add_output(p)


def cmd_flatten(args, manifest):
    manifest.path = args.out + "_manifest.json"
    mesh = _load_mesh_pair(manifest, args.mesh)
    params = OptimizerParams(
        lam=getattr(args, "lambda"), beta=args.beta, rho=args.rho,
        eps=args.eps, max_iters=args.max_iters,
    )
    volume = None
    if args.volume:
        manifest.add_input(args.volume)
        volume = io.load_volume(args.volume)

    if args.lambda_sweep:
        sweep_values = [1e-3, 1e-2, 0.1, 1.0, 5.0, 10.0, 100.0]
        rows = []
        for lam in sweep_values:
            p = OptimizerParams(
                lam=lam, beta=args.beta, rho=args.rho, eps=args.eps,
                max_iters=args.max_iters,
            )
            res = flatten(
                mesh, template=args.template, params=p, gamma=args.gamma,
                margin_mm=args.margin_mm, seed=args.seed, volume=volume,
            )
            rms = metrics.template_rms(
                res.x, res.parcellation, res.template, res.mesh_z.boundary,
                args.voxel_mm,
            )
            excess = metrics.dirichlet_excess(res.x, res.mesh_z)
            rows.append(
                {"lambda": lam, "template_rms_voxels": rms,
                 "dirichlet_excess_percent": excess,
                 "converged": res.converged}
            )
            logger.info("lambda %.3g: rms %.4f vox, excess %.3f%%", lam, rms,
                        excess)
        sweep_path = args.out + "_lambda_sweep.json"
        with open(sweep_path, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.add_output(sweep_path)
        return EXIT_OK

    result = flatten(
        mesh, template=args.template, params=params, gamma=args.gamma,
        margin_mm=args.margin_mm, seed=args.seed, volume=volume,
    )
    _write_flatten_artifacts(args, manifest, result)
    logger.info(
        "flatten: %s after %d iterations (%s), objective %.6f",
        "converged" if result.converged else "NOT converged",
        result.n_iterations, result.reason,
        result.trace["objective"][-1],
    )
    if not result.converged:
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_resample(args, manifest):
    manifest.path = args.out + ".manifest.json"
    manifest.add_input(args.volume)
    volume = io.load_volume(args.volume)
    mesh_z = _load_mesh_pair(manifest, args.mesh_z)
    mesh_x = _load_mesh_pair(manifest, args.mesh_x, frame="template")
    spacing = tuple(args.spacing) if args.spacing else None
    out_vol = pull_back(
        volume, mesh_z, mesh_x, spacing=spacing, threads=args.threads
    )
    io.write_volume(out_vol, args.out)
    manifest.add_output(args.out)
    return EXIT_OK


def cmd_metrics(args, manifest):
    manifest.path = args.out + ".manifest.json"
    mesh_z = _load_mesh_pair(manifest, args.mesh_z)
    mesh_x = _load_mesh_pair(manifest, args.mesh_x, frame="template")
    parc = None
    if args.parcellation:
        manifest.add_input(args.parcellation)
        with open(args.parcellation) as fh:
            parc = _parcellation_from_json(json.load(fh))
    template = None
    if args.flatten_trace:
        manifest.add_input(args.flatten_trace)
        with open(args.flatten_trace) as fh:
            trace = json.load(fh)
        kind = trace["template"]["kind"]
        template = energy.TEMPLATE_KINDS[kind](
            *trace["template"]["theta_final"]
        )
    report = metrics.compute_report(
        mesh_x.vertices, mesh_z, parc, template, voxel_mm=args.voxel_mm
    )
    base = args.out[:-5] if args.out.endswith(".json") else args.out
    written = metrics.write_report(report, args.out, csv_prefix=base)
    vtk_path = io.write_vtk(
        mesh_x, base + "_fields.vtk",
        cell_data={"log2_det_j": report.volumetric},
    )
    for p in written + [vtk_path]:
        manifest.add_output(p)
    return EXIT_OK


def cmd_baseline2d(args, manifest):
    manifest.path = args.out + "_manifest.json"
    mesh_z = _load_mesh_pair(manifest, args.mesh_z)
    mesh_x = _load_mesh_pair(manifest, args.mesh_x, frame="template")
    result = parameterize_stack(mesh_x, mesh_z, spacing_mm=args.spacing_mm)
    for i, (surf, uv) in enumerate(zip(result.surfaces, result.embeddings)):
        flat_pts = np.column_stack([uv, np.zeros(len(uv))])
        path = f"{args.out}_slice{i:03d}.vtk"
        write_vtk_polydata(
            flat_pts, surf.triangles, path,
            point_data={"orig_x3": surf.vertices_original[:, 2]},
        )
        manifest.add_output(path)
    import csv as _csv
    csv_path = args.out + "_distortion.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["measure", "value_log2"])
        for v in result.areal_log2:
            writer.writerow(["areal", repr(float(v))])
        for v in result.metric_log2:
            writer.writerow(["metric", repr(float(v))])
    manifest.add_output(csv_path)
    summary_path = args.out + "_summary.json"
    with open(summary_path, "w") as fh:
        json.dump(
            {
                "n_slices": len(result.surfaces),
                "n_skipped": result.n_skipped,
                "n_fallback": result.n_fallback,
                "radius_scale": result.radius_scale,
                "mean_abs_areal_log2": float(np.abs(result.areal_log2).mean()),
                "mean_abs_metric_log2": float(np.abs(result.metric_log2).mean()),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    manifest.add_output(summary_path)
    return EXIT_OK


def cmd_gradcheck(args, manifest):
    manifest.path = (args.out + "_manifest.json") if args.out else None
    rng = np.random.default_rng(args.seed)
    rows = []
    worst = 0.0
    for trial in range(args.trials):
        res = [(2, 2, 2), (3, 2, 2), (4, 3, 2), (3, 3, 3)][trial % 4]
        mesh, info = synth.bent_slab(
            synth.BentSlabSpec(30.0, 20.0, 10.0, 0.0, res)
        )
        topo = mesh.boundary
        gt = info["gt_labels"][topo.vertex_ids]
        labels = np.where(
            gt == synth.GT_MATERNAL, MATERNAL,
            np.where(gt == synth.GT_FETAL, FETAL, MARGIN),
        )
        parc = BoundaryParcellation(
            topo.vertex_ids, labels, np.zeros(len(labels)), 0.0, {}
        )
        cell = min(30.0 / res[0], 20.0 / res[1], 10.0 / res[2])
        x = mesh.vertices + 0.08 * cell * rng.standard_normal(
            (mesh.n_vertices, 3)
        )
        for template in (
            energy.ParallelPlanes(4.0),
            energy.SinglePlane(6.0),
            energy.Ellipsoid(16.0, 11.0, 6.0),
        ):
            report = energy.fd_check(x, template, parc, lam=1.0, mesh=mesh)
            rows.append((trial, template.kind, report))
            worst = max(worst, report["max"])

    print(f"{'trial':>5} {'template':>14} {'distortion':>12} "
          f"{'template-term':>14} {'theta':>12}")
    for trial, kind, report in rows:
        print(f"{trial:>5} {kind:>14} {report['distortion']:>12.3e} "
              f"{report['template']:>14.3e} {report['theta']:>12.3e}")
    print(f"worst max-relative error: {worst:.3e} "
          f"(tolerance {args.tolerance:.0e})")
    return EXIT_OK if worst < args.tolerance else 1


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="tetflat",
        description="Locally injective volumetric flattening of tetrahedral "
                    "meshes onto canonical templates.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic test solids")
    p.add_argument("shape", choices=["bent-slab", "shell"])
    p.add_argument("--length", type=float, default=60.0)
    p.add_argument("--width", type=float, default=40.0)
    p.add_argument("--thickness", type=float, default=9.0)
    p.add_argument("--bend-angle", type=float, default=0.0,
                   help="total arc angle in radians (bent-slab)")
    p.add_argument("--outer-radius", type=float, default=40.0,
                   help="outer radius (shell)")
    p.add_argument("--resolution", type=int, nargs="+",
                   default=[24, 16, 3],
                   help="grid cells: nx ny nz (bent-slab) or na nr (shell)")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("parcellate", help="segment the mesh boundary")
    p.add_argument("--mesh", required=True, help=".node path or basename")
    p.add_argument("--gamma", type=float, default=_env("gamma", 20.0))
    p.add_argument("--margin-mm", type=float, default=_env("margin_mm", 15.0))
    p.add_argument("--seed", type=int, default=_env("seed", 0))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_parcellate)

    p = sub.add_parser("flatten", help="map a mesh onto a template")
    p.add_argument("--mesh", required=True)
    p.add_argument("--template", default="planes",
                   choices=["planes", "single-plane", "ellipsoid"])
    p.add_argument("--lambda", type=float, default=_env("lambda", 1.0),
                   help="distortion trade-off weight")
    p.add_argument("--beta", type=float, default=_env("beta", 0.9))
    p.add_argument("--rho", type=float, default=_env("rho", 0.5))
    p.add_argument("--eps", type=float, default=_env("eps", 1e-4))
    p.add_argument("--max-iters", type=int, default=_env("max_iters", 20000))
    p.add_argument("--margin-mm", type=float, default=_env("margin_mm", 15.0))
    p.add_argument("--gamma", type=float, default=_env("gamma", 20.0))
    p.add_argument("--seed", type=int, default=_env("seed", 0))
    p.add_argument("--voxel-mm", type=float, default=_env("voxel_mm", 3.0))
    p.add_argument("--volume", help="optional intensity volume for h init")
    p.add_argument("--lambda-sweep", action="store_true",
                   help="run the trade-off sweep over lambda in [1e-3, 1e2]")
    p.add_argument("--threads", type=int, default=_env("threads", 1))
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("resample", help="pull a volume into template space")
    p.add_argument("--volume", required=True)
    p.add_argument("--mesh-z", required=True, help="original-space mesh")
    p.add_argument("--mesh-x", required=True, help="flattened mesh")
    p.add_argument("--spacing", type=float, nargs=3, default=None)
    p.add_argument("--threads", type=int, default=_env("threads", 1))
    p.add_argument("--out", required=True, help="output volume (.nrrd/.json)")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("metrics", help="distortion and fit diagnostics")
    p.add_argument("--mesh-z", required=True)
    p.add_argument("--mesh-x", required=True)
    p.add_argument("--parcellation", help="parcellation JSON from flatten")
    p.add_argument("--flatten-trace", help="trace JSON from flatten "
                   "(enables the template RMS entry)")
    p.add_argument("--voxel-mm", type=float, default=_env("voxel_mm", 3.0))
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("baseline2d", help="stacked-surface 2D baseline")
    p.add_argument("--mesh-z", required=True)
    p.add_argument("--mesh-x", required=True)
    p.add_argument("--spacing-mm", type=float, default=_env("voxel_mm", 3.0))
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_baseline2d)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by "
                       "finite differences")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=_env("seed", 0))
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", default=None, help="optional manifest prefix")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    manifest = ManifestWriter(args.command, args)
    try:
        code = args.func(args, manifest)
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        logger.error("%s", exc)
        manifest.write(EXIT_DATA)
        return EXIT_DATA
    except ConvergenceError as exc:
        logger.error("%s", exc)
        manifest.write(EXIT_CONVERGENCE)
        return EXIT_CONVERGENCE
    manifest.write(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
