"""Mesh and volume file I/O.

Mesh formats: TetGen ``.node``/``.ele`` pairs (canonical input) and VTK
legacy ASCII unstructured grids (canonical visual output, cell type 10).
Volume formats: a strict NRRD subset (3-D, float/double, raw encoding,
little-endian, diagonal directions) and a raw+JSON-header fallback.
"""

import json
import re

import numpy as np

from .errors import MeshFormatError, VolumeFormatError
from .mesh import TetMesh
from .volume import ScalarVolume

_FLOAT_FMT = "%.9g"


# ---------------------------------------------------------------------------
# TetGen .node / .ele
# ---------------------------------------------------------------------------

def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _read_node(path):
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshFormatError("empty .node file", path=path)
    parts = header.split()
    try:
        n_points = int(parts[0])
        dim = int(parts[1]) if len(parts) > 1 else 3
    except ValueError:
        raise MeshFormatError("malformed .node header", path=path, line=lineno)
    if dim != 3:
        raise MeshFormatError(f"expected 3-D points, got dim={dim}", path=path,
                              line=lineno)
    ids = np.empty(n_points, dtype=np.int64)
    coords = np.empty((n_points, 3))
    for row in range(n_points):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise MeshFormatError(
                f"expected {n_points} points, file ended after {row}", path=path
            )
        parts = line.split()
        try:
            ids[row] = int(parts[0])
            coords[row] = [float(parts[1]), float(parts[2]), float(parts[3])]
        except (ValueError, IndexError):
            raise MeshFormatError("malformed point line", path=path, line=lineno)
    return ids, coords


def _read_ele(path):
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshFormatError("empty .ele file", path=path)
    parts = header.split()
    try:
        n_tets = int(parts[0])
        nodes_per = int(parts[1]) if len(parts) > 1 else 4
    except ValueError:
        raise MeshFormatError("malformed .ele header", path=path, line=lineno)
    if nodes_per != 4:
        raise MeshFormatError(
            f"only linear tets supported, got {nodes_per} nodes per element",
            path=path, line=lineno,
        )
    tets = np.empty((n_tets, 4), dtype=np.int64)
    for row in range(n_tets):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise MeshFormatError(
                f"expected {n_tets} tets, file ended after {row}", path=path
            )
        parts = line.split()
        try:
            tets[row] = [int(p) for p in parts[1:5]]
        except (ValueError, IndexError):
            raise MeshFormatError("malformed element line", path=path, line=lineno)
    return tets


def read_node_ele(node_path, ele_path=None, frame="original"):
    """Read a TetGen .node/.ele pair.

    Index base (0 or 1) is auto-detected from the first node's index.
    Negative-volume tets are reoriented; the count is returned.

    Returns
    -------
    (TetMesh, n_reoriented)
    """
    node_path = str(node_path)
    if ele_path is None:
        base = node_path[:-5] if node_path.endswith(".node") else node_path
        ele_path = base + ".ele"
    ids, coords = _read_node(node_path)
    tets = _read_ele(ele_path)
    base_index = int(ids[0]) if len(ids) else 0
    if base_index not in (0, 1):
        raise MeshFormatError(
            f"first node index must be 0 or 1, got {base_index}", path=node_path
        )
    if np.any(ids != np.arange(base_index, base_index + len(ids))):
        raise MeshFormatError("node indices are not consecutive", path=node_path)
    return TetMesh.from_unoriented(coords, tets - base_index, frame=frame)


def write_node_ele(mesh, basepath):
    """Write a TetGen .node/.ele pair (0-based indices, 9 significant digits).

    Returns the two paths written.
    """
    base = str(basepath)
    if base.endswith(".node"):
        base = base[:-5]
    node_path, ele_path = base + ".node", base + ".ele"
    with open(node_path, "w") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        # repr() is the shortest round-trip representation: reloading is
        # bit-exact, unlike fixed significant-digit formats
        for i, p in enumerate(mesh.vertices):
            fh.write(
                f"{i} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n"
            )
    with open(ele_path, "w") as fh:
        fh.write(f"{mesh.n_tets} 4 0\n")
        for i, t in enumerate(mesh.tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")
    return node_path, ele_path


# ---------------------------------------------------------------------------
# VTK legacy ASCII unstructured grid
# ---------------------------------------------------------------------------

def write_vtk(mesh, path, point_data=None, cell_data=None, comment="tetflat mesh"):
    """Write a legacy ASCII VTK unstructured grid (cell type 10).

    ``point_data`` / ``cell_data`` are dicts of name -> 1-D scalar array with
    length N (vertices) or K (tets) respectively.
    """
    point_data = point_data or {}
    cell_data = cell_data or {}
    for name, arr in point_data.items():
        if len(arr) != mesh.n_vertices:
            raise ValueError(
                f"point field {name!r} has length {len(arr)}, expected "
                f"{mesh.n_vertices}"
            )
    for name, arr in cell_data.items():
        if len(arr) != mesh.n_tets:
            raise ValueError(
                f"cell field {name!r} has length {len(arr)}, expected {mesh.n_tets}"
            )
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(comment.replace("\n", " ")[:255] + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for p in mesh.vertices:
            fh.write("%s %s %s\n" % (_FLOAT_FMT % p[0], _FLOAT_FMT % p[1],
                                     _FLOAT_FMT % p[2]))
        fh.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        for t in mesh.tets:
            fh.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        fh.write(f"CELL_TYPES {mesh.n_tets}\n")
        for _ in range(mesh.n_tets):
            fh.write("10\n")
        if point_data:
            fh.write(f"POINT_DATA {mesh.n_vertices}\n")
            _write_vtk_fields(fh, point_data)
        if cell_data:
            fh.write(f"CELL_DATA {mesh.n_tets}\n")
            _write_vtk_fields(fh, cell_data)
    return path


def _write_vtk_fields(fh, fields):
    for name, arr in fields.items():
        safe = name.replace(" ", "_")
        fh.write(f"SCALARS {safe} double 1\nLOOKUP_TABLE default\n")
        for v in np.asarray(arr, dtype=np.float64):
            fh.write((_FLOAT_FMT % v) + "\n")


def write_vtk_polydata(points, triangles, path, point_data=None,
                       comment="tetflat surface"):
    """Legacy ASCII VTK POLYDATA triangle surface with optional point scalars."""
    points = np.asarray(points, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    point_data = point_data or {}
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(comment.replace("\n", " ")[:255] + "\n")
        fh.write("ASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {len(points)} double\n")
        for p in points:
            fh.write("%s %s %s\n" % (_FLOAT_FMT % p[0], _FLOAT_FMT % p[1],
                                     _FLOAT_FMT % p[2]))
        fh.write(f"POLYGONS {len(triangles)} {4 * len(triangles)}\n")
        for t in triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
        if point_data:
            fh.write(f"POINT_DATA {len(points)}\n")
            _write_vtk_fields(fh, point_data)
    return path


def read_vtk(path, frame="original"):
    """Read the unstructured-grid subset produced by :func:`write_vtk`.

    Returns
    -------
    (TetMesh, n_reoriented, point_data, cell_data)
    """
    with open(path) as fh:
        tokens = []
        for raw in fh:
            tokens.extend(raw.split())
    pos = 0

    def take(n):
        nonlocal pos
        out = tokens[pos:pos + n]
        if len(out) < n:
            raise MeshFormatError("unexpected end of VTK file", path=path)
        pos += n
        return out

    def seek(word):
        nonlocal pos
        while pos < len(tokens) and tokens[pos].upper() != word:
            pos += 1
        if pos >= len(tokens):
            raise MeshFormatError(f"missing {word} section", path=path)

    seek("DATASET")
    kind = take(2)[1].upper()
    if kind != "UNSTRUCTURED_GRID":
        raise MeshFormatError(f"unsupported VTK dataset {kind}", path=path)
    seek("POINTS")
    n_points = int(take(3)[1])
    coords = np.array(take(3 * n_points), dtype=np.float64).reshape(n_points, 3)
    seek("CELLS")
    header = take(3)
    n_cells = int(header[1])
    cells = []
    for _ in range(n_cells):
        npts = int(take(1)[0])
        cells.append([int(v) for v in take(npts)])
    seek("CELL_TYPES")
    take(2)
    types = [int(v) for v in take(n_cells)]
    tets = [c for c, t in zip(cells, types) if t == 10]
    if len(tets) != n_cells:
        raise MeshFormatError("non-tetrahedral cells present", path=path)

    point_data, cell_data = {}, {}
    while pos < len(tokens):
        word = tokens[pos].upper()
        if word == "POINT_DATA":
            take(2)
            _read_vtk_fields(take, tokens, lambda: pos, n_points, point_data)
        elif word == "CELL_DATA":
            take(2)
            _read_vtk_fields(take, tokens, lambda: pos, n_cells, cell_data)
        else:
            pos += 1

    mesh, n_reoriented = TetMesh.from_unoriented(coords, np.array(tets), frame=frame)
    return mesh, n_reoriented, point_data, cell_data


def _read_vtk_fields(take, tokens, posfn, n, out):
    while posfn() < len(tokens) and tokens[posfn()].upper() == "SCALARS":
        header = take(4)
        name = header[1]
        take(2)  # LOOKUP_TABLE default
        out[name] = np.array(take(n), dtype=np.float64)


def load_mesh(path, format=None, frame="original", with_report=False):
    """Load a mesh, auto-detecting TetGen vs VTK by extension.

    Parameters
    ----------
    path : str
        A ``.node``/``.ele`` basename or path, or a ``.vtk`` file.
    format : {"tetgen", "vtk", None}
        Force a format; None auto-detects.
    with_report : bool
        If True, return ``(mesh, report)`` where report records the
        reorientation count.
    """
    path = str(path)
    if format is None:
        format = "vtk" if path.endswith(".vtk") else "tetgen"
    if format == "tetgen":
        mesh, n_reoriented = read_node_ele(path, frame=frame)
    elif format == "vtk":
        mesh, n_reoriented, _, _ = read_vtk(path, frame=frame)
    else:
        raise ValueError(f"unknown mesh format {format!r}")
    if with_report:
        return mesh, {"n_reoriented": n_reoriented}
    return mesh


# ---------------------------------------------------------------------------
# Scalar volumes: NRRD subset and raw + JSON header
# ---------------------------------------------------------------------------

_NRRD_TYPES = {"float": np.float32, "double": np.float64}


def write_nrrd(vol, path, dtype="double"):
    if dtype not in _NRRD_TYPES:
        raise VolumeFormatError(f"unsupported nrrd type {dtype!r}")
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    header = [
        "NRRD0004",
        "# tetflat scalar volume",
        f"type: {dtype}",
        "dimension: 3",
        "space dimension: 3",
        f"sizes: {nx} {ny} {nz}",
        f"space directions: ({_FLOAT_FMT % sx},0,0) (0,{_FLOAT_FMT % sy},0) "
        f"(0,0,{_FLOAT_FMT % sz})",
        f"space origin: ({_FLOAT_FMT % ox},{_FLOAT_FMT % oy},{_FLOAT_FMT % oz})",
        "endian: little",
        "encoding: raw",
    ]
    for key, value in sorted(vol.metadata.items()):
        header.append(f"{key}:={value}")
    raw = np.ascontiguousarray(
        vol.data.ravel(order="F"), dtype=_NRRD_TYPES[dtype]
    )
    if np.little_endian is False:
        raw = raw.byteswap()
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode())
        fh.write(raw.tobytes())
    return path


def _parse_nrrd_vector(text):
    return [float(v) for v in text.strip().lstrip("(").rstrip(")").split(",")]


def read_nrrd(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0 or not blob.startswith(b"NRRD"):
        raise VolumeFormatError(f"{path}: not an NRRD file")
    fields = {}
    keyvals = {}
    for line in blob[:sep].decode(errors="replace").splitlines()[1:]:
        if not line or line.startswith("#"):
            continue
        if ":=" in line:
            k, v = line.split(":=", 1)
            keyvals[k.strip()] = v.strip()
        elif ":" in line:
            k, v = line.split(":", 1)
            fields[k.strip().lower()] = v.strip()

    def require(field, allowed=None):
        if field not in fields:
            raise VolumeFormatError(f"{path}: missing NRRD field '{field}'")
        if allowed is not None and fields[field].lower() not in allowed:
            raise VolumeFormatError(
                f"{path}: unsupported NRRD {field} '{fields[field]}'"
                f" (supported: {sorted(allowed)})"
            )
        return fields[field]

    if require("dimension") != "3":
        raise VolumeFormatError(f"{path}: unsupported NRRD dimension "
                                f"'{fields['dimension']}' (only 3)")
    dtype = _NRRD_TYPES[require("type", set(_NRRD_TYPES))]
    require("encoding", {"raw"})
    if fields.get("endian", "little").lower() != "little":
        raise VolumeFormatError(
            f"{path}: unsupported NRRD endian '{fields['endian']}' (only little)"
        )
    dims = tuple(int(v) for v in require("sizes").split())
    if len(dims) != 3:
        raise VolumeFormatError(f"{path}: sizes must have 3 entries")

    if "space directions" in fields:
        groups = re.findall(r"\(([^)]*)\)", fields["space directions"])
        if "none" in fields["space directions"].lower().split():
            raise VolumeFormatError(
                f"{path}: 'none' axes in 'space directions' not supported"
            )
        vecs = [[float(v) for v in g.split(",")] for g in groups]
        if len(vecs) != 3:
            raise VolumeFormatError(f"{path}: space directions must have 3 vectors")
        mat = np.array(vecs)
        if np.any(np.abs(mat - np.diag(np.diag(mat))) > 0):
            raise VolumeFormatError(
                f"{path}: non-diagonal 'space directions' not supported"
            )
        spacing = tuple(np.diag(mat))
    elif "spacings" in fields:
        spacing = tuple(float(v) for v in fields["spacings"].split())
    else:
        raise VolumeFormatError(
            f"{path}: need 'spacings' or diagonal 'space directions'"
        )
    origin = (0.0, 0.0, 0.0)
    if "space origin" in fields:
        origin = tuple(_parse_nrrd_vector(fields["space origin"]))

    count = dims[0] * dims[1] * dims[2]
    raw = np.frombuffer(blob[sep + 2:], dtype=dtype, count=count)
    if len(raw) != count:
        raise VolumeFormatError(
            f"{path}: expected {count} samples, found {len(raw)}"
        )
    data = raw.astype(np.float64).reshape(dims, order="F")
    return ScalarVolume(data, spacing, origin, metadata=dict(keyvals))


def write_raw_json(vol, path, dtype="float64"):
    """Raw little-endian samples (x-fastest) plus a JSON sidecar header."""
    if dtype not in ("float32", "float64"):
        raise VolumeFormatError(f"unsupported raw dtype {dtype!r}")
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    raw_path, json_path = base + ".raw", base + ".json"
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": dtype,
        "metadata": {k: str(v) for k, v in sorted(vol.metadata.items())},
    }
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    arr = vol.data.ravel(order="F").astype("<" + {"float32": "f4", "float64": "f8"}[dtype])
    with open(raw_path, "wb") as fh:
        fh.write(arr.tobytes())
    return json_path


def read_raw_json(path):
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    elif base.endswith(".raw"):
        base = base[:-4]
    json_path, raw_path = base + ".json", base + ".raw"
    with open(json_path) as fh:
        header = json.load(fh)
    for key in ("dims", "spacing", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"{json_path}: missing header key '{key}'")
    if header["dtype"] not in ("float32", "float64"):
        raise VolumeFormatError(
            f"{json_path}: unsupported dtype '{header['dtype']}'"
        )
    dims = tuple(int(v) for v in header["dims"])
    dtype = "<" + {"float32": "f4", "float64": "f8"}[header["dtype"]]
    raw = np.fromfile(raw_path, dtype=dtype)
    count = dims[0] * dims[1] * dims[2]
    if len(raw) != count:
        raise VolumeFormatError(
            f"{raw_path}: expected {count} samples, found {len(raw)}"
        )
    return ScalarVolume(
        raw.astype(np.float64).reshape(dims, order="F"),
        tuple(header["spacing"]),
        tuple(header.get("origin", (0.0, 0.0, 0.0))),
        metadata=dict(header.get("metadata", {})),
    )


def load_volume(path, format=None):
    """Load a scalar volume; auto-detects NRRD vs raw+JSON by extension."""
    path = str(path)
    if format is None:
        format = "nrrd" if path.endswith(".nrrd") else "raw-json"
    if format == "nrrd":
        return read_nrrd(path)
    if format == "raw-json":
        return read_raw_json(path)
    raise ValueError(f"unknown volume format {format!r}")


def write_volume(vol, path, format=None):
    path = str(path)
    if format is None:
        format = "nrrd" if path.endswith(".nrrd") else "raw-json"
    if format == "nrrd":
        return write_nrrd(vol, path)
    if format == "raw-json":
        return write_raw_json(vol, path)
    raise ValueError(f"unknown volume format {format!r}")
