import numpy as np
import pytest

from tetflat import io, synth
from tetflat.errors import MeshFormatError, VolumeFormatError
from tetflat.mesh import TetMesh
from tetflat.volume import ScalarVolume, coordinate_ramp_volume


def write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def test_single_unit_tet(tmp_path):
    write(tmp_path / "t.node",
          "4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n")
    write(tmp_path / "t.ele", "1 4 0\n0 0 1 2 3\n")
    mesh, n_fixed = io.read_node_ele(tmp_path / "t.node")
    assert mesh.n_vertices == 4
    assert mesh.n_tets == 1
    assert n_fixed == 0
    assert len(mesh.boundary.triangles) == 4


def test_swapped_vertices_reoriented(tmp_path):
    write(tmp_path / "t.node",
          "4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n")
    write(tmp_path / "t.ele", "1 4 0\n0 0 1 3 2\n")
    mesh, n_fixed = io.read_node_ele(tmp_path / "t.node")
    assert n_fixed == 1
    assert mesh.signed_volumes()[0] > 0


def test_one_based_indices_detected(tmp_path):
    write(tmp_path / "t.node",
          "4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
    write(tmp_path / "t.ele", "1 4 0\n1 1 2 3 4\n")
    mesh, _ = io.read_node_ele(tmp_path / "t.node")
    assert mesh.n_tets == 1
    assert np.array_equal(mesh.tets[0], [0, 1, 2, 3])


def test_comments_and_parse_error_line(tmp_path):
    write(tmp_path / "t.node",
          "# header comment\n4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 oops 0\n3 0 0 1\n")
    write(tmp_path / "t.ele", "1 4 0\n0 0 1 2 3\n")
    with pytest.raises(MeshFormatError) as err:
        io.read_node_ele(tmp_path / "t.node")
    assert "line 5" in str(err.value)


def test_tetgen_roundtrip_bit_exact(tmp_path):
    mesh, _ = synth.box(7.0, 5.0, 3.0, (2, 2, 2))
    io.write_node_ele(mesh, tmp_path / "grid")
    again, n_fixed = io.read_node_ele(tmp_path / "grid.node")
    assert n_fixed == 0
    assert np.array_equal(mesh.vertices, again.vertices)
    assert np.array_equal(mesh.tets, again.tets)


def test_tetgen_roundtrip_bit_exact_irregular(tmp_path, rng):
    base, _ = synth.box(7.0, 5.0, 3.0, (2, 2, 2))
    verts = base.vertices + 0.09 * rng.standard_normal(base.vertices.shape)
    mesh = TetMesh(verts, base.tets)
    io.write_node_ele(mesh, tmp_path / "grid")
    again, _ = io.read_node_ele(tmp_path / "grid.node")
    assert np.array_equal(mesh.vertices, again.vertices)


def test_vtk_roundtrip(tmp_path, small_bent_slab):
    mesh, _ = small_bent_slab
    logdet = np.linspace(-1, 1, mesh.n_tets)
    path = io.write_vtk(mesh, tmp_path / "m.vtk",
                        cell_data={"log2_det_j": logdet})
    text = open(path).read()
    assert "CELL_DATA %d" % mesh.n_tets in text
    assert "CELL_TYPES" in text
    again, n_fixed, point_data, cell_data = io.read_vtk(path)
    assert np.array_equal(mesh.tets, again.tets)
    # 9 significant digits: relative agreement only
    assert np.abs(mesh.vertices - again.vertices).max() < 1e-6
    assert np.allclose(cell_data["log2_det_j"], logdet, atol=1e-8)


def test_vtk_geometry_only(tmp_path, unit_tet):
    path = io.write_vtk(unit_tet, tmp_path / "t.vtk")
    mesh, _, pd, cd = io.read_vtk(path)
    assert mesh.n_tets == 1
    assert pd == {} and cd == {}


def test_vtk_field_length_mismatch(tmp_path, unit_tet):
    with pytest.raises(ValueError, match="length"):
        io.write_vtk(unit_tet, tmp_path / "t.vtk", cell_data={"x": [1, 2]})


def test_load_mesh_dispatch(tmp_path, small_slab):
    mesh, _ = small_slab
    io.write_node_ele(mesh, tmp_path / "m")
    io.write_vtk(mesh, tmp_path / "m.vtk")
    m1 = io.load_mesh(tmp_path / "m.node")
    m2, report = io.load_mesh(str(tmp_path / "m.vtk"), with_report=True)
    assert m1.n_tets == m2.n_tets == mesh.n_tets
    assert report["n_reoriented"] == 0


def test_nrrd_basics(tmp_path):
    vol = ScalarVolume(np.ones((2, 2, 2)), (3.0, 3.0, 3.0))
    path = tmp_path / "v.nrrd"
    io.write_nrrd(vol, path)
    again = io.read_nrrd(path)
    assert again.dims == (2, 2, 2)
    assert again.data.size == 8
    assert again.spacing == (3.0, 3.0, 3.0)
    centers = again.voxel_centers()
    assert np.isclose(np.linalg.norm(centers[1] - centers[0]), 3.0)


def test_nrrd_roundtrip_bit_identical(tmp_path, rng):
    data = rng.standard_normal((4, 3, 5))
    vol = ScalarVolume(data, (1.5, 2.0, 2.5), (-1.0, 2.0, 0.5),
                       metadata={"source": "test"})
    path = tmp_path / "v.nrrd"
    io.write_nrrd(vol, path)
    again = io.read_nrrd(path)
    assert np.array_equal(again.data, data)
    assert again.origin == (-1.0, 2.0, 0.5)
    assert again.metadata["source"] == "test"


def test_nrrd_rejects_nondiagonal(tmp_path):
    header = (
        "NRRD0004\ntype: double\ndimension: 3\nsizes: 1 1 1\n"
        "space directions: (1,0.5,0) (0,1,0) (0,0,1)\n"
        "endian: little\nencoding: raw\n\n"
    )
    path = tmp_path / "bad.nrrd"
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(np.zeros(1).tobytes())
    with pytest.raises(VolumeFormatError, match="space directions"):
        io.read_nrrd(path)


@pytest.mark.parametrize("field,value,name", [
    ("encoding", "gzip", "encoding"),
    ("type", "int16", "type"),
    ("endian", "big", "endian"),
    ("dimension", "2", "dimension"),
])
def test_nrrd_rejects_unsupported(tmp_path, field, value, name):
    fields = {
        "type": "double", "dimension": "3", "sizes": "1 1 1",
        "spacings": "1 1 1", "endian": "little", "encoding": "raw",
    }
    fields[field] = value
    header = "NRRD0004\n" + "\n".join(f"{k}: {v}" for k, v in fields.items())
    path = tmp_path / "bad.nrrd"
    with open(path, "wb") as fh:
        fh.write((header + "\n\n").encode())
        fh.write(np.zeros(1).tobytes())
    with pytest.raises(VolumeFormatError, match=name):
        io.read_nrrd(path)


def test_raw_json_roundtrip(tmp_path):
    ramp = coordinate_ramp_volume(1, (4, 5, 6), (1.5, 2.0, 2.5), (-1, -2, -3))
    io.write_raw_json(ramp, tmp_path / "r.json")
    again = io.read_raw_json(tmp_path / "r.json")
    assert np.array_equal(ramp.data, again.data)
    assert again.spacing == (1.5, 2.0, 2.5)
    assert again.origin == (-1.0, -2.0, -3.0)


def test_volume_dispatch(tmp_path):
    vol = ScalarVolume(np.zeros((2, 2, 2)), (1, 1, 1))
    io.write_volume(vol, str(tmp_path / "a.nrrd"))
    io.write_volume(vol, str(tmp_path / "b.json"))
    assert io.load_volume(str(tmp_path / "a.nrrd")).dims == (2, 2, 2)
    assert io.load_volume(str(tmp_path / "b.json")).dims == (2, 2, 2)
