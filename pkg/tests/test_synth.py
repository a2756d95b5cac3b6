import numpy as np
import pytest

from tetflat import synth
from tetflat.mesh import boundary_topology


def test_flat_slab_is_centered_box():
    mesh, info = synth.bent_slab(synth.BentSlabSpec(30, 20, 8, 0.0, (3, 2, 2)))
    lo, hi = mesh.bbox()
    assert np.allclose(lo, [-15, -10, -4])
    assert np.allclose(hi, [15, 10, 4])
    assert np.array_equal(mesh.vertices, info["flat_reference"])


def test_kuhn_tet_count():
    for res in [(2, 2, 1), (5, 4, 3)]:
        mesh, _ = synth.bent_slab(synth.BentSlabSpec(10, 9, 4, 0.7, res))
        assert mesh.n_tets == 6 * np.prod(res)


def test_generated_meshes_satisfy_core_invariants():
    cases = [
        synth.bent_slab(synth.BentSlabSpec(30, 20, 8, 2.5, (6, 4, 2)))[0],
        synth.hemispherical_shell(40, 10, (10, 2))[0],
    ]
    for mesh in cases:
        assert mesh.signed_volumes().min() > 0
        topo = boundary_topology(mesh)   # raises on open/non-manifold
        assert abs(topo.vertex_area_weights.sum() - 1.0) < 1e-12
        assert abs(topo.tet_volume_weights.sum() - 1.0) < 1e-12


def test_midsurface_edges_isometric_within_2_percent():
    res = (20, 10, 4)   # even nz so a node layer sits on the mid-surface
    flat, _ = synth.bent_slab(synth.BentSlabSpec(60, 30, 9, 0.0, res))
    bent, _ = synth.bent_slab(synth.BentSlabSpec(60, 30, 9, np.pi, res))
    mid = np.flatnonzero(np.abs(flat.vertices[:, 2]) < 1e-12)
    assert len(mid) == (res[0] + 1) * (res[1] + 1)
    on_mid = np.zeros(flat.n_vertices, dtype=bool)
    on_mid[mid] = True
    from tetflat.metrics import unique_edges

    edges = unique_edges(flat.tets)
    keep = on_mid[edges[:, 0]] & on_mid[edges[:, 1]]
    e = edges[keep]
    len_flat = np.linalg.norm(flat.vertices[e[:, 0]] - flat.vertices[e[:, 1]],
                              axis=1)
    len_bent = np.linalg.norm(bent.vertices[e[:, 0]] - bent.vertices[e[:, 1]],
                              axis=1)
    assert np.abs(len_bent / len_flat - 1.0).max() < 0.02


def test_self_intersecting_spec_rejected():
    with pytest.raises(ValueError, match="self-intersect"):
        synth.BentSlabSpec(10.0, 8.0, 9.0, 3.0, (4, 3, 2))


def test_spec_validation():
    with pytest.raises(ValueError):
        synth.BentSlabSpec(0.0, 8.0, 9.0, 0.0, (4, 3, 2))
    with pytest.raises(ValueError):
        synth.BentSlabSpec(10.0, 8.0, 2.0, 7.0, (4, 3, 2))
    with pytest.raises(ValueError):
        synth.BentSlabSpec(10.0, 8.0, 2.0, 0.0, (0, 3, 2))


def test_shell_euler_characteristic_and_volume():
    mesh, _ = synth.hemispherical_shell(40.0, 10.0)
    topo = mesh.boundary
    v = len(np.unique(topo.triangles))
    e = len(topo.edges)
    f = len(topo.triangles)
    assert v - e + f == 2
    analytic = synth.shell_cap_volume(40.0, 10.0)
    assert abs(mesh.volume() - analytic) / analytic < 0.03
    assert mesh.signed_volumes().min() > 0


def test_shell_parameter_validation():
    with pytest.raises(ValueError):
        synth.hemispherical_shell(40.0, 41.0)
    with pytest.raises(ValueError):
        synth.hemispherical_shell(40.0, 10.0, (1, 1))


def test_gt_labels_partition_boundary():
    mesh, info = synth.bent_slab(synth.BentSlabSpec(30, 20, 8, 1.0, (6, 4, 2)))
    topo = mesh.boundary
    gt = info["gt_labels"]
    assert (gt[topo.vertex_ids] != synth.GT_INTERIOR).all()
    interior = np.setdiff1d(np.arange(mesh.n_vertices), topo.vertex_ids)
    assert (gt[interior] == synth.GT_INTERIOR).all()
    assert (gt == synth.GT_MATERNAL).sum() > 0
    assert (gt == synth.GT_FETAL).sum() > 0


def test_sidecar_roundtrip(tmp_path):
    mesh, info = synth.bent_slab(synth.BentSlabSpec(30, 20, 8, 1.0, (3, 2, 2)))
    path = synth.write_sidecar(info, tmp_path / "side.json")
    again = synth.read_sidecar(path)
    assert again["kind"] == "bent-slab"
    assert np.array_equal(again["gt_labels"], info["gt_labels"])
    assert np.allclose(again["flat_reference"], info["flat_reference"])
    assert again["spec"]["bend_angle"] == 1.0


def test_bend_preserves_width_and_thickness_lines():
    # the bend acts in the x-z plane only: y spacing is untouched
    res = (8, 5, 2)
    flat, _ = synth.bent_slab(synth.BentSlabSpec(40, 25, 6, 0.0, res))
    bent, _ = synth.bent_slab(synth.BentSlabSpec(40, 25, 6, 1.7, res))
    assert np.array_equal(flat.vertices[:, 1], bent.vertices[:, 1])
