import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tetflat import synth
from tetflat.energy import (
    DeformationCache,
    Ellipsoid,
    EnergyModel,
    FlippedTetError,
    ParallelPlanes,
    SinglePlane,
    basis_matrix,
    dirichlet_density,
    fd_check,
    jacobian,
)
from tetflat.mesh import TetMesh, signed_volumes
from tetflat.parcellation import FETAL, MARGIN, MATERNAL

from conftest import gt_parcellation


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------------------
# basis matrix and Jacobian
# ---------------------------------------------------------------------------

def test_basis_matrix_rows():
    b = basis_matrix()
    assert b.shape == (4, 3)
    assert np.array_equal(
        b, [[-1, -1, -1], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    )
    assert np.allclose(b.sum(axis=0), 0.0)   # annihilates translations


def test_basis_extracts_edges(rng):
    corners = rng.standard_normal((4, 3))
    product = corners.T @ basis_matrix()
    expected = np.column_stack(
        [corners[1] - corners[0], corners[2] - corners[0],
         corners[3] - corners[0]]
    )
    assert np.allclose(product, expected)
    shifted = corners + rng.standard_normal(3)
    assert np.allclose(shifted.T @ basis_matrix(), product)


def test_unit_tet_basis_is_identity():
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    assert np.allclose(corners.T @ basis_matrix(), np.eye(3))


def test_jacobian_identity_scale_rotation(rng):
    z = rng.standard_normal((4, 3))
    while signed_volumes(z, np.array([[0, 1, 2, 3]]))[0] <= 0:
        z = rng.standard_normal((4, 3))
    mesh = TetMesh(z, [[0, 1, 2, 3]])
    cache = DeformationCache(mesh)
    assert np.allclose(jacobian(z, cache.inv_basis[0]), np.eye(3), atol=1e-12)
    assert np.allclose(jacobian(2 * z, cache.inv_basis[0]), 2 * np.eye(3))
    rot = random_rotation(rng)
    j = jacobian(z @ rot.T, cache.inv_basis[0])
    assert np.allclose(j, rot, atol=1e-12)
    assert np.allclose(np.linalg.svd(j, compute_uv=False), 1.0)


# ---------------------------------------------------------------------------
# Dirichlet density
# ---------------------------------------------------------------------------

def test_dirichlet_closed_forms():
    assert dirichlet_density(np.eye(3)) == pytest.approx(6.0)
    assert dirichlet_density(2 * np.eye(3)) == pytest.approx(12.75)
    assert dirichlet_density(np.diag([2.0, 1.0, 0.5])) == pytest.approx(10.5)


def test_dirichlet_floor_at_rotations(rng):
    for _ in range(20):
        rot = random_rotation(rng)
        assert dirichlet_density(rot) == pytest.approx(6.0, abs=1e-12)
    for _ in range(20):
        j = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        if np.linalg.det(j) <= 0.05:
            continue
        d = dirichlet_density(j)
        assert d >= 6.0 - 1e-9
        if not np.allclose(j @ j.T, np.eye(3), atol=1e-6):
            assert d > 6.0


def test_dirichlet_inverse_symmetry(rng):
    for _ in range(20):
        j = np.eye(3) + 0.4 * rng.standard_normal((3, 3))
        if abs(np.linalg.det(j)) < 0.05:
            continue
        assert dirichlet_density(j) == pytest.approx(
            dirichlet_density(np.linalg.inv(j)), rel=1e-9
        )


def test_dirichlet_svd_path_matches(rng):
    j = np.eye(3) + 0.3 * rng.standard_normal((5, 3, 3))
    good = np.linalg.det(j) > 0.05
    assert np.allclose(
        dirichlet_density(j[good]),
        dirichlet_density(j[good], method="svd"),
        rtol=1e-9,
    )


def test_dirichlet_singular_rejected():
    with pytest.raises(FlippedTetError):
        dirichlet_density(np.diag([1.0, 1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dirichlet_properties_random(seed):
    rng = np.random.default_rng(seed)
    j = np.eye(3) + 0.35 * rng.standard_normal((3, 3))
    det = np.linalg.det(j)
    if abs(det) < 0.05:
        return
    d = dirichlet_density(j)
    assert d >= 6.0 - 1e-9
    assert d == pytest.approx(dirichlet_density(np.linalg.inv(j)), rel=1e-8)


# ---------------------------------------------------------------------------
# template terms
# ---------------------------------------------------------------------------

def test_plane_template_values():
    tpl = ParallelPlanes(h=13.0)
    xb = np.array([[5.0, 2.0, 13.0], [1.0, 1.0, 0.0], [9.0, 9.0, 99.0]])
    labels = np.array([FETAL, MATERNAL, MARGIN])
    values = tpl.term_values(xb, labels)
    assert values[0] == pytest.approx(0.0)
    assert values[1] == pytest.approx(169.0)
    assert values[2] == 0.0


def test_single_plane_zero_fetal_weight():
    tpl = SinglePlane(h=13.0)
    xb = np.array([[0.0, 0.0, 99.0], [1.0, 1.0, 0.0]])
    labels = np.array([FETAL, MATERNAL])
    values = tpl.term_values(xb, labels)
    assert values[0] == 0.0
    assert values[1] == pytest.approx(169.0)
    # h gradient accumulates only the maternal sum
    grad = tpl.theta_grad(xb, labels, np.array([0.5, 0.5]))
    assert grad[0] == pytest.approx(2.0 * 0.5 * 13.0)


def test_ellipsoid_template_values():
    tpl = Ellipsoid(rx=4.0, ry=3.0, rz=2.0)
    xb = np.array([[4.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    values = tpl.term_values(xb)
    assert values[0] == pytest.approx(0.0)
    assert values[1] == pytest.approx(1.0)


def test_template_validation():
    with pytest.raises(ValueError):
        ParallelPlanes(h=-1.0)
    with pytest.raises(ValueError):
        Ellipsoid(1.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def matched_box_model():
    """Centered box whose top/bottom faces sit exactly on the h=4 planes."""
    mesh, info = synth.bent_slab(
        synth.BentSlabSpec(30.0, 20.0, 8.0, 0.0, (5, 4, 2))
    )
    parc = gt_parcellation(mesh, info)
    return mesh, parc


def test_objective_identity_floor():
    mesh, parc = matched_box_model()
    model = EnergyModel(mesh, parc, lam=1.0)
    phi = model.objective(mesh.vertices, ParallelPlanes(h=4.0))
    assert phi == pytest.approx(6.0, abs=1e-10)


def test_objective_lambda_zero_exact_fit():
    mesh, parc = matched_box_model()
    model = EnergyModel(mesh, parc, lam=0.0)
    phi = model.objective(mesh.vertices, ParallelPlanes(h=4.0))
    assert phi == pytest.approx(0.0, abs=1e-12)


def test_objective_matches_naive_loop(rng):
    mesh, info = synth.bent_slab(
        synth.BentSlabSpec(15.0, 10.0, 6.0, 0.6, (3, 2, 2))
    )
    parc = gt_parcellation(mesh, info)
    lam = 0.7
    model = EnergyModel(mesh, parc, lam=lam)
    x = mesh.vertices + 0.1 * rng.standard_normal(mesh.vertices.shape)
    tpl = ParallelPlanes(h=2.9)
    phi = model.objective(x, tpl)

    # naive per-element loops, reversed order, explicit matrices
    topo = mesh.boundary
    label_of = dict(zip(parc.vertex_ids.tolist(), parc.labels.tolist()))
    acc_t = 0.0
    for vid, weight in list(zip(topo.vertex_ids, topo.vertex_area_weights))[::-1]:
        label = label_of[int(vid)]
        z3 = x[vid, 2]
        if label == FETAL:
            acc_t += weight * (z3 - tpl.h) ** 2
        elif label == MATERNAL:
            acc_t += weight * (z3 + tpl.h) ** 2
    acc_d = 0.0
    b = basis_matrix()
    for k in range(mesh.n_tets)[::-1]:
        zk = mesh.vertices[mesh.tets[k]].T
        xk = x[mesh.tets[k]].T
        j = (xk @ b) @ np.linalg.inv(zk @ b)
        d = np.sum(j * j) + np.sum(np.linalg.inv(j) ** 2)
        acc_d += topo.tet_volume_weights[k] * d
    assert phi == pytest.approx(acc_t + lam * acc_d, rel=1e-10)


def test_objective_raises_on_flip():
    mesh, parc = matched_box_model()
    model = EnergyModel(mesh, parc, lam=1.0)
    x = mesh.vertices.copy()
    x[0] = x.mean(axis=0) + 50.0   # drags its tets inside out
    with pytest.raises(FlippedTetError):
        model.objective(x, ParallelPlanes(h=4.0))


def test_objective_summation_order_robustness(rng):
    mesh, info = synth.bent_slab(
        synth.BentSlabSpec(15.0, 10.0, 6.0, 0.6, (3, 2, 2))
    )
    parc = gt_parcellation(mesh, info)
    model = EnergyModel(mesh, parc, lam=1.0)
    x = mesh.vertices + 0.05 * rng.standard_normal(mesh.vertices.shape)
    tpl = ParallelPlanes(h=3.1)
    phi = model.objective(x, tpl)

    topo = mesh.boundary
    values = tpl.term_values(x[topo.vertex_ids], parc.labels)
    density = dirichlet_density(model.cache.jacobians(x))
    reversed_sum = (
        float((topo.vertex_area_weights * values)[::-1].sum())
        + float((topo.tet_volume_weights * density)[::-1].sum())
    )
    assert phi == pytest.approx(reversed_sum, rel=1e-10)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_gradient_zero_at_constructed_minimum():
    mesh, parc = matched_box_model()
    model = EnergyModel(mesh, parc, lam=1.0)
    grad, theta_grad = model.gradient(mesh.vertices, ParallelPlanes(h=4.0))
    assert np.linalg.norm(grad) < 1e-6
    assert np.abs(theta_grad).max() < 1e-12


def test_distortion_gradient_translation_invariant(rng):
    mesh, parc = matched_box_model()
    model = EnergyModel(mesh, parc, lam=1.0)
    x = mesh.vertices + 0.1 * rng.standard_normal(mesh.vertices.shape)
    grad = model.distortion_gradient(x)
    for direction in np.eye(3):
        directional = float(np.sum(grad @ direction))
        assert abs(directional) < 1e-10


def test_distortion_term_rigid_invariant(rng):
    mesh, parc = matched_box_model()
    model = EnergyModel(mesh, parc, lam=1.0)
    x = mesh.vertices + 0.1 * rng.standard_normal(mesh.vertices.shape)
    base, _ = model.distortion_parts(model.cache.edge_matrices(x))
    moved = x @ random_rotation(rng).T + np.array([3.0, -7.0, 2.0])
    rotated, _ = model.distortion_parts(model.cache.edge_matrices(moved))
    assert rotated == pytest.approx(base, rel=1e-12)


def test_plane_objective_symmetries(rng):
    # in-plane translations and rotations about x3 leave phi unchanged;
    # out-of-plane motion does not
    mesh, parc = matched_box_model()
    model = EnergyModel(mesh, parc, lam=1.0)
    x = mesh.vertices + 0.1 * rng.standard_normal(mesh.vertices.shape)
    tpl = ParallelPlanes(h=4.0)
    phi = model.objective(x, tpl)
    shifted = x + np.array([5.0, -2.0, 0.0])
    assert model.objective(shifted, tpl) == pytest.approx(phi, rel=1e-12)
    theta = 0.7
    rot_z = np.array([
        [np.cos(theta), -np.sin(theta), 0.0],
        [np.sin(theta), np.cos(theta), 0.0],
        [0.0, 0.0, 1.0],
    ])
    assert model.objective(x @ rot_z.T, tpl) == pytest.approx(phi, rel=1e-12)
    lifted = x + np.array([0.0, 0.0, 1.0])
    assert model.objective(lifted, tpl) != pytest.approx(phi, rel=1e-6)


@pytest.mark.parametrize("template", [
    ParallelPlanes(h=3.7),
    SinglePlane(h=4.2),
    Ellipsoid(16.0, 11.0, 5.0),
])
def test_fd_check_all_templates(rng, template):
    mesh, info = synth.bent_slab(
        synth.BentSlabSpec(30.0, 20.0, 10.0, 0.0, (3, 2, 2))
    )
    parc = gt_parcellation(mesh, info)
    x = mesh.vertices + 0.8 * rng.standard_normal(mesh.vertices.shape)
    assert signed_volumes(x, mesh.tets).min() > 0
    report = fd_check(x, template, parc, lam=1.0, mesh=mesh)
    assert report["max"] < 1e-6


def test_fd_check_detects_corruption(rng):
    mesh, info = synth.bent_slab(
        synth.BentSlabSpec(30.0, 20.0, 10.0, 0.0, (3, 2, 2))
    )
    parc = gt_parcellation(mesh, info)
    model = EnergyModel(mesh, parc, lam=1.0)
    x = mesh.vertices + 0.8 * rng.standard_normal(mesh.vertices.shape)
    tpl = Ellipsoid(16.0, 11.0, 5.0)

    def flipped_distortion(xq, template):
        grad_t, grad_theta = model.template_gradient(xq, template)
        return -model.distortion_gradient(xq), grad_t, grad_theta

    report = fd_check(x, tpl, parc, mesh=mesh, gradient_fn=flipped_distortion)
    assert report["distortion"] > 1e-3

    def radius_grad_without_x2(xq, template):
        # the factored radius gradient missing its x_a^2 term
        grad_d = model.distortion_gradient(xq)
        grad_t, _ = model.template_gradient(xq, template)
        xb = model.boundary_positions(xq)
        radii = np.array([template.rx, template.ry, template.rz])
        q = np.sum(xb * xb / radii ** 2, axis=1) - 1.0
        total = float(np.sum(model.cache.area_weights * q))
        return grad_d, grad_t, -4.0 * total / radii ** 3

    report = fd_check(x, tpl, parc, mesh=mesh,
                      gradient_fn=radius_grad_without_x2)
    assert report["theta"] > 1e-3


def test_fd_check_identity_configuration():
    mesh, parc = matched_box_model()
    report = fd_check(mesh.vertices, ParallelPlanes(h=3.5), parc, mesh=mesh)
    assert report["distortion"] < 1e-6
    assert report["template"] < 1e-6
    assert report["theta"] < 1e-6


def test_gradient_needs_parcellation_for_planes():
    mesh, _ = matched_box_model()
    model = EnergyModel(mesh, None, lam=1.0)
    with pytest.raises(ValueError, match="parcellation"):
        model.objective(mesh.vertices, ParallelPlanes(h=4.0))
    # ellipsoid works without one
    assert model.objective(mesh.vertices, Ellipsoid(15, 10, 4)) > 0
