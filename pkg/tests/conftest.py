import numpy as np
import pytest

from tetflat import synth
from tetflat.mesh import TetMesh
from tetflat.optimizer import OptimizerParams, flatten
from tetflat.parcellation import (
    FETAL,
    MARGIN,
    MATERNAL,
    BoundaryParcellation,
)

# margin half-width used for the desk-scale synthetic suite: the 15 mm
# default is tuned to organ-scale shapes and would consume most of a
# 40 mm-wide slab's faces
SUITE_MARGIN_MM = 6.0
SUITE_RESOLUTION = (24, 16, 3)
SUITE_DIMS = (60.0, 40.0, 9.0)


def gt_parcellation(mesh, info):
    """Parcellation from the generator's ground-truth side labels."""
    topo = mesh.boundary
    gt = info["gt_labels"][topo.vertex_ids]
    labels = np.where(
        gt == synth.GT_MATERNAL, MATERNAL,
        np.where(gt == synth.GT_FETAL, FETAL, MARGIN),
    )
    return BoundaryParcellation(
        vertex_ids=topo.vertex_ids,
        labels=labels.astype(np.int64),
        fiedler=np.zeros(len(labels)),
        margin_mm=0.0,
        hull_votes={},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_tet():
    return TetMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])


@pytest.fixture
def regular_tet():
    # all four faces congruent: barycentric area weights are 1/4 exactly
    pts = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
    )
    return TetMesh(pts, [[0, 2, 1, 3]])


@pytest.fixture
def small_slab():
    mesh, info = synth.bent_slab(
        synth.BentSlabSpec(30.0, 20.0, 8.0, 0.0, (6, 4, 2))
    )
    return mesh, info


@pytest.fixture
def small_bent_slab():
    mesh, info = synth.bent_slab(
        synth.BentSlabSpec(30.0, 20.0, 8.0, 1.2, (6, 4, 2))
    )
    return mesh, info


def _run_case(mesh, template, max_iters=20000):
    import time

    t0 = time.time()
    result = flatten(
        mesh, template,
        params=OptimizerParams(max_iters=max_iters),
        margin_mm=SUITE_MARGIN_MM,
    )
    return result, time.time() - t0


@pytest.fixture(scope="session")
def run_box():
    mesh, _ = synth.bent_slab(synth.BentSlabSpec(*SUITE_DIMS, 0.0,
                                                 SUITE_RESOLUTION))
    return _run_case(mesh, "planes")


@pytest.fixture(scope="session")
def run_slab_pi3():
    mesh, _ = synth.bent_slab(
        synth.BentSlabSpec(*SUITE_DIMS, np.pi / 3, SUITE_RESOLUTION)
    )
    return _run_case(mesh, "planes")


@pytest.fixture(scope="session")
def run_slab_pi():
    mesh, _ = synth.bent_slab(
        synth.BentSlabSpec(*SUITE_DIMS, np.pi, SUITE_RESOLUTION)
    )
    return _run_case(mesh, "planes")


@pytest.fixture(scope="session")
def run_shell():
    mesh, _ = synth.hemispherical_shell(40.0, 10.0, (18, 3))
    return _run_case(mesh, "planes")


@pytest.fixture(scope="session")
def run_slab_2pi3_single_plane():
    """Single-plane pipeline on the 2pi/3 slab.

    Phase 1 of this run IS the parallel-planes flattening of the same
    input, so criteria about both templates share one computation.
    """
    mesh, _ = synth.bent_slab(
        synth.BentSlabSpec(*SUITE_DIMS, 2 * np.pi / 3, SUITE_RESOLUTION)
    )
    return _run_case(mesh, "single-plane")
