"""Input validation helpers shared by the estimators and core functions."""

import numbers

import numpy as np


def check_vertices(vertices):
    """Coerce to a float64 (N, 3) array, rejecting non-finite entries."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError(f"vertices must have shape (N, 3), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vertices contain NaN or Inf")
    return v


def check_tets(tets, n_vertices):
    """Coerce to an int64 (K, 4) array with valid, distinct indices per tet."""
    t = np.asarray(tets)
    if t.ndim != 2 or t.shape[1] != 4:
        raise ValueError(f"tets must have shape (K, 4), got {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        tf = np.asarray(tets, dtype=np.float64)
        t = tf.astype(np.int64)
        if np.any(t != tf):
            raise ValueError("tets contain non-integer indices")
    t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= n_vertices):
        raise ValueError(
            f"tet indices must lie in [0, {n_vertices}), got range "
            f"[{t.min()}, {t.max()}]"
        )
    distinct = (
        (t[:, 0] != t[:, 1]) & (t[:, 0] != t[:, 2]) & (t[:, 0] != t[:, 3])
        & (t[:, 1] != t[:, 2]) & (t[:, 1] != t[:, 3]) & (t[:, 2] != t[:, 3])
    )
    if not np.all(distinct):
        bad = int(np.flatnonzero(~distinct)[0])
        raise ValueError(f"tet {bad} repeats a vertex: {t[bad].tolist()}")
    return t


def check_positive_scalar(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_unit_interval(value, name, open_ends=True):
    value = float(value)
    if open_ends and not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    if not open_ends and not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_unit_normals(normals, tol=1e-8):
    n = np.asarray(normals, dtype=np.float64)
    if n.ndim != 2 or n.shape[1] != 3:
        raise ValueError(f"normals must have shape (M, 3), got {n.shape}")
    lengths = np.linalg.norm(n, axis=1)
    if np.any(np.abs(lengths - 1.0) > tol):
        worst = int(np.argmax(np.abs(lengths - 1.0)))
        raise ValueError(
            f"normals must be unit length; row {worst} has norm {lengths[worst]:.6g}"
        )
    return n
