"""Stage-2 geometric regularizers on the vertex offsets; each returns ``(value, grad)``."""
from __future__ import annotations

import numpy as np

from .core import TriMesh


def _neighbor_pairs(mesh: TriMesh):
    e, _ = mesh.unique_edges()
    i = np.concatenate([e[:, 0], e[:, 1]])
    j = np.concatenate([e[:, 1], e[:, 0]])
    degree = np.bincount(i, minlength=mesh.n_vertices)
    return i, j, degree


def laplacian_loss(mesh: TriMesh):
    """``(1/N) sum_i (1/|S_i|) sum_{j in S_i} |p_i - p_j|^2`` with ``p = v + offsets``."""
    n = mesh.n_vertices
    grad = np.zeros((n, 3))
    if n == 0 or mesh.n_faces == 0:
        return 0.0, grad
    i, j, degree = _neighbor_pairs(mesh)
    p = mesh.positions
    diff = p[i] - p[j]
    w = 1.0 / degree[i]
    value = float(np.sum(w * np.einsum("ij,ij->i", diff, diff))) / n
    g = (2.0 / n) * w[:, None] * diff
    np.add.at(grad, i, g)
    np.add.at(grad, j, -g)
    return value, grad


def offset_loss(mesh: TriMesh):
    """Mean squared offset norm."""
    n = mesh.n_vertices
    if n == 0:
        return 0.0, np.zeros((0, 3))
    d = mesh.offsets
    return float(np.sum(d * d)) / n, 2.0 * d / n
