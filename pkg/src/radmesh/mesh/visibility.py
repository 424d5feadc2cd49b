"""Removal of faces no training camera can see."""
from __future__ import annotations

import warnings

import numpy as np

from .bvh import BVH
from .core import TriMesh


class NoCamerasWarning(UserWarning):
    pass


def visible_faces(mesh: TriMesh, cameras, chunk: int = 1 << 16) -> np.ndarray:
    """Boolean mask of faces that are the first hit of at least one camera pixel ray."""
    seen = np.zeros(mesh.n_faces, dtype=bool)
    if mesh.n_faces == 0:
        return seen
    bvh = BVH(mesh)
    for cam in cameras:
        origins, dirs = cam.pixel_rays()
        for s in range(0, len(origins), chunk):
            _, face, _ = bvh.intersect(origins[s:s + chunk], dirs[s:s + chunk])
            seen[face[face >= 0]] = True
    return seen


def dilate_faces(mesh: TriMesh, mask: np.ndarray, rounds: int) -> np.ndarray:
    """Grow a face mask ``rounds`` times over shared-edge adjacency."""
    if rounds <= 0 or not mask.any():
        return mask.copy()
    adj = mesh.face_adjacency("edge")
    out = mask.copy()
    for _ in range(rounds):
        grown = out | (adj @ out.astype(np.float64) > 0)
        if np.array_equal(grown, out):
            break
        out = grown
    return out


def visibility_cull(mesh: TriMesh, cameras, dilation_kernel: int = 5, return_mask: bool = False):
    """Keep faces seen by some camera, dilated ``dilation_kernel`` rounds; drop orphaned vertices.

    With no cameras the mesh is returned unchanged and a :class:`NoCamerasWarning` is emitted.
    """
    if dilation_kernel < 0:
        raise ValueError("dilation_kernel must be >= 0")
    cameras = list(cameras or [])
    if not cameras:
        warnings.warn("visibility_cull called without cameras; mesh left unchanged", NoCamerasWarning,
                      stacklevel=2)
        keep = np.ones(mesh.n_faces, dtype=bool)
        out = mesh.copy()
    else:
        keep = dilate_faces(mesh, visible_faces(mesh, cameras), dilation_kernel)
        out = mesh.submesh(keep)
    return (out, keep) if return_mask else out
