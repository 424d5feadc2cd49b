"""Coarse mesh extraction from a trained density field."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .mesh.clean import clean_mesh
from .mesh.core import TriMesh, check_mesh
from .mesh.editing import decimate
from .mesh.marching import DensityVolume, marching_cubes
from .mesh.visibility import visibility_cull


@dataclass
class ExtractConfig:
    resolution: int = 48
    threshold: float = 10.0
    dilation_kernel: int = 5
    target_faces: int = 20000
    floater_face_frac: float = 0.05
    floater_diameter_frac: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def component_stats(mesh: TriMesh):
    """Face count and bounding-box diameter of each edge-connected component."""
    if mesh.n_faces == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    n, label = connected_components(mesh.face_adjacency("edge"), directed=False)
    sizes = np.bincount(label, minlength=n)
    tri = mesh.triangles()
    lo = np.full((n, 3), np.inf)
    hi = np.full((n, 3), -np.inf)
    np.minimum.at(lo, label, tri.min(axis=1))
    np.maximum.at(hi, label, tri.max(axis=1))
    return sizes, np.linalg.norm(hi - lo, axis=1)


def remove_floaters(mesh: TriMesh, face_frac: float, diameter_frac: float) -> TriMesh:
    """Drop components below both fractions of the largest component's face count and diameter."""
    sizes, diam = component_stats(mesh)
    if len(sizes) <= 1:
        return mesh
    big = int(np.argmax(sizes))
    return clean_mesh(mesh, min_component_faces=int(np.ceil(face_frac * sizes[big])),
                      min_component_diameter=diameter_frac * diam[big])


def extract_mesh(density_fn, bound: float, cameras=None, cfg: ExtractConfig | None = None,
                 lo=None, hi=None):
    """Marching cubes, visibility culling, cleaning and decimation; returns ``(mesh, report)``."""
    cfg = cfg or ExtractConfig()
    lo = -bound if lo is None else lo
    hi = bound if hi is None else hi
    vol = DensityVolume.from_function(density_fn, cfg.resolution, lo, hi)
    report = {"cell_size": float(vol.spacing.max())}
    mesh = marching_cubes(vol, cfg.threshold)
    report["marching_faces"] = mesh.n_faces
    mesh = clean_mesh(mesh)
    if cameras:
        mesh = visibility_cull(mesh, cameras, cfg.dilation_kernel)
    report["culled_faces"] = mesh.n_faces
    mesh = remove_floaters(clean_mesh(mesh), cfg.floater_face_frac, cfg.floater_diameter_frac)
    report["cleaned_faces"] = mesh.n_faces
    if mesh.n_faces > cfg.target_faces:
        mesh, info = decimate(mesh, cfg.target_faces, return_info=True)
        report["decimate_best_effort"] = info.best_effort
    report["faces"] = mesh.n_faces
    report["vertices"] = mesh.n_vertices
    return check_mesh(mesh, "extract"), report
