"""Evaluation: ray-sampled Chamfer distance, PSNR and asset statistics."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh.bvh import BVH
from .mesh.core import TriMesh

PSNR_CAP = 99.0
CHAMFER_CONVENTION = "mean squared nearest-neighbour distance, averaged over both directions"


class ChamferError(ValueError):
    """One side of a Chamfer comparison produced no surface points."""


def _rays(cameras, n_points: int):
    cameras = list(cameras)
    total = sum(c.width * c.height for c in cameras)
    # supersample so roughly 2 * n_points rays are cast in total
    scale = min(16, max(1, math.ceil(math.sqrt(2.0 * n_points / max(total, 1)))))
    origins, dirs = [], []
    for c in cameras:
        cam = c.scaled(c.width * scale, c.height * scale) if scale > 1 else c
        o, d = cam.pixel_rays()
        origins.append(o)
        dirs.append(d)
    return np.concatenate(origins), np.concatenate(dirs)


def surface_points(source, cameras=None, n_points: int = 50_000, seed: int = 0) -> np.ndarray:
    """First ray-surface hits of ``source`` from ``cameras``, uniformly subsampled to ``n_points``.

    ``source`` is a :class:`TriMesh`, any object with ``intersect(origins, dirs) -> (t, hit)``,
    or an ``(N, 3)`` point array (returned after subsampling).
    """
    if isinstance(source, np.ndarray):
        pts = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    else:
        if cameras is None:
            raise ValueError("cameras are required to sample a mesh or an oracle")
        o, d = _rays(cameras, n_points)
        if isinstance(source, TriMesh):
            t, face, _ = BVH(source).intersect(o, d)
            hit = face >= 0
        else:
            t, hit = source.intersect(o, d)
        pts = o[hit] + t[hit, None] * d[hit]
    if len(pts) > n_points:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), n_points, replace=False))]
    return pts


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        raise ChamferError("Chamfer distance needs surface points on both sides")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab ** 2)) + float(np.mean(d_ba ** 2)))


def chamfer(a, b, cameras=None, n_points: int = 50_000, seed: int = 0) -> float:
    """Bi-directional squared Chamfer distance between two surfaces sampled by camera rays."""
    pa = surface_points(a, cameras, n_points, seed)
    pb = surface_points(b, cameras, n_points, seed + 1)
    if len(pa) == 0 or len(pb) == 0:
        side = "first" if len(pa) == 0 else "second"
        raise ChamferError(f"the {side} surface has no ray intersections")
    return chamfer_points(pa, pb)


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """``10 log10(peak^2 / MSE)``, reported as ``cap`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def count_obj(path) -> tuple[int, int]:
    """Vertex and face counts of an OBJ file (``v`` and ``f`` records)."""
    nv = nf = 0
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                nv += 1
            elif line.startswith("f "):
                nf += 1
    return nv, nf


_CLASSES = {".obj": "mesh", ".mtl": "mesh", ".png": "texture", ".json": "metadata"}


def mesh_stats(asset_dir) -> dict:
    """Vertex/face totals over all OBJ files and byte sizes per file class of an asset directory."""
    asset_dir = Path(asset_dir)
    if not asset_dir.is_dir():
        raise FileNotFoundError(f"asset directory not found: {asset_dir}")
    stats = {"vertices": 0, "faces": 0, "bytes": {"mesh": 0, "texture": 0, "metadata": 0, "other": 0}}
    for p in sorted(asset_dir.iterdir()):
        if not p.is_file():
            continue
        stats["bytes"][_CLASSES.get(p.suffix.lower(), "other")] += p.stat().st_size
        if p.suffix.lower() == ".obj":
            nv, nf = count_obj(p)
            stats["vertices"] += nv
            stats["faces"] += nf
    stats["bytes"]["total"] = sum(stats["bytes"].values())
    return stats
