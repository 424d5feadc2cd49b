"""Density sampling on a lattice and isosurface extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .core import TriMesh


@dataclass(eq=False)
class DensityVolume:
    """Samples ``values[i, j, k] = sigma(lo + (i, j, k) * (hi - lo) / (R - 1))``."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=np.float64), (3,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=np.float64), (3,)).copy()
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("density volume must be 3D with at least 2 samples per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density volume contains non-finite samples")

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.values.shape) - 1)

    @classmethod
    def from_function(cls, density_fn, resolution: int, lo, hi, chunk: int = 1 << 16) -> "DensityVolume":
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,))
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,))
        axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        vals = np.concatenate([density_fn(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
        return cls(vals.reshape(resolution, resolution, resolution), lo, hi)


def marching_cubes(volume: DensityVolume, threshold: float) -> TriMesh:
    """Level set ``sigma = threshold`` with faces oriented towards decreasing density."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    vals = volume.values
    if not (vals.min() < threshold < vals.max()):
        return TriMesh.empty()
    # 'ascent' winds faces outward when density increases towards the interior
    verts, faces, _, _ = measure.marching_cubes(vals, level=threshold, spacing=tuple(volume.spacing),
                                                gradient_direction="ascent", allow_degenerate=False)
    return TriMesh(verts + volume.lo, faces.astype(np.int64))
