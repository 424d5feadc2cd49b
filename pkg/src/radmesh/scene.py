"""Cameras, posed-image datasets and analytic synthetic scenes.

Camera convention: right-handed, the camera looks along -z with +y up, and
``camera_to_world`` maps camera coordinates to world coordinates.  Pixel
``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``; ``v`` grows downwards.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

WHITE = (1.0, 1.0, 1.0)


class DatasetError(Exception):
    """Raised when a dataset directory cannot be loaded."""


class DatasetValidationError(DatasetError, ValueError):
    """Raised when dataset contents disagree with the pose manifest."""


@dataclass(eq=False)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    camera_to_world: np.ndarray

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rot = self.rotation
        if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-6:
            raise ValueError("camera_to_world rotation block is not orthonormal")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float, camera_to_world) -> "CameraModel":
        """Pinhole camera from a horizontal field of view in radians."""
        focal = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(width, height, focal, focal, 0.5 * width, 0.5 * height, camera_to_world)

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    @property
    def fov_x(self) -> float:
        return 2.0 * math.atan(0.5 * self.width / self.fx)

    def scaled(self, width: int, height: int) -> "CameraModel":
        """Same pose and field of view at another image size."""
        sx, sy = width / self.width, height / self.height
        return CameraModel(width, height, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                           self.camera_to_world)

    def pixel_rays(self, jitter: np.ndarray | None = None):
        """Rays through every pixel center, row-major, shape (H*W, 3) each."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        px = np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)
        return self.rays(px, jitter)

    def rays(self, px: np.ndarray, jitter: np.ndarray | None = None):
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        centers = px + 0.5
        if jitter is not None:
            centers = centers + jitter
        x = (centers[:, 0] - self.cx) / self.fx
        y = -(centers[:, 1] - self.cy) / self.fy
        dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
        dirs = dirs_cam @ self.rotation.T
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.origin, dirs.shape).copy()
        return origins, dirs

    def project(self, points: np.ndarray):
        """World points to continuous pixel coordinates and positive depth.

        A point projecting to ``(u, v)`` lies on the ray of pixel
        ``(floor(u), floor(v))``.
        """
        points = np.atleast_2d(points)
        cam = (points - self.origin) @ self.rotation
        depth = -cam[:, 2]
        u = self.fx * cam[:, 0] / depth + self.cx
        v = -self.fy * cam[:, 1] / depth + self.cy
        return np.stack([u, v], axis=-1), depth


def camera_ray(camera: CameraModel, px, jitter=(0.0, 0.0)):
    """Single ray ``(origin, unit direction)`` through pixel ``px`` plus an in-pixel offset."""
    origins, dirs = camera.rays(np.asarray(px, dtype=np.float64)[None], np.asarray(jitter)[None])
    return origins[0], dirs[0]


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, back)) > 0.999:
        up = np.array([0.0, 0.0, 1.0]) if abs(back[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, back, eye
    return c2w


@dataclass(eq=False)
class PosedImage:
    camera: CameraModel
    pixels: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.array(WHITE))
    name: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.pixels.shape != (self.camera.height, self.camera.width, 3):
            raise DatasetValidationError(
                f"image {self.name or '?'} has shape {self.pixels.shape}, camera expects "
                f"{(self.camera.height, self.camera.width, 3)}")
        if self.pixels.min(initial=0.0) < 0.0 or self.pixels.max(initial=0.0) > 1.0:
            raise DatasetValidationError("pixel values must lie in [0, 1]")


@dataclass(eq=False)
class Dataset:
    images: list
    scene_bound: float = 1.0
    splits: list = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.images)
        if len(self.splits) != len(self.images):
            raise ValueError("one split tag per image is required")
        if self.scene_bound <= 0:
            raise ValueError("scene_bound must be positive")
        if not self.train:
            raise ValueError("dataset needs at least one train image")

    def split(self, name: str) -> list:
        return [im for im, s in zip(self.images, self.splits) if s == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")

    @property
    def background(self) -> np.ndarray:
        return self.images[0].background


# ---------------------------------------------------------------------------
# On-disk layout: transforms_<split>.json + PNG images


def _composite(rgba: np.ndarray, background) -> np.ndarray:
    rgb, alpha = rgba[..., :3], rgba[..., 3:4]
    return rgb * alpha + np.asarray(background) * (1.0 - alpha)


def load_dataset(path, background=WHITE, splits: Sequence[str] = ("train", "test")) -> Dataset:
    """Read a Blender-style ``transforms_<split>.json`` directory.

    Frames list ``file_path`` (extension optional, ``.png`` assumed) and a
    4x4 ``transform_matrix``; ``camera_angle_x`` gives the horizontal field of
    view.  Optional top-level keys ``scene_bound`` and ``background`` are
    honoured.  RGBA images are composited over the background.
    """
    root = Path(path)
    manifests = [(s, root / f"transforms_{s}.json") for s in splits]
    manifests = [(s, m) for s, m in manifests if m.is_file()]
    if not manifests:
        raise DatasetError(f"no pose manifest (transforms_<split>.json) found in {root}")

    images, tags, bound = [], [], None
    for split, manifest in manifests:
        try:
            meta = json.loads(manifest.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed manifest {manifest}: {exc}") from exc
        if "camera_angle_x" not in meta or "frames" not in meta:
            raise DatasetError(f"manifest {manifest} lacks camera_angle_x or frames")
        bg = np.asarray(meta.get("background", background), dtype=np.float64)
        bound = float(meta.get("scene_bound", bound or 1.0))
        for frame in meta["frames"]:
            rel = frame["file_path"]
            file = (root / rel).resolve()
            if file.suffix == "":
                file = file.with_suffix(".png")
            if not file.is_file():
                raise DatasetError(f"image file not found: {file}")
            with Image.open(file) as im:
                mode = "RGBA" if im.mode in ("RGBA", "LA", "P") else "RGB"
                arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
            h, w = arr.shape[:2]
            if ("w" in meta and int(meta["w"]) != w) or ("h" in meta and int(meta["h"]) != h):
                raise DatasetValidationError(
                    f"{file}: image is {w}x{h}, manifest says {meta.get('w')}x{meta.get('h')}")
            if arr.shape[-1] == 4:
                arr = _composite(arr, bg)
            c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
            cam = CameraModel.from_fov(w, h, float(meta["camera_angle_x"]), c2w)
            images.append(PosedImage(cam, np.clip(arr, 0.0, 1.0), bg, name=str(rel)))
            tags.append(split)
    return Dataset(images, scene_bound=bound, splits=tags)


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset in the layout :func:`load_dataset` reads (8-bit PNGs)."""
    root = Path(path)
    for split in dict.fromkeys(dataset.splits):
        (root / split).mkdir(parents=True, exist_ok=True)
        frames = []
        ims = dataset.split(split)
        for i, im in enumerate(ims):
            rel = f"./{split}/r_{i}"
            q = np.floor(np.clip(im.pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
            Image.fromarray(q, "RGB").save(root / split / f"r_{i}.png")
            frames.append({"file_path": rel, "transform_matrix": im.camera.camera_to_world.tolist()})
        cam = ims[0].camera
        meta = {
            "camera_angle_x": cam.fov_x,
            "w": cam.width,
            "h": cam.height,
            "scene_bound": dataset.scene_bound,
            "background": dataset.background.tolist(),
            "frames": frames,
        }
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# ---------------------------------------------------------------------------
# Analytic scenes


@dataclass
class SyntheticScene:
    """Signed-distance primitive with procedural albedo and an optional highlight.

    ``shape`` is one of ``sphere`` (param: radius), ``torus`` (major, minor
    radius, axis y) or ``box_union`` (two overlapping axis-aligned boxes).
    """

    shape: str = "sphere"
    size: tuple = (0.6,)
    gloss: float = 0.0
    shininess: float = 24.0
    ambient: float = 0.45
    light_dir: tuple = (0.4, 0.8, 0.45)
    albedo_frequency: float = 2.0

    def __post_init__(self):
        if self.shape not in ("sphere", "torus", "box_union"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 0.0 <= self.gloss <= 1.0:
            raise ValueError("gloss must lie in [0, 1]")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.shape == "sphere":
            return np.linalg.norm(x, axis=-1) - self.size[0]
        if self.shape == "torus":
            major, minor = self.size[:2]
            q = np.hypot(x[..., 0], x[..., 2]) - major
            return np.hypot(q, x[..., 1]) - minor
        boxes = _BOX_UNION if len(self.size) < 6 else (self.size[:3], self.size[3:6])
        return np.minimum(_box_sdf(x, (0.0, -0.15, 0.0), boxes[0]),
                          _box_sdf(x, (0.15, 0.2, 0.1), boxes[1]))

    def normal(self, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        grad = np.empty_like(x)
        for k in range(3):
            step = np.zeros(3)
            step[k] = eps
            grad[..., k] = self.sdf(x + step) - self.sdf(x - step)
        return grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)

    def albedo(self, x: np.ndarray) -> np.ndarray:
        f = self.albedo_frequency
        x = np.asarray(x, dtype=np.float64)
        r = 0.55 + 0.3 * np.sin(f * x[..., 0] + 0.3)
        g = 0.5 + 0.3 * np.sin(f * x[..., 1] + 1.7)
        b = 0.45 + 0.3 * np.cos(f * x[..., 2] - 0.4)
        return np.stack([r, g, b], axis=-1)

    def shade(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Radiance leaving surface point ``x`` towards ``-d``."""
        n = self.normal(x)
        light = np.asarray(self.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lambert = np.clip(n @ light, 0.0, None)
        color = self.albedo(x) * (self.ambient + (1.0 - self.ambient) * lambert)[..., None]
        if self.gloss > 0:
            refl = d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n
            spec = np.clip(refl @ light, 0.0, None) ** self.shininess
            color = color + self.gloss * spec[..., None]
        return np.clip(color, 0.0, 1.0)


_BOX_UNION = ((0.55, 0.3, 0.45), (0.3, 0.45, 0.3))


def _box_sdf(x, center, half):
    q = np.abs(x - np.asarray(center)) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


class SurfaceOracle:
    """Exact geometry queries for a :class:`SyntheticScene`."""

    def __init__(self, scene: SyntheticScene, t_max: float = 20.0):
        self.scene = scene
        self.t_max = t_max

    def sdf(self, x):
        return self.scene.sdf(x)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, max_iter: int = 512, tol: float = 1e-9):
        """Sphere-trace rays; returns ``(t, hit)`` with ``t = inf`` on misses."""
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        t = np.zeros(len(origins))
        active = np.ones(len(origins), dtype=bool)
        hit = np.zeros(len(origins), dtype=bool)
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            dist = self.sdf(origins[idx] + t[idx, None] * dirs[idx])
            done = dist < tol
            hit[idx[done]] = True
            t[idx[~done]] += dist[~done]
            escaped = t[idx] > self.t_max
            active[idx[done | escaped]] = False
        t = np.where(hit, t, np.inf)
        return t, hit

    def sample_surface(self, cameras: Iterable[CameraModel], n_points: int, seed: int = 0):
        """Surface points hit by pixel rays of ``cameras``, subsampled to ``n_points``."""
        pts = []
        for cam in cameras:
            o, d = cam.pixel_rays()
            t, hit = self.intersect(o, d)
            pts.append(o[hit] + t[hit, None] * d[hit])
        pts = np.concatenate(pts) if pts else np.zeros((0, 3))
        return _subsample(pts, n_points, seed)


def _subsample(points: np.ndarray, n: int, seed: int) -> np.ndarray:
    if len(points) <= n:
        return points
    rng = np.random.default_rng(seed)
    return points[np.sort(rng.choice(len(points), n, replace=False))]


def render_scene(scene: SyntheticScene, camera: CameraModel, background=WHITE) -> np.ndarray:
    oracle = SurfaceOracle(scene)
    o, d = camera.pixel_rays()
    t, hit = oracle.intersect(o, d)
    img = np.tile(np.asarray(background, dtype=np.float64), (len(o), 1))
    if hit.any():
        img[hit] = scene.shade(o[hit] + t[hit, None] * d[hit], d[hit])
    return img.reshape(camera.height, camera.width, 3)


def sphere_cameras(n_views: int, radius: float, resolution: int, fov_x: float, seed: int):
    """Cameras on a sphere around the origin, looking at it (Fibonacci lattice, seeded spin)."""
    rng = np.random.default_rng(seed)
    spin = rng.uniform(0.0, 2.0 * math.pi)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    cams = []
    for i in range(n_views):
        y = 1.0 - 2.0 * (i + 0.5) / n_views
        r = math.sqrt(max(0.0, 1.0 - y * y))
        phi = spin + golden * i
        eye = radius * np.array([r * math.cos(phi), y, r * math.sin(phi)])
        cams.append(CameraModel.from_fov(resolution, resolution, fov_x, look_at(eye)))
    return cams


def generate_synthetic_dataset(scene: SyntheticScene, n_views: int, resolution: int, seed: int = 0,
                               n_test: int = 0, radius: float = 3.0, fov_x: float = math.radians(40.0),
                               background=WHITE, scene_bound: float = 1.0):
    """Render ``scene`` from cameras on a sphere; returns ``(Dataset, SurfaceOracle)``.

    Test views use a differently seeded lattice so they do not coincide with
    training views.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    cams = sphere_cameras(n_views, radius, resolution, fov_x, seed)
    if n_test:
        cams += sphere_cameras(n_test, radius, resolution, fov_x, seed + 7919)
    images = [PosedImage(c, render_scene(scene, c, background), background, name=f"view_{i}")
              for i, c in enumerate(cams)]
    splits = ["train"] * n_views + ["test"] * n_test
    return Dataset(images, scene_bound=scene_bound, splits=splits), SurfaceOracle(scene)
