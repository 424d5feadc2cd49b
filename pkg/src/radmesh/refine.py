"""Stage 2: joint vertex-offset and appearance optimisation with error-driven topology updates."""
from __future__ import annotations

import copy
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .field import AppearanceField, merge_grads
from .mesh.core import TriMesh, check_mesh
from .mesh.editing import remesh_region, subdivide_with_parents
from .mesh.losses import laplacian_loss, offset_loss
from .optim import Adam, exp_decay, grid_nerf_eps
from .raster import backward, rasterize, shade
from .volrender import TrainingDivergedError


class NoObservedFacesWarning(UserWarning):
    pass


class FaceErrorAccumulator:
    """Per-face summed pixel error and pixel count since the last reset."""

    def __init__(self, n_faces: int):
        self.sum = np.zeros(n_faces)
        self.count = np.zeros(n_faces, dtype=np.int64)

    @property
    def n_faces(self) -> int:
        return len(self.sum)

    @property
    def observed(self) -> np.ndarray:
        return self.count > 0

    def add(self, face_ids: np.ndarray, errors: np.ndarray):
        face_ids = np.asarray(face_ids, dtype=np.int64).ravel()
        errors = np.asarray(errors, dtype=np.float64).ravel()
        self.sum += np.bincount(face_ids, weights=errors, minlength=self.n_faces)
        self.count += np.bincount(face_ids, minlength=self.n_faces)

    def mean(self, unobserved: float = np.nan) -> np.ndarray:
        out = np.full(self.n_faces, unobserved, dtype=np.float64)
        obs = self.observed
        out[obs] = self.sum[obs] / self.count[obs]
        return out

    def reset(self, n_faces: int | None = None):
        n = self.n_faces if n_faces is None else n_faces
        self.sum = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)


def accumulate_face_errors(frag, per_pixel_error: np.ndarray, acc: FaceErrorAccumulator) -> FaceErrorAccumulator:
    """Add every covered pixel's scalar error to its face's bucket."""
    cov = frag.covered
    acc.add(frag.face_id[cov], np.asarray(per_pixel_error)[cov])
    return acc


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value (at least the first)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty list")
    rank = max(1, math.ceil(percentile / 100.0 * v.size))
    return float(v[min(rank, v.size) - 1])


def compute_thresholds(acc: FaceErrorAccumulator, subdivide_pct: float = 95.0, decimate_pct: float = 50.0):
    """``(e_subdivide, e_decimate)`` over the mean errors of observed faces, or None if none observed."""
    obs = acc.observed
    if not obs.any():
        warnings.warn("no observed faces; refinement round skipped", NoObservedFacesWarning, stacklevel=2)
        return None
    errors = acc.mean()[obs]
    return nearest_rank(errors, subdivide_pct), nearest_rank(errors, decimate_pct)


@dataclass
class Stage2Config:
    steps: int = 2000
    lr_vertex: float = 1e-4
    lr_app_start: float = 1e-3
    lr_app_end: float = 1e-4
    w_smooth: float = 1e-3
    w_offset: float = 0.1
    refine_fractions: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.7)
    subdivide_percentile: float = 95.0
    decimate_percentile: float = 50.0
    decimate_fraction: float = 0.1
    min_edge_frac: float = 0.01
    target_edge_frac: float = 0.02
    remesh_iterations: int = 3
    log_every: int = 200
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.refine_fractions)
        if any(not 0.0 < f < 1.0 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("refine_fractions must be strictly increasing in (0, 1)")
        self.refine_fractions = fr
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.decimate_fraction <= 1.0:
            raise ValueError("decimate_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["refine_fractions"] = list(self.refine_fractions)
        return d

    def refine_steps(self) -> list[int]:
        """Step index after which each round runs; one entry per fraction."""
        return [int(math.floor(f * self.steps)) for f in self.refine_fractions]


def refine_topology(mesh: TriMesh, acc: FaceErrorAccumulator, cfg: Stage2Config | None = None):
    """Subdivide high-error faces and remesh low-error ones; returns ``(mesh, report)``.

    Offsets are folded into vertex positions first; the returned mesh has zero offsets
    and ``acc`` is reset to the new face count.
    """
    cfg = cfg or Stage2Config()
    if acc.n_faces != mesh.n_faces:
        raise ValueError("accumulator does not match mesh face count")
    report = {"faces_before": mesh.n_faces, "faces_after": mesh.n_faces, "n_subdivided": 0,
              "n_decimated": 0, "e_subdivide": None, "e_decimate": None, "skipped": True}
    thresholds = compute_thresholds(acc, cfg.subdivide_percentile, cfg.decimate_percentile)
    if thresholds is None:
        return mesh.copy(), report
    e_sub, e_dec = thresholds
    base = mesh.baked()
    err = acc.mean(unobserved=0.0)
    sub_ids = np.flatnonzero(err > e_sub)
    eligible = np.flatnonzero(err < e_dec)
    n_dec = min(len(eligible), int(math.floor(cfg.decimate_fraction * mesh.n_faces)))
    dec_ids = eligible[np.lexsort((eligible, err[eligible]))[:n_dec]]
    diag = base.bbox_diagonal()
    out, parent = subdivide_with_parents(base, sub_ids, cfg.min_edge_frac * diag)
    n_sub = int(np.count_nonzero(np.bincount(parent, minlength=mesh.n_faces)[sub_ids] == 4)) if len(sub_ids) else 0
    region = np.flatnonzero(np.isin(parent, dec_ids))
    if region.size:
        out = remesh_region(out, region, cfg.target_edge_frac * diag, iterations=cfg.remesh_iterations)
    check_mesh(out, "refine_topology")
    acc.reset(out.n_faces)
    report.update(faces_after=out.n_faces, n_subdivided=n_sub, n_decimated=int(len(dec_ids)),
                  e_subdivide=e_sub, e_decimate=e_dec, skipped=False)
    return out, report


@dataclass
class Stage2Result:
    mesh: TriMesh
    appearance: AppearanceField
    history: list = field(default_factory=list)
    rounds: list = field(default_factory=list)


def stage2_step(mesh: TriMesh, appearance: AppearanceField, image, cfg: Stage2Config):
    """Loss terms, offset gradient, appearance gradients and the fragment buffer for one view."""
    frag = rasterize(mesh, image.camera)
    pred, cache = shade(frag, appearance, background=image.background, clamp=False, return_cache=True)
    diff = pred - image.pixels
    n_pix = diff.shape[0] * diff.shape[1]
    per_pixel = np.sum(diff * diff, axis=-1)
    terms = {"render": float(per_pixel.sum() / n_pix)}
    g_off, g_app = backward(frag, 2.0 * diff / n_pix, mesh, appearance, cache=cache)
    smooth, g_smooth = laplacian_loss(mesh)
    off, g_offl = offset_loss(mesh)
    terms["smooth"], terms["offset"] = smooth, off
    terms["loss"] = terms["render"] + cfg.w_smooth * smooth + cfg.w_offset * off
    mse = float(np.mean((np.clip(pred, 0.0, 1.0) - image.pixels) ** 2))
    terms["psnr"] = -10.0 * math.log10(max(mse, 1e-10))
    g_off = g_off + cfg.w_smooth * g_smooth + cfg.w_offset * g_offl
    return terms, g_off, g_app, frag, per_pixel


def train_stage2(dataset, mesh: TriMesh, appearance: AppearanceField, cfg: Stage2Config | None = None,
                 log: Callable | None = None) -> Stage2Result:
    """Refine the coarse mesh and appearance against the train split.

    Each step renders one random training view. After the step indices listed by
    ``cfg.refine_steps()`` the topology is updated from the accumulated face errors.
    Inputs are not modified.
    """
    cfg = cfg or Stage2Config()
    images = dataset.train
    if not images:
        raise ValueError("dataset has no train images")
    mesh = mesh.copy()
    appearance = copy.deepcopy(appearance)
    result = Stage2Result(mesh, appearance)
    if cfg.steps == 0:
        return result
    rng = np.random.default_rng(cfg.seed)
    app_opt = Adam(appearance.parameters(), cfg.lr_app_start, betas=(0.9, 0.99), eps=grid_nerf_eps)
    off_opt = Adam({"mesh.offsets": mesh.offsets}, cfg.lr_vertex, betas=(0.9, 0.99), eps=1e-15)
    acc = FaceErrorAccumulator(mesh.n_faces)
    schedule = cfg.refine_steps()
    for step in range(cfg.steps):
        image = images[int(rng.integers(len(images)))]
        terms, g_off, g_app, frag, per_pixel = stage2_step(mesh, appearance, image, cfg)
        if not all(math.isfinite(v) for v in terms.values()):
            raise TrainingDivergedError(f"non-finite stage-2 loss at step {step}: {terms}")
        accumulate_face_errors(frag, per_pixel, acc)
        app_opt.step(g_app, exp_decay(step, cfg.steps, cfg.lr_app_start, cfg.lr_app_end))
        off_opt.step({"mesh.offsets": g_off})
        record = {"step": step, "faces": mesh.n_faces, **terms}
        result.history.append(record)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(record)
        for _ in range(schedule.count(step)):
            mesh, report = refine_topology(mesh, acc, cfg)
            report.update(round=len(result.rounds), step=step)
            result.rounds.append(report)
            if log is not None:
                log({"event": "refine", **report})
            off_opt = Adam({"mesh.offsets": mesh.offsets}, cfg.lr_vertex, betas=(0.9, 0.99), eps=1e-15)
    result.mesh = mesh
    return result
