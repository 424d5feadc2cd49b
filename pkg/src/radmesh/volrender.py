"""Ray sampling with occupancy pruning, volume-rendering quadrature and the stage-1 trainer."""
from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .field import AppearanceField, FeatureGrid, GeometryField, merge_grads
from .optim import Adam, exp_decay, grid_nerf_eps

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term stops being finite."""


# ---------------------------------------------------------------------------
# Occupancy


class OccupancyGrid:
    """Coarse grid of running max densities used to skip empty space."""

    def __init__(self, resolution=128, bound=1.0, decay=0.95, threshold_cap=1e-2):
        self.resolution = int(resolution)
        self.bound = float(bound)
        self.decay = float(decay)
        self.threshold_cap = float(threshold_cap)
        self.density = np.zeros(self.resolution ** 3)
        self.occupied = np.ones(self.resolution ** 3, dtype=bool)
        self.updates = 0

    @classmethod
    def full(cls, resolution=8, bound=1.0):
        return cls(resolution, bound)

    @classmethod
    def from_mask(cls, mask: np.ndarray, bound=1.0):
        grid = cls(mask.shape[0], bound)
        grid.occupied = np.asarray(mask, dtype=bool).ravel().copy()
        return grid

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        unit = (np.asarray(x) + self.bound) / (2.0 * self.bound)
        ijk = np.clip(np.floor(unit * self.resolution).astype(np.int64), 0, self.resolution - 1)
        return (ijk[..., 0] * self.resolution + ijk[..., 1]) * self.resolution + ijk[..., 2]

    def is_occupied(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        inside = np.all(np.abs(x) <= self.bound, axis=-1)
        return inside & self.occupied[self.cell_index(x)]

    def cell_centers(self, jitter: np.ndarray | None = None) -> np.ndarray:
        r = self.resolution
        ijk = np.stack(np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij"), -1).reshape(-1, 3)
        offset = 0.5 if jitter is None else jitter
        return ((ijk + offset) / r) * 2.0 * self.bound - self.bound

    @property
    def threshold(self) -> float:
        nonzero = self.density[self.density > 0]
        mean = nonzero.mean() if nonzero.size else 0.0
        return min(0.01 * mean, self.threshold_cap)

    def update(self, density_fn: Callable, rng: np.random.Generator | None = None, chunk=1 << 16):
        jitter = None if rng is None else rng.uniform(0.0, 1.0, size=(self.resolution ** 3, 3))
        pts = self.cell_centers(jitter)
        fresh = np.concatenate([density_fn(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
        self.density = np.maximum(self.density * self.decay, fresh)
        self.occupied = self.density > self.threshold
        self.updates += 1


# ---------------------------------------------------------------------------
# Sampling


@dataclass
class RaySampleSet:
    """Padded per-ray samples: ``t``, ``delta`` and ``mask`` have shape (R, S)."""

    t: np.ndarray
    delta: np.ndarray
    mask: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray

    @property
    def points(self) -> np.ndarray:
        ray, slot = np.nonzero(self.mask)
        return self.origins[ray] + self.t[ray, slot, None] * self.dirs[ray]

    @property
    def point_dirs(self) -> np.ndarray:
        return self.dirs[np.nonzero(self.mask)[0]]

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def ray_samples(self, i: int):
        m = self.mask[i]
        return self.t[i, m], self.delta[i, m]


def ray_box(origins, dirs, bound):
    """Entry/exit distances of rays through ``[-bound, bound]^3`` (``near > far`` on miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
    lo = np.nanmax(np.minimum(t0, t1), axis=-1)
    hi = np.nanmin(np.maximum(t0, t1), axis=-1)
    return np.maximum(lo, 0.0), hi


def sample_rays(origins, dirs, near, far, occupancy: OccupancyGrid | None, n_candidates: int,
                max_samples: int, rng: np.random.Generator | None = None) -> RaySampleSet:
    """Stratified candidates in ``[near, far]``; unoccupied ones dropped, first ``max_samples`` kept.

    Each surviving sample carries the width of its stratum as ``delta`` so
    the last stratum ends exactly at ``far``.  Without ``rng`` candidates sit
    at stratum midpoints.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n_rays = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    valid_ray = far > near
    step = np.where(valid_ray, (far - near) / n_candidates, 0.0)
    u = 0.5 if rng is None else rng.uniform(0.0, 1.0, size=(n_rays, n_candidates))
    t = near[:, None] + (np.arange(n_candidates)[None, :] + u) * step[:, None]
    keep = np.broadcast_to(valid_ray[:, None], t.shape).copy()
    if occupancy is not None:
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        keep &= occupancy.is_occupied(pts)
    rank = np.cumsum(keep, axis=1) - 1
    keep &= rank < max_samples
    width = min(max_samples, n_candidates)
    out_t = np.zeros((n_rays, width))
    out_delta = np.zeros((n_rays, width))
    mask = np.zeros((n_rays, width), dtype=bool)
    ray, cand = np.nonzero(keep)
    slot = rank[ray, cand]
    out_t[ray, slot] = t[ray, cand]
    out_delta[ray, slot] = step[ray]
    mask[ray, slot] = True
    return RaySampleSet(out_t, out_delta, mask, origins, dirs)


def sample_along_ray(origin, direction, occupancy, near, far, max_samples, n_candidates=None, rng=None):
    """Single-ray convenience wrapper; returns ``(t, delta)`` of surviving samples."""
    if not near < far:
        raise ValueError("near must be smaller than far")
    s = sample_rays(np.asarray(origin)[None], np.asarray(direction)[None], near, far, occupancy,
                    n_candidates or max_samples, max_samples, rng)
    return s.ray_samples(0)


# ---------------------------------------------------------------------------
# Quadrature


def composite(sigma, delta, colors, background):
    """Volume-render padded samples.

    Args:
        sigma, delta: (R, S); padded slots must have ``delta = 0``.
        colors: (R, S, 3).
        background: (3,) color behind the volume.

    Returns:
        ``(rgb (R, 3), weights (R, S), opacity (R,), cache)``.
    """
    alpha = 1.0 - np.exp(-sigma * delta)
    trans = np.cumprod(np.concatenate([np.ones((len(alpha), 1)), 1.0 - alpha], axis=1), axis=1)
    weights = trans[:, :-1] * alpha
    opacity = weights.sum(axis=1)
    rgb = np.einsum("rs,rsc->rc", weights, colors) + (1.0 - opacity)[:, None] * background
    cache = {"alpha": alpha, "trans": trans, "weights": weights, "rgb": rgb, "colors": colors,
             "delta": delta, "background": background}
    return rgb, weights, opacity, cache


def composite_backward(cache, grad_rgb, grad_alpha=None):
    """Gradients of a loss w.r.t. per-sample density and color."""
    weights, colors, trans, delta = cache["weights"], cache["colors"], cache["trans"], cache["delta"]
    grad_colors = weights[..., None] * grad_rgb[:, None, :]
    partial = np.cumsum(weights[..., None] * colors, axis=1)
    # d rgb / d tau_k = T_{k+1} c_k - (rgb - sum_{i<=k} w_i c_i)
    d_tau = trans[:, 1:, None] * colors - (cache["rgb"][:, None, :] - partial)
    grad_tau = np.einsum("rsc,rc->rs", d_tau, grad_rgb)
    if grad_alpha is not None:
        grad_tau = grad_tau + grad_alpha * (1.0 - cache["alpha"])
    return grad_tau * delta, grad_colors


def render_ray(sigma, delta, colors, background=(1.0, 1.0, 1.0)):
    """One ray: returns ``(rgb, weights, opacity)``."""
    rgb, w, op, _ = composite(np.asarray(sigma, float)[None], np.asarray(delta, float)[None],
                              np.asarray(colors, float)[None], np.asarray(background, float))
    return rgb[0], w[0], op[0]


# ---------------------------------------------------------------------------
# Losses (each returns value and gradient)


def loss_render(pred, target):
    diff = pred - target
    n = max(len(pred), 1)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def loss_specular(c_s):
    n = max(len(c_s), 1)
    return float(np.sum(c_s * c_s) / n), 2.0 * c_s / n


def loss_entropy(alpha, eps=1e-6):
    """Mean binary entropy with ``0 log 0 = 0``; the gradient clamps ``alpha`` into ``[eps, 1-eps]``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    n = max(alpha.size, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        a_log = np.where(alpha > 0, alpha * np.log(alpha), 0.0)
        b_log = np.where(alpha < 1, (1 - alpha) * np.log1p(-alpha), 0.0)
    value = -float(np.sum(a_log + b_log)) / n
    a = np.clip(alpha, eps, 1 - eps)
    grad = (np.log1p(-a) - np.log(a)) / n
    return value, grad


def loss_tv(grid: FeatureGrid):
    """Mean squared difference of axis-adjacent node values over all levels and channels."""
    count = 0
    for lvl in range(grid.levels):
        n = grid.resolutions[lvl] + 1
        count += 3 * (n - 1) * n * n * grid.channels
    grads = np.zeros_like(grid.values)
    if count == 0:
        return 0.0, grads
    total = 0.0
    for lvl in range(grid.levels):
        shape = grid.level_values(lvl).shape
        g = grads[grid.offsets[lvl]:grid.offsets[lvl + 1]].reshape(shape)
        total += _kernels.tv_level(grid.level_values(lvl), g, 1.0 / count)
    return total / count, grads


# ---------------------------------------------------------------------------
# Training


@dataclass
class Stage1Config:
    steps: int = 30000
    rays_per_step: int = 4096
    n_candidates: int = 128
    max_samples: int = 64
    lr_start: float = 1e-2
    lr_end: float = 1e-3
    diffuse_warmup_steps: int = 1000
    w_specular: float = 0.0
    w_entropy: float = 0.0
    w_tv: float = 0.0
    levels: int = 16
    base_res: int = 16
    max_res: int = 128
    occupancy_res: int = 128
    occupancy_every: int = 16
    occupancy_decay: float = 0.95
    min_transmittance: float = 1e-4
    log_every: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("w_specular", "w_entropy", "w_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Stage1Result:
    geometry: GeometryField
    appearance: AppearanceField
    occupancy: OccupancyGrid
    history: list = field(default_factory=list)


def init_fields(cfg: Stage1Config, bound: float):
    geo = GeometryField(cfg.levels, cfg.base_res, cfg.max_res, bound, seed=cfg.seed)
    app = AppearanceField(cfg.levels, cfg.base_res, cfg.max_res, bound, seed=cfg.seed)
    return geo, app


def shade_points(app: AppearanceField, pts, dirs, diffuse_only: bool):
    c_d, f_s, acache = app.forward_appearance(pts)
    if diffuse_only:
        return c_d, None, acache, None
    c_s, scache = app.forward_specular(f_s, dirs)
    return c_d + c_s, c_s, acache, scache


def terminate_opaque(samples: RaySampleSet, sigma: np.ndarray, min_transmittance: float):
    """Drop samples whose incoming transmittance is below ``min_transmittance``.

    ``sigma`` is the dense (R, S) density of ``samples``; both are edited in
    place so the truncated ray is rendered and differentiated consistently.
    Returns the boolean selection (over the previous valid points) that survived.
    """
    if min_transmittance <= 0:
        return np.ones(int(samples.mask.sum()), dtype=bool)
    tau = np.cumsum(sigma * samples.delta, axis=1) - sigma * samples.delta
    dead = samples.mask & (tau > -math.log(min_transmittance))
    survivors = ~dead[samples.mask]
    samples.mask &= ~dead
    samples.delta[dead] = 0.0
    sigma[dead] = 0.0
    return survivors


def render_rays(geo, app, occupancy, origins, dirs, bound, background, cfg: Stage1Config,
                rng=None, diffuse_only=False):
    """Forward-only volume render of a ray batch; returns ``(rgb, opacity)``."""
    near, far = ray_box(origins, dirs, bound)
    samples = sample_rays(origins, dirs, near, far, occupancy, cfg.n_candidates, cfg.max_samples, rng)
    rgb = np.tile(background, (len(origins), 1)).astype(np.float64)
    opacity = np.zeros(len(origins))
    if not samples.mask.any():
        return rgb, opacity
    sigma = np.zeros(samples.mask.shape)
    sigma[samples.mask] = geo.density(samples.points)
    terminate_opaque(samples, sigma, cfg.min_transmittance)
    colors = np.zeros(samples.mask.shape + (3,))
    colors[samples.mask] = shade_points(app, samples.points, samples.point_dirs, diffuse_only)[0]
    rgb, _, opacity, _ = composite(sigma, samples.delta, colors, background)
    return rgb, opacity


def render_image(geo, app, occupancy, camera, bound, background, cfg: Stage1Config, chunk=4096,
                 diffuse_only=False):
    o, d = camera.pixel_rays()
    out = np.concatenate([
        render_rays(geo, app, occupancy, o[i:i + chunk], d[i:i + chunk], bound, background, cfg,
                    diffuse_only=diffuse_only)[0]
        for i in range(0, len(o), chunk)])
    return np.clip(out, 0.0, 1.0).reshape(camera.height, camera.width, 3)


def _gather_training_rays(images):
    origins, dirs, colors = [], [], []
    for im in images:
        o, d = im.camera.pixel_rays()
        origins.append(o)
        dirs.append(d)
        colors.append(im.pixels.reshape(-1, 3))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors)


def stage1_step(geo, app, occupancy, origins, dirs, target, bound, background, cfg, rng, step):
    """One forward/backward pass; returns ``(loss terms, gradients)``."""
    near, far = ray_box(origins, dirs, bound)
    samples = sample_rays(origins, dirs, near, far, occupancy, cfg.n_candidates, cfg.max_samples, rng)
    warmup = step < cfg.diffuse_warmup_steps
    terms = {}
    pts = samples.points
    mask = samples.mask
    sigma = np.zeros(mask.shape)
    colors = np.zeros(mask.shape + (3,))
    if len(pts):
        sig, gcache = geo.forward(pts)
        sigma[mask] = sig
        keep = terminate_opaque(samples, sigma, cfg.min_transmittance)
        mask = samples.mask
        pts_alive = pts[keep]
        col, c_s, acache, scache = shade_points(app, pts_alive, samples.point_dirs, warmup)
        colors[mask] = col
    rgb, weights, opacity, rcache = composite(sigma, samples.delta, colors, background)
    terms["render"], g_rgb = loss_render(rgb, target)

    grad_alpha = None
    if cfg.w_entropy > 0 and len(pts):
        ent, g_ent_pts = loss_entropy(rcache["alpha"][mask])
        terms["entropy"] = ent
        grad_alpha = np.zeros(mask.shape)
        grad_alpha[mask] = cfg.w_entropy * g_ent_pts
    g_sigma_dense, g_col_dense = composite_backward(rcache, g_rgb, grad_alpha)

    grads = {}
    if len(pts):
        g_col = g_col_dense[mask]
        g_sigma = np.zeros(len(pts))
        g_sigma[keep] = g_sigma_dense[mask]
        grads = geo.backward(gcache, g_sigma)
        if warmup:
            g_app, _ = app.backward_appearance(acache, g_col, np.zeros_like(g_col))
            grads = merge_grads(grads, g_app)
        else:
            g_cs = g_col
            if cfg.w_specular > 0:
                terms["specular"], g_spec = loss_specular(c_s)
                g_cs = g_cs + cfg.w_specular * g_spec
            g_mlp2, g_fs, _ = app.backward_specular(scache, g_cs)
            g_app, _ = app.backward_appearance(acache, g_col, g_fs)
            grads = merge_grads(grads, g_app, g_mlp2)
    if cfg.w_tv > 0:
        terms["tv"], g_tv = loss_tv(geo.grid)
        grads = merge_grads(grads, {"geo.grid": cfg.w_tv * g_tv})
    terms["psnr"] = -10.0 * math.log10(max(float(np.mean((np.clip(rgb, 0, 1) - target) ** 2)), 1e-10))
    return terms, grads


def train_stage1(dataset, cfg: Stage1Config | None = None, log: Callable | None = None) -> Stage1Result:
    """Fit density and appearance fields to the train split with Adam.

    ``log`` receives one dict of metrics every ``cfg.log_every`` steps.
    """
    cfg = cfg or Stage1Config()
    images = dataset.train
    if not images:
        raise ValueError("dataset has no train images")
    bound = dataset.scene_bound
    background = dataset.background
    rng = np.random.default_rng(cfg.seed)
    geo, app = init_fields(cfg, bound)
    occupancy = OccupancyGrid(cfg.occupancy_res, bound, cfg.occupancy_decay)
    history = []
    if cfg.steps <= 0:
        return Stage1Result(geo, app, occupancy, history)

    origins, dirs, colors = _gather_training_rays(images)
    params = {**geo.parameters(), **app.parameters()}
    opt = Adam(params, cfg.lr_start, betas=(0.9, 0.99), eps=grid_nerf_eps)
    for step in range(cfg.steps):
        if step % cfg.occupancy_every == 0:
            occupancy.update(geo.density, rng)
        idx = rng.integers(0, len(origins), size=cfg.rays_per_step)
        terms, grads = stage1_step(geo, app, occupancy, origins[idx], dirs[idx], colors[idx], bound,
                                   background, cfg, rng, step)
        total = terms["render"] + cfg.w_specular * terms.get("specular", 0.0) \
            + cfg.w_entropy * terms.get("entropy", 0.0) + cfg.w_tv * terms.get("tv", 0.0)
        if not math.isfinite(total):
            raise TrainingDivergedError(f"non-finite stage-1 loss at step {step}: {terms}")
        opt.step(grads, exp_decay(step, cfg.steps, cfg.lr_start, cfg.lr_end))
        record = {"step": step, "loss": total, **terms}
        history.append(record)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(record)
    occupancy.update(geo.density, None)
    return Stage1Result(geo, app, occupancy, history)


def jsonl_logger(stream=sys.stdout, prefix: str = "") -> Callable:
    def _log(record: dict):
        payload = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in record.items()}
        stream.write(prefix + json.dumps(payload) + "\n")
        stream.flush()
    return _log
