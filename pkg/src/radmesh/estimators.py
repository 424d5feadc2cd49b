"""scikit-learn style estimators wrapping the pipeline stages.

Hyper-parameters are constructor arguments (``get_params``/``set_params`` work),
``fit`` learns state stored in trailing-underscore attributes and returns
``self``, and ``score`` returns mean PSNR so higher is better::

    field = RadianceFieldRegressor(steps=5000, rays_per_step=256).fit(dataset)
    refiner = SurfaceRefiner(steps=2000).fit(dataset, field.extract_mesh(dataset))
    asset = TextureBaker(resolution=512).fit(refiner.mesh_, refiner.appearance_).export("out/")
"""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bake import bake_region, export_asset
from .extract import ExtractConfig, extract_mesh
from .metrics import psnr
from .raster import rasterize, shade
from .refine import Stage2Config, train_stage2
from .volrender import Stage1Config, render_image, train_stage1


def _config(estimator, cls):
    return cls(**{f.name: getattr(estimator, f.name) for f in fields(cls)})


def _images(data):
    """Accept a Dataset (train split) or a sequence of posed images."""
    images = data.train if hasattr(data, "train") else list(data)
    if not images:
        raise ValueError("no images to fit or score")
    return images


def _mean_psnr(render, images) -> float:
    return float(np.mean([psnr(render(im), im.pixels) for im in images]))


class RadianceFieldRegressor(BaseEstimator):
    """Stage 1: density and decomposed appearance fields fitted by volume rendering."""

    def __init__(self, steps=30000, rays_per_step=4096, n_candidates=128, max_samples=64, lr_start=1e-2,
                 lr_end=1e-3, diffuse_warmup_steps=1000, w_specular=0.0, w_entropy=0.0, w_tv=0.0, levels=16,
                 base_res=16, max_res=128, occupancy_res=128, occupancy_every=16, occupancy_decay=0.95,
                 min_transmittance=1e-4, log_every=500, seed=0):
        self.steps = steps
        self.rays_per_step = rays_per_step
        self.n_candidates = n_candidates
        self.max_samples = max_samples
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.diffuse_warmup_steps = diffuse_warmup_steps
        self.w_specular = w_specular
        self.w_entropy = w_entropy
        self.w_tv = w_tv
        self.levels = levels
        self.base_res = base_res
        self.max_res = max_res
        self.occupancy_res = occupancy_res
        self.occupancy_every = occupancy_every
        self.occupancy_decay = occupancy_decay
        self.min_transmittance = min_transmittance
        self.log_every = log_every
        self.seed = seed

    def get_config(self) -> Stage1Config:
        return _config(self, Stage1Config)

    def fit(self, dataset, log=None):
        cfg = self.get_config()
        res = train_stage1(dataset, cfg, log=log)
        self.geometry_ = res.geometry
        self.appearance_ = res.appearance
        self.occupancy_ = res.occupancy
        self.history_ = res.history
        self.bound_ = float(dataset.scene_bound)
        self.background_ = np.array(dataset.background)
        return self

    def density(self, x) -> np.ndarray:
        check_is_fitted(self, "geometry_")
        return self.geometry_.density(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    def predict(self, cameras) -> list:
        """Volume-rendered images (clamped to [0, 1]) for each camera."""
        check_is_fitted(self, "geometry_")
        cfg = self.get_config()
        return [np.clip(render_image(self.geometry_, self.appearance_, self.occupancy_, cam, self.bound_,
                                     self.background_, cfg), 0.0, 1.0) for cam in cameras]

    def score(self, images) -> float:
        images = _images(images)
        preds = self.predict([im.camera for im in images])
        return float(np.mean([psnr(p, im.pixels) for p, im in zip(preds, images)]))

    def extract_mesh(self, dataset=None, **extract_params):
        """Coarse mesh via marching cubes, culled against ``dataset``'s train cameras when given."""
        check_is_fitted(self, "geometry_")
        cfg = ExtractConfig(**extract_params)
        cams = [im.camera for im in dataset.train] if dataset is not None else None
        mesh, self.extract_report_ = extract_mesh(self.geometry_.density, self.bound_, cams, cfg)
        return mesh


class SurfaceRefiner(BaseEstimator):
    """Stage 2: vertex offsets, appearance and topology refined through rasterisation."""

    def __init__(self, steps=2000, lr_vertex=1e-4, lr_app_start=1e-3, lr_app_end=1e-4, w_smooth=1e-3,
                 w_offset=0.1, refine_fractions=(0.1, 0.2, 0.3, 0.4, 0.5, 0.7), subdivide_percentile=95.0,
                 decimate_percentile=50.0, decimate_fraction=0.1, min_edge_frac=0.01, target_edge_frac=0.02,
                 remesh_iterations=3, log_every=200, seed=0):
        self.steps = steps
        self.lr_vertex = lr_vertex
        self.lr_app_start = lr_app_start
        self.lr_app_end = lr_app_end
        self.w_smooth = w_smooth
        self.w_offset = w_offset
        self.refine_fractions = refine_fractions
        self.subdivide_percentile = subdivide_percentile
        self.decimate_percentile = decimate_percentile
        self.decimate_fraction = decimate_fraction
        self.min_edge_frac = min_edge_frac
        self.target_edge_frac = target_edge_frac
        self.remesh_iterations = remesh_iterations
        self.log_every = log_every
        self.seed = seed

    def get_config(self) -> Stage2Config:
        return _config(self, Stage2Config)

    def fit(self, dataset, mesh, appearance=None, log=None):
        """``appearance`` is an :class:`AppearanceField` or a fitted :class:`RadianceFieldRegressor`."""
        if isinstance(appearance, RadianceFieldRegressor):
            appearance = appearance.appearance_
        if appearance is None:
            raise ValueError("an appearance field (or fitted RadianceFieldRegressor) is required")
        res = train_stage2(dataset, mesh, appearance, self.get_config(), log=log)
        self.mesh_ = res.mesh.baked()
        self.appearance_ = res.appearance
        self.history_ = res.history
        self.rounds_ = res.rounds
        self.background_ = np.array(dataset.background)
        return self

    def predict(self, cameras) -> list:
        check_is_fitted(self, "mesh_")
        return [shade(rasterize(self.mesh_, cam), self.appearance_, background=self.background_) for cam in cameras]

    def score(self, images) -> float:
        images = _images(images)
        return _mean_psnr(lambda im: self.predict([im.camera])[0], images)


class TextureBaker(BaseEstimator):
    """UV-unwraps a mesh and bakes diffuse color and specular features into textures."""

    def __init__(self, resolution=1024, dilate_rounds=1):
        self.resolution = resolution
        self.dilate_rounds = dilate_rounds

    def fit(self, mesh, appearance):
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        self.region_ = bake_region(0, mesh, appearance, self.resolution, self.dilate_rounds)
        self.mlp2_ = appearance.mlp2
        return self

    def export(self, out_dir) -> dict:
        """Write the asset files and return the manifest."""
        check_is_fitted(self, "region_")
        self.manifest_ = export_asset([self.region_], self.mlp2_, out_dir)
        return self.manifest_
