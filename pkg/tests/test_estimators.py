import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from radmesh.estimators import RadianceFieldRegressor, SurfaceRefiner, TextureBaker
from radmesh.mesh.primitives import icosphere
from radmesh.refine import Stage2Config
from radmesh.volrender import Stage1Config

SMALL = dict(steps=40, rays_per_step=128, n_candidates=32, max_samples=32, levels=4, base_res=4, max_res=16,
             occupancy_res=8, occupancy_every=4, diffuse_warmup_steps=10, seed=2)


def test_params_mirror_configs():
    assert set(RadianceFieldRegressor().get_params()) == set(Stage1Config().to_dict())
    assert set(SurfaceRefiner().get_params()) == set(Stage2Config().to_dict())
    est = clone(RadianceFieldRegressor(steps=7))
    assert est.get_config().steps == 7


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        RadianceFieldRegressor().density(np.zeros(3))
    with pytest.raises(NotFittedError):
        TextureBaker().export("x")


def test_fit_predict_score_chain(sphere_dataset, tmp_path):
    ds, _ = sphere_dataset
    field = RadianceFieldRegressor(**SMALL).fit(ds)
    assert len(field.history_) == 40
    imgs = field.predict([ds.train[0].camera])
    assert imgs[0].shape == ds.train[0].pixels.shape and imgs[0].min() >= 0 and imgs[0].max() <= 1
    assert np.isfinite(field.score(ds))
    assert field.density(np.zeros((2, 3))).shape == (2,)
    mesh = icosphere(2, 0.5)
    ref = SurfaceRefiner(steps=4, seed=1).fit(ds, mesh, field)
    assert ref.mesh_.n_faces > 0 and not ref.mesh_.offsets.any()
    assert np.isfinite(ref.score(ds.train[:2]))
    with pytest.raises(ValueError):
        SurfaceRefiner(steps=1).fit(ds, mesh)
    baker = TextureBaker(resolution=64).fit(ref.mesh_, ref.appearance_)
    manifest = baker.export(tmp_path)
    assert manifest["regions"][0]["n_faces"] == ref.mesh_.n_faces
    with pytest.raises(ValueError):
        TextureBaker(resolution=4).fit(ref.mesh_, ref.appearance_)
