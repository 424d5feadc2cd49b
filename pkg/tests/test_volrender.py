import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fdcheck import numeric_grad, probe, worst
from radmesh.field import FeatureGrid
from radmesh.volrender import (OccupancyGrid, Stage1Config, composite, composite_backward, loss_entropy,
                               loss_render, loss_specular, loss_tv, ray_box, render_ray, sample_along_ray,
                               sample_rays, stage1_step, train_stage1)


def test_ray_box():
    near, far = ray_box(np.array([[0.0, 0.0, -3.0]]), np.array([[0.0, 0.0, 1.0]]), 1.0)
    assert near[0] == pytest.approx(2.0) and far[0] == pytest.approx(4.0)
    near, far = ray_box(np.array([[0.0, 5.0, -3.0]]), np.array([[0.0, 0.0, 1.0]]), 1.0)
    assert near[0] > far[0]


def test_deterministic_samples_at_stratum_midpoints():
    t, delta = sample_along_ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), None, 0.0, 1.0, max_samples=4)
    np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(delta, 0.25)


def test_empty_occupancy_yields_no_samples():
    occ = OccupancyGrid.from_mask(np.zeros((4, 4, 4), bool))
    t, delta = sample_along_ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]), occ, 2.0, 4.0, 8)
    assert t.size == 0 and delta.size == 0


def test_max_samples_keeps_first():
    t, _ = sample_along_ray(np.zeros(3), np.array([1.0, 0, 0]), None, 0.0, 1.0, max_samples=3, n_candidates=10)
    np.testing.assert_allclose(t, [0.05, 0.15, 0.25])


def test_near_not_less_than_far_rejected():
    with pytest.raises(ValueError):
        sample_along_ray(np.zeros(3), np.array([1.0, 0, 0]), None, 1.0, 1.0, 4)


@given(st.integers(0, 2**31), st.integers(1, 32), st.integers(1, 40))
def test_samples_sorted_and_inside_interval(seed, n_cand, max_s):
    rng = np.random.default_rng(seed)
    occ = OccupancyGrid.from_mask(rng.random((4, 4, 4)) < 0.5, bound=1.0)
    o = rng.uniform(-3, 3, (5, 3))
    d = rng.normal(size=(5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far = ray_box(o, d, 1.0)
    s = sample_rays(o, d, near, far, occ, n_cand, max_s, rng)
    for i in range(5):
        t, delta = s.ray_samples(i)
        assert len(t) <= max_s
        assert np.all(np.diff(t) > 0)
        if len(t):
            assert near[i] <= t.min() and t.max() <= far[i]
            assert np.all(occ.is_occupied(o[i] + t[:, None] * d[i]))
            np.testing.assert_allclose(delta, (far[i] - near[i]) / n_cand)


def test_render_ray_single_opaque_sample():
    rgb, w, op = render_ray([1e9], [1.0], [[0.2, 0.4, 0.6]])
    np.testing.assert_allclose(rgb, [0.2, 0.4, 0.6])
    assert op == pytest.approx(1.0)


def test_render_ray_empty_is_background():
    rgb, w, op = render_ray([0.0, 0.0], [0.5, 0.5], [[0, 0, 0], [0, 0, 0]], background=(0.1, 0.2, 0.3))
    np.testing.assert_allclose(rgb, [0.1, 0.2, 0.3])
    assert op == 0.0


def test_render_ray_two_samples_closed_form():
    a1 = 1 - math.exp(-0.5)
    a2 = 1 - math.exp(-2.0)
    rgb, w, op = render_ray([0.5, 2.0], [1.0, 1.0], [[1, 0, 0], [0, 1, 0]], background=(0, 0, 1))
    np.testing.assert_allclose(w, [a1, (1 - a1) * a2])
    np.testing.assert_allclose(rgb, [a1, (1 - a1) * a2, (1 - a1) * (1 - a2)])


@given(st.lists(st.floats(0, 50), min_size=1, max_size=12), st.floats(0.001, 1.0))
def test_weights_nonnegative_and_opacity_at_most_one(sigmas, delta):
    n = len(sigmas)
    _, w, op = render_ray(sigmas, [delta] * n, np.full((n, 3), 0.5))
    assert np.all(w >= 0)
    assert op <= 1 + 1e-12
    assert op == pytest.approx(1 - math.exp(-sum(sigmas) * delta), abs=1e-9)


def test_composite_backward_fd(rng):
    R, S = 6, 9
    sigma = rng.uniform(0, 4, (R, S))
    delta = rng.uniform(0.05, 0.3, (R, S))
    delta[:, -2:] = 0.0   # padded slots
    colors = rng.uniform(0, 1, (R, S, 3))
    bg = np.array([0.3, 0.6, 0.9])
    g_out = rng.normal(size=(R, 3))
    g_a = rng.normal(size=(R, S))

    def loss():
        rgb, _, _, c = composite(sigma, delta, colors, bg)
        return float(np.sum(g_out * rgb) + np.sum(g_a * c["alpha"]))

    _, _, _, cache = composite(sigma, delta, colors, bg)
    gs, gc = composite_backward(cache, g_out, g_a)
    res = probe(loss, {"s": sigma, "c": colors}, {"s": gs, "c": gc}, 60, 1e-6, rng)
    assert worst(res) < 1e-5


def test_loss_values():
    v, g = loss_render(np.array([[0.5, 0.5, 0.5]]), np.array([[0.0, 0.5, 1.0]]))
    assert v == pytest.approx(0.5)
    np.testing.assert_allclose(g, [[1.0, 0.0, -1.0]])
    v, _ = loss_specular(np.array([[0.1, 0.2, 0.2], [0.0, 0.0, 0.0]]))
    assert v == pytest.approx(0.09 / 2)


def test_entropy_values():
    assert loss_entropy(np.array([0.5]))[0] == pytest.approx(math.log(2))
    assert loss_entropy(np.array([0.0, 1.0]))[0] == 0.0
    v, g = loss_entropy(np.array([0.5, 0.0]))
    assert v == pytest.approx(math.log(2) / 2)
    assert g[0] == pytest.approx(0.0) and np.isfinite(g).all()


def test_entropy_gradient_fd(rng):
    a = rng.uniform(0.05, 0.95, 30)
    _, g = loss_entropy(a)
    res = probe(lambda: loss_entropy(a)[0], {"a": a}, {"a": g}, 30, 1e-6, rng)
    assert worst(res) < 1e-6


def _tv_oracle(grid):
    total, count = 0.0, 0
    for lvl in range(grid.levels):
        v = grid.level_values(lvl)
        for ax in range(3):
            d = np.diff(v, axis=ax)
            total += float(np.sum(d * d))
            count += d.size
    return total / count


def test_tv_matches_oracle_and_fd(rng):
    grid = FeatureGrid(3, 2, 3, 7, 1.0, seed=0)
    grid.values[:] = rng.normal(size=grid.values.shape)
    v, g = loss_tv(grid)
    assert v == pytest.approx(_tv_oracle(grid), rel=1e-12)
    res = probe(lambda: loss_tv(grid)[0], {"v": grid.values}, {"v": g}, 30, 1e-5, rng)
    assert worst(res) < 1e-6
    grid.values[:] = 1.7
    assert loss_tv(grid)[0] == 0.0


def stage1_total(terms, cfg):
    return terms["render"] + cfg.w_specular * terms.get("specular", 0.0) \
        + cfg.w_entropy * terms.get("entropy", 0.0) + cfg.w_tv * terms.get("tv", 0.0)


@pytest.mark.parametrize("step,weights", [(0, {}), (10, {"w_specular": 0.3, "w_entropy": 0.05, "w_tv": 0.2})])
def test_stage1_step_gradients_fd(small_fields, rng, step, weights):
    geo, app = small_fields
    cfg = Stage1Config(n_candidates=24, max_samples=24, min_transmittance=0.0, diffuse_warmup_steps=5, **weights)
    o = np.tile([0.0, 0.0, -3.0], (16, 1)) + rng.uniform(-0.4, 0.4, (16, 3)) * [1, 1, 0]
    d = np.tile([0.0, 0.0, 1.0], (16, 1)) + rng.uniform(-0.05, 0.05, (16, 3)) * [1, 1, 0]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    target = rng.uniform(0, 1, (16, 3))
    bg = np.ones(3)
    args = (o, d, target, 1.0, bg, cfg, None, step)
    terms, grads = stage1_step(geo, app, None, *args)
    params = {**geo.parameters(), **app.parameters()}

    def loss():
        return stage1_total(stage1_step(geo, app, None, *args)[0], cfg)

    res = probe(loss, params, grads, 100, 1e-5, rng)
    assert worst(res) < 1e-3
    if step < cfg.diffuse_warmup_steps:
        assert not any(k.startswith("app.mlp2") for k in grads)
        w = app.mlp2.weights[0]
        assert numeric_grad(loss, w, 0, 1e-4) == 0.0


def test_zero_steps_returns_initialisation(sphere_dataset):
    ds, _ = sphere_dataset
    res = train_stage1(ds, Stage1Config(steps=0, levels=2, base_res=4, max_res=8, occupancy_res=8, seed=4))
    from radmesh.volrender import init_fields
    geo, app = init_fields(Stage1Config(levels=2, base_res=4, max_res=8, seed=4), ds.scene_bound)
    for a, b in ((geo, res.geometry), (app, res.appearance)):
        for k, v in a.parameters().items():
            np.testing.assert_array_equal(v, b.parameters()[k])
    assert res.history == []


def test_short_training_reduces_loss_and_is_deterministic(sphere_dataset):
    ds, _ = sphere_dataset
    cfg = Stage1Config(steps=60, rays_per_step=128, n_candidates=32, max_samples=32, levels=4, base_res=4,
                       max_res=16, occupancy_res=8, diffuse_warmup_steps=20, seed=1)
    a = train_stage1(ds, cfg)
    b = train_stage1(ds, cfg)
    losses = [h["render"] for h in a.history]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    np.testing.assert_array_equal(a.geometry.grid.values, b.geometry.grid.values)


def test_occupancy_update_marks_dense_cells():
    occ = OccupancyGrid(4, 1.0, decay=0.5)
    occ.update(lambda x: np.where(np.linalg.norm(x, axis=1) < 0.5, 10.0, 0.0))
    assert occ.is_occupied(np.zeros((1, 3)))[0]
    assert not occ.is_occupied(np.array([[0.9, 0.9, 0.9]]))[0]
    occ.update(lambda x: np.zeros(len(x)))
    assert occ.density.max() == pytest.approx(5.0)


def _sequential(sigma, delta, colors, bg):
    out = np.zeros(3)
    trans = 1.0
    for s, d, c in zip(sigma, delta, colors):
        a = 1.0 - np.exp(-s * d)
        out = out + trans * a * np.asarray(c)
        trans = trans * (1.0 - a)
    return out + trans * np.asarray(bg)


def test_worked_examples_sampling_and_compositing():
    t, delta = sample_along_ray(np.zeros(3), np.array([1.0, 0, 0]), None, 0.0, 4.0, max_samples=4)
    np.testing.assert_allclose(t, [0.5, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(delta, 1.0)
    rgb, _, _ = render_ray([math.log(2), 1e9], [1.0, 1.0], [[1, 0, 0], [0, 1, 0]])
    np.testing.assert_allclose(rgb, [0.5, 0.5, 0.0], atol=1e-12)


def test_half_space_containment(rng):
    mask = np.zeros((8, 8, 8), bool)
    mask[4:] = True       # x >= 0
    occ = OccupancyGrid.from_mask(mask, bound=1.0)
    o = rng.uniform(-3, 3, (40, 3))
    d = rng.normal(size=(40, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far = ray_box(o, d, 1.0)
    s = sample_rays(o, d, near, far, occ, 64, 64, rng)
    assert (s.points[:, 0] >= 0).all()


def test_render_ray_matches_sequential_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 65))
        sigma = rng.exponential(3.0, n)
        delta = rng.uniform(0.001, 0.2, n)
        colors = rng.uniform(0, 1, (n, 3))
        bg = rng.uniform(0, 1, 3)
        rgb, w, op = render_ray(sigma, delta, colors, bg)
        np.testing.assert_allclose(rgb, _sequential(sigma, delta, colors, bg), atol=1e-12)
        rgb2, _, _ = render_ray(np.append(sigma, 0.0), np.append(delta, 0.1), np.vstack([colors, [0.3, 0.3, 0.3]]),
                                bg)
        np.testing.assert_allclose(rgb2, rgb, atol=1e-15)


def test_loss_worked_examples():
    assert loss_render(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))[0] == 1.0
    assert loss_render(np.ones((3, 3)), np.ones((3, 3)))[0] == 0.0
    assert loss_specular(np.array([[0.5, 0.5, 0.5]]))[0] == pytest.approx(0.75)
    assert loss_specular(np.zeros((4, 3)))[0] == 0.0
    _, g = loss_entropy(np.array([0.25, 0.75]))
    # descent direction -g moves 0.25 down and 0.75 up
    assert g[0] > 0 and g[1] < 0


def test_render_loss_gradient_fd(rng):
    pred, target = rng.uniform(0, 1, (7, 3)), rng.uniform(0, 1, (7, 3))
    _, g = loss_render(pred, target)
    res = probe(lambda: loss_render(pred, target)[0], {"p": pred}, {"p": g}, 20, 1e-6, rng)
    assert worst(res) < 1e-6


def test_tv_one_dimensional_pair():
    grid = FeatureGrid(1, 1, 1, 1, 1.0)
    v = grid.level_values(0)
    v[:] = 0.0
    v[1] = 1.0    # a step along x between the two node layers
    value, _ = loss_tv(grid)
    # 4 differences of 1 along x, 8 zero differences along y and z
    assert value * 12 == pytest.approx(4.0)


def test_tv_matches_loop_oracle_8cube(rng):
    grid = FeatureGrid(1, 1, 7, 7, 1.0)
    grid.values[:] = rng.normal(size=grid.values.shape)
    v = grid.level_values(0)[..., 0]
    total, n = 0.0, 0
    for i in range(8):
        for j in range(8):
            for k in range(8):
                for di, dj, dk in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
                    if i + di < 8 and j + dj < 8 and k + dk < 8:
                        total += (v[i + di, j + dj, k + dk] - v[i, j, k]) ** 2
                        n += 1
    assert loss_tv(grid)[0] == pytest.approx(total / n, rel=1e-12)


def test_entropy_weight_sharpens(sphere_dataset):
    ds, _ = sphere_dataset
    base = dict(steps=400, rays_per_step=128, n_candidates=32, max_samples=32, levels=4, base_res=4, max_res=16,
                occupancy_res=8, diffuse_warmup_steps=20, seed=1, min_transmittance=0.0)
    fractions = []
    for w in (0.0, 0.05):
        res = train_stage1(ds, Stage1Config(w_entropy=w, **base))
        fr = []
        for view in ds.train:
            o, d = view.camera.pixel_rays()
            near, far = ray_box(o, d, ds.scene_bound)
            s = sample_rays(o, d, near, far, None, 32, 32)
            alpha = 1 - np.exp(-res.geometry.density(s.points) * s.delta[s.mask])
            fr.append(np.mean((alpha > 0.1) & (alpha < 0.9)))
        fractions.append(np.mean(fr))
    assert fractions[1] < fractions[0]
