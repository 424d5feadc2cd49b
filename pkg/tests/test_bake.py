import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from radmesh.bake import (MANIFEST, bake_region, bake_textures, bilinear_sample, cascade_box, dequantize,
                          dilate_seams, export_asset, export_cascade, quantize, rasterize_uv, texture_resolution,
                          unwrap_uv)
from radmesh.field import eval_appearance
from radmesh.mesh.primitives import box, icosphere
from radmesh.objio import read_obj


@pytest.fixture(scope="module")
def sphere():
    return icosphere(3, 0.5)


def test_cube_has_at_most_six_charts():
    atlas = unwrap_uv(box(), 64)
    assert atlas.n_charts <= 6


@pytest.mark.parametrize("res", [64, 256])
def test_uvs_in_unit_square_and_charts_disjoint(sphere, res):
    atlas = unwrap_uv(sphere, res)
    assert atlas.uv.min() >= 0 and atlas.uv.max() <= 1
    # every chart rasterized alone; no texel is claimed by two charts
    owner = np.full((res, res), -1)
    for c in range(atlas.n_charts):
        fid, _ = rasterize_uv(atlas, res, faces=np.flatnonzero(atlas.chart == c))
        claimed = fid >= 0
        assert not (claimed & (owner >= 0)).any()
        owner[claimed] = c
    # boxes do not overlap either
    b = atlas.boxes
    for i in range(len(b)):
        for j in range(i + 1, len(b)):
            assert (b[i, 2] <= b[j, 0] or b[j, 2] <= b[i, 0] or b[i, 3] <= b[j, 1] or b[j, 3] <= b[i, 1])


def test_charts_respect_angle_threshold(sphere):
    atlas = unwrap_uv(sphere, 256)
    n = sphere.face_normals()
    for c in range(atlas.n_charts):
        members = n[atlas.chart == c]
        # all members within 60 degrees of some member (the seed)
        cos = members @ members.T
        assert (cos.min(axis=1) >= math.cos(math.radians(120)) - 1e-9).all()


def test_packing_overflow_raises():
    with pytest.raises(ValueError):
        unwrap_uv(icosphere(4), 8)


def test_baked_texels_match_point_queries(sphere, small_fields, rng):
    _, app = small_fields
    atlas = unwrap_uv(sphere, 256)
    tex = bake_textures(sphere, atlas, app)
    ys, xs = np.nonzero(tex.mask)
    pick = rng.choice(len(ys), 1000, replace=False)
    x = tex.position[ys[pick], xs[pick]]
    c_d, f_s = eval_appearance(app, x)
    np.testing.assert_allclose(tex.diffuse[ys[pick], xs[pick]], c_d, atol=1e-6)
    np.testing.assert_allclose(tex.specular[ys[pick], xs[pick]], f_s, atol=1e-6)
    # surface points lie on their faces
    fid, bary = rasterize_uv(atlas)
    assert np.array_equal(fid >= 0, tex.mask)
    assert not tex.diffuse[~tex.mask].any()


def test_constant_field_bakes_constant(sphere, small_fields):
    app = copy.deepcopy(small_fields[1])
    app.mlp1.weights[-1][:] = 0.0
    app.mlp1.biases[-1][:] = 0.0
    tex = bake_textures(sphere, unwrap_uv(sphere, 64), app)
    np.testing.assert_allclose(tex.diffuse[tex.mask], 0.5)


def test_dilate_examples():
    tex = np.zeros((5, 5, 3))
    mask = np.zeros((5, 5), bool)
    tex[2, 2] = [0.2, 0.4, 0.6]
    mask[2, 2] = True
    out, m2 = dilate_seams(tex, mask)
    assert m2[1:4, 1:4].all() and m2.sum() == 9
    np.testing.assert_allclose(out[1:4, 1:4], np.broadcast_to([0.2, 0.4, 0.6], (3, 3, 3)))
    full = np.random.default_rng(0).random((4, 4, 3))
    out, _ = dilate_seams(full, np.ones((4, 4), bool))
    np.testing.assert_array_equal(out, full)


def test_dilate_removes_border_bleed(sphere, small_fields):
    _, app = small_fields
    region = bake_region(0, sphere, app, 128, dilate_rounds=0)
    tex = bake_textures(sphere, region.atlas, app)
    dilated, _ = dilate_seams(tex.diffuse, tex.mask, 1)
    # sample at corner UVs: the bilinear footprint straddles chart borders
    uv = region.atlas.uv.reshape(-1, 2)
    truth = np.repeat(eval_appearance(app, sphere.positions[sphere.faces.ravel()])[0], 1, axis=0)
    err_raw = np.abs(bilinear_sample(tex.diffuse, uv) - truth).max()
    err_dil = np.abs(bilinear_sample(dilated, uv) - truth).max()
    assert err_dil < err_raw


def test_quantize_examples_and_bound():
    assert quantize(0.0) == 0 and quantize(1.0) == 255 and quantize(0.5) == 128
    assert quantize(-1.0) == 0 and quantize(2.0) == 255
    v = np.linspace(0, 1, 256 * 40 + 1)
    assert np.abs(dequantize(quantize(v)) - v).max() <= 1 / 510 + 1e-12
    levels = np.arange(256) / 255
    np.testing.assert_array_equal(quantize(levels), np.arange(256))


@given(st.floats(0, 1))
def test_quantize_rounds_half_up(v):
    q = int(quantize(v))
    assert abs(q / 255 - v) <= 1 / 510 + 1e-12


def test_bilinear_sample_texel_centres_and_clamp():
    tex = np.random.default_rng(1).random((4, 4, 3))
    # texel (row 1, col 2) centre: u = 2.5/4, v = 1 - 1.5/4
    np.testing.assert_allclose(bilinear_sample(tex, np.array([[2.5 / 4, 1 - 1.5 / 4]]))[0], tex[1, 2])
    np.testing.assert_allclose(bilinear_sample(tex, np.array([[0.0, 1.0]]))[0], tex[0, 0])
    mid = bilinear_sample(tex, np.array([[2.0 / 4, 1 - 1.5 / 4]]))[0]
    np.testing.assert_allclose(mid, 0.5 * (tex[1, 1] + tex[1, 2]))


def _ball(x):
    return 50.0 * np.maximum(0.0, 0.6 - np.linalg.norm(x - [1.2, 0, 0], axis=1)) + \
        50.0 * np.maximum(0.0, 0.5 - np.linalg.norm(x, axis=1))


def test_cascade_regions_exclude_inner_box():
    regions = export_cascade(_ball, levels=2, resolution=32, threshold=10.0, bound=1.0)
    assert [k for k, _ in regions] == [0, 1]
    assert cascade_box(1) == (-2.0, 2.0)
    lo, hi = cascade_box(0)
    c0 = regions[0][1].triangles().mean(axis=1)
    assert np.all((c0 >= lo) & (c0 <= hi))
    c1 = regions[1][1].triangles().mean(axis=1)
    assert regions[1][1].n_faces > 0
    assert not np.all(np.abs(c1) <= 1.0, axis=1).any()
    assert texture_resolution(0, 1024) == 1024 and texture_resolution(1, 1024) == 512
    assert texture_resolution(5, 1024) == 256


def test_export_roundtrip(tmp_path, sphere, small_fields):
    _, app = small_fields
    reg = bake_region(0, sphere, app, 64)
    man = export_asset([reg], app.mlp2, tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == sorted([MANIFEST, "region_0.obj", "region_0.mtl", "region_0_diffuse.png",
                            "region_0_specular.png"])
    V, F, uv = read_obj(tmp_path / "region_0.obj")
    assert len(V) == sphere.n_vertices and len(F) == sphere.n_faces
    np.testing.assert_allclose(uv, reg.atlas.uv, atol=1e-6)
    on_disk = json.loads((tmp_path / MANIFEST).read_text())
    assert on_disk == json.loads(json.dumps(man))
    assert on_disk["mlp2"]["dims"][0] == 19 and on_disk["regions"][0]["texture_resolution"] == 64
    assert not list(tmp_path.glob("*.tmp"))


def test_export_is_byte_deterministic(tmp_path, sphere, small_fields):
    _, app = small_fields
    reg = bake_region(0, sphere, app, 64)
    export_asset([reg], app.mlp2, tmp_path / "a")
    export_asset([reg], app.mlp2, tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
