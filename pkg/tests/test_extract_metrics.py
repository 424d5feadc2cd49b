import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from radmesh.extract import ExtractConfig, component_stats, extract_mesh, remove_floaters
from radmesh.mesh.core import TriMesh, audit
from radmesh.mesh.primitives import icosphere
from radmesh.metrics import ChamferError, chamfer, chamfer_points, count_obj, mesh_stats, psnr, surface_points
from radmesh.objio import read_obj, write_mtl, write_obj
from radmesh.scene import CameraModel, SurfaceOracle, SyntheticScene, look_at


def _ball(r=0.5, bumps=()):
    def f(x):
        d = 50.0 * np.maximum(0.0, r - np.linalg.norm(x, axis=1)) / r
        for c, rr in bumps:
            d = d + 50.0 * np.maximum(0.0, rr - np.linalg.norm(x - np.asarray(c), axis=1)) / rr
        return d
    return f


def _cams(n=6, res=32):
    out = []
    for k in range(n):
        a = 2 * math.pi * k / n
        out.append(CameraModel.from_fov(res, res, math.radians(40),
                                        look_at(np.array([3 * math.cos(a), 0.8, 3 * math.sin(a)]))))
    return out


def test_extract_sphere_close_to_analytic():
    cfg = ExtractConfig(resolution=32, threshold=10.0)
    mesh, rep = extract_mesh(_ball(), 1.0, None, cfg)
    assert audit(mesh).ok and rep["faces"] == mesh.n_faces
    # iso-level 10 of 50 (1 - |x|/r) sits at |x| = 0.8 r
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.4, atol=0.01)
    assert rep["cell_size"] == pytest.approx(2.0 / 31)


def test_extract_drops_floater_and_decimates():
    dens = _ball(0.5, bumps=[((0.85, 0.85, 0.85), 0.08)])
    cfg = ExtractConfig(resolution=40, target_faces=800)
    mesh, rep = extract_mesh(dens, 1.0, None, cfg)
    sizes, _ = component_stats(mesh)
    assert len(sizes) == 1 and mesh.n_faces <= 800
    assert rep["cleaned_faces"] < rep["marching_faces"]


def test_extract_visibility_culls_hidden_inner_shell():
    # hollow shell: the inner surface is never seen from outside
    def shell(x):
        r = np.linalg.norm(x, axis=1)
        return np.where((r > 0.3) & (r < 0.6), 50.0, 0.0)
    cfg = ExtractConfig(resolution=32, floater_face_frac=0.0, floater_diameter_frac=0.0)
    no_cull, _ = extract_mesh(shell, 1.0, None, cfg)
    culled, _ = extract_mesh(shell, 1.0, _cams(), cfg)
    assert culled.n_faces < no_cull.n_faces
    assert np.linalg.norm(culled.vertices, axis=1).min() > 0.45


def test_remove_floaters_keeps_large_pieces():
    a, b = icosphere(2), icosphere(2, center=(3.0, 0, 0))
    m = TriMesh.concatenate([a, b])
    assert remove_floaters(m, 0.05, 0.5).n_faces == m.n_faces


def test_psnr_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((2, 2, 3)))


@given(st.floats(1e-4, 1.0))
def test_psnr_monotone_in_error(e):
    a = np.zeros((2, 2, 3))
    assert psnr(a, a + e) >= psnr(a, a + min(1.0, 2 * e)) - 1e-12


def test_chamfer_points_oracle(rng):
    a = rng.normal(size=(50, 3))
    b = rng.normal(size=(40, 3))
    d = np.linalg.norm(a[:, None] - b[None], axis=-1) ** 2
    want = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
    assert chamfer_points(a, b) == pytest.approx(want, rel=1e-12)
    assert chamfer_points(a, a) == 0.0
    assert chamfer_points(a, b) == pytest.approx(chamfer_points(b, a))
    with pytest.raises(ChamferError):
        chamfer_points(a, np.zeros((0, 3)))


def test_chamfer_mesh_vs_oracle_sphere():
    scene = SyntheticScene("sphere", (0.5,))
    oracle = SurfaceOracle(scene)
    cams = _cams()
    fine = icosphere(4, 0.5)
    coarse = icosphere(1, 0.5)
    cf = chamfer(fine, oracle, cams, n_points=5000)
    cc = chamfer(coarse, oracle, cams, n_points=5000)
    assert cf < cc and cf < 1e-5
    # a uniformly scaled sphere is off by the radial gap squared
    big = icosphere(4, 0.55)
    assert chamfer(big, oracle, cams, n_points=5000) == pytest.approx(0.05 ** 2, rel=0.1)
    pts = surface_points(oracle, cams, 1000)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.5, atol=1e-6)
    with pytest.raises(ChamferError):
        chamfer(icosphere(1, 0.5, center=(50, 0, 0)), oracle, cams, n_points=1000)


def test_obj_roundtrip_with_uv(tmp_path, rng):
    m = icosphere(1)
    uv = rng.uniform(0, 1, (m.n_faces, 3, 2))
    write_obj(tmp_path / "a.obj", m.vertices, m.faces, uv, mtllib="a.mtl", material="m", comments=["hello"])
    V, F, UV = read_obj(tmp_path / "a.obj")
    np.testing.assert_array_equal(V, m.vertices)
    np.testing.assert_array_equal(F, m.faces)
    np.testing.assert_array_equal(UV, uv)
    assert count_obj(tmp_path / "a.obj") == (m.n_vertices, m.n_faces)
    write_obj(tmp_path / "b.obj", m.vertices, m.faces)
    assert read_obj(tmp_path / "b.obj")[2] is None
    write_mtl(tmp_path / "a.mtl", "m", "tex.png")
    assert "map_Kd tex.png" in (tmp_path / "a.mtl").read_text()


def test_obj_rejects_quads(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ValueError):
        read_obj(tmp_path / "q.obj")


def test_mesh_stats(tmp_path):
    m = icosphere(1)
    write_obj(tmp_path / "a.obj", m.vertices, m.faces)
    (tmp_path / "t.png").write_bytes(b"x" * 10)
    (tmp_path / "asset.json").write_text("{}")
    (tmp_path / "notes.yaml").write_text("a: 1\n")
    s = mesh_stats(tmp_path)
    assert s["vertices"] == 42 and s["faces"] == 80
    assert s["bytes"]["texture"] == 10 and s["bytes"]["metadata"] == 2 and s["bytes"]["other"] == 5
    assert s["bytes"]["total"] == sum(v for k, v in s["bytes"].items() if k != "total")
    with pytest.raises(FileNotFoundError):
        mesh_stats(tmp_path / "nope")


def test_chamfer_radius_gap_dense():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(20000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # radial counterparts: every nearest neighbour is 0.01 away
    assert chamfer_points(d, 1.01 * d) == pytest.approx(1e-4, rel=0.2)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.1, 10))
def test_chamfer_translation_and_scale(shift, s):
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(60, 3)), rng.normal(size=(50, 3))
    base = chamfer_points(a, b)
    assert abs(chamfer_points(a + shift, b + shift) - base) < 1e-9
    assert chamfer_points(s * a, s * b) == pytest.approx(base * s * s, rel=1e-6)


def test_psnr_matches_double_loop(rng):
    a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    total = 0.0
    for i in range(5):
        for j in range(6):
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / (total / 90)), abs=1e-9)


def test_count_obj_small_cases(tmp_path):
    write_obj(tmp_path / "t.obj", [[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert count_obj(tmp_path / "t.obj") == (3, 1)
    write_obj(tmp_path / "e.obj", np.zeros((0, 3)), np.zeros((0, 3), int))
    assert count_obj(tmp_path / "e.obj") == (0, 0)
