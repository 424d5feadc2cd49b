import hashlib
import json

import numpy as np
import pytest

from radmesh.cli import EXIT_INPUT, main
from radmesh.field import load_checkpoint
from radmesh.volrender import Stage1Config, init_fields

TINY = ["scene.n_views=6", "scene.n_test=2", "scene.resolution=24",
        "stage1.steps=150", "stage1.rays_per_step=128", "stage1.n_candidates=32", "stage1.max_samples=32",
        "stage1.levels=4", "stage1.base_res=4", "stage1.max_res=16", "stage1.occupancy_res=8",
        "stage1.occupancy_every=4", "extract.resolution=20",
        "stage2.steps=6", "bake.resolution=64", "eval.n_points=2000"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--out", str(out), "--seed", "3", "--quiet", *TINY]) == 0
    return out


def test_pipeline_writes_all_artifacts(run):
    for rel in ("dataset/transforms_train.json", "dataset/scene.json", "stage1/checkpoint.npz",
                "coarse/mesh.npz", "coarse/mesh.obj", "fine/mesh.npz", "fine/checkpoint.npz", "asset/asset.json",
                "renders/view_000.png", "metrics.json", "metrics.txt"):
        assert (run / rel).is_file(), rel
    for d in ("dataset", "stage1", "coarse", "fine", "asset", "renders"):
        assert (run / d / "config.yaml").is_file()
    report = json.loads((run / "metrics.json").read_text())
    assert {"psnr", "asset", "chamfer"} <= set(report)
    assert "coarse" in report["chamfer"] and "fine" in report["chamfer"]
    assert "squared" in (run / "metrics.txt").read_text()


def test_same_seed_gives_identical_metrics(run, tmp_path):
    assert main(["pipeline", "--out", str(tmp_path), "--seed", "3", "--quiet", *TINY]) == 0
    assert (tmp_path / "metrics.json").read_bytes() == (run / "metrics.json").read_bytes()


def test_rerun_from_echo_reproduces_artifact(run, tmp_path):
    # reuse the dataset, rerun train1 from its echoed config
    echo = run / "stage1" / "config.yaml"
    assert main(["train1", "--config", str(echo), "--out", str(tmp_path), "--data", str(run / "dataset"),
                 "--quiet"]) == 0
    assert _sha(tmp_path / "stage1" / "checkpoint.npz") == _sha(run / "stage1" / "checkpoint.npz")


def test_train1_zero_steps_is_initialisation(run, tmp_path):
    assert main(["train1", "--steps", "0", "--out", str(tmp_path), "--data", str(run / "dataset"), "--seed", "5",
                 "--quiet", *TINY]) == 0
    geo, app, extra = load_checkpoint(tmp_path / "stage1" / "checkpoint.npz")
    cfg = Stage1Config(levels=4, base_res=4, max_res=16, seed=5)
    g0, a0 = init_fields(cfg, extra["scene_bound"])
    for a, b in ((geo, g0), (app, a0)):
        for k, v in a.parameters().items():
            np.testing.assert_array_equal(v, b.parameters()[k])


def test_unknown_key_is_input_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--quiet", "stage1.stpes=3"]) == EXIT_INPUT
    (tmp_path / "c.yaml").write_text("stagee1: {}\n")
    assert main(["synth", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path), "--quiet"]) == EXIT_INPUT


def test_missing_upstream_is_input_error(tmp_path, caplog):
    assert main(["extract", "--out", str(tmp_path)]) == EXIT_INPUT
    assert "missing upstream artifact" in caplog.text
    assert main(["render", "--out", str(tmp_path), "--quiet"]) == EXIT_INPUT


def test_bad_arguments(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_INPUT
    assert main(["bake", "--steps", "3", "--out", str(tmp_path), "--quiet"]) == EXIT_INPUT


def test_thread_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("RADMESH_NUM_THREADS", "zero")
    assert main(["synth", "--out", str(tmp_path), "--quiet"]) == EXIT_INPUT
    monkeypatch.setenv("RADMESH_NUM_THREADS", "1")
    assert main(["synth", "--out", str(tmp_path), "--quiet", "scene.n_views=2", "scene.resolution=8"]) == 0


def test_runtime_failure_exit_code(run, tmp_path):
    # a huge learning rate drives stage 1 to non-finite values
    code = main(["train1", "--out", str(tmp_path), "--data", str(run / "dataset"), "--quiet", *TINY,
                 "stage1.lr_start=1e300", "stage1.lr_end=1e300", "stage1.steps=30"])
    assert code == 2
