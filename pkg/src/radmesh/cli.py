"""Command-line front end.

Every command reads one YAML config (``--config``, optional ``--preset``, dotted
overrides such as ``stage1.steps=100``), logs the resolved config and seed, and
writes a ``config.yaml`` echo next to the artifacts it produces. Rerunning a
command with that echo as ``--config`` reproduces the artifact exactly.

Artifacts under ``--out``::

    dataset/        synth       transforms_*.json, PNGs, scene.json
    stage1/         train1      checkpoint.npz, report.json
    coarse/         extract     mesh.npz, mesh.obj, report.json
    fine/           train2      mesh.npz, checkpoint.npz, report.json
    asset/          bake        region_*.obj/.mtl/.png, asset.json
    renders/        render      view_*.png
    metrics.json    eval        machine-readable report (metrics.txt: table)

Exit status: 0 success, 1 input error (bad config, missing artifact), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import bake as bake_mod
from .config import PRESETS, ConfigError, PipelineConfig, load_config
from .extract import extract_mesh
from .field import load_checkpoint, save_checkpoint
from .mesh.core import MeshAuditError, load_mesh, save_mesh
from .metrics import CHAMFER_CONVENTION, ChamferError, chamfer, mesh_stats, psnr
from .objio import write_obj
from .refine import train_stage2
from .refrender import AssetError, load_baked, render_baked
from .scene import DatasetError, SyntheticScene, generate_synthetic_dataset, load_dataset, save_dataset
from .volrender import TrainingDivergedError, train_stage1

log = logging.getLogger("radmesh")

COMMANDS = ("synth", "train1", "extract", "train2", "bake", "render", "eval", "pipeline")
THREADS_ENV = "RADMESH_NUM_THREADS"
EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class DependencyError(FileNotFoundError):
    """An upstream artifact required by the command does not exist."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radmesh", description="Posed images to a textured mesh asset.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("overrides", nargs="*", metavar="section.key=value", help="dotted config overrides")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", default="default", choices=sorted(PRESETS), help="base settings before --config")
    p.add_argument("--seed", type=int, help="seed for every stage (overrides the config)")
    p.add_argument("--out", default="run", help="artifact directory (default: ./run)")
    p.add_argument("--data", help="dataset directory (default: <out>/dataset)")
    p.add_argument("--steps", type=int, help="shorthand for stage1.steps (train1) or stage2.steps (train2)")
    p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    return p


# ---------------------------------------------------------------------------
# Helpers


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing upstream artifact {path} (run `radmesh {producer}` first)")
    return path


def _echo(cfg: PipelineConfig, directory: Path, command: str):
    directory.mkdir(parents=True, exist_ok=True)
    text = cfg.to_yaml()
    (directory / "config.yaml").write_text(f"# radmesh {command}, seed {cfg.seed}\n{text}")
    log.info("command %s, seed %d, config:\n%s", command, cfg.seed, text.rstrip())


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _jsonl(prefix: str):
    def emit(record: dict):
        payload = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in record.items()}
        log.info("%s %s", prefix, json.dumps(payload))
    return emit


def _scene(cfg: PipelineConfig) -> SyntheticScene:
    return SyntheticScene(shape=cfg.scene.shape, size=cfg.scene.size, gloss=cfg.scene.gloss)


class Context:
    """Paths of one run plus lazily loaded upstream artifacts."""

    def __init__(self, cfg: PipelineConfig, out, data=None):
        self.cfg = cfg
        self.out = Path(out)
        self.data = Path(data) if data else self.out / "dataset"
        self._dataset = None

    def dir(self, name: str) -> Path:
        return self.out / name

    @property
    def dataset(self):
        if self._dataset is None:
            _require(self.data, "synth")
            self._dataset = load_dataset(self.data)
        return self._dataset

    def oracle(self):
        """Analytic surface when the dataset was synthesised, else None."""
        meta = self.data / "scene.json"
        if not meta.is_file():
            return None
        return SyntheticScene(**{k: (tuple(v) if isinstance(v, list) else v)
                                 for k, v in json.loads(meta.read_text()).items()})


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(ctx: Context):
    cfg = ctx.cfg
    sc = cfg.scene
    ds, _ = generate_synthetic_dataset(_scene(cfg), sc.n_views, sc.resolution, seed=sc.seed, n_test=sc.n_test,
                                       radius=sc.radius, fov_x=sc.fov_x)
    save_dataset(ds, ctx.data)
    scene = _scene(cfg)
    _write_json(ctx.data / "scene.json", {"shape": scene.shape, "size": list(scene.size), "gloss": scene.gloss})
    _echo(cfg, ctx.data, "synth")
    ctx._dataset = None
    log.info("wrote %d train / %d test views to %s", len(ds.train), len(ds.test), ctx.data)


def cmd_train1(ctx: Context):
    cfg = ctx.cfg
    out = ctx.dir("stage1")
    _echo(cfg, out, "train1")
    ds = ctx.dataset
    res = train_stage1(ds, cfg.stage1, log=_jsonl("stage1"))
    last = res.history[-1] if res.history else {}
    save_checkpoint(out / "checkpoint.npz", res.geometry, res.appearance,
                    extra={"scene_bound": ds.scene_bound, "steps": cfg.stage1.steps})
    _write_json(out / "report.json", {"steps": cfg.stage1.steps,
                                      "final": {k: v for k, v in last.items() if k != "step"}})


def _load_stage1(ctx: Context):
    geo, app, extra = load_checkpoint(_require(ctx.dir("stage1") / "checkpoint.npz", "train1"))
    return geo, app, extra


def cmd_extract(ctx: Context):
    cfg = ctx.cfg
    out = ctx.dir("coarse")
    _echo(cfg, out, "extract")
    geo, _, extra = _load_stage1(ctx)
    cams = [im.camera for im in ctx.dataset.train]
    mesh, report = extract_mesh(geo.density, float(extra.get("scene_bound", 1.0)), cams, cfg.extract)
    save_mesh(out / "mesh.npz", mesh)
    write_obj(out / "mesh.obj", mesh.positions, mesh.faces)
    _write_json(out / "report.json", report)
    log.info("coarse mesh: %d vertices, %d faces", mesh.n_vertices, mesh.n_faces)


def cmd_train2(ctx: Context):
    cfg = ctx.cfg
    out = ctx.dir("fine")
    _echo(cfg, out, "train2")
    geo, app, extra = _load_stage1(ctx)
    mesh = load_mesh(_require(ctx.dir("coarse") / "mesh.npz", "extract"))
    res = train_stage2(ctx.dataset, mesh, app, cfg.stage2, log=_jsonl("stage2"))
    fine = res.mesh.baked()
    save_mesh(out / "mesh.npz", fine)
    write_obj(out / "mesh.obj", fine.positions, fine.faces)
    save_checkpoint(out / "checkpoint.npz", geo, res.appearance, extra=extra)
    last = res.history[-1] if res.history else {}
    _write_json(out / "report.json", {"rounds": res.rounds, "faces": fine.n_faces, "vertices": fine.n_vertices,
                                      "final": {k: v for k, v in last.items() if k != "step"}})


def cmd_bake(ctx: Context):
    cfg = ctx.cfg
    out = ctx.dir("asset")
    geo, app, extra = load_checkpoint(_require(ctx.dir("fine") / "checkpoint.npz", "train2"))
    mesh = load_mesh(_require(ctx.dir("fine") / "mesh.npz", "train2"))
    bound = float(extra.get("scene_bound", 1.0))
    regions = [bake_mod.bake_region(0, mesh, app, cfg.bake.resolution, cfg.bake.dilate_rounds)]
    if cfg.bake.cascade_levels > 1:
        # outer regions come straight from the density field; only the centre is refined
        for k, m in bake_mod.export_cascade(geo.density, cfg.bake.cascade_levels, cfg.extract.resolution,
                                            cfg.extract.threshold, bound)[1:]:
            if m.n_faces:
                res = bake_mod.texture_resolution(k, cfg.bake.resolution)
                regions.append(bake_mod.bake_region(k, m, app, res, cfg.bake.dilate_rounds))
    if not cfg.bake.quantize:
        log.warning("bake.quantize=false: PNG export always stores 8-bit textures")
    bake_mod.export_asset(regions, app.mlp2, out)
    _echo(cfg, out, "bake")


def _views(ctx: Context):
    ds = ctx.dataset
    return (ds.test or ds.train), ds.background


def cmd_render(ctx: Context):
    out = ctx.dir("renders")
    _echo(ctx.cfg, out, "render")
    asset = load_baked(_require(ctx.dir("asset"), "bake"))
    views, bg = _views(ctx)
    for i, im in enumerate(views):
        img = render_baked(asset, im.camera, bg)
        q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(q, "RGB").save(out / f"view_{i:03d}.png")
    log.info("rendered %d views to %s", len(views), out)


def evaluate(ctx: Context) -> dict:
    cfg = ctx.cfg
    asset = load_baked(_require(ctx.dir("asset"), "bake"))
    views, bg = _views(ctx)
    per_view = [psnr(render_baked(asset, im.camera, bg), im.pixels) for im in views]
    report = {
        "psnr": {"views": "test" if ctx.dataset.test else "train", "mean": float(np.mean(per_view)),
                 "per_view": per_view},
        "asset": mesh_stats(ctx.dir("asset")),
    }
    scene = ctx.oracle()
    if scene is not None:
        from .scene import SurfaceOracle
        oracle = SurfaceOracle(scene)
        cams = [im.camera for im in views]
        cd = {"convention": CHAMFER_CONVENTION, "n_points": cfg.eval.n_points}
        for name in ("coarse", "fine"):
            path = ctx.dir(name) / "mesh.npz"
            if path.is_file():
                try:
                    cd[name] = chamfer(load_mesh(path), oracle, cams, cfg.eval.n_points, cfg.eval.seed)
                except ChamferError as exc:
                    log.warning("Chamfer %s: %s", name, exc)
                    cd[name] = None
                    cd[f"{name}_error"] = str(exc)
        report["chamfer"] = cd
    return report


def _table(report: dict) -> str:
    rows = [("PSNR (dB, %s views)" % report["psnr"]["views"], f"{report['psnr']['mean']:.3f}")]
    for name in ("coarse", "fine"):
        value = report.get("chamfer", {}).get(name, "absent")
        if value != "absent":
            rows.append((f"Chamfer {name}", "n/a" if value is None else f"{value:.4e}"))
    st = report["asset"]
    rows += [("vertices", str(st["vertices"])), ("faces", str(st["faces"]))]
    rows += [(f"bytes {k}", str(v)) for k, v in st["bytes"].items()]
    width = max(len(r[0]) for r in rows)
    lines = ["# Chamfer: " + CHAMFER_CONVENTION] if "chamfer" in report else []
    lines += [f"{a.ljust(width)}  {b}" for a, b in rows]
    return "\n".join(lines) + "\n"


def cmd_eval(ctx: Context):
    report = evaluate(ctx)
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write_json(ctx.out / "metrics.json", report)
    (ctx.out / "metrics.txt").write_text(_table(report))
    _echo(ctx.cfg, ctx.out, "eval")
    sys.stdout.write(_table(report))


def cmd_pipeline(ctx: Context):
    if not (ctx.data / "transforms_train.json").is_file():
        cmd_synth(ctx)
    for fn in (cmd_train1, cmd_extract, cmd_train2, cmd_bake, cmd_render, cmd_eval):
        fn(ctx)


_HANDLERS = {"synth": cmd_synth, "train1": cmd_train1, "extract": cmd_extract, "train2": cmd_train2,
             "bake": cmd_bake, "render": cmd_render, "eval": cmd_eval, "pipeline": cmd_pipeline}


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    import numba
    from threadpoolctl import threadpool_limits
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(n)


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        _limit_threads()
        overrides = list(args.overrides)
        if args.steps is not None:
            section = {"train1": "stage1", "train2": "stage2"}.get(args.command)
            if section is None:
                raise ConfigError("--steps applies to train1 and train2 only")
            overrides.append(f"{section}.steps={args.steps}")
        cfg = load_config(args.config, overrides, seed=args.seed, preset=args.preset)
        _HANDLERS[args.command](Context(cfg, args.out, args.data))
    except (ConfigError, DependencyError, DatasetError, AssetError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (TrainingDivergedError, MeshAuditError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report any other failure as a runtime error
        log.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
