"""Reference renderer for exported assets: rasterise, sample textures, evaluate the small MLP."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .bake import ASSET_FORMAT, MANIFEST, bilinear_sample, dequantize
from .field import SH_DIM, FieldMLP, normalize_with_jacobian, sh_encode, sigmoid
from .mesh.core import TriMesh
from .objio import read_obj
from .raster import rasterize


class AssetError(ValueError):
    """An exported asset is missing, incomplete or inconsistent."""


@dataclass(eq=False)
class BakedAsset:
    mesh: TriMesh                 # all regions concatenated
    corner_uv: np.ndarray         # (F, 3, 2)
    region: np.ndarray            # (F,) index into ``diffuse``/``specular``
    diffuse: list                 # float textures in [0, 1], one per region
    specular: list
    mlp2: FieldMLP
    manifest: dict


def _mlp_from_spec(spec: dict) -> FieldMLP:
    dims = [int(d) for d in spec["dims"]]
    if dims[0] != 3 + SH_DIM or dims[-1] != 3:
        raise AssetError(f"unexpected MLP dims {dims}")
    mlp = FieldMLP(dims)
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.asarray(spec["weights"][i], dtype=np.float64)
        b = np.asarray(spec["biases"][i], dtype=np.float64)
        if w.size != fi * fo or b.size != fo:
            raise AssetError(f"MLP layer {i} has the wrong number of parameters")
        mlp.weights[i] = w.reshape(fi, fo)
        mlp.biases[i] = b
    return mlp


def _read_texture(path: Path, res: int) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"))
    if img.shape != (res, res, 3):
        raise AssetError(f"{path.name}: expected {res}x{res} texture, got {img.shape[1]}x{img.shape[0]}")
    return dequantize(img)


def load_baked(asset_dir, verify: bool = True) -> BakedAsset:
    """Read an exported asset; missing files, bad checksums and shape mismatches raise :class:`AssetError`."""
    asset_dir = Path(asset_dir)
    mpath = asset_dir / MANIFEST
    if not mpath.is_file():
        raise AssetError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != ASSET_FORMAT:
        raise AssetError(f"{mpath} is not a {ASSET_FORMAT} manifest")
    for name, digest in manifest["checksums"].items():
        p = asset_dir / name
        if not p.is_file():
            raise AssetError(f"missing asset file: {name}")
        if verify and hashlib.sha256(p.read_bytes()).hexdigest() != digest:
            raise AssetError(f"checksum mismatch: {name}")
    meshes, uvs, regions, diffuse, specular = [], [], [], [], []
    for i, entry in enumerate(manifest["regions"]):
        files = entry["files"]
        for key in ("obj", "diffuse", "specular"):
            if not (asset_dir / files[key]).is_file():
                raise AssetError(f"missing asset file: {files[key]}")
        V, F, uv = read_obj(asset_dir / files["obj"])
        if len(F) and uv is None:
            raise AssetError(f"{files['obj']} has no texture coordinates")
        if len(V) != entry["n_vertices"] or len(F) != entry["n_faces"]:
            raise AssetError(f"{files['obj']}: counts disagree with the manifest")
        res = int(entry["texture_resolution"])
        diffuse.append(_read_texture(asset_dir / files["diffuse"], res))
        specular.append(_read_texture(asset_dir / files["specular"], res))
        meshes.append(TriMesh(V, F))
        uvs.append(uv if uv is not None else np.zeros((0, 3, 2)))
        regions.append(np.full(len(F), i, dtype=np.int64))
    mesh = TriMesh.concatenate(meshes) if meshes else TriMesh.empty()
    corner_uv = np.concatenate(uvs) if uvs else np.zeros((0, 3, 2))
    region = np.concatenate(regions) if regions else np.zeros(0, dtype=np.int64)
    return BakedAsset(mesh, corner_uv, region, diffuse, specular, _mlp_from_spec(manifest["mlp2"]), manifest)


def shade_baked(asset: BakedAsset, face_id, bary, position, origin):
    """Colors of surface samples: diffuse texture plus sigmoid(MLP(specular texture, SH(d)))."""
    uv = np.einsum("nk,nkd->nd", bary, asset.corner_uv[face_id])
    reg = asset.region[face_id]
    c_d = np.empty((len(face_id), 3))
    f_s = np.empty((len(face_id), 3))
    for r in np.unique(reg):
        m = reg == r
        c_d[m] = bilinear_sample(asset.diffuse[r], uv[m])
        f_s[m] = bilinear_sample(asset.specular[r], uv[m])
    d, _ = normalize_with_jacobian(position - np.asarray(origin))
    raw, _ = asset.mlp2.forward(np.concatenate([f_s, sh_encode(d)], axis=1))
    return np.clip(c_d + sigmoid(raw), 0.0, 1.0)


def render_baked(asset: BakedAsset, camera, background=(1.0, 1.0, 1.0), resolution=None) -> np.ndarray:
    """Render the asset from ``camera``; uncovered pixels get ``background``."""
    frag = rasterize(asset.mesh, camera, resolution)
    H, W = frag.shape
    img = np.empty((H, W, 3))
    img[:] = np.asarray(background, dtype=np.float64)
    cov = frag.covered
    if cov.any():
        img[cov] = shade_baked(asset, frag.face_id[cov], frag.bary[cov], frag.position[cov], frag.camera.origin)
    return img
