"""UV atlas construction, texture baking, quantisation and asset export."""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from .field import SH_DEGREE, SH_DIM, AppearanceField, FieldMLP
from .mesh.core import TriMesh
from .mesh.marching import DensityVolume, marching_cubes
from .mesh.clean import clean_mesh
from .objio import write_mtl, write_obj

ASSET_FORMAT = "radmesh-baked"
ASSET_VERSION = 1
MANIFEST = "asset.json"
CHART_ANGLE_DEG = 60.0
GUTTER_TEXELS = 2


# ---------------------------------------------------------------------------
# UV atlas


@dataclass(eq=False)
class UVAtlas:
    uv: np.ndarray          # (F, 3, 2) per-corner coordinates in [0, 1]
    chart: np.ndarray       # (F,) chart id
    boxes: np.ndarray       # (C, 4) u0, v0, u1, v1 of each placed chart
    resolution: int

    @property
    def n_charts(self) -> int:
        return len(self.boxes)


def _safe_normals(mesh: TriMesh) -> np.ndarray:
    # degenerate faces get +z so they still flatten to a (zero-area) chart
    n = mesh.face_normals()
    bad = ~np.all(np.isfinite(n), axis=1) | (np.linalg.norm(np.nan_to_num(n), axis=1) < 0.5)
    n[bad] = (0.0, 0.0, 1.0)
    return n


def _chart_faces(mesh: TriMesh, angle_deg: float):
    """Greedy region growing: faces join a chart while within ``angle_deg`` of its seed normal."""
    n = _safe_normals(mesh)
    adj = mesh.face_adjacency("edge")
    cos_t = math.cos(math.radians(angle_deg))
    chart = np.full(mesh.n_faces, -1, dtype=np.int64)
    seeds = []
    for seed in range(mesh.n_faces):
        if chart[seed] >= 0:
            continue
        cid = len(seeds)
        seeds.append(seed)
        chart[seed] = cid
        queue = deque([seed])
        while queue:
            f = queue.popleft()
            for g in adj.indices[adj.indptr[f]:adj.indptr[f + 1]]:
                if chart[g] < 0 and float(n[g] @ n[seed]) >= cos_t:
                    chart[g] = cid
                    queue.append(g)
    return chart, np.array(seeds, dtype=np.int64)


def _plane_basis(normal):
    a = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


def _shelf_pack(sizes, scale, gap):
    """Place ``sizes * scale`` boxes on shelves (tallest first); returns offsets or None if overflowing."""
    order = np.lexsort((np.arange(len(sizes)), -sizes[:, 1]))
    pos = np.zeros_like(sizes)
    x, y, shelf_h = gap, gap, 0.0
    for i in order:
        w, h = sizes[i] * scale
        if x + w + gap > 1.0 and x > gap:
            y += shelf_h + gap
            x, shelf_h = gap, 0.0
        if x + w + gap > 1.0 or y + h + gap > 1.0:
            return None
        pos[i] = (x, y)
        x += w + gap
        shelf_h = max(shelf_h, h)
    return pos


def unwrap_uv(mesh: TriMesh, resolution: int = 1024, angle_deg: float = CHART_ANGLE_DEG,
              gutter: int = GUTTER_TEXELS) -> UVAtlas:
    """Normal-clustered planar charts packed into the unit square with ``gutter``-texel spacing."""
    if mesh.n_faces == 0:
        return UVAtlas(np.zeros((0, 3, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, 4)), resolution)
    chart, seeds = _chart_faces(mesh, angle_deg)
    normals = _safe_normals(mesh)
    tri = mesh.triangles()
    flat = np.zeros((mesh.n_faces, 3, 2))
    lo = np.zeros((len(seeds), 2))
    sizes = np.zeros((len(seeds), 2))
    order = np.argsort(chart, kind="stable")
    bounds = np.searchsorted(chart[order], np.arange(len(seeds) + 1))
    for cid, seed in enumerate(seeds):
        faces = order[bounds[cid]:bounds[cid + 1]]
        u, v = _plane_basis(normals[seed])
        pts = tri[faces]
        p2 = np.stack([pts @ u, pts @ v], axis=-1)
        mn = p2.reshape(-1, 2).min(axis=0)
        flat[faces] = p2 - mn
        sizes[cid] = p2.reshape(-1, 2).max(axis=0) - mn
    gap = gutter / resolution
    sizes = np.maximum(sizes, 1e-12)
    # largest uniform texel density whose packing fits
    hi_s = 1.0 / sizes.max()
    lo_s = 0.0
    for _ in range(40):
        mid = 0.5 * (lo_s + hi_s)
        if _shelf_pack(sizes, mid, gap) is None:
            hi_s = mid
        else:
            lo_s = mid
    if lo_s == 0.0 or _shelf_pack(sizes, lo_s, gap) is None:
        raise ValueError(f"cannot pack {len(seeds)} charts at resolution {resolution}; increase it")
    pos = _shelf_pack(sizes, lo_s, gap)
    uv = flat * lo_s + pos[chart][:, None, :]
    uv = np.clip(uv, 0.0, 1.0)
    boxes = np.concatenate([pos, pos + sizes * lo_s], axis=1)
    return UVAtlas(uv, chart, boxes, resolution)


# ---------------------------------------------------------------------------
# UV-space rasterisation and baking


@numba.njit(cache=True)
def _edge_sorted(ax, ay, bx, by, px, py):
    # evaluate from the lexicographically smaller endpoint so shared edges agree bitwise
    if ax < bx or (ax == bx and ay < by):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    return -((ax - bx) * (py - by) - (ay - by) * (px - bx))


@numba.njit(cache=True)
def _top_left(ax, ay, bx, by):
    dy = by - ay
    return dy > 0.0 or (dy == 0.0 and bx - ax < 0.0)


@numba.njit(cache=True)
def _uv_raster(P, R, face_id, bary):
    """``P`` holds texel-space corners (F, 3, 2); first face to cover a texel centre owns it."""
    for f in range(P.shape[0]):
        x0, y0 = P[f, 0, 0], P[f, 0, 1]
        x1, y1 = P[f, 1, 0], P[f, 1, 1]
        x2, y2 = P[f, 2, 0], P[f, 2, 1]
        area = _edge_sorted(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        swap = area < 0.0
        if swap:
            x1, y1, x2, y2 = x2, y2, x1, y1
            area = -area
        xmin = max(0, int(np.floor(min(x0, x1, x2) - 0.5)))
        xmax = min(R - 1, int(np.ceil(max(x0, x1, x2) - 0.5)))
        ymin = max(0, int(np.floor(min(y0, y1, y2) - 0.5)))
        ymax = min(R - 1, int(np.ceil(max(y0, y1, y2) - 0.5)))
        t0 = _top_left(x1, y1, x2, y2)
        t1 = _top_left(x2, y2, x0, y0)
        t2 = _top_left(x0, y0, x1, y1)
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                if face_id[py, px] >= 0:
                    continue
                cx = px + 0.5
                w0 = _edge_sorted(x1, y1, x2, y2, cx, cy)
                if w0 < 0.0 or (w0 == 0.0 and not t0):
                    continue
                w1 = _edge_sorted(x2, y2, x0, y0, cx, cy)
                if w1 < 0.0 or (w1 == 0.0 and not t1):
                    continue
                w2 = _edge_sorted(x0, y0, x1, y1, cx, cy)
                if w2 < 0.0 or (w2 == 0.0 and not t2):
                    continue
                b1, b2 = w1 / area, w2 / area
                if swap:
                    b1, b2 = b2, b1
                face_id[py, px] = f
                bary[py, px, 0] = w0 / area
                bary[py, px, 1] = b1
                bary[py, px, 2] = b2


def uv_to_texel(uv, resolution: int) -> np.ndarray:
    """Texel-space coordinates (x right, y down, texel centres at +0.5) of UVs (v up)."""
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([uv[..., 0] * resolution, (1.0 - uv[..., 1]) * resolution], axis=-1)


def rasterize_uv(atlas: UVAtlas, resolution: int | None = None, faces=None):
    """Texel ownership ``(face_id (R, R), bary (R, R, 3))``; ``faces`` restricts to a subset."""
    R = resolution or atlas.resolution
    face_id = np.full((R, R), -1, dtype=np.int64)
    bary = np.zeros((R, R, 3))
    P = uv_to_texel(atlas.uv, R)
    if faces is not None:
        sub = np.asarray(faces, dtype=np.int64)
        fid = np.full((R, R), -1, dtype=np.int64)
        _uv_raster(np.ascontiguousarray(P[sub]), R, fid, bary)
        face_id[fid >= 0] = sub[fid[fid >= 0]]
        return face_id, bary
    if len(P):
        _uv_raster(np.ascontiguousarray(P), R, face_id, bary)
    return face_id, bary


@dataclass(eq=False)
class BakedTextures:
    diffuse: np.ndarray      # (R, R, 3) float in [0, 1]
    specular: np.ndarray     # (R, R, 3) float in [0, 1]
    mask: np.ndarray         # (R, R) covered texels
    position: np.ndarray     # (R, R, 3) surface point of each covered texel


def bake_textures(mesh: TriMesh, atlas: UVAtlas, appearance: AppearanceField, resolution: int | None = None,
                  chunk: int = 1 << 16) -> BakedTextures:
    """Store ``c_d`` and ``f_s`` of the surface point under every covered texel."""
    R = resolution or atlas.resolution
    face_id, bary = rasterize_uv(atlas, R)
    mask = face_id >= 0
    diffuse = np.zeros((R, R, 3))
    specular = np.zeros((R, R, 3))
    position = np.zeros((R, R, 3))
    if mask.any():
        tri = mesh.positions[mesh.faces[face_id[mask]]]
        x = np.einsum("nk,nkd->nd", bary[mask], tri)
        cd = np.empty((len(x), 3))
        fs = np.empty((len(x), 3))
        for s in range(0, len(x), chunk):
            c, f, _ = appearance.forward_appearance(x[s:s + chunk])
            cd[s:s + chunk], fs[s:s + chunk] = c, f
        diffuse[mask], specular[mask], position[mask] = cd, fs, x
    return BakedTextures(diffuse, specular, mask, position)


def dilate_seams(tex: np.ndarray, mask: np.ndarray, rounds: int = 1):
    """Fill uncovered texels next to coverage with the mean of their covered 8-neighbours."""
    tex = np.array(tex, dtype=np.float64, copy=True)
    mask = np.array(mask, dtype=bool, copy=True)
    H, W = mask.shape
    for _ in range(rounds):
        acc = np.zeros_like(tex)
        cnt = np.zeros((H, W))
        padded_t = np.pad(tex * mask[..., None], ((1, 1), (1, 1), (0, 0)))
        padded_m = np.pad(mask.astype(np.float64), 1)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                acc += padded_t[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
                cnt += padded_m[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
        grow = ~mask & (cnt > 0)
        if not grow.any():
            break
        tex[grow] = acc[grow] / cnt[grow][:, None]
        mask = mask | grow
    return tex, mask


def quantize(tex) -> np.ndarray:
    """8-bit texture ``floor(clamp(v, 0, 1) * 255 + 0.5)`` (round half up, i.e. away from zero)."""
    v = np.clip(np.asarray(tex, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def dequantize(tex8) -> np.ndarray:
    return np.asarray(tex8, dtype=np.float64) / 255.0


def bilinear_sample(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear fetch with clamp-to-edge addressing; ``uv`` (N, 2) with v up."""
    R_h, R_w = tex.shape[:2]
    x = uv[:, 0] * R_w - 0.5
    y = (1.0 - uv[:, 1]) * R_h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, R_w - 1), np.clip(x0 + 1, 0, R_w - 1)
    ya, yb = np.clip(y0, 0, R_h - 1), np.clip(y0 + 1, 0, R_h - 1)
    return ((1 - fx) * (1 - fy) * tex[ya, xa] + fx * (1 - fy) * tex[ya, xb]
            + (1 - fx) * fy * tex[yb, xa] + fx * fy * tex[yb, xb])


# ---------------------------------------------------------------------------
# Cascade regions


def cascade_box(k: int, bound: float = 1.0) -> tuple[float, float]:
    s = bound * 2.0 ** k
    return -s, s


def export_cascade(density_fn, levels: int = 1, resolution: int = 64, threshold: float = 10.0,
                   bound: float = 1.0):
    """Marching-cubes meshes of the nested regions ``[-2^k b, 2^k b]^3``.

    Region ``k`` uses grid resolution ``resolution / 2^k``; for ``k >= 1`` faces whose
    centroid lies inside region ``k - 1`` are dropped. Returns ``[(k, mesh), ...]``.
    """
    out = []
    for k in range(levels):
        lo, hi = cascade_box(k, bound)
        res = max(2, int(resolution // 2 ** k))
        mesh = marching_cubes(DensityVolume.from_function(density_fn, res, lo, hi), threshold)
        if k >= 1 and mesh.n_faces:
            inner = bound * 2.0 ** (k - 1)
            c = mesh.triangles().mean(axis=1)
            inside = np.all(np.abs(c) <= inner, axis=1)
            mesh = mesh.submesh(~inside)
        if mesh.n_faces:
            mesh = clean_mesh(mesh)
        out.append((k, mesh))
    return out


def texture_resolution(k: int, base: int) -> int:
    """Texture size of region ``k``: halved per level, never below a quarter of ``base``."""
    return max(base // 2 ** k, base // 4, 1)


# ---------------------------------------------------------------------------
# Export


@dataclass(eq=False)
class BakedRegion:
    k: int
    mesh: TriMesh
    atlas: UVAtlas
    diffuse: np.ndarray     # float [0, 1] or uint8
    specular: np.ndarray


def bake_region(k: int, mesh: TriMesh, appearance: AppearanceField, resolution: int,
                dilate_rounds: int = 1) -> BakedRegion:
    """Unwrap, bake and out-paint one region mesh (float textures)."""
    atlas = unwrap_uv(mesh, resolution)
    tex = bake_textures(mesh, atlas, appearance, resolution)
    diffuse, _ = dilate_seams(tex.diffuse, tex.mask, dilate_rounds)
    specular, _ = dilate_seams(tex.specular, tex.mask, dilate_rounds)
    return BakedRegion(k, mesh.baked(), atlas, diffuse, specular)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def mlp_spec(mlp: FieldMLP) -> dict:
    return {
        "dims": list(mlp.dims),
        "hidden_activation": "relu",
        "output_activation": "sigmoid",
        "layout": "h = x @ W + b, W stored row-major with shape (in, out)",
        "weights": [w.ravel().tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
    }


def export_asset(regions, mlp2: FieldMLP, out_dir, extra: dict | None = None) -> dict:
    """Write OBJ/MTL/PNG files per region and the JSON manifest (written last); returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST
    if manifest_path.exists():
        manifest_path.unlink()
    entries, files = [], []
    for reg in regions:
        stem = f"region_{reg.k}"
        names = {"obj": f"{stem}.obj", "mtl": f"{stem}.mtl", "diffuse": f"{stem}_diffuse.png",
                 "specular": f"{stem}_specular.png"}
        diffuse = reg.diffuse if reg.diffuse.dtype == np.uint8 else quantize(reg.diffuse)
        specular = reg.specular if reg.specular.dtype == np.uint8 else quantize(reg.specular)
        Image.fromarray(diffuse, "RGB").save(out_dir / names["diffuse"])
        Image.fromarray(specular, "RGB").save(out_dir / names["specular"])
        write_mtl(out_dir / names["mtl"], f"material_{reg.k}", names["diffuse"],
                  comments=[f"specular features: {names['specular']}"])
        write_obj(out_dir / names["obj"], reg.mesh.positions, reg.mesh.faces, reg.atlas.uv,
                  mtllib=names["mtl"], material=f"material_{reg.k}")
        entries.append({"k": reg.k, "files": names, "texture_resolution": int(diffuse.shape[0]),
                        "n_vertices": reg.mesh.n_vertices, "n_faces": reg.mesh.n_faces,
                        "n_charts": reg.atlas.n_charts})
        files += list(names.values())
    manifest = {
        "format": ASSET_FORMAT,
        "version": ASSET_VERSION,
        "mlp2": mlp_spec(mlp2),
        "view_encoding": {"type": "real_spherical_harmonics", "degree": SH_DEGREE, "dims": SH_DIM,
                          "input": "unit direction from camera to surface point"},
        "composition": "clamp(diffuse + sigmoid(mlp2([specular, encode(d)])), 0, 1)",
        "regions": entries,
        "checksums": {name: _sha256(out_dir / name) for name in files},
        **({"extra": extra} if extra else {}),
    }
    tmp = out_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(manifest_path)
    return manifest
