"""Software rasterizer with attribute gradients for mesh refinement.

The forward pass writes a single-layer G-buffer (face id, perspective-correct
barycentrics, depth). Shading queries the appearance field at the interpolated
surface point. The backward pass holds coverage and barycentrics fixed and
chains image gradients into the appearance parameters and the vertex offsets.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numba
import numpy as np
from PIL import Image

from .field import AppearanceField, merge_grads, normalize_with_jacobian
from .mesh.core import TriMesh
from .scene import CameraModel

NEAR = 1e-4


class FragmentMismatchError(ValueError):
    """A fragment buffer was used with a mesh it was not rasterized from."""


def _faces_token(mesh: TriMesh) -> tuple:
    return mesh.n_vertices, mesh.n_faces, zlib.crc32(np.ascontiguousarray(mesh.faces).tobytes())


@dataclass(eq=False)
class FragmentBuffer:
    face_id: np.ndarray      # (H, W) int64, -1 where uncovered
    bary: np.ndarray         # (H, W, 3)
    depth: np.ndarray        # (H, W) view depth, inf where uncovered
    position: np.ndarray     # (H, W, 3) interpolated world position
    normal: np.ndarray       # (H, W, 3) interpolated unit vertex normal
    camera: CameraModel
    token: tuple

    @property
    def shape(self):
        return self.face_id.shape

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0

    def check(self, mesh: TriMesh):
        if _faces_token(mesh) != self.token:
            raise FragmentMismatchError("fragment buffer was rasterized from a different mesh")


@numba.njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True)
def _edge_canonical(ia, ib, X, Y, px, py):
    # evaluate with the lower vertex index first so shared edges agree bitwise
    if ia < ib:
        return _edge(X[ia], Y[ia], X[ib], Y[ib], px, py)
    return -_edge(X[ib], Y[ib], X[ia], Y[ia], px, py)


@numba.njit(cache=True)
def _top_left(ia, ib, X, Y):
    dx = X[ib] - X[ia]
    dy = Y[ib] - Y[ia]
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@numba.njit(cache=True)
def _key_less(keys, f, g):
    for k in range(3):
        if keys[f, k] != keys[g, k]:
            return keys[f, k] < keys[g, k]
    return f < g


@numba.njit(cache=True)
def _raster(X, Y, Z, faces, keys, x0, x1, y0, y1, near, face_id, bary, depth):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if Z[i0] <= near or Z[i1] <= near or Z[i2] <= near:
            continue
        area = _edge_canonical(i0, i1, X, Y, X[i2], Y[i2])
        if area == 0.0 or area != area:
            continue
        # orient counter-clockwise in the edge-function sense; remember the permutation
        swap = area < 0.0
        if swap:
            i1, i2 = i2, i1
            area = -area
        xmin = max(x0, int(np.floor(min(X[i0], X[i1], X[i2]) - 0.5)))
        xmax = min(x1 - 1, int(np.ceil(max(X[i0], X[i1], X[i2]) - 0.5)))
        ymin = max(y0, int(np.floor(min(Y[i0], Y[i1], Y[i2]) - 0.5)))
        ymax = min(y1 - 1, int(np.ceil(max(Y[i0], Y[i1], Y[i2]) - 0.5)))
        tl0 = _top_left(i1, i2, X, Y)
        tl1 = _top_left(i2, i0, X, Y)
        tl2 = _top_left(i0, i1, X, Y)
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                w0 = _edge_canonical(i1, i2, X, Y, cx, cy)
                if w0 < 0.0 or (w0 == 0.0 and not tl0):
                    continue
                w1 = _edge_canonical(i2, i0, X, Y, cx, cy)
                if w1 < 0.0 or (w1 == 0.0 and not tl1):
                    continue
                w2 = _edge_canonical(i0, i1, X, Y, cx, cy)
                if w2 < 0.0 or (w2 == 0.0 and not tl2):
                    continue
                q0 = w0 / Z[i0]
                q1 = w1 / Z[i1]
                q2 = w2 / Z[i2]
                s = q0 + q1 + q2
                if s <= 0.0:
                    continue
                z = area / s
                cur = face_id[py, px]
                if cur >= 0 and (z > depth[py, px] or (z == depth[py, px] and not _key_less(keys, f, cur))):
                    continue
                face_id[py, px] = f
                depth[py, px] = z
                b1, b2 = q1 / s, q2 / s
                if swap:
                    b1, b2 = b2, b1
                bary[py, px, 0] = q0 / s
                bary[py, px, 1] = b1
                bary[py, px, 2] = b2


def project_vertices(positions: np.ndarray, camera: CameraModel):
    """Screen coordinates (pixel units, y down) and positive view depth of world points."""
    local = (positions - camera.origin) @ camera.rotation
    z = -local[:, 2]
    safe = np.where(z > 0, z, 1.0)
    X = camera.cx + camera.fx * local[:, 0] / safe
    Y = camera.cy - camera.fy * local[:, 1] / safe
    return np.ascontiguousarray(X), np.ascontiguousarray(Y), np.ascontiguousarray(z)


def rasterize(mesh: TriMesh, camera: CameraModel, resolution=None, tile: int | None = None) -> FragmentBuffer:
    """Nearest-hit G-buffer of ``mesh`` seen from ``camera``.

    ``resolution`` is ``(height, width)``; the camera is rescaled to it when given.
    Triangles with a vertex behind the near plane are dropped. ``tile`` rasterizes
    in square pixel tiles, which yields the same buffer as a single pass.
    """
    if resolution is not None:
        h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
        if (h, w) != (camera.height, camera.width):
            camera = camera.scaled(int(w), int(h))
    H, W = camera.height, camera.width
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    depth = np.full((H, W), np.inf)
    pos = mesh.positions
    if mesh.n_faces:
        X, Y, Z = project_vertices(pos, camera)
        faces = np.ascontiguousarray(mesh.faces)
        keys = np.ascontiguousarray(np.sort(faces, axis=1))
        step = tile or max(H, W)
        for ty in range(0, H, step):
            for tx in range(0, W, step):
                _raster(X, Y, Z, faces, keys, tx, min(tx + step, W), ty, min(ty + step, H), NEAR,
                        face_id, bary, depth)
    covered = face_id >= 0
    position = np.zeros((H, W, 3))
    normal = np.zeros((H, W, 3))
    if covered.any():
        fid = face_id[covered]
        b = bary[covered]
        tri = pos[mesh.faces[fid]]
        position[covered] = np.einsum("nk,nkd->nd", b, tri)
        vn = mesh.vertex_normals()[mesh.faces[fid]]
        n = np.einsum("nk,nkd->nd", b, vn)
        normal[covered] = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return FragmentBuffer(face_id, bary, depth, position, normal, camera, _faces_token(mesh))


def with_positions(frag: FragmentBuffer, mesh: TriMesh) -> FragmentBuffer:
    """Copy of ``frag`` whose positions are re-interpolated from ``mesh`` with coverage and barycentrics fixed.

    This is the function :func:`backward` differentiates.
    """
    frag.check(mesh)
    position = np.zeros_like(frag.position)
    cov = frag.covered
    if cov.any():
        tri = mesh.positions[mesh.faces[frag.face_id[cov]]]
        position[cov] = np.einsum("nk,nkd->nd", frag.bary[cov], tri)
    return FragmentBuffer(frag.face_id, frag.bary, frag.depth, position, frag.normal, frag.camera, frag.token)


def shade(frag: FragmentBuffer, appearance: AppearanceField, diffuse_only: bool = False,
          background=(1.0, 1.0, 1.0), clamp: bool = True, return_cache: bool = False):
    """Neural shading of covered pixels; uncovered pixels get ``background`` exactly."""
    H, W = frag.shape
    img = np.empty((H, W, 3))
    img[:] = np.asarray(background, dtype=np.float64)
    covered = frag.covered
    cache = {"covered": covered, "diffuse_only": diffuse_only}
    if covered.any():
        x = frag.position[covered]
        c_d, f_s, acache = appearance.forward_appearance(x)
        cache["app"] = acache
        color = c_d
        if not diffuse_only:
            d, pullback = normalize_with_jacobian(x - frag.camera.origin)
            c_s, scache = appearance.forward_specular(f_s, d)
            color = c_d + c_s
            cache.update(spec=scache, pullback=pullback, c_s=c_s)
        img[covered] = np.clip(color, 0.0, 1.0) if clamp else color
    return (img, cache) if return_cache else img


def backward(frag: FragmentBuffer, grad_image: np.ndarray, mesh: TriMesh, appearance: AppearanceField,
             diffuse_only: bool = False, cache: dict | None = None):
    """Gradients of a loss given ``dL/dImage`` (unclamped shading) w.r.t. offsets and appearance.

    Coverage and barycentrics are held fixed, so only covered pixels contribute and
    silhouettes receive no gradient. Returns ``(grad_offsets (N, 3), appearance grads dict)``.
    """
    frag.check(mesh)
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != frag.shape + (3,):
        raise ValueError(f"gradient image shape {grad_image.shape} does not match buffer {frag.shape}")
    if cache is None or cache.get("diffuse_only") != diffuse_only:
        _, cache = shade(frag, appearance, diffuse_only, clamp=False, return_cache=True)
    g_off = np.zeros((mesh.n_vertices, 3))
    covered = cache["covered"]
    if not covered.any():
        zeros = {k: np.zeros_like(v) for k, v in appearance.parameters().items()}
        return g_off, zeros
    g_c = grad_image[covered]
    if diffuse_only:
        grads, g_x = appearance.backward_appearance(cache["app"], g_c, np.zeros((len(g_c), 3)), need_x=True)
        grads = merge_grads(grads, {k: np.zeros_like(v) for k, v in appearance.mlp2.parameters("app.mlp2").items()})
    else:
        g_mlp2, g_fs, g_d = appearance.backward_specular(cache["spec"], g_c, need_d=True)
        grads, g_x = appearance.backward_appearance(cache["app"], g_c, g_fs, need_x=True)
        grads = merge_grads(grads, g_mlp2)
        g_x = g_x + cache["pullback"](g_d)
    fid = frag.face_id[covered]
    b = frag.bary[covered]
    corners = mesh.faces[fid]
    for k in range(3):
        contrib = b[:, k:k + 1] * g_x
        for c in range(3):
            g_off[:, c] += np.bincount(corners[:, k], weights=contrib[:, c], minlength=mesh.n_vertices)
    return g_off, grads


def face_id_image(frag: FragmentBuffer) -> np.ndarray:
    """8-bit RGB visualisation of face ids (hashed colours, black where uncovered)."""
    fid = frag.face_id.astype(np.uint64)
    h = (fid * np.uint64(2654435761)) & np.uint64(0xFFFFFF)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(255) for s in (16, 8, 0)], axis=-1).astype(np.uint8)
    rgb[~frag.covered] = 0
    return rgb


def depth_image(frag: FragmentBuffer) -> np.ndarray:
    """8-bit grey depth (near = bright), zero where uncovered."""
    out = np.zeros(frag.shape, dtype=np.uint8)
    cov = frag.covered
    if cov.any():
        d = frag.depth[cov]
        lo, hi = d.min(), d.max()
        scaled = 1.0 - (d - lo) / (hi - lo) if hi > lo else np.ones_like(d)
        out[cov] = np.round(55 + 200 * scaled).astype(np.uint8)
    return out


def save_debug_maps(frag: FragmentBuffer, prefix) -> tuple[str, str]:
    """Write ``<prefix>_faceid.png`` and ``<prefix>_depth.png``; returns both paths."""
    fp, dp = f"{prefix}_faceid.png", f"{prefix}_depth.png"
    Image.fromarray(face_id_image(frag), "RGB").save(fp)
    Image.fromarray(depth_image(frag), "L").save(dp)
    return fp, dp
