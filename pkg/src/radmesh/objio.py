"""Wavefront OBJ/MTL reading and writing with per-corner texture coordinates."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_obj(path, vertices, faces, corner_uv=None, mtllib: str | None = None, material: str | None = None,
              comments=()):
    """Write an ASCII OBJ; ``corner_uv`` (F, 3, 2) becomes de-duplicated ``vt`` records."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = [f"# {c}" for c in comments]
    if mtllib:
        lines.append(f"mtllib {mtllib}")
    lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in vertices.tolist())
    if corner_uv is not None and len(faces):
        uv = np.asarray(corner_uv, dtype=np.float64).reshape(-1, 2)
        uniq, inv = np.unique(uv, axis=0, return_inverse=True)
        inv = inv.ravel().reshape(-1, 3)
        lines.extend(f"vt {u!r} {v!r}" for u, v in uniq.tolist())
        if material:
            lines.append(f"usemtl {material}")
        for f, t in zip((faces + 1).tolist(), (inv + 1).tolist()):
            lines.append(f"f {f[0]}/{t[0]} {f[1]}/{t[1]} {f[2]}/{t[2]}")
    else:
        if material:
            lines.append(f"usemtl {material}")
        lines.extend(f"f {a} {b} {c}" for a, b, c in (faces + 1).tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Return ``(vertices, faces, corner_uv or None)`` of a triangle OBJ (1-based, ``v/vt`` faces)."""
    verts, uvs, faces, ftex = [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(p) for p in parts[1:3]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}: only triangles are supported")
                idx = [p.split("/") for p in parts[1:]]
                faces.append([int(i[0]) - 1 for i in idx])
                if len(idx[0]) > 1 and idx[0][1]:
                    ftex.append([int(i[1]) - 1 for i in idx])
    V = np.array(verts, dtype=np.float64).reshape(-1, 3)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uv = None
    if ftex:
        if len(ftex) != len(faces):
            raise ValueError(f"{path}: mixed faces with and without texture indices")
        uv = np.array(uvs, dtype=np.float64).reshape(-1, 2)[np.array(ftex)]
    return V, F, uv


def write_mtl(path, material: str, diffuse_map: str | None, comments=()):
    lines = [f"# {c}" for c in comments]
    lines += [f"newmtl {material}", "Ka 1.0 1.0 1.0", "Kd 1.0 1.0 1.0", "Ks 0.0 0.0 0.0", "d 1.0", "illum 1"]
    if diffuse_map:
        lines.append(f"map_Kd {diffuse_map}")
    Path(path).write_text("\n".join(lines) + "\n")
