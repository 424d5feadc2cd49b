"""Mesh cleaning: vertex welding, duplicate/degenerate removal, manifold repair, floaters."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .core import TriMesh


def merge_close_vertices(mesh: TriMesh, eps: float) -> TriMesh:
    """Weld vertices that hash to the same ``eps``-grid cell (first occurrence wins)."""
    if mesh.n_vertices == 0 or eps <= 0:
        return mesh.copy()
    keys = np.round(mesh.vertices / eps).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # number groups in order of first appearance so welding preserves vertex order
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    remap = rank[inverse]
    keep = first[order]
    return TriMesh(mesh.vertices[keep], remap[mesh.faces], mesh.offsets[keep])


def drop_bad_faces(mesh: TriMesh, min_area: float = 0.0) -> TriMesh:
    f = mesh.faces
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[ok]
    if len(f):
        _, first = np.unique(np.sort(f, axis=1), axis=0, return_index=True)
        f = f[np.sort(first)]
    out = TriMesh(mesh.vertices, f, mesh.offsets)
    if len(f):
        out = TriMesh(out.vertices, f[out.face_areas() > min_area], out.offsets)
    return out


def repair_nonmanifold_edges(mesh: TriMesh) -> TriMesh:
    """Delete the smallest-area faces on edges shared by more than two faces."""
    faces = mesh.faces
    alive = np.ones(len(faces), dtype=bool)
    areas = mesh.face_areas()
    while True:
        sub = TriMesh(mesh.vertices, faces[alive], mesh.offsets)
        _, inv = sub.unique_edges()
        if len(inv) == 0:
            break
        counts = np.bincount(inv)
        bad = np.flatnonzero(counts > 2)
        if bad.size == 0:
            break
        alive_idx = np.flatnonzero(alive)
        face_of_he = np.repeat(np.arange(len(alive_idx)), 3)
        for e in bad:
            owners = alive_idx[face_of_he[inv == e]]
            owners = owners[alive[owners]]
            if len(owners) <= 2:
                continue
            ranked = owners[np.lexsort((owners, areas[owners]))]
            alive[ranked[:len(owners) - 2]] = False
    return TriMesh(mesh.vertices, faces[alive], mesh.offsets)


def split_nonmanifold_vertices(mesh: TriMesh) -> TriMesh:
    """Give every separate face fan around a vertex its own copy of that vertex."""
    faces = mesh.faces
    nf = len(faces)
    if nf == 0:
        return mesh.copy()
    he_start = faces.ravel()
    he_end = np.roll(faces, -1, axis=1).ravel()
    corner_start = np.arange(3 * nf)
    corner_end = (corner_start // 3) * 3 + (corner_start % 3 + 1) % 3
    key = np.sort(np.stack([he_start, he_end], axis=1), axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    k = key[order]
    same = np.all(k[1:] == k[:-1], axis=1)
    a, b = order[:-1][same], order[1:][same]
    aligned = he_start[a] == he_start[b]
    rows = np.concatenate([np.where(aligned, corner_start[a], corner_start[a]),
                           np.where(aligned, corner_end[a], corner_end[a])])
    cols = np.concatenate([np.where(aligned, corner_start[b], corner_end[b]),
                           np.where(aligned, corner_end[b], corner_start[b])])
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(3 * nf, 3 * nf))
    _, label = connected_components(graph, directed=False)
    vert_of_corner = faces.ravel()
    pairs = np.stack([vert_of_corner, label], axis=1)
    uniq, first, inverse = np.unique(pairs, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # first fan (lowest corner) of each vertex keeps the original index
    by_corner = np.argsort(first, kind="stable")
    new_index = np.empty(len(uniq), dtype=np.int64)
    seen = np.zeros(mesh.n_vertices, dtype=bool)
    extra = []
    next_id = mesh.n_vertices
    for g in by_corner:
        v = uniq[g, 0]
        if not seen[v]:
            seen[v] = True
            new_index[g] = v
        else:
            new_index[g] = next_id
            extra.append(v)
            next_id += 1
    if not extra:
        return mesh.copy()
    extra = np.array(extra, dtype=np.int64)
    verts = np.concatenate([mesh.vertices, mesh.vertices[extra]])
    offs = np.concatenate([mesh.offsets, mesh.offsets[extra]])
    return TriMesh(verts, new_index[inverse].reshape(-1, 3), offs)


def remove_small_components(mesh: TriMesh, min_faces: int, min_diameter: float) -> TriMesh:
    """Drop connected components with fewer than ``min_faces`` faces *and* a smaller diameter."""
    if mesh.n_faces == 0 or (min_faces <= 0 and min_diameter <= 0):
        return mesh
    n_comp, label = connected_components(mesh.face_adjacency("edge"), directed=False)
    keep = np.ones(mesh.n_faces, dtype=bool)
    sizes = np.bincount(label, minlength=n_comp)
    tri = mesh.triangles()
    for c in range(n_comp):
        members = label == c
        pts = tri[members].reshape(-1, 3)
        diameter = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        if sizes[c] < min_faces and diameter < min_diameter:
            keep[members] = False
    return TriMesh(mesh.vertices, mesh.faces[keep], mesh.offsets)


def clean_mesh(mesh: TriMesh, merge_eps: float | None = None, min_component_faces: int = 0,
               min_component_diameter: float = 0.0, repair: bool = True) -> TriMesh:
    """Weld, de-duplicate, repair and de-float a mesh.

    ``merge_eps`` defaults to ``1e-5`` times the bounding-box diagonal.
    """
    if mesh.n_faces == 0:
        return TriMesh.empty()
    diag = mesh.bbox_diagonal()
    eps = 1e-5 * diag if merge_eps is None else merge_eps
    out = merge_close_vertices(mesh, eps)
    out = drop_bad_faces(out, min_area=1e-14 * diag * diag)
    if repair:
        out = repair_nonmanifold_edges(out)
    out = remove_small_components(out, min_component_faces, min_component_diameter)
    out = out.remove_unreferenced()
    if repair:
        out = split_nonmanifold_vertices(out)
    return out
