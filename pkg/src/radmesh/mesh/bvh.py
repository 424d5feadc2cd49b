"""Bounding-volume hierarchy over triangles with closest-hit ray queries."""
from __future__ import annotations

import numba
import numpy as np

LEAF_SIZE = 4


@numba.njit(cache=True)
def _build(tri_min, tri_max, centroids, leaf_size):
    n = centroids.shape[0]
    order = np.arange(n)
    cap = 2 * n + 1
    node_min = np.empty((cap, 3))
    node_max = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    stack = np.empty((cap, 3), dtype=np.int64)   # node, begin, end
    n_nodes = 1
    sp = 0
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
    sp = 1
    while sp > 0:
        sp -= 1
        node, b, e = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(b, e):
            t = order[i]
            for k in range(3):
                lo[k] = min(lo[k], tri_min[t, k])
                hi[k] = max(hi[k], tri_max[t, k])
                clo[k] = min(clo[k], centroids[t, k])
                chi[k] = max(chi[k], centroids[t, k])
        node_min[node] = lo
        node_max[node] = hi
        if e - b <= leaf_size:
            start[node] = b
            count[node] = e - b
            continue
        axis = 0
        ext = chi - clo
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        keys = centroids[order[b:e], axis]
        perm = np.argsort(keys, kind="mergesort")
        order[b:e] = order[b:e][perm]
        mid = (b + e) // 2
        l_node, r_node = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l_node, r_node
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = r_node, mid, e
        sp += 1
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = l_node, b, mid
        sp += 1
    return node_min[:n_nodes], node_max[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], \
        count[:n_nodes], order


@numba.njit(cache=True)
def _slab(o, inv, lo, hi, t_max):
    t0 = 0.0
    t1 = t_max
    for k in range(3):
        a = (lo[k] - o[k]) * inv[k]
        b = (hi[k] - o[k]) * inv[k]
        if a > b:
            a, b = b, a
        if a != a:   # nan from 0 * inf
            a = -np.inf
        if b != b:
            b = np.inf
        t0 = max(t0, a)
        t1 = min(t1, b)
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _intersect(origins, dirs, v0, e1, e2, node_min, node_max, left, right, start, count, order, t_max):
    n = origins.shape[0]
    t_hit = np.full(n, np.inf)
    face = np.full(n, -1, dtype=np.int64)
    bu = np.zeros(n)
    bv = np.zeros(n)
    stack = np.empty(128, dtype=np.int64)
    for r in range(n):
        o = origins[r]
        d = dirs[r]
        inv = 1.0 / d
        best = t_max
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _slab(o, inv, node_min[node], node_max[node], best):
                continue
            if left[node] < 0:
                for i in range(start[node], start[node] + count[node]):
                    t = order[i]
                    # Moller-Trumbore, two-sided
                    px = d[1] * e2[t, 2] - d[2] * e2[t, 1]
                    py = d[2] * e2[t, 0] - d[0] * e2[t, 2]
                    pz = d[0] * e2[t, 1] - d[1] * e2[t, 0]
                    det = e1[t, 0] * px + e1[t, 1] * py + e1[t, 2] * pz
                    if abs(det) < 1e-18:
                        continue
                    idet = 1.0 / det
                    sx = o[0] - v0[t, 0]
                    sy = o[1] - v0[t, 1]
                    sz = o[2] - v0[t, 2]
                    u = (sx * px + sy * py + sz * pz) * idet
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1[t, 2] - sz * e1[t, 1]
                    qy = sz * e1[t, 0] - sx * e1[t, 2]
                    qz = sx * e1[t, 1] - sy * e1[t, 0]
                    v = (d[0] * qx + d[1] * qy + d[2] * qz) * idet
                    if v < 0.0 or u + v > 1.0:
                        continue
                    tt = (e2[t, 0] * qx + e2[t, 1] * qy + e2[t, 2] * qz) * idet
                    if tt > 1e-9 and (tt < best or (tt == best and t < face[r])):
                        best = tt
                        face[r] = t
                        bu[r] = u
                        bv[r] = v
            else:
                if sp + 2 > stack.shape[0]:
                    grown = np.empty(stack.shape[0] * 2, dtype=np.int64)
                    grown[:sp] = stack[:sp]
                    stack = grown
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        if face[r] >= 0:
            t_hit[r] = best
    return t_hit, face, bu, bv


class BVH:
    """Static BVH over the triangles of a mesh (positions include offsets)."""

    def __init__(self, mesh):
        tri = mesh.triangles()
        self.n_faces = len(tri)
        if self.n_faces == 0:
            return
        self.v0 = np.ascontiguousarray(tri[:, 0])
        self.e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self.e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        (self.node_min, self.node_max, self.left, self.right, self.start, self.count,
         self.order) = _build(tri.min(axis=1), tri.max(axis=1), tri.mean(axis=1), LEAF_SIZE)

    def intersect(self, origins, dirs, t_max=np.inf):
        """Closest hits: ``(t, face, barycentrics (N, 3))`` with ``face = -1`` and ``t = inf`` on miss."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        n = len(origins)
        if self.n_faces == 0 or n == 0:
            return np.full(n, np.inf), np.full(n, -1, dtype=np.int64), np.zeros((n, 3))
        t, face, u, v = _intersect(origins, dirs, self.v0, self.e1, self.e2, self.node_min, self.node_max,
                                   self.left, self.right, self.start, self.count, self.order, float(t_max))
        bary = np.stack([1.0 - u - v, u, v], axis=-1)
        return t, face, bary


def ray_mesh_hits(mesh, origins, dirs):
    """Hit points of rays with a mesh and a boolean hit mask."""
    t, face, _ = BVH(mesh).intersect(origins, dirs)
    hit = face >= 0
    pts = origins[hit] + t[hit, None] * dirs[hit]
    return pts, hit
