"""Numba kernels for the hot loops of grid encoding and optimizer updates."""
from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True)
def _cell(xk, bound, res):
    u = (xk + bound) / (2.0 * bound)
    inside = 0.0 <= u <= 1.0
    if u < 0.0:
        u = 0.0
    elif u > 1.0:
        u = 1.0
    u *= res
    b = math.floor(u)
    if b > res - 1:
        b = res - 1
    return int(b), u - b, inside


@numba.njit(cache=True)
def grid_encode_fwd(x, bound, res, offsets, values):
    n = x.shape[0]
    levels = res.shape[0]
    ch = values.shape[1]
    out = np.zeros((n, levels * ch))
    for p in range(n):
        for lvl in range(levels):
            r = res[lvl]
            nn = r + 1
            i0, fx, _ = _cell(x[p, 0], bound, r)
            j0, fy, _ = _cell(x[p, 1], bound, r)
            k0, fz, _ = _cell(x[p, 2], bound, r)
            base = offsets[lvl]
            for c in range(8):
                ci = (c >> 2) & 1
                cj = (c >> 1) & 1
                ck = c & 1
                w = (fx if ci else 1.0 - fx) * (fy if cj else 1.0 - fy) * (fz if ck else 1.0 - fz)
                idx = base + ((i0 + ci) * nn + (j0 + cj)) * nn + (k0 + ck)
                for q in range(ch):
                    out[p, lvl * ch + q] += w * values[idx, q]
    return out


@numba.njit(cache=True)
def grid_encode_bwd(x, bound, res, offsets, values, grad_feat, grad_values, need_x):
    """Scatter-add into ``grad_values``; returns the gradient w.r.t. ``x``."""
    n = x.shape[0]
    levels = res.shape[0]
    ch = values.shape[1]
    grad_x = np.zeros((n, 3))
    for p in range(n):
        for lvl in range(levels):
            r = res[lvl]
            nn = r + 1
            i0, fx, inx = _cell(x[p, 0], bound, r)
            j0, fy, iny = _cell(x[p, 1], bound, r)
            k0, fz, inz = _cell(x[p, 2], bound, r)
            base = offsets[lvl]
            scale = r / (2.0 * bound)
            for c in range(8):
                ci = (c >> 2) & 1
                cj = (c >> 1) & 1
                ck = c & 1
                ax = fx if ci else 1.0 - fx
                ay = fy if cj else 1.0 - fy
                az = fz if ck else 1.0 - fz
                w = ax * ay * az
                idx = base + ((i0 + ci) * nn + (j0 + cj)) * nn + (k0 + ck)
                dot = 0.0
                for q in range(ch):
                    g = grad_feat[p, lvl * ch + q]
                    grad_values[idx, q] += w * g
                    dot += g * values[idx, q]
                if need_x and inx and iny and inz:
                    sx = 1.0 if ci else -1.0
                    sy = 1.0 if cj else -1.0
                    sz = 1.0 if ck else -1.0
                    grad_x[p, 0] += dot * sx * ay * az * scale
                    grad_x[p, 1] += dot * sy * ax * az * scale
                    grad_x[p, 2] += dot * sz * ax * ay * scale
    return grad_x


@numba.njit(cache=True)
def adam_update(param, grad, m, v, b1, b2, step_size, eps_hat):
    flat_p = param.ravel()
    flat_g = grad.ravel()
    flat_m = m.ravel()
    flat_v = v.ravel()
    for i in range(flat_p.shape[0]):
        g = flat_g[i]
        mi = b1 * flat_m[i] + (1.0 - b1) * g
        vi = b2 * flat_v[i] + (1.0 - b2) * g * g
        flat_m[i] = mi
        flat_v[i] = vi
        flat_p[i] -= step_size * mi / (math.sqrt(vi) + eps_hat)


@numba.njit(cache=True)
def tv_level(vals, grad, scale):
    """Sum of squared axis-adjacent differences of one level; adds ``scale``-weighted gradient."""
    r0, r1, r2, ch = vals.shape
    total = 0.0
    for i in range(r0):
        for j in range(r1):
            for k in range(r2):
                for q in range(ch):
                    v = vals[i, j, k, q]
                    if i + 1 < r0:
                        d = vals[i + 1, j, k, q] - v
                        total += d * d
                        grad[i + 1, j, k, q] += 2.0 * scale * d
                        grad[i, j, k, q] -= 2.0 * scale * d
                    if j + 1 < r1:
                        d = vals[i, j + 1, k, q] - v
                        total += d * d
                        grad[i, j + 1, k, q] += 2.0 * scale * d
                        grad[i, j, k, q] -= 2.0 * scale * d
                    if k + 1 < r2:
                        d = vals[i, j, k + 1, q] - v
                        total += d * d
                        grad[i, j, k + 1, q] += 2.0 * scale * d
                        grad[i, j, k, q] -= 2.0 * scale * d
    return total
