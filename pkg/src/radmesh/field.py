"""Multi-resolution feature grids and the density / appearance fields.

All forward passes return a cache consumed by the matching ``backward``; the
backward passes return plain gradient dictionaries keyed like
``parameters()`` so an optimizer can treat every field uniformly.
"""
from __future__ import annotations

import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

RAW_DENSITY_CLAMP = 15.0
CHECKPOINT_FORMAT = "radmesh-field"
CHECKPOINT_VERSION = 1

_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])


def grid_resolutions(levels: int, base_res: int, max_res: int) -> np.ndarray:
    """Geometric progression of per-axis cell counts, forced strictly increasing."""
    if levels == 1:
        return np.array([base_res])
    growth = math.exp((math.log(max_res) - math.log(base_res)) / (levels - 1))
    res = [base_res]
    for lvl in range(1, levels):
        res.append(max(res[-1] + 1, int(math.floor(base_res * growth ** lvl + 1e-9))))
    return np.array(res)


class FeatureGrid:
    """Dense multi-level lattice of features over the box ``[-bound, bound]^3``.

    Level ``l`` has ``res[l]`` cells per axis, i.e. ``res[l] + 1`` nodes.
    ``values`` stores every level's nodes back to back, shape ``(total, C)``.
    """

    def __init__(self, levels=16, channels=1, base_res=16, max_res=128, bound=1.0,
                 init_scale=1e-4, seed=0):
        self.levels = int(levels)
        self.channels = int(channels)
        self.bound = float(bound)
        self.resolutions = grid_resolutions(self.levels, int(base_res), int(max_res))
        sizes = (self.resolutions + 1) ** 3
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        rng = np.random.default_rng(seed)
        self.values = rng.uniform(-init_scale, init_scale, size=(self.offsets[-1], self.channels))

    @property
    def output_dim(self) -> int:
        return self.levels * self.channels

    def level_values(self, level: int) -> np.ndarray:
        r = self.resolutions[level] + 1
        return self.values[self.offsets[level]:self.offsets[level + 1]].reshape(r, r, r, self.channels)

    def _lattice(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        unit = (x + self.bound) / (2.0 * self.bound)
        inside = np.all((unit >= 0.0) & (unit <= 1.0), axis=-1)
        unit = np.clip(unit, 0.0, 1.0)
        res = self.resolutions[None, :, None].astype(np.float64)
        u = unit[:, None, :] * res                                   # (N, L, 3)
        base = np.minimum(np.floor(u), res - 1).astype(np.int64)
        frac = u - base
        return base, frac, inside

    def trilinear(self, x: np.ndarray):
        """Flat node indices and weights, each ``(N, L, 8)``; plus fractions."""
        base, frac, inside = self._lattice(x)
        n = self.resolutions[None, :, None] + 1
        corner = base[:, :, None, :] + _CORNERS[None, None]          # (N, L, 8, 3)
        idx = ((corner[..., 0] * n + corner[..., 1]) * n + corner[..., 2]) + self.offsets[:-1][None, :, None]
        f = frac[:, :, None, :]
        w = np.prod(np.where(_CORNERS[None, None] == 1, f, 1.0 - f), axis=-1)
        return idx, w, frac, inside

    def encode(self, x: np.ndarray):
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
        feat = _kernels.grid_encode_fwd(x, self.bound, self.resolutions, self.offsets, self.values)
        return feat, {"x": x}

    def encode_reference(self, x: np.ndarray) -> np.ndarray:
        """Vectorized numpy encoding; slow, kept as an independent check of :meth:`encode`."""
        idx, w, _, _ = self.trilinear(x)
        return np.einsum("nlc,nlck->nlk", w, self.values[idx]).reshape(len(idx), -1)

    def backward(self, cache, grad_feat: np.ndarray, need_x: bool = False):
        """Gradients w.r.t. ``values`` and, optionally, w.r.t. the query points."""
        grad_values = np.zeros_like(self.values)
        grad_x = _kernels.grid_encode_bwd(cache["x"], self.bound, self.resolutions, self.offsets, self.values,
                                          np.ascontiguousarray(grad_feat), grad_values, need_x)
        return grad_values, (grad_x if need_x else None)


def grid_encode(grid: FeatureGrid, x) -> np.ndarray:
    """Concatenated per-level trilinear features (coarse to fine)."""
    feat, _ = grid.encode(x)
    return feat


class FieldMLP:
    """Fully connected network: ReLU hidden layers, linear output."""

    def __init__(self, dims: Sequence[int], seed=0):
        self.dims = [int(d) for d in dims]
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            bound = math.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray, need_input: bool = False):
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0.0)
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            if i > 0 or need_input:
                g = g @ self.weights[i].T
        return grads_w, grads_b, (g if need_input else None)

    def parameters(self, prefix: str) -> dict:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.w{i}"] = w
            params[f"{prefix}.b{i}"] = b
        return params

    @staticmethod
    def grad_dict(prefix, grads_w, grads_b) -> dict:
        out = {}
        for i, (gw, gb) in enumerate(zip(grads_w, grads_b)):
            out[f"{prefix}.w{i}"] = gw
            out[f"{prefix}.b{i}"] = gb
        return out


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Spherical harmonics view encoding (degree 4 -> 16 coefficients)

SH_DEGREE = 4
SH_DIM = SH_DEGREE ** 2

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
       -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_encode(d: np.ndarray, with_jacobian: bool = False):
    """Real SH basis of unit directions; optional Jacobian w.r.t. the raw (x, y, z)."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    out = np.stack([
        _C0 * one,
        -_C1 * y, _C1 * z, -_C1 * x,
        _C2[0] * x * y, _C2[1] * y * z, _C2[2] * (3.0 * zz - 1.0), _C2[3] * x * z, _C2[4] * (xx - yy),
        _C3[0] * y * (3.0 * xx - yy), _C3[1] * x * y * z, _C3[2] * y * (5.0 * zz - 1.0),
        _C3[3] * z * (5.0 * zz - 3.0), _C3[4] * x * (5.0 * zz - 1.0), _C3[5] * z * (xx - yy),
        _C3[6] * x * (xx - 3.0 * yy),
    ], axis=-1)
    if not with_jacobian:
        return out
    # rows: d/dx, d/dy, d/dz of each coefficient
    jac = np.stack([
        np.stack([zero, zero, zero], -1),
        np.stack([zero, -_C1 * one, zero], -1),
        np.stack([zero, zero, _C1 * one], -1),
        np.stack([-_C1 * one, zero, zero], -1),
        np.stack([_C2[0] * y, _C2[0] * x, zero], -1),
        np.stack([zero, _C2[1] * z, _C2[1] * y], -1),
        np.stack([zero, zero, _C2[2] * 6.0 * z], -1),
        np.stack([_C2[3] * z, zero, _C2[3] * x], -1),
        np.stack([_C2[4] * 2.0 * x, -_C2[4] * 2.0 * y, zero], -1),
        np.stack([_C3[0] * 6.0 * x * y, _C3[0] * (3.0 * xx - 3.0 * yy), zero], -1),
        np.stack([_C3[1] * y * z, _C3[1] * x * z, _C3[1] * x * y], -1),
        np.stack([zero, _C3[2] * (5.0 * zz - 1.0), _C3[2] * 10.0 * y * z], -1),
        np.stack([zero, zero, _C3[3] * (15.0 * zz - 3.0)], -1),
        np.stack([_C3[4] * (5.0 * zz - 1.0), zero, _C3[4] * 10.0 * x * z], -1),
        np.stack([_C3[5] * 2.0 * x * z, -_C3[5] * 2.0 * y * z, _C3[5] * (xx - yy)], -1),
        np.stack([_C3[6] * (3.0 * xx - 3.0 * yy), -_C3[6] * 6.0 * x * y, zero], -1),
    ], axis=1)                                                         # (N, 16, 3)
    return out, jac


# ---------------------------------------------------------------------------
# Fields


class GeometryField:
    """Density ``sigma = exp(clamp(MLP(E_geo(x))))``."""

    def __init__(self, levels=16, base_res=16, max_res=128, bound=1.0, hidden=32, seed=0):
        self.grid = FeatureGrid(levels, 1, base_res, max_res, bound, seed=seed)
        self.mlp = FieldMLP([self.grid.output_dim, hidden, 1], seed=seed + 1)
        self.config = dict(levels=levels, base_res=base_res, max_res=max_res, bound=bound, hidden=hidden, seed=seed)

    def forward(self, x: np.ndarray):
        feat, gcache = self.grid.encode(x)
        raw, acts = self.mlp.forward(feat)
        raw = raw[:, 0]
        clamped = np.clip(raw, -RAW_DENSITY_CLAMP, RAW_DENSITY_CLAMP)
        sigma = np.exp(clamped)
        return sigma, {"grid": gcache, "acts": acts, "raw": raw, "sigma": sigma}

    def density(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_sigma: np.ndarray, need_x: bool = False):
        raw = cache["raw"]
        live = np.abs(raw) < RAW_DENSITY_CLAMP
        g_raw = (grad_sigma * cache["sigma"] * live)[:, None]
        gw, gb, g_feat = self.mlp.backward(cache["acts"], g_raw, need_input=True)
        g_grid, g_x = self.grid.backward(cache["grid"], g_feat, need_x=need_x)
        grads = {"geo.grid": g_grid, **FieldMLP.grad_dict("geo.mlp", gw, gb)}
        return (grads, g_x) if need_x else grads

    def parameters(self) -> dict:
        return {"geo.grid": self.grid.values, **self.mlp.parameters("geo.mlp")}


class AppearanceField:
    """Diffuse color and specular features from a color grid, specular color from a view MLP."""

    def __init__(self, levels=16, base_res=16, max_res=128, bound=1.0, hidden1=64, hidden2=32, seed=0):
        self.grid = FeatureGrid(levels, 2, base_res, max_res, bound, seed=seed + 2)
        self.mlp1 = FieldMLP([self.grid.output_dim, hidden1, hidden1, 6], seed=seed + 3)
        self.mlp2 = FieldMLP([3 + SH_DIM, hidden2, 3], seed=seed + 4)
        self.config = dict(levels=levels, base_res=base_res, max_res=max_res, bound=bound,
                           hidden1=hidden1, hidden2=hidden2, seed=seed)

    def forward_appearance(self, x: np.ndarray):
        feat, gcache = self.grid.encode(x)
        raw, acts = self.mlp1.forward(feat)
        out = sigmoid(raw)
        return out[:, :3], out[:, 3:], {"grid": gcache, "acts": acts, "out": out}

    def backward_appearance(self, cache, grad_cd, grad_fs, need_x: bool = False):
        out = cache["out"]
        g_out = np.concatenate([grad_cd, grad_fs], axis=1) * out * (1.0 - out)
        gw, gb, g_feat = self.mlp1.backward(cache["acts"], g_out, need_input=True)
        g_grid, g_x = self.grid.backward(cache["grid"], g_feat, need_x=need_x)
        grads = {"app.grid": g_grid, **FieldMLP.grad_dict("app.mlp1", gw, gb)}
        return grads, g_x

    def forward_specular(self, f_s: np.ndarray, d: np.ndarray):
        sh = sh_encode(d)
        raw, acts = self.mlp2.forward(np.concatenate([f_s, sh], axis=1))
        c_s = sigmoid(raw)
        return c_s, {"acts": acts, "c_s": c_s, "d": d}

    def backward_specular(self, cache, grad_cs, need_d: bool = False):
        c_s = cache["c_s"]
        g_raw = grad_cs * c_s * (1.0 - c_s)
        gw, gb, g_in = self.mlp2.backward(cache["acts"], g_raw, need_input=True)
        grads = FieldMLP.grad_dict("app.mlp2", gw, gb)
        g_fs = g_in[:, :3]
        g_d = None
        if need_d:
            g_d = np.einsum("nk,nkd->nd", g_in[:, 3:], sh_encode(cache["d"], with_jacobian=True)[1])
        return grads, g_fs, g_d

    def parameters(self) -> dict:
        return {"app.grid": self.grid.values, **self.mlp1.parameters("app.mlp1"),
                **self.mlp2.parameters("app.mlp2")}


def eval_density(g: GeometryField, x) -> np.ndarray:
    return g.density(np.atleast_2d(x))


def eval_appearance(a: AppearanceField, x):
    c_d, f_s, _ = a.forward_appearance(np.atleast_2d(x))
    return c_d, f_s


def eval_specular(a: AppearanceField, f_s, d) -> np.ndarray:
    return a.forward_specular(np.atleast_2d(f_s), np.atleast_2d(d))[0]


def compose_color(c_d, c_s=None, diffuse_only: bool = False, clamp: bool = True):
    """Diffuse plus specular color; ``clamp`` is the image-output convention."""
    c = np.array(c_d, dtype=np.float64, copy=True) if diffuse_only or c_s is None else c_d + c_s
    return np.clip(c, 0.0, 1.0) if clamp else c


def merge_grads(*dicts) -> dict:
    """Sum gradient dictionaries key by key (order independent)."""
    out = {}
    for d in dicts:
        for k, v in d.items():
            out[k] = out[k] + v if k in out else v
    return out


def normalize_with_jacobian(v: np.ndarray):
    """Unit vectors ``v/|v|`` and a function pulling gradients back to ``v``."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    d = v / norm

    def pullback(grad_d):
        return (grad_d - np.sum(grad_d * d, axis=-1, keepdims=True) * d) / norm

    return d, pullback


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, geometry: GeometryField, appearance: AppearanceField, extra: dict | None = None):
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "geometry": geometry.config,
        "appearance": appearance.config,
        "extra": extra or {},
    }
    arrays = {**geometry.parameters(), **appearance.parameters()}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(GeometryField, AppearanceField, extra)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a field checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        geo = GeometryField(**header["geometry"])
        app = AppearanceField(**header["appearance"])
        for field in (geo, app):
            for name, arr in field.parameters().items():
                if data[name].shape != arr.shape:
                    raise ValueError(f"checkpoint array {name} has shape {data[name].shape}, expected {arr.shape}")
                arr[...] = data[name]
    return geo, app, header["extra"]
