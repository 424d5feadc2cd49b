"""Indexed triangle mesh with per-vertex trainable offsets, plus structural audits."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(eq=False)
class TriMesh:
    """Triangle mesh; ``faces`` are counter-clockwise seen from outside.

    ``offsets`` are the trainable per-vertex displacements of stage 2; the
    rendered surface uses ``vertices + offsets``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.offsets is None:
            self.offsets = np.zeros_like(self.vertices)
        else:
            self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(self.vertices.shape)

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.n_faces == 0

    @property
    def positions(self) -> np.ndarray:
        return self.vertices + self.offsets

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), self.offsets.copy())

    def baked(self) -> "TriMesh":
        """Offsets folded into vertex positions, offsets reset to zero."""
        return TriMesh(self.positions, self.faces.copy())

    def triangles(self, use_offsets: bool = True) -> np.ndarray:
        pos = self.positions if use_offsets else self.vertices
        return pos[self.faces]

    def face_normals(self, unit: bool = True) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        n = self.face_normals(unit=False)
        out = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(out, self.faces[:, k], n)
        return out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-300)

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        pos = self.positions
        return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))

    def edges(self) -> np.ndarray:
        """Directed half-edges ``(3F, 2)`` in face order: (f0 v0->v1, f0 v1->v2, f0 v2->v0, f1 ...)."""
        f = self.faces
        return np.stack([f, np.roll(f, -1, axis=1)], axis=-1).reshape(-1, 2)

    def unique_edges(self):
        """Sorted undirected edges and, per half-edge, the index of its undirected edge."""
        he = np.sort(self.edges(), axis=1)
        if len(he) == 0:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        uniq, inverse = np.unique(he, axis=0, return_inverse=True)
        return uniq, inverse.ravel()

    def edge_lengths(self) -> np.ndarray:
        e, _ = self.unique_edges()
        pos = self.positions
        return np.linalg.norm(pos[e[:, 0]] - pos[e[:, 1]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric vertex adjacency (1 where an edge exists)."""
        e, _ = self.unique_edges()
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def face_adjacency(self, by: str = "edge") -> sp.csr_matrix:
        """Face-to-face adjacency through shared edges (``by='edge'``) or shared vertices."""
        nf = self.n_faces
        if by == "vertex":
            inc = sp.csr_matrix((np.ones(3 * nf), (np.repeat(np.arange(nf), 3), self.faces.ravel())),
                                shape=(nf, self.n_vertices))
            adj = (inc @ inc.T).tocsr()
        else:
            _, inv = self.unique_edges()
            inc = sp.csr_matrix((np.ones(3 * nf), (np.repeat(np.arange(nf), 3), inv)),
                                shape=(nf, inv.max() + 1 if len(inv) else 0))
            adj = (inc @ inc.T).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        adj.data[:] = 1
        return adj

    def remove_unreferenced(self) -> "TriMesh":
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.ravel()] = True
        remap = np.cumsum(used) - 1
        return TriMesh(self.vertices[used], remap[self.faces], self.offsets[used])

    def submesh(self, face_mask: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices, self.faces[face_mask], self.offsets).remove_unreferenced()

    def signed_volume(self) -> float:
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    @staticmethod
    def concatenate(meshes) -> "TriMesh":
        meshes = [m for m in meshes if m.n_vertices]
        if not meshes:
            return TriMesh.empty()
        verts, faces, offs, base = [], [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            offs.append(m.offsets)
            faces.append(m.faces + base)
            base += m.n_vertices
        return TriMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(offs))


@dataclass
class AuditReport:
    n_vertices: int
    n_faces: int
    out_of_range: int
    degenerate: int
    duplicate_faces: int
    nonmanifold_edges: int
    zero_area: int
    boundary_edges: int
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.out_of_range == 0 and self.degenerate == 0 and self.nonmanifold_edges == 0

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def audit(mesh: TriMesh) -> AuditReport:
    """Count structural defects; ``report.ok`` is the contract topology edits must keep."""
    f = mesh.faces
    nv = mesh.n_vertices
    out_of_range = int(np.count_nonzero((f < 0) | (f >= nv)))
    degenerate = int(np.count_nonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])))
    if out_of_range:
        return AuditReport(nv, len(f), out_of_range, degenerate, 0, 0, 0, 0)
    dup = 0
    if len(f):
        dup = len(f) - len(np.unique(np.sort(f, axis=1), axis=0))
    _, inv = mesh.unique_edges()
    counts = np.bincount(inv) if len(inv) else np.zeros(0, dtype=np.int64)
    areas = mesh.face_areas() if len(f) else np.zeros(0)
    return AuditReport(
        n_vertices=nv,
        n_faces=len(f),
        out_of_range=0,
        degenerate=degenerate,
        duplicate_faces=int(dup),
        nonmanifold_edges=int(np.count_nonzero(counts > 2)),
        zero_area=int(np.count_nonzero(areas <= 0.0)),
        boundary_edges=int(np.count_nonzero(counts == 1)),
    )


class MeshAuditError(RuntimeError):
    def __init__(self, report: AuditReport, where: str = ""):
        super().__init__(f"mesh audit failed{' after ' + where if where else ''}: {report.to_text()}")
        self.report = report


def check_mesh(mesh: TriMesh, where: str = "") -> TriMesh:
    report = audit(mesh)
    if not report.ok:
        raise MeshAuditError(report, where)
    return mesh


def save_mesh(path, mesh: TriMesh) -> None:
    """Exact binary storage (vertices, faces, offsets) as ``.npz``."""
    with open(path, "wb") as fh:
        np.savez(fh, vertices=mesh.vertices, faces=mesh.faces, offsets=mesh.offsets)


def load_mesh(path) -> TriMesh:
    with np.load(path) as data:
        missing = {"vertices", "faces", "offsets"} - set(data.files)
        if missing:
            raise ValueError(f"{path} is not a mesh file (missing {sorted(missing)})")
        return TriMesh(data["vertices"], data["faces"], data["offsets"])
