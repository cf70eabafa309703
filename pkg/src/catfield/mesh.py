"""Triangle meshes: primitive builders, area sampling, OBJ export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    source_id: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices[self.triangles]
        return v[:, 0], v[:, 1], v[:, 2]

    def areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def surface_area(self) -> float:
        return float(self.areas().sum())

    def submesh(self, keep: np.ndarray) -> "TriangleMesh":
        tris = self.triangles[np.asarray(keep)]
        used, inverse = np.unique(tris.reshape(-1), return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3), self.source_id)

    def without_degenerate(self, eps: float = 1e-12) -> "TriangleMesh":
        return self.submesh(self.areas() > eps)

    def transformed(self, pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.triangles.copy(), self.source_id)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points uniformly distributed by area."""
        if self.is_empty():
            raise ValueError("cannot sample an empty mesh")
        areas = self.areas()
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        a, b, c = (x[tri] for x in self.corners())
        return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


def merge_meshes(meshes, source_id: int = 0) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), source_id)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris), source_id)


def box_mesh(size) -> TriangleMesh:
    h = np.asarray(size, dtype=np.float64) / 2.0
    v = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
    ) * h
    # vertex index = 4*ix + 2*iy + iz
    faces = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    tris = []
    for a, b, c, d in faces:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris))


def cylinder_mesh(radius: float, height: float, segments: int = 64) -> TriangleMesh:
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.concatenate([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i)]
        tris += [(cb, j, i), (ct, segments + i, segments + j)]
    return TriangleMesh(v, np.array(tris))


def sphere_mesh(radius: float, n_lat: int = 48, n_lon: int = 96) -> TriangleMesh:
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring = radius * np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], -1)
    v = np.concatenate([[[0, 0, radius]], ring.reshape(-1, 3), [[0, 0, -radius]]])
    south = len(v) - 1

    def idx(i, j):
        return 1 + i * n_lon + (j % n_lon)

    tris = []
    for j in range(n_lon):
        tris.append((0, idx(0, j), idx(0, j + 1)))
        tris.append((south, idx(n_lat - 2, j + 1), idx(n_lat - 2, j)))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            tris += [(idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)), (idx(i, j), idx(i + 1, j + 1), idx(i, j + 1))]
    return TriangleMesh(v, np.array(tris))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"# source {mesh.source_id}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, tris, source = [], [], 0
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            tris.append([int(x.split("/")[0]) - 1 for x in tok[1:4]])
        elif tok[:2] == ["#", "source"]:
            source = int(tok[2])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3), source)
