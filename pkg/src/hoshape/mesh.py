"""Triangle meshes: container, OBJ io, primitive builders and surface sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            degenerate = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            if degenerate.any():
                raise ValueError("degenerate triangle with repeated vertex index")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def transformed(self, rotation, translation) -> "Mesh":
        """Return the mesh with x -> R x + t applied to every vertex."""
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        return Mesh(self.vertices @ r.T + t, self.triangles.copy())

    def flipped(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.triangles[:, ::-1].copy())

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        """Number of triangles sharing each undirected edge."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)}

    def is_closed(self) -> bool:
        if self.is_empty:
            return False
        return all(c == 2 for c in self.edge_use_counts().values())


def concatenate(meshes) -> Mesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return Mesh()
    return Mesh(np.concatenate(verts), np.concatenate(tris))


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points uniformly with respect to surface area."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.triangles[idx]]
    return (
        (1 - r1)[:, None] * v[:, 0]
        + (r1 * (1 - r2))[:, None] * v[:, 1]
        + (r1 * r2)[:, None] * v[:, 2]
    )


# -- OBJ ---------------------------------------------------------------------

def write_obj(mesh: Mesh, path) -> None:
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


# -- primitives --------------------------------------------------------------

def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Subdivided icosahedron, outward-facing triangles."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return Mesh(v, np.array(faces))


def box(half_sizes=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)) -> Mesh:
    hx, hy, hz = half_sizes
    v = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ]) + np.asarray(center, dtype=np.float64)
    f = np.array([
        [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
        [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
        [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3],
    ])
    return Mesh(v, f)


def square(side: float, z: float = 0.0) -> Mesh:
    """Axis-aligned square in the plane ``z``, centred on the z axis."""
    h = side / 2
    v = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]])
    return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))
