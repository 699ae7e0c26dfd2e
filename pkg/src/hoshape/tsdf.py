"""Truncated signed distance volumes in the canonical hand-wrist frame.

Index convention: ``values[i, j, k]`` is the sample at the centre of voxel
``(i, j, k)`` along (x, y, z), located at ``origin + (index + 0.5) * voxel_size``.
Negative values are inside the surface.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .mesh import Mesh


class GeometryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 128
    half_extent: float = 0.2
    truncation: float = 0.05
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")
        if self.truncation <= self.voxel_size:
            raise ValueError(
                f"truncation {self.truncation} must exceed voxel size {self.voxel_size}"
            )
        if self.origin is None:
            h = float(self.half_extent)
            object.__setattr__(self, "origin", (-h, -h, -h))
        else:
            object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def voxel_size(self) -> float:
        return 2.0 * self.half_extent / self.resolution

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + self.half_extent

    def voxel_centers(self) -> np.ndarray:
        """(R, R, R, 3) array of voxel-centre coordinates."""
        axis = (np.arange(self.resolution) + 0.5) * self.voxel_size
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1) + np.asarray(self.origin)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "half_extent": self.half_extent,
            "truncation": self.truncation,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            resolution=int(d["resolution"]),
            half_extent=float(d["half_extent"]),
            truncation=float(d["truncation"]),
            origin=tuple(d["origin"]) if d.get("origin") is not None else None,
        )


@dataclass(frozen=True)
class PatchSpec:
    patches_per_axis: int = 8
    patch_resolution: int = 16

    def __post_init__(self):
        if self.patches_per_axis <= 0 or self.patch_resolution <= 0:
            raise ValueError("patch counts must be positive")

    @property
    def num_patches(self) -> int:
        return self.patches_per_axis ** 3

    def check(self, spec: GridSpec) -> None:
        if self.patches_per_axis * self.patch_resolution != spec.resolution:
            raise ValueError(
                f"{self.patches_per_axis} patches x {self.patch_resolution} voxels "
                f"!= grid resolution {spec.resolution}"
            )

    def to_dict(self) -> dict:
        return {"patches_per_axis": self.patches_per_axis, "patch_resolution": self.patch_resolution}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchSpec":
        return cls(int(d["patches_per_axis"]), int(d["patch_resolution"]))


@dataclass
class TsdfGrid:
    spec: GridSpec
    values: np.ndarray
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        r = self.spec.resolution
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (r, r, r):
            raise ValueError(f"expected values of shape {(r, r, r)}, got {self.values.shape}")
        t = np.float32(self.spec.truncation)
        self.values = np.clip(self.values, -t, t)

    @classmethod
    def empty(cls, spec: GridSpec) -> "TsdfGrid":
        """All free space: every voxel at +truncation."""
        r = spec.resolution
        return cls(spec, np.full((r, r, r), spec.truncation, dtype=np.float32))

    @classmethod
    def from_sdf(cls, spec: GridSpec, sdf) -> "TsdfGrid":
        """Evaluate a vectorised signed distance callable at every voxel centre."""
        pts = spec.voxel_centers().reshape(-1, 3)
        vals = np.asarray(sdf(pts), dtype=np.float64).reshape((spec.resolution,) * 3)
        return cls(spec, vals)


# -- sampling from meshes -----------------------------------------------------

def _closest_point_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Euclidean distance from points ``p`` to triangles ``(a, b, c)``, row-wise.

    Region classification after Ericson, Real-Time Collision Detection 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        closest = a + ab * v[:, None] + ac * w[:, None]

        # edge regions
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(on_ab[:, None], a + ab * t_ab[:, None], closest)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(on_ac[:, None], a + ac * t_ac[:, None], closest)
        t_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest = np.where(on_bc[:, None], b + (c - b) * t_bc[:, None], closest)

    # vertex regions take precedence
    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    return np.linalg.norm(p - closest, axis=1)


def unsigned_distance(points: np.ndarray, mesh: Mesh, cutoff: float) -> np.ndarray:
    """Exact point-to-mesh distance, saturated at ``cutoff``.

    Candidate triangles are pruned through a KD-tree over triangle centroids:
    the true nearest triangle has its centroid within ``d_c + r_max`` where
    ``d_c`` is the nearest-centroid distance and ``r_max`` the largest
    centroid-to-vertex radius.
    """
    tri = mesh.vertices[mesh.triangles]
    centroids = tri.mean(axis=1)
    r_max = float(np.linalg.norm(tri - centroids[:, None], axis=2).max())
    tree = cKDTree(centroids)
    d_c, _ = tree.query(points)
    out = np.full(len(points), cutoff, dtype=np.float64)
    near = np.nonzero(d_c - r_max < cutoff)[0]
    chunk = 4096
    for s in range(0, len(near), chunk):
        ids = near[s:s + chunk]
        cands = tree.query_ball_point(points[ids], d_c[ids] + r_max)
        lengths = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(cands))
        pt_idx = np.repeat(np.arange(len(ids)), lengths)
        tri_idx = np.fromiter((t for c in cands for t in c), dtype=np.int64, count=int(lengths.sum()))
        t = tri[tri_idx]
        d = _closest_point_distance(points[ids][pt_idx], t[:, 0], t[:, 1], t[:, 2])
        best = np.full(len(ids), np.inf)
        np.minimum.at(best, pt_idx, d)
        out[ids] = np.minimum(best, cutoff)
    return out


def _axis_parity(mesh: Mesh, spec: GridSpec, axis: int) -> np.ndarray:
    """Inside mask from the parity of ray crossings along ``+axis`` from each voxel centre."""
    r = spec.resolution
    vs = spec.voxel_size
    origin = np.asarray(spec.origin)
    b_ax, c_ax = [a for a in range(3) if a != axis]
    tri = mesh.vertices[mesh.triangles]
    pb = (tri[:, :, b_ax] - origin[b_ax]) / vs - 0.5  # grid-line coordinates
    pc = (tri[:, :, c_ax] - origin[c_ax]) / vs - 0.5
    lo_b = np.clip(np.ceil(pb.min(1)), 0, r).astype(np.int64)
    hi_b = np.clip(np.floor(pb.max(1)), -1, r - 1).astype(np.int64)
    lo_c = np.clip(np.ceil(pc.min(1)), 0, r).astype(np.int64)
    hi_c = np.clip(np.floor(pc.max(1)), -1, r - 1).astype(np.int64)
    nb = np.maximum(hi_b - lo_b + 1, 0)
    nc = np.maximum(hi_c - lo_c + 1, 0)
    counts = nb * nc
    total = int(counts.sum())
    inside = np.zeros((r, r, r), dtype=bool)
    if total == 0:
        return inside
    t_id = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    jb = lo_b[t_id] + local // nc[t_id]
    jc = lo_c[t_id] + local % nc[t_id]

    # 2D barycentric test of the grid line against the projected triangle
    b0, b1, b2 = pb[t_id, 0], pb[t_id, 1], pb[t_id, 2]
    c0, c1, c2 = pc[t_id, 0], pc[t_id, 1], pc[t_id, 2]
    det = (b1 - b0) * (c2 - c0) - (b2 - b0) * (c1 - c0)
    ok = np.abs(det) > 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = ((jb - b0) * (c2 - c0) - (b2 - b0) * (jc - c0)) / det
        l2 = ((b1 - b0) * (jc - c0) - (jb - b0) * (c1 - c0)) / det
        l0 = 1 - l1 - l2
    hit = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    a0, a1, a2 = (tri[t_id, k, axis] for k in range(3))
    t_hit = (l0 * a0 + l1 * a1 + l2 * a2)[hit]
    t_hit = (t_hit - origin[axis]) / vs - 0.5
    line = (jb * r + jc)[hit]

    # count crossings beyond each voxel centre on its line
    span = 3.0 * r + 4.0
    key = line + (np.clip(t_hit, -r - 1, 2 * r + 1) + r + 1.5) / span
    key.sort()
    idx = np.arange(r)
    lines = (np.arange(r)[:, None] * r + np.arange(r)[None, :]).reshape(-1)
    vox_key = lines[:, None] + (idx[None, :] + r + 1.5) / span
    after = np.searchsorted(key, lines[:, None] + 1.0, side="left") - np.searchsorted(key, vox_key, side="right")
    parity = (after % 2 == 1).reshape(r, r, r)  # (b, c, axis)
    return np.moveaxis(parity, 2, axis)


def sample_tsdf_from_mesh(mesh: Mesh, spec: GridSpec) -> TsdfGrid:
    """TSDF of ``mesh`` at voxel centres; sign by majority parity over the three axis rays."""
    if mesh.is_empty:
        raise ValueError("empty geometry")
    trunc = spec.truncation
    pts = spec.voxel_centers().reshape(-1, 3)
    dist = unsigned_distance(pts, mesh, trunc).reshape((spec.resolution,) * 3)
    votes = sum(_axis_parity(mesh, spec, a).astype(np.int8) for a in range(3))
    inside = votes >= 2
    values = np.where(inside, -dist, dist)
    flags: tuple[str, ...] = ()
    lo = np.asarray(spec.origin)
    hi = lo + 2 * spec.half_extent
    if np.all((mesh.vertices < lo).any(axis=1) | (mesh.vertices > hi).any(axis=1)) and not inside.any():
        flags = ("outside_cube",)
        warnings.warn("mesh lies entirely outside the canonical cube", GeometryWarning, stacklevel=2)
    return TsdfGrid(spec, values, flags)


# -- patches -------------------------------------------------------------------

def split_into_patches(grid: TsdfGrid, pspec: PatchSpec) -> np.ndarray:
    """(P^3, r, r, r) patches in row-major (i, j, k) order."""
    pspec.check(grid.spec)
    n, r = pspec.patches_per_axis, pspec.patch_resolution
    v = grid.values.reshape(n, r, n, r, n, r)
    return v.transpose(0, 2, 4, 1, 3, 5).reshape(n ** 3, r, r, r).copy()


def assemble_from_patches(patches, pspec: PatchSpec, spec: GridSpec) -> TsdfGrid:
    pspec.check(spec)
    n, r = pspec.patches_per_axis, pspec.patch_resolution
    patches = np.asarray(patches, dtype=np.float32)
    if patches.shape != (n ** 3, r, r, r):
        raise ValueError(f"expected {n ** 3} patches of {r}^3, got array of shape {patches.shape}")
    v = patches.reshape(n, n, n, r, r, r).transpose(0, 3, 1, 4, 2, 5)
    return TsdfGrid(spec, v.reshape(spec.resolution, spec.resolution, spec.resolution))


# -- meshing ---------------------------------------------------------------------

def extract_mesh(grid: TsdfGrid, level: float = 0.0) -> Mesh:
    """Marching cubes at ``level``; triangles wound outward (towards positive values)."""
    v = grid.values
    if not (v.min() < level < v.max()):
        return Mesh()
    verts, faces, _, _ = measure.marching_cubes(
        v, level=level, method="lorensen", gradient_direction="descent"
    )
    spec = grid.spec
    verts = np.asarray(spec.origin) + (verts.astype(np.float64) + 0.5) * spec.voxel_size
    faces = faces.astype(np.int64)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return Mesh(verts, faces[keep])


# -- file format ---------------------------------------------------------------

def save_tsdf(grid: TsdfGrid, path) -> None:
    """JSON header line followed by a raw little-endian float32 block (z fastest)."""
    header = dict(grid.spec.to_dict(), dtype="f32", order="row-major z-fastest")
    payload = np.ascontiguousarray(grid.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_tsdf(path) -> TsdfGrid:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("dtype") != "f32":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    spec = GridSpec.from_dict(header)
    r = spec.resolution
    values = np.frombuffer(raw[nl + 1:], dtype="<f4")
    if values.size != r ** 3:
        raise ValueError(f"expected {r ** 3} values, found {values.size}")
    return TsdfGrid(spec, values.reshape(r, r, r))
