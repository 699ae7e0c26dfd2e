"""Pinhole projection of canonical (hand-wrist frame) points into camera views,
and pixel-aligned feature gathering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .tsdf import GridSpec

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class HandPose:
    """Rigid map from camera coordinates to hand-wrist coordinates: ``p_hand = R p_cam + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "HandPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Camera frame -> hand-wrist frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        """Hand-wrist frame -> camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def inverse(self) -> "HandPose":
        return HandPose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class CameraView:
    image: np.ndarray | None
    intrinsics: CameraIntrinsics
    pose: HandPose | None
    view_id: str = "0"

    def __post_init__(self):
        if self.image is not None:
            h, w = self.image.shape[:2]
            if (w, h) != (self.intrinsics.width, self.intrinsics.height):
                raise ValueError(
                    f"image is {w}x{h} but intrinsics describe "
                    f"{self.intrinsics.width}x{self.intrinsics.height}"
                )


# -- pose file ---------------------------------------------------------------

def pose_to_dict(pose: HandPose, intr: CameraIntrinsics) -> dict:
    return {
        "R": [float(x) for x in pose.rotation.reshape(-1)],
        "t": [float(x) for x in pose.translation],
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
    }


def pose_from_dict(d: dict) -> tuple[HandPose, CameraIntrinsics]:
    pose = HandPose(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))
    intr = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                            int(d["width"]), int(d["height"]))
    return pose, intr


def write_pose_file(path, pose: HandPose, intr: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps(pose_to_dict(pose, intr), indent=1) + "\n")


def read_pose_file(path) -> tuple[HandPose, CameraIntrinsics]:
    return pose_from_dict(json.loads(Path(path).read_text()))


# -- projection --------------------------------------------------------------

def project_points(points, intr: CameraIntrinsics, pose: HandPose):
    """Canonical points (N, 3) -> pixel coords (N, 2), depth (N,), valid mask (N,)."""
    cam = pose.apply_inverse(points)
    z = cam[:, 2]
    valid = z > MIN_DEPTH
    safe = np.where(valid, z, 1.0)
    u = intr.fx * cam[:, 0] / safe + intr.cx
    v = intr.fy * cam[:, 1] / safe + intr.cy
    return np.stack([u, v], axis=-1), z, valid


def canonical_to_pixel(p, view: CameraView) -> tuple[float, float, float, bool]:
    """Project one canonical point; the last element is False behind the camera."""
    uv, z, valid = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), view.intrinsics, view.pose)
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0]), bool(valid[0])


def sample_features_torch(fmap: torch.Tensor, uv: torch.Tensor, valid: torch.Tensor,
                          image_size: tuple[int, int]) -> torch.Tensor:
    """Bilinear lookup of (B, F, h, w) feature maps at image-pixel coordinates (B, M, 2).

    Pixel coordinates scale proportionally onto the feature grid, with feature
    cell ``a`` centred at image coordinate ``(a + 0.5) * W / w``.  Samples
    outside the image, or flagged invalid, return exactly zero.
    """
    b, f, h, w = fmap.shape
    width, height = image_size
    u, v = uv[..., 0], uv[..., 1]
    inside = valid & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    x = (u * (w / width) - 0.5).clamp(0, w - 1)
    y = (v * (h / height) - 0.5).clamp(0, h - 1)
    x0 = x.floor().clamp(max=max(w - 2, 0)).long()
    y0 = y.floor().clamp(max=max(h - 2, 0)).long()
    fx, fy = x - x0, y - y0
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = fmap.reshape(b, f, h * w)

    def gather(yy, xx):
        lin = (yy * w + xx)[:, None, :].expand(-1, f, -1)
        return torch.gather(flat, 2, lin)

    out = (gather(y0, x0) * ((1 - fx) * (1 - fy))[:, None]
           + gather(y0, x1) * (fx * (1 - fy))[:, None]
           + gather(y1, x0) * ((1 - fx) * fy)[:, None]
           + gather(y1, x1) * (fx * fy)[:, None])
    out = out * inside[:, None].to(out.dtype)
    return out.permute(0, 2, 1)


def sample_feature(feature_map, u: float, v: float, image_size: tuple[int, int] | None = None,
                   valid: bool = True) -> np.ndarray:
    """Bilinear lookup in an (h, w, F) map at image pixel (u, v); zero when out of bounds."""
    fm = np.asarray(feature_map, dtype=np.float64)
    h, w = fm.shape[:2]
    size = image_size or (w, h)
    t = torch.from_numpy(fm).permute(2, 0, 1)[None]
    uv = torch.tensor([[[u, v]]], dtype=torch.float64)
    ok = torch.tensor([[valid]])
    return sample_features_torch(t, uv, ok, size)[0, 0].numpy()


def latent_cell_centers(spec: GridSpec, cells_per_axis: int = 8, samples_per_cell: int = 1) -> np.ndarray:
    """(n, n, n, s^3, 3) query points: ``s^3`` sub-cell centres per latent cell."""
    n, s = cells_per_axis, samples_per_cell
    sub = 2 * spec.half_extent / (n * s)
    axis = (np.arange(n * s) + 0.5) * sub
    g = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1) + np.asarray(spec.origin)
    g = g.reshape(n, s, n, s, n, s, 3).transpose(0, 2, 4, 1, 3, 5, 6)
    return g.reshape(n, n, n, s ** 3, 3)


def build_aligned_feature_grid(feature_map, view: CameraView, spec: GridSpec, cells_per_axis: int = 8,
                               samples_per_cell: int = 1) -> np.ndarray:
    """(n, n, n, F) cube of features gathered at the projections of latent-cell centres.

    With ``samples_per_cell > 1`` the cell feature is the mean over a regular
    sub-lattice inside the cell.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    pts = latent_cell_centers(spec, cells_per_axis, samples_per_cell)
    uv, _, valid = project_points(pts.reshape(-1, 3), view.intrinsics, view.pose)
    t = torch.from_numpy(fm).permute(2, 0, 1)[None]
    feats = sample_features_torch(
        t, torch.from_numpy(uv)[None], torch.from_numpy(valid)[None],
        (view.intrinsics.width, view.intrinsics.height),
    )[0].numpy()
    n = cells_per_axis
    return feats.reshape(n, n, n, samples_per_cell ** 3, -1).mean(axis=3)
