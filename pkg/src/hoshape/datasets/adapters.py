"""Directory-layout adapters producing :class:`FrameRecord` listings.

``dexycb-style`` (multi-view; also what the toy generator writes)::

    root/manifest.jsonl                       optional; one frame.json per line
    root/frames/<frame_id>/frame.json         {frame_id, split, object_label, mesh_frame, views}
    root/frames/<frame_id>/view_<v>/color.png
    root/frames/<frame_id>/view_<v>/pose.json pose/intrinsics record
    root/frames/<frame_id>/hand.obj, object.obj   meshes in the camera frame of view ``mesh_frame``
    root/frames/<frame_id>/hand.tsdf, object.tsdf optional canonical-frame TSDFs

``obman-style`` (single view per sample, meshes in camera coordinates)::

    root/<split>/rgb/<id>.png
    root/<split>/meta/<id>.json               pose/intrinsics record, optional "object_label"
    root/<split>/mesh/<id>_hand.obj, <id>_object.obj
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..camera import CameraView, HandPose, read_pose_file
from ..mesh import Mesh, read_obj, sample_surface
from ..tsdf import GridSpec, TsdfGrid, load_tsdf, sample_tsdf_from_mesh
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

FORMATS = ("obman-style", "dexycb-style")


@dataclass
class ViewRecord:
    view_id: str
    image_path: Path
    pose_path: Path


@dataclass
class FrameRecord:
    frame_id: str
    views: list[ViewRecord]
    hand_mesh_path: Path | None
    object_mesh_path: Path | None
    mesh_frame: str | None = None
    split: str = "test"
    object_label: str = ""
    hand_tsdf_path: Path | None = None
    object_tsdf_path: Path | None = None

    def __post_init__(self):
        if not self.views:
            raise ValueError(f"frame {self.frame_id} has no views")

    def view_ids(self) -> list[str]:
        return [v.view_id for v in self.views]


@dataclass
class LoadResult:
    frames: list[FrameRecord] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    filtered: list[str] = field(default_factory=list)


def min_surface_distance(a: Mesh, b: Mesh, n: int = 20000, seed: int = 0) -> float:
    """Approximate minimum distance between two surfaces from dense samples (0 when they cross)."""
    rng = np.random.default_rng(seed)
    pa = np.concatenate([a.vertices, sample_surface(a, n, rng)])
    pb = np.concatenate([b.vertices, sample_surface(b, n, rng)])
    d, _ = cKDTree(pb).query(pa)
    return float(d.min())


def _dexycb_frames(root: Path, result: LoadResult) -> list[FrameRecord]:
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        return []
    entries = []
    manifest = root / "manifest.jsonl"
    if manifest.exists():
        entries = [json.loads(x) for x in manifest.read_text().splitlines() if x.strip()]
    else:
        for fdir in sorted(p for p in frames_dir.iterdir() if p.is_dir()):
            meta = fdir / "frame.json"
            if meta.exists():
                entries.append(json.loads(meta.read_text()))
            else:
                views = sorted(p.name[len("view_"):] for p in fdir.glob("view_*") if p.is_dir())
                entries.append({"frame_id": fdir.name, "views": views})
    out = []
    for e in entries:
        fdir = frames_dir / e["frame_id"]
        views, missing = [], []
        for vid in e["views"]:
            vdir = fdir / f"view_{vid}"
            img, pose = vdir / "color.png", vdir / "pose.json"
            if img.exists() and pose.exists():
                views.append(ViewRecord(str(vid), img, pose))
            else:
                missing += [str(p) for p in (img, pose) if not p.exists()]
        if missing:
            result.missing += missing
        if not views:
            continue

        def opt(name):
            p = fdir / name
            if p.exists():
                return p
            return None

        out.append(FrameRecord(
            frame_id=str(e["frame_id"]),
            views=views,
            hand_mesh_path=opt("hand.obj"),
            object_mesh_path=opt("object.obj"),
            mesh_frame=str(e.get("mesh_frame", views[0].view_id)),
            split=e.get("split", "test"),
            object_label=e.get("object_label", ""),
            hand_tsdf_path=opt("hand.tsdf"),
            object_tsdf_path=opt("object.tsdf"),
        ))
    return out


def _obman_frames(root: Path, result: LoadResult) -> list[FrameRecord]:
    out = []
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir() and (p / "rgb").is_dir()):
        for img in sorted((split_dir / "rgb").glob("*.png")):
            sid = img.stem
            meta = split_dir / "meta" / f"{sid}.json"
            if not meta.exists():
                result.missing.append(str(meta))
                continue
            label = json.loads(meta.read_text()).get("object_label", "")
            hand = split_dir / "mesh" / f"{sid}_hand.obj"
            obj = split_dir / "mesh" / f"{sid}_object.obj"
            for p in (hand, obj):
                if not p.exists():
                    result.missing.append(str(p))
            out.append(FrameRecord(
                frame_id=f"{split_dir.name}/{sid}",
                views=[ViewRecord("0", img, meta)],
                hand_mesh_path=hand if hand.exists() else None,
                object_mesh_path=obj if obj.exists() else None,
                mesh_frame="0",
                split=split_dir.name,
                object_label=label,
            ))
    return out


def load_manifest(root, fmt: str, max_contact_distance: float | None = 0.005,
                  splits: tuple[str, ...] | None = None) -> LoadResult:
    """List the frames under ``root``.

    For ``dexycb-style`` data with both meshes present, frames whose hand and
    object surfaces are farther apart than ``max_contact_distance`` metres are
    dropped (``None`` disables the filter).  Missing files are reported, not
    raised.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    root = Path(root)
    result = LoadResult()
    if not root.exists() or not any(root.iterdir()):
        log.warning("dataset root %s is empty", root)
        return result
    frames = _dexycb_frames(root, result) if fmt == "dexycb-style" else _obman_frames(root, result)
    if splits is not None:
        frames = [f for f in frames if f.split in splits]
    if fmt == "dexycb-style" and max_contact_distance is not None:
        kept = []
        for f in frames:
            if f.hand_mesh_path and f.object_mesh_path:
                d = min_surface_distance(read_obj(f.hand_mesh_path), read_obj(f.object_mesh_path))
                if d >= max_contact_distance:
                    result.filtered.append(f.frame_id)
                    continue
            kept.append(f)
        frames = kept
    for m in result.missing:
        log.warning("missing file: %s", m)
    result.frames = frames
    return result


# -- materialising a frame ----------------------------------------------------------

@dataclass
class LoadedFrame:
    record: FrameRecord
    views: list[CameraView]
    hand_mesh: Mesh | None  # canonical frame
    object_mesh: Mesh | None
    hand_tsdf: TsdfGrid | None
    object_tsdf: TsdfGrid | None

    @property
    def frame_id(self) -> str:
        return self.record.frame_id

    def view(self, view_id: str) -> CameraView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"frame {self.frame_id} has no view {view_id!r}")


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_frame(record: FrameRecord, spec: GridSpec | None = None, images: bool = True) -> LoadedFrame:
    """Read images, poses and meshes; meshes are returned in the hand-wrist frame.

    TSDFs come from the stored files when present, otherwise they are sampled
    from the canonical meshes on ``spec`` (when given).
    """
    views = []
    poses: dict[str, HandPose] = {}
    for v in record.views:
        pose, intr = read_pose_file(v.pose_path)
        poses[v.view_id] = pose
        views.append(CameraView(read_image(v.image_path) if images else None, intr, pose, v.view_id))
    ref = poses.get(record.mesh_frame or views[0].view_id)

    def canonical(path):
        if path is None:
            return None
        m = read_obj(path)
        return m.transformed(ref.rotation, ref.translation) if ref is not None else m

    hand, obj = canonical(record.hand_mesh_path), canonical(record.object_mesh_path)

    def tsdf(path, mesh):
        if path is not None:
            g = load_tsdf(path)
            if spec is None or g.spec == spec:
                return g
        if spec is not None and mesh is not None:
            return sample_tsdf_from_mesh(mesh, spec)
        return None

    return LoadedFrame(record, views, hand, obj,
                       tsdf(record.hand_tsdf_path, hand), tsdf(record.object_tsdf_path, obj))
