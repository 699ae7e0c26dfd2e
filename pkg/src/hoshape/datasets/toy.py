"""Procedural hand-object scenes with a calibrated camera ring.

The hand proxy is a set of capsules (palm and curled fingers) in the
hand-wrist frame; one primitive object rests against the palm.  Cameras sit
on a ring around the wrist and look at it.  Everything is deterministic in
``(seed, index)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from ..camera import CameraIntrinsics, CameraView, HandPose, write_pose_file
from ..mesh import Mesh, write_obj
from ..tsdf import GridSpec, TsdfGrid, extract_mesh, save_tsdf
from .primitives import Box, Capsule, Cylinder, Sphere, union_sdf

FAMILIES = ("sphere", "box", "cylinder")

HAND_COLOR = np.array([0.85, 0.62, 0.50])
PALETTE = np.array([
    [0.90, 0.20, 0.15], [0.15, 0.45, 0.85], [0.20, 0.70, 0.25], [0.95, 0.80, 0.10],
    [0.60, 0.25, 0.75], [0.10, 0.75, 0.75], [0.95, 0.50, 0.10], [0.35, 0.35, 0.35],
])


@dataclass
class ToySceneConfig:
    seed: int = 0
    families: tuple[str, ...] = FAMILIES
    sphere_radius: tuple[float, float] = (0.022, 0.038)
    box_half: tuple[float, float] = (0.014, 0.032)
    cylinder_radius: tuple[float, float] = (0.014, 0.026)
    cylinder_half_height: tuple[float, float] = (0.020, 0.035)
    hand_scale: tuple[float, float] = (0.92, 1.05)
    num_cameras: int = 8
    ring_radius: float = 0.45
    image_size: int = 64
    focal: float = 95.0
    clutter_count: int = 3
    grid: dict = field(default_factory=lambda: {"resolution": 32, "half_extent": 0.12, "truncation": 0.03})
    gt_mesh_resolution: int = 64

    def __post_init__(self):
        if self.num_cameras < 1:
            raise ValueError("need at least one camera")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown primitive families {sorted(unknown)}")

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(**self.grid)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySceneConfig":
        d = dict(d)
        for k in ("families", "sphere_radius", "box_half", "cylinder_radius", "cylinder_half_height", "hand_scale"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ToyScene:
    frame_id: str
    index: int
    family: str
    spec: GridSpec
    hand_parts: list  # canonical frame
    object_part: object  # canonical frame
    clutter: list  # world frame, with colours
    object_color: np.ndarray
    background: np.ndarray
    hand_to_world: tuple[np.ndarray, np.ndarray]
    views: list[CameraView]
    hand_tsdf: TsdfGrid
    object_tsdf: TsdfGrid
    hand_mesh: Mesh  # canonical frame
    object_mesh: Mesh

    def hand_sdf(self, p):
        return union_sdf(self.hand_parts, p)

    def object_sdf(self, p):
        return self.object_part.sdf(p)


# -- geometry -------------------------------------------------------------------

def _hand_parts(rng: np.random.Generator, cfg: ToySceneConfig) -> list:
    s = rng.uniform(*cfg.hand_scale)
    parts = []
    palm_r = 0.011 * s
    for y in (-0.018, 0.0, 0.018):
        parts.append(Capsule(np.array([0.0, y * s, 0.0]), np.array([0.052 * s, y * 1.2 * s, 0.0]), palm_r))
    for y in (-0.024, -0.008, 0.008, 0.024):
        base = np.array([0.056 * s, y * s, 0.0])
        c1 = np.deg2rad(rng.uniform(25, 60))
        c2 = c1 + np.deg2rad(rng.uniform(20, 55))
        l1, l2 = 0.026 * s, 0.020 * s
        mid = base + l1 * np.array([np.cos(c1), 0.0, np.sin(c1)])
        tip = mid + l2 * np.array([np.cos(c2), 0.0, np.sin(c2)])
        parts += [Capsule(base, mid, 0.0075 * s), Capsule(mid, tip, 0.0068 * s)]
    # thumb
    a = np.deg2rad(rng.uniform(30, 60))
    base = np.array([0.012 * s, 0.026 * s, 0.0])
    mid = base + 0.028 * s * np.array([np.cos(a), np.sin(a) * 0.6, 0.5])
    tip = mid + 0.022 * s * np.array([0.7, -0.3, 0.8]) / np.linalg.norm([0.7, -0.3, 0.8])
    parts += [Capsule(base, mid, 0.0085 * s), Capsule(mid, tip, 0.0075 * s)]
    return parts


def _object(rng: np.random.Generator, cfg: ToySceneConfig, family: str, palm_top: float):
    gap = rng.uniform(-0.002, 0.003)
    cx, cy = rng.uniform(0.022, 0.042), rng.uniform(-0.010, 0.010)
    if family == "sphere":
        r = rng.uniform(*cfg.sphere_radius)
        return Sphere(np.array([cx, cy, palm_top + r + gap]), r)
    if family == "box":
        h = rng.uniform(*cfg.box_half, size=3)
        yaw = rng.uniform(0, np.pi)
        rot = Rotation.from_euler("z", yaw).as_matrix()
        return Box(np.array([cx, cy, palm_top + h[2] + gap]), rot, h)
    r = rng.uniform(*cfg.cylinder_radius)
    hh = rng.uniform(*cfg.cylinder_half_height)
    yaw = rng.uniform(0, np.pi)
    axis = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    return Cylinder(np.array([cx, cy, palm_top + r + gap]), axis, r, hh)


def _fits(prim, spec: GridSpec) -> bool:
    radius, center = prim.bounding_radius()
    margin = spec.half_extent - spec.voxel_size
    return bool(np.all(np.abs(center - spec.center) + radius <= margin))


def _look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation for an OpenCV camera (x right, y down, z forward)."""
    z = target - eye
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _draw_family(rng: np.random.Generator, cfg: ToySceneConfig) -> str:
    return cfg.families[int(rng.integers(len(cfg.families)))]


def scene_family(cfg: ToySceneConfig, index: int) -> str:
    """Primitive family of scene ``index`` without building the scene (it is the first draw)."""
    return _draw_family(np.random.default_rng([cfg.seed, index]), cfg)


def generate_toy_scene(cfg: ToySceneConfig, index: int) -> ToyScene:
    rng = np.random.default_rng([cfg.seed, index])
    spec = cfg.grid_spec
    family = _draw_family(rng, cfg)
    hand = _hand_parts(rng, cfg)
    palm_top = hand[0].radius
    for _ in range(100):
        obj = _object(rng, cfg, family, palm_top)
        if _fits(obj, spec):
            break
    else:
        raise RuntimeError("could not place an object inside the canonical cube")

    # hand placement in the world
    r_h = Rotation.from_euler("zyx", [rng.uniform(0, 2 * np.pi), rng.uniform(-0.5, 0.5),
                                      rng.uniform(-0.5, 0.5)]).as_matrix()
    t_h = rng.uniform(-0.02, 0.02, size=3)

    clutter = []
    for _ in range(cfg.clutter_count):
        az = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.24, 0.32)
        c = np.array([rad * np.cos(az), rad * np.sin(az), rng.uniform(-0.08, 0.08)])
        color = PALETTE[int(rng.integers(len(PALETTE)))]
        if rng.random() < 0.5:
            clutter.append((Sphere(c, rng.uniform(0.02, 0.05)), color))
        else:
            rot = Rotation.from_euler("z", rng.uniform(0, np.pi)).as_matrix()
            clutter.append((Box(c, rot, rng.uniform(0.015, 0.045, size=3)), color))
    object_color = PALETTE[int(rng.integers(len(PALETTE)))]
    background = rng.uniform(0.15, 0.65, size=3)

    intr = CameraIntrinsics(cfg.focal, cfg.focal, cfg.image_size / 2, cfg.image_size / 2,
                            cfg.image_size, cfg.image_size)
    views = []
    az0 = rng.uniform(0, 2 * np.pi)
    for k in range(cfg.num_cameras):
        az = az0 + 2 * np.pi * k / cfg.num_cameras + rng.uniform(-0.15, 0.15)
        el = (0.25 if k % 2 == 0 else 0.55) + rng.uniform(-0.08, 0.08)
        eye = t_h + cfg.ring_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        r_wc = _look_at(eye, t_h)
        # camera -> world -> hand-wrist
        pose = HandPose(r_h.T @ r_wc, r_h.T @ (eye - t_h))
        views.append(CameraView(None, intr, pose, str(k)))

    hand_tsdf = TsdfGrid.from_sdf(spec, lambda p: union_sdf(hand, p))
    object_tsdf = TsdfGrid.from_sdf(spec, obj.sdf)
    fine = GridSpec(cfg.gt_mesh_resolution, spec.half_extent, spec.truncation, spec.origin)
    hand_mesh = extract_mesh(TsdfGrid.from_sdf(fine, lambda p: union_sdf(hand, p)))
    object_mesh = extract_mesh(TsdfGrid.from_sdf(fine, obj.sdf))
    scene = ToyScene(
        frame_id=f"{index:06d}", index=index, family=family, spec=spec,
        hand_parts=hand, object_part=obj, clutter=clutter, object_color=object_color,
        background=background, hand_to_world=(r_h, t_h), views=views,
        hand_tsdf=hand_tsdf, object_tsdf=object_tsdf, hand_mesh=hand_mesh, object_mesh=object_mesh,
    )
    return scene


# -- rendering --------------------------------------------------------------------

def render_toy_views(scene: ToyScene) -> list[np.ndarray]:
    """Ray-cast the analytic scene into every camera; flat colours with headlight shading."""
    r_h, t_h = scene.hand_to_world
    world = [(p.transformed(r_h, t_h), HAND_COLOR) for p in scene.hand_parts]
    world.append((scene.object_part.transformed(r_h, t_h), scene.object_color))
    world += scene.clutter
    images = []
    for view in scene.views:
        intr = view.intrinsics
        # camera -> world: x_w = R_h (R_pi x_c + t_pi) + t_h
        r_cw = r_h @ view.pose.rotation
        eye = r_h @ view.pose.translation + t_h
        us, vs = np.meshgrid(np.arange(intr.width) + 0.5, np.arange(intr.height) + 0.5)
        d_cam = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], -1).reshape(-1, 3)
        rd = d_cam @ r_cw.T
        rd /= np.linalg.norm(rd, axis=1, keepdims=True)
        ro = np.broadcast_to(eye, rd.shape)
        best = np.full(len(rd), np.inf)
        color = np.broadcast_to(scene.background, rd.shape).copy()
        for prim, col in world:
            t, n = prim.intersect(ro, rd)
            closer = t < best
            if closer.any():
                shade = 0.35 + 0.65 * np.abs(np.einsum("ij,ij->i", n, rd))
                color[closer] = col[None] * shade[closer, None]
                best = np.where(closer, t, best)
        images.append(np.clip(color.reshape(intr.height, intr.width, 3), 0, 1))
    return images


# -- on-disk layout ----------------------------------------------------------------

def write_scene(scene: ToyScene, root, split: str, images=None) -> dict:
    """Write one frame in the multi-view layout read by ``load_manifest(..., 'dexycb-style')``.

    Ground-truth meshes are stored in the camera frame of view ``0``.
    """
    root = Path(root)
    fdir = root / "frames" / scene.frame_id
    fdir.mkdir(parents=True, exist_ok=True)
    images = images if images is not None else render_toy_views(scene)
    for view, img in zip(scene.views, images):
        vdir = fdir / f"view_{view.view_id}"
        vdir.mkdir(exist_ok=True)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(vdir / "color.png")
        write_pose_file(vdir / "pose.json", view.pose, view.intrinsics)
    ref = scene.views[0].pose.inverse()
    write_obj(scene.hand_mesh.transformed(ref.rotation, ref.translation), fdir / "hand.obj")
    write_obj(scene.object_mesh.transformed(ref.rotation, ref.translation), fdir / "object.obj")
    save_tsdf(scene.hand_tsdf, fdir / "hand.tsdf")
    save_tsdf(scene.object_tsdf, fdir / "object.tsdf")
    entry = {
        "frame_id": scene.frame_id,
        "split": split,
        "object_label": scene.family,
        "mesh_frame": scene.views[0].view_id,
        "views": [v.view_id for v in scene.views],
    }
    (fdir / "frame.json").write_text(json.dumps(entry, sort_keys=True) + "\n")
    return entry


def write_toy_dataset(root, cfg: ToySceneConfig, n_train: int, n_test: int, force: bool = False) -> Path:
    """Generate ``n_train + n_test`` scenes; existing frames are kept unless ``force``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for index in range(n_train + n_test):
        split = "train" if index < n_train else "test"
        fdir = root / "frames" / f"{index:06d}"
        if not force and (fdir / "frame.json").exists():
            entry = json.loads((fdir / "frame.json").read_text())
            if entry.get("split") == split:
                lines.append(json.dumps(entry, sort_keys=True))
                continue
        scene = generate_toy_scene(cfg, index)
        lines.append(json.dumps(write_scene(scene, root, split), sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (root / "toy_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return root
