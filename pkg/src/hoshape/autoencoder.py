"""Patchwise VQ autoencoder for TSDF volumes.

A grid is cut into patches, each patch is encoded on its own to one latent
vector, vectors are snapped to a shared codebook, mixed across neighbouring
patches, and decoded point-wise by an MLP that reads the code trilinearly
interpolated at the query position.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .codebook import (
    SHAPE_CLASSES,
    Codebook,
    lookup,
    quantize_codes,
    restart_unused,
    straight_through,
    vq_losses,
)
from .tsdf import GridSpec, PatchSpec, TsdfGrid, split_into_patches

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AEConfig:
    num_codes: int = 512
    code_dim: int = 128
    encoder_widths: tuple[int, ...] = (32, 64, 128)
    decoder_hidden: int = 512
    beta: float = 0.25
    learning_rate: float = 1e-4
    steps: int = 2000
    batch_size: int = 4
    points_per_shape: int = 2048
    near_surface_voxels: float = 2.0
    recon_norm: str = "l1"
    lr_schedule: str = "constant"
    decoder_activation: str = "relu"
    # sin/cos bands of the query position fed to the decoder next to p; 0 disables
    decoder_frequencies: int = 0
    seed: int = 0

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        d = dict(d)
        if "encoder_widths" in d:
            d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


class PatchEncoder(nn.Module):
    """Stride-2 3D convolutions reducing one r^3 patch to a single V-vector."""

    def __init__(self, patch_resolution: int, code_dim: int, widths=(32, 64, 128)):
        super().__init__()
        stages = int(round(math.log2(patch_resolution)))
        if 2 ** stages != patch_resolution or stages < 1:
            raise ValueError("patch resolution must be a power of two >= 2")
        chans = [1] + [widths[min(i, len(widths) - 1)] for i in range(stages - 1)] + [code_dim]
        layers: list[nn.Module] = []
        for i in range(stages):
            layers.append(nn.Conv3d(chans[i], chans[i + 1], kernel_size=4, stride=2, padding=1))
            if i < stages - 1:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)
        self.code_dim = code_dim

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # (N, r, r, r) -> (N, V)
        return self.net(patches[:, None]).reshape(patches.shape[0], self.code_dim)


class CodeMixer(nn.Module):
    """Two 3x3x3 convolutions over the latent cube, residual, shape-preserving."""

    def __init__(self, code_dim: int):
        super().__init__()
        self.conv1 = nn.Conv3d(code_dim, code_dim, 3, padding=1)
        self.conv2 = nn.Conv3d(code_dim, code_dim, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        # (B, n, n, n, V) -> (B, n, n, n, V)
        x = cube.permute(0, 4, 1, 2, 3)
        x = x + self.conv2(self.act(self.conv1(x)))
        return x.permute(0, 2, 3, 4, 1)


class SdfDecoder(nn.Module):
    """5-layer MLP: (code, position in [-1, 1]^3) -> SDF in units of the truncation."""

    num_layers = 5

    def __init__(self, code_dim: int, hidden: int = 512, activation: str = "relu", frequencies: int = 0):
        super().__init__()
        act = {"relu": nn.ReLU, "softplus": lambda: nn.Softplus(beta=100)}[activation]
        self.frequencies = int(frequencies)
        dims = [code_dim + 3 + 6 * self.frequencies] + [hidden] * (self.num_layers - 1) + [1]
        layers: list[nn.Module] = []
        for i in range(self.num_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < self.num_layers - 1:
                layers.append(act())
        self.net = nn.Sequential(*layers)
        self.code_dim = code_dim

    def encode_position(self, points: torch.Tensor) -> torch.Tensor:
        if not self.frequencies:
            return points
        scales = math.pi * 2.0 ** torch.arange(self.frequencies, dtype=points.dtype)
        ang = (points[..., None] * scales).flatten(-2)
        return torch.cat([points, torch.sin(ang), torch.cos(ang)], dim=-1)

    def forward(self, codes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([codes, self.encode_position(points)], dim=-1))[..., 0]


class ShapeAutoencoder(nn.Module):
    def __init__(self, spec: GridSpec, pspec: PatchSpec, config: AEConfig, shape_class: str):
        super().__init__()
        pspec.check(spec)
        if shape_class not in SHAPE_CLASSES:
            raise ValueError(f"shape_class must be one of {SHAPE_CLASSES}")
        self.spec, self.pspec, self.config, self.shape_class = spec, pspec, config, shape_class
        torch.manual_seed(config.seed)
        self.encoder = PatchEncoder(pspec.patch_resolution, config.code_dim, config.encoder_widths)
        self.mixer = CodeMixer(config.code_dim)
        self.decoder = SdfDecoder(config.code_dim, config.decoder_hidden, config.decoder_activation,
                                  config.decoder_frequencies)
        self.codebook = Codebook(config.num_codes, config.code_dim, seed=config.seed)

    # -- forward pieces ------------------------------------------------------
    def normalize_points(self, points: torch.Tensor) -> torch.Tensor:
        center = torch.as_tensor(self.spec.center, dtype=points.dtype)
        return (points - center) / self.spec.half_extent

    def encode_batch(self, values: torch.Tensor) -> torch.Tensor:
        """(B, R, R, R) TSDF in metres -> (B, n, n, n, V) continuous codes."""
        n, r = self.pspec.patches_per_axis, self.pspec.patch_resolution
        b = values.shape[0]
        x = values / self.spec.truncation
        x = x.reshape(b, n, r, n, r, n, r).permute(0, 1, 3, 5, 2, 4, 6).reshape(b * n ** 3, r, r, r)
        return self.encoder(x).reshape(b, n, n, n, -1)

    def decode_points(self, mixed: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        """mixed (B, n, n, n, V), points (B, M, 3) metres -> (B, M) SDF / truncation."""
        codes, _ = query_latent_batch(mixed, points, self.spec)
        return self.decoder(codes, self.normalize_points(points))

    # -- persistence ---------------------------------------------------------
    def save(self, directory) -> Path:
        extra = {
            "architecture": {
                "num_codes": self.config.num_codes,
                "code_dim": self.config.code_dim,
                "encoder_widths": list(self.config.encoder_widths),
                "decoder_hidden": self.config.decoder_hidden,
                "decoder_layers": SdfDecoder.num_layers,
                "decoder_frequencies": self.config.decoder_frequencies,
            },
            "grid_spec": self.spec.to_dict(),
            "patch_spec": self.pspec.to_dict(),
            "shape_class": self.shape_class,
            "seed": self.config.seed,
            "config": asdict(self.config),
            "config_digest": self.config.digest(),
            "codebook": self.codebook.metadata(),
        }
        groups = {
            "encoder": self.encoder,
            "mixer": self.mixer,
            "decoder": self.decoder,
            "codebook": self.codebook,
        }
        return ckpt.save_groups(directory, "autoencoder", groups, extra)

    @classmethod
    def load(cls, directory) -> "ShapeAutoencoder":
        manifest = ckpt.read_manifest(directory)
        if manifest["kind"] != "autoencoder":
            raise ValueError(f"{directory} holds a {manifest['kind']!r} checkpoint, not an autoencoder")
        model = cls(
            GridSpec.from_dict(manifest["grid_spec"]),
            PatchSpec.from_dict(manifest["patch_spec"]),
            AEConfig.from_dict(manifest["config"]),
            manifest["shape_class"],
        )
        for g in ("encoder", "mixer", "decoder", "codebook"):
            ckpt.load_group(directory, manifest, g, getattr(model, g))
        model.codebook.load_metadata(manifest["codebook"])
        model.eval()
        return model


# -- latent interpolation ------------------------------------------------------

def query_latent_batch(mixed: torch.Tensor, points: torch.Tensor, spec: GridSpec):
    """Trilinear interpolation of an (B, n, n, n, V) code grid at (B, M, 3) points.

    Codes sit at latent-cell centres; points beyond the outermost centres take
    the edge value, and points outside the cube are clamped to it (reported in
    the returned mask).  At a voxel centre this equals the entry of the code
    grid upsampled to full resolution.
    """
    b, n = mixed.shape[0], mixed.shape[1]
    v = mixed.shape[-1]
    origin = torch.as_tensor(spec.origin, dtype=points.dtype)
    lo, hi = origin, origin + 2 * spec.half_extent
    outside = ((points < lo) | (points > hi)).any(-1)
    p = torch.minimum(torch.maximum(points, lo), hi)
    cell = 2 * spec.half_extent / n
    u = ((p - origin) / cell - 0.5).clamp(0, n - 1)
    if n == 1:
        return mixed.reshape(b, 1, v).expand(b, points.shape[1], v), outside
    i0 = u.floor().clamp(max=n - 2).long()
    f = u - i0
    flat = mixed.reshape(b, n ** 3, v)
    out = 0
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1 - f[..., 2]
                lin = ((i0[..., 0] + dx) * n + (i0[..., 1] + dy)) * n + (i0[..., 2] + dz)
                g = torch.gather(flat, 1, lin[..., None].expand(-1, -1, v))
                out = out + (wx * wy * wz)[..., None] * g
    return out, outside


def query_latent(mixed, p, spec: GridSpec, pspec: PatchSpec | None = None):
    """Code vector at one canonical point ``p`` from an (n, n, n, V) mixed cube.

    Returns ``(code, clamped)`` where ``clamped`` flags a point outside the cube.
    """
    mixed = torch.as_tensor(np.asarray(mixed) if not isinstance(mixed, torch.Tensor) else mixed)
    if pspec is not None and mixed.shape[0] != pspec.patches_per_axis:
        raise ValueError("latent cube does not match the patch spec")
    pts = torch.as_tensor(np.asarray(p, dtype=np.float64), dtype=mixed.dtype).reshape(1, 1, 3)
    codes, outside = query_latent_batch(mixed[None], pts, spec)
    return codes[0, 0], bool(outside[0, 0])


# -- encode / decode -------------------------------------------------------------

@torch.no_grad()
def encode_grid(grid: TsdfGrid, model: ShapeAutoencoder, track_usage: bool = False):
    """TSDF -> (continuous (n, n, n, V) cube, integer (n, n, n) index cube)."""
    if grid.spec != model.spec:
        raise ValueError(f"grid spec {grid.spec} does not match the model's {model.spec}")
    model.eval()
    z = model.encode_batch(torch.from_numpy(grid.values)[None])[0]
    idx = quantize_codes(z, model.codebook, track_usage=track_usage)
    return z.numpy(), idx.numpy().astype(np.int64)


def decode_sdf(e, p, decoder: SdfDecoder, spec: GridSpec) -> float:
    """Decoder output in metres for one code ``e`` and canonical point ``p``."""
    e = torch.as_tensor(np.asarray(e, dtype=np.float32)).reshape(-1)
    if e.shape[0] != decoder.code_dim:
        raise ValueError(f"expected a {decoder.code_dim}-vector code, got {e.shape[0]}")
    p = torch.as_tensor(np.asarray(p, dtype=np.float32)).reshape(3)
    pn = (p - torch.as_tensor(spec.center, dtype=torch.float32)) / spec.half_extent
    with torch.no_grad():
        s = decoder(e[None], pn[None])[0]
    return float(s) * spec.truncation


@torch.no_grad()
def mixed_codes(indices, model: ShapeAutoencoder) -> torch.Tensor:
    return model.mixer(lookup(indices, model.codebook)[None])[0]


@torch.no_grad()
def decode_grid(indices, model: ShapeAutoencoder, chunk: int = 65536) -> TsdfGrid:
    """Evaluate the decoder at every voxel centre of the model's grid."""
    model.eval()
    spec = model.spec
    n = model.pspec.patches_per_axis
    indices = np.asarray(indices)
    if indices.shape != (n, n, n):
        raise ValueError(f"expected an {n}^3 index cube, got {indices.shape}")
    mixed = mixed_codes(indices, model)[None]
    pts = torch.from_numpy(spec.voxel_centers().reshape(1, -1, 3).astype(np.float32))
    out = torch.empty(pts.shape[1])
    for s in range(0, pts.shape[1], chunk):
        out[s:s + chunk] = model.decode_points(mixed, pts[:, s:s + chunk])[0]
    values = (out.clamp(-1, 1) * spec.truncation).numpy().reshape((spec.resolution,) * 3)
    return TsdfGrid(spec, values)


def reconstruct_grid(grid: TsdfGrid, model: ShapeAutoencoder) -> TsdfGrid:
    _, idx = encode_grid(grid, model)
    return decode_grid(idx, model)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ShapeAutoencoder
    log: list[dict] = field(default_factory=list)


def _sample_points(values: np.ndarray, spec: GridSpec, count: int, near_voxels: float,
                   rng: np.random.Generator):
    """Voxel-centre query points: half uniform, half within ``near_voxels`` of the surface."""
    flat = values.reshape(-1)
    n_uniform = count // 2
    uniform = rng.integers(0, flat.size, size=n_uniform)
    near_pool = np.nonzero(np.abs(flat) < near_voxels * spec.voxel_size)[0]
    if len(near_pool):
        near = near_pool[rng.integers(0, len(near_pool), size=count - n_uniform)]
    else:
        near = rng.integers(0, flat.size, size=count - n_uniform)
    ids = np.concatenate([uniform, near])
    r = spec.resolution
    ijk = np.stack(np.unravel_index(ids, (r, r, r)), axis=-1)
    pts = np.asarray(spec.origin) + (ijk + 0.5) * spec.voxel_size
    return pts.astype(np.float32), flat[ids].astype(np.float32)


def train_autoencoder(grids: list[TsdfGrid], config: AEConfig, shape_class: str,
                      pspec: PatchSpec, on_step=None) -> TrainResult:
    """Optimise reconstruction + codebook + commitment terms with Adam.

    Logs one record per step; raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    if not grids:
        raise ValueError("empty training set")
    spec = grids[0].spec
    if any(g.spec != spec for g in grids):
        raise ValueError("all training grids must share one GridSpec")
    model = ShapeAutoencoder(spec, pspec, config, shape_class)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = None
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.steps, 1))
    elif config.lr_schedule != "constant":
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}")
    rng = np.random.default_rng(config.seed)
    data = np.stack([g.values for g in grids])
    order: list[int] = []
    records = []
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order += list(rng.permutation(len(grids)))
        batch, order = order[:config.batch_size], order[config.batch_size:]
        values = torch.from_numpy(data[batch])
        samples = [
            _sample_points(data[i], spec, config.points_per_shape, config.near_surface_voxels, rng)
            for i in batch
        ]
        pts = torch.from_numpy(np.stack([s[0] for s in samples]))
        target = torch.from_numpy(np.stack([s[1] for s in samples])) / spec.truncation

        z_e = model.encode_batch(values)
        if not torch.isfinite(z_e).all():
            raise TrainingDiverged(f"non-finite encoder output at step {step} (batch shapes {batch})")
        idx = quantize_codes(z_e, model.codebook)
        codes = model.codebook.entries[idx]
        vq_term, commit_term = vq_losses(z_e, codes, config.beta)
        z_q = straight_through(z_e, codes)
        pred = model.decode_points(model.mixer(z_q), pts)
        if config.recon_norm == "l1":
            recon = (pred - target).abs().mean()
        else:
            recon = ((pred - target) ** 2).mean()
        loss = recon + vq_term + commit_term
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: recon={recon.item()} vq={vq_term.item()} "
                f"commit={commit_term.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        event = restart_unused(model.codebook, z_e.detach(), rng_seed=config.seed * 1_000_003 + step)
        rec = {
            "step": step,
            "loss": float(loss.item()),
            "recon": float(recon.item()),
            "vq": float(vq_term.item()),
            "commit": float(commit_term.item()),
            "codes_used": int(torch.unique(idx).numel()),
        }
        if event is not None:
            rec["restart_replaced"] = len(event.replaced)
            rec["next_restart_interval"] = event.next_interval
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if step % 100 == 0:
            log.debug("ae step %d loss %.5f", step, rec["loss"])
    model.eval()
    return TrainResult(model, records)


# -- latent extraction -------------------------------------------------------------

@dataclass
class LatentRecord:
    image_id: str
    frame_id: str
    view_id: str
    hand: np.ndarray
    obj: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray


def extract_latents(frames, hand_model: ShapeAutoencoder, object_model: ShapeAutoencoder):
    """One record per (frame, view) pairing the image with both index cubes and its pose.

    ``frames`` yields objects with ``frame_id``, ``views`` (each with ``view_id``,
    ``pose``) and ``hand_tsdf`` / ``object_tsdf``.  Views without a pose are
    skipped and counted.
    """
    records, skipped = [], 0
    for frame in frames:
        _, zh = encode_grid(frame.hand_tsdf, hand_model)
        _, zo = encode_grid(frame.object_tsdf, object_model)
        for view in frame.views:
            if view.pose is None:
                skipped += 1
                continue
            records.append(LatentRecord(
                image_id=f"{frame.frame_id}/{view.view_id}",
                frame_id=frame.frame_id,
                view_id=view.view_id,
                hand=zh,
                obj=zo,
                rotation=view.pose.rotation,
                translation=view.pose.translation,
            ))
    if skipped:
        log.warning("skipped %d views without a hand pose", skipped)
    return records, skipped


def write_latent_dataset(records: list[LatentRecord], directory) -> Path:
    """JSON-lines index plus one binary file per record holding two uint16 cubes (hand, object)."""
    directory = Path(directory)
    (directory / "cubes").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, r in enumerate(records):
        fname = f"cubes/{i:06d}.u16"
        blob = np.concatenate([r.hand.reshape(-1), r.obj.reshape(-1)]).astype("<u2")
        (directory / fname).write_bytes(blob.tobytes())
        lines.append(json.dumps({
            "image_id": r.image_id,
            "frame_id": r.frame_id,
            "view_id": r.view_id,
            "cube_file": fname,
            "cells_per_axis": int(r.hand.shape[0]),
            "R": [float(x) for x in np.asarray(r.rotation).reshape(-1)],
            "t": [float(x) for x in np.asarray(r.translation).reshape(-1)],
        }, sort_keys=True))
    (directory / "index.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return directory


def read_latent_dataset(directory) -> list[LatentRecord]:
    directory = Path(directory)
    out = []
    for line in (directory / "index.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        n = d["cells_per_axis"]
        blob = np.frombuffer((directory / d["cube_file"]).read_bytes(), dtype="<u2").astype(np.int64)
        out.append(LatentRecord(
            image_id=d["image_id"],
            frame_id=d["frame_id"],
            view_id=d["view_id"],
            hand=blob[:n ** 3].reshape(n, n, n),
            obj=blob[n ** 3:].reshape(n, n, n),
            rotation=np.array(d["R"]).reshape(3, 3),
            translation=np.array(d["t"]),
        ))
    return out
