"""Single-view prediction of codebook-index probabilities on the latent grid.

An 18-layer residual image backbone gives a feature map; features are
gathered at the projections of the latent-cell centres and classified by a
3D convolutional head per shape class (hand, object).
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from . import checkpoint as ckpt
from .autoencoder import ShapeAutoencoder, encode_grid
from .camera import CameraIntrinsics, CameraView, HandPose, latent_cell_centers, project_points, sample_features_torch
from .codebook import HAND, OBJECT
from .fusion import ViewProbabilities
from .tsdf import GridSpec, TsdfGrid

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class AmbiguousEmptyCode(ValueError):
    pass


@dataclass(frozen=True)
class ClassWeights:
    empty_index: int
    empty_weight: float = 0.25
    other_weight: float = 0.75

    def __post_init__(self):
        if self.empty_weight <= 0 or self.other_weight <= 0:
            raise ValueError("class weights must be positive")
        if self.empty_index < 0:
            raise ValueError("empty_index must be non-negative")

    def vector(self, num_codes: int) -> np.ndarray:
        if self.empty_index >= num_codes:
            raise ValueError(f"empty_index {self.empty_index} out of range for K={num_codes}")
        w = np.full(num_codes, self.other_weight, dtype=np.float64)
        w[self.empty_index] = self.empty_weight
        return w


def identify_empty_index(model: ShapeAutoencoder) -> int:
    """Index of the code that an all-free-space grid encodes to."""
    _, cube = encode_grid(TsdfGrid.empty(model.spec), model)
    hist = Counter(int(i) for i in cube.reshape(-1))
    if len(hist) != 1:
        raise AmbiguousEmptyCode(f"free-space grid maps to several codes: {dict(sorted(hist.items()))}")
    return next(iter(hist))


def weighted_cross_entropy(probs, target, weights: ClassWeights) -> float:
    """Weighted mean of -log p(target) over cells, normalised by the applied weights."""
    p = np.asarray(probs.probs if isinstance(probs, ViewProbabilities) else probs, dtype=np.float64)
    z = np.asarray(target, dtype=np.int64)
    k = p.shape[-1]
    if p.shape[:-1] != z.shape:
        raise ValueError(f"probability cube {p.shape} does not match target {z.shape}")
    if z.min() < 0 or z.max() >= k:
        raise ValueError("target index out of range")
    w = weights.vector(k)[z]
    picked = np.take_along_axis(p, z[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        nll = -np.log(picked)
    return float((w * nll).sum() / w.sum())


def weighted_cross_entropy_logits(logits: torch.Tensor, target: torch.Tensor, weights: ClassWeights) -> torch.Tensor:
    """Training form of :func:`weighted_cross_entropy` on (B, n, n, n, K) logits."""
    k = logits.shape[-1]
    w = torch.as_tensor(weights.vector(k), dtype=logits.dtype)
    return F.cross_entropy(logits.reshape(-1, k), target.reshape(-1), weight=w)


# -- networks --------------------------------------------------------------------

class ImageEncoder(nn.Module):
    """ResNet-18 trunk; the four stage outputs are upsampled to stride 4,
    concatenated and reduced to ``feat_dim`` channels."""

    def __init__(self, feat_dim: int = 128):
        super().__init__()
        net = torchvision.models.resnet18(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.reduce = nn.Conv2d(64 + 128 + 256 + 512, feat_dim, kernel_size=1)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).reshape(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).reshape(1, 3, 1, 1))
        self.feat_dim = feat_dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.stem((images - self.mean) / self.std)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        size = feats[0].shape[-2:]
        up = [feats[0]] + [F.interpolate(f, size=size, mode="bilinear", align_corners=False) for f in feats[1:]]
        return self.reduce(torch.cat(up, dim=1))


class VolumeClassifier(nn.Module):
    def __init__(self, in_channels: int, num_codes: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(in_channels, hidden, 1),
            nn.LeakyReLU(0.2),
            nn.Conv3d(hidden, hidden, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv3d(hidden, hidden, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv3d(hidden, num_codes, 1),
        )

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        # (B, n, n, n, C) -> (B, n, n, n, K)
        return self.net(cube.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)


@dataclass
class PredictorConfig:
    feat_dim: int = 128
    hidden: int = 64
    samples_per_cell: int = 1
    append_coords: bool = True
    empty_weight: float = 0.25
    other_weight: float = 0.75
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class ViewPredictor(nn.Module):
    def __init__(self, spec: GridSpec, cells_per_axis: int, num_codes_hand: int, num_codes_object: int,
                 empty_hand: int, empty_object: int, config: PredictorConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.spec, self.cells, self.config = spec, cells_per_axis, config
        self.empty = {HAND: int(empty_hand), OBJECT: int(empty_object)}
        self.encoder = ImageEncoder(config.feat_dim)
        in_ch = config.feat_dim + (3 if config.append_coords else 0)
        self.hand_head = VolumeClassifier(in_ch, num_codes_hand, config.hidden)
        self.object_head = VolumeClassifier(in_ch, num_codes_object, config.hidden)
        centers = latent_cell_centers(spec, cells_per_axis, config.samples_per_cell)
        self._query = centers.reshape(-1, 3)
        n = cells_per_axis
        cell_mid = latent_cell_centers(spec, n, 1)[:, :, :, 0]
        coords = (cell_mid - spec.center) / spec.half_extent
        self.register_buffer("coords", torch.from_numpy(coords.astype(np.float32)), persistent=False)

    @property
    def num_codes(self) -> dict:
        return {HAND: self.hand_head.net[-1].out_channels, OBJECT: self.object_head.net[-1].out_channels}

    def projections(self, intr: CameraIntrinsics, pose: HandPose):
        uv, _, valid = project_points(self._query, intr, pose)
        return uv.astype(np.float32), valid

    def aligned_features(self, images: torch.Tensor, uv: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        fmap = self.encoder(images)
        feats = sample_features_torch(fmap, uv, valid, (images.shape[-1], images.shape[-2]))
        n, s3 = self.cells, self.config.samples_per_cell ** 3
        cube = feats.reshape(images.shape[0], n, n, n, s3, -1).mean(dim=4)
        if self.config.append_coords:
            cube = torch.cat([cube, self.coords[None].expand(cube.shape[0], -1, -1, -1, -1)], dim=-1)
        return cube

    def forward(self, images, uv, valid):
        cube = self.aligned_features(images, uv, valid)
        return self.hand_head(cube), self.object_head(cube)

    # -- persistence -------------------------------------------------------
    def save(self, directory):
        extra = {
            "grid_spec": self.spec.to_dict(),
            "cells_per_axis": self.cells,
            "num_codes": self.num_codes,
            "empty_index": self.empty,
            "config": asdict(self.config),
            "config_digest": self.config.digest(),
            "seed": self.config.seed,
        }
        groups = {"image_encoder": self.encoder, "hand_head": self.hand_head, "object_head": self.object_head}
        return ckpt.save_groups(directory, "predictor", groups, extra)

    @classmethod
    def load(cls, directory) -> "ViewPredictor":
        m = ckpt.read_manifest(directory)
        if m["kind"] != "predictor":
            raise ValueError(f"{directory} holds a {m['kind']!r} checkpoint, not a predictor")
        model = cls(
            GridSpec.from_dict(m["grid_spec"]), m["cells_per_axis"],
            m["num_codes"][HAND], m["num_codes"][OBJECT],
            m["empty_index"][HAND], m["empty_index"][OBJECT],
            PredictorConfig(**m["config"]),
        )
        for g, mod in (("image_encoder", model.encoder), ("hand_head", model.hand_head),
                       ("object_head", model.object_head)):
            ckpt.load_group(directory, m, g, mod)
        model.eval()
        return model


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)


@torch.no_grad()
def predict_view(view: CameraView, predictor: ViewPredictor) -> tuple[ViewProbabilities, ViewProbabilities]:
    """Per-cell softmax probabilities for hand and object from one view."""
    if view.image is None:
        raise ValueError("view has no image")
    if view.pose is None:
        raise ValueError("view has no hand pose")
    predictor.eval()
    uv, valid = predictor.projections(view.intrinsics, view.pose)
    img = _image_tensor(view.image)[None]
    lh, lo = predictor(img, torch.from_numpy(uv)[None], torch.from_numpy(valid)[None])
    ph = torch.softmax(lh[0].double(), dim=-1).numpy()
    po = torch.softmax(lo[0].double(), dim=-1).numpy()
    return ViewProbabilities(ph, HAND, view.view_id), ViewProbabilities(po, OBJECT, view.view_id)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainingSample:
    image_id: str
    image: np.ndarray
    intrinsics: CameraIntrinsics
    pose: HandPose
    hand: np.ndarray
    obj: np.ndarray


def argmax_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    return float((np.asarray(pred) == np.asarray(target)).mean())


def train_predictor(samples: list[TrainingSample], hand_model: ShapeAutoencoder, object_model: ShapeAutoencoder,
                    config: PredictorConfig, on_step=None):
    """Single-view training of the shared backbone and both heads.

    Samples are sorted by ``image_id`` before the seeded shuffle, so the input
    order does not affect the result.
    """
    if not samples:
        raise ValueError("no training samples")
    n = hand_model.pspec.patches_per_axis
    kh, ko = hand_model.codebook.num_codes, object_model.codebook.num_codes
    for s in samples:
        if s.hand.shape != (n, n, n) or s.obj.shape != (n, n, n):
            raise ValueError(f"latent cube shape mismatch for {s.image_id}")
        if s.hand.max() >= kh or s.obj.max() >= ko:
            raise ValueError(f"latent index exceeds codebook size for {s.image_id}")
    samples = sorted(samples, key=lambda s: s.image_id)
    empty_h, empty_o = identify_empty_index(hand_model), identify_empty_index(object_model)
    wh = ClassWeights(empty_h, config.empty_weight, config.other_weight)
    wo = ClassWeights(empty_o, config.empty_weight, config.other_weight)
    model = ViewPredictor(hand_model.spec, n, kh, ko, empty_h, empty_o, config)

    images = torch.stack([_image_tensor(s.image) for s in samples])
    proj = [model.projections(s.intrinsics, s.pose) for s in samples]
    uv = torch.from_numpy(np.stack([p[0] for p in proj]))
    valid = torch.from_numpy(np.stack([p[1] for p in proj]))
    zh = torch.from_numpy(np.stack([s.hand for s in samples]))
    zo = torch.from_numpy(np.stack([s.obj for s in samples]))

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    records, step = [], 0
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        for s in range(0, len(order), config.batch_size):
            b = torch.from_numpy(order[s:s + config.batch_size])
            if len(b) < 2:  # batch norm needs more than one sample
                continue
            lh, lo = model(images[b], uv[b], valid[b])
            loss_h = weighted_cross_entropy_logits(lh, zh[b], wh)
            loss_o = weighted_cross_entropy_logits(lo, zo[b], wo)
            loss = loss_h + loss_o
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite predictor loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec = {
                "step": step,
                "epoch": epoch,
                "loss": float(loss.item()),
                "loss_hand": float(loss_h.item()),
                "loss_object": float(loss_o.item()),
            }
            records.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
    model.eval()
    return model, records
