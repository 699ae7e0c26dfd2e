"""End-to-end reconstruction from a set of views and the view-count evaluation protocol."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autoencoder import ShapeAutoencoder, decode_grid
from .camera import CameraView
from .codebook import HAND, OBJECT
from .fusion import FusedPrediction, ViewProbabilities, fuse_and_select
from .mesh import Mesh, write_obj
from .metrics import MetricConfig, align_with_hand_pose, score_meshes
from .predictor import ViewPredictor, predict_view
from .tsdf import extract_mesh

log = logging.getLogger(__name__)


@dataclass
class ViewSet:
    views: list[CameraView]
    selected: list[str] | None = None

    def __post_init__(self):
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("view ids must be unique")
        if self.selected is None:
            self.selected = ids
        unknown = [s for s in self.selected if s not in ids]
        if unknown:
            raise ValueError(f"unknown view ids {unknown}")
        if not self.selected:
            raise ValueError("no views selected")

    def chosen(self) -> list[CameraView]:
        by_id = {v.view_id: v for v in self.views}
        return [by_id[s] for s in self.selected]


@dataclass
class Reconstruction:
    hand_mesh: Mesh
    object_mesh: Mesh
    hand: FusedPrediction
    obj: FusedPrediction

    def sidecar(self) -> dict:
        return {
            "view_ids": self.hand.view_ids,
            "hand": {"shape_class": HAND, "entropy": self.hand.entropy_summary(),
                     "empty_mesh": self.hand_mesh.is_empty},
            "object": {"shape_class": OBJECT, "entropy": self.obj.entropy_summary(),
                       "empty_mesh": self.object_mesh.is_empty},
        }

    def write(self, directory) -> dict[str, str]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "hand_mesh": directory / "hand.obj",
            "object_mesh": directory / "object.obj",
            "sidecar": directory / "reconstruction.json",
        }
        write_obj(self.hand_mesh, paths["hand_mesh"])
        write_obj(self.object_mesh, paths["object_mesh"])
        paths["sidecar"].write_text(json.dumps(self.sidecar(), indent=1, sort_keys=True) + "\n")
        return {k: str(v) for k, v in paths.items()}


class Decoder:
    """Index cube -> mesh, memoised on the cube contents."""

    def __init__(self, model: ShapeAutoencoder):
        self.model = model
        self._cache: dict[bytes, Mesh] = {}

    def __call__(self, indices: np.ndarray) -> Mesh:
        key = hashlib.sha1(np.ascontiguousarray(indices, dtype=np.int64).tobytes()).digest()
        if key not in self._cache:
            self._cache[key] = extract_mesh(decode_grid(indices, self.model), 0.0)
        return self._cache[key]


def predict_views(views: list[CameraView], predictor: ViewPredictor):
    out = {}
    for v in views:
        out[v.view_id] = predict_view(v, predictor)
    return out


def fuse_predictions(per_view: dict, selected: list[str]) -> tuple[FusedPrediction, FusedPrediction]:
    hand = fuse_and_select(per_view[s][0] for s in selected)
    obj = fuse_and_select(per_view[s][1] for s in selected)
    return hand, obj


def reconstruct(views: ViewSet, predictor: ViewPredictor, hand_model: ShapeAutoencoder,
                object_model: ShapeAutoencoder, decoders: tuple[Decoder, Decoder] | None = None) -> Reconstruction:
    """Predict each selected view, average probabilities, take the argmax cube, decode and mesh."""
    chosen = views.chosen()
    per_view = predict_views(chosen, predictor)
    hand, obj = fuse_predictions(per_view, [v.view_id for v in chosen])
    dh, do = decoders or (Decoder(hand_model), Decoder(object_model))
    return Reconstruction(dh(hand.indices), do(obj.indices), hand, obj)


# -- evaluation protocol --------------------------------------------------------------

@dataclass
class EvalRow:
    view_count: int
    repetition: int
    frame_id: str
    object_label: str
    view_ids: list[str]
    cd_hand: float | None
    cd_object: float | None
    fs_hand: dict
    fs_object: dict
    acc_hand: float | None = None
    acc_object: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    cfg: MetricConfig = field(default_factory=MetricConfig)
    view_counts: list[int] = field(default_factory=list)
    repetitions: int = 6

    def run_table(self) -> list[dict]:
        """One row per (view count, repetition): means over frames."""
        out = []
        for vc in self.view_counts:
            for rep in range(self.repetitions):
                rows = [r for r in self.rows if r.view_count == vc and r.repetition == rep]
                out.append(dict(view_count=vc, repetition=rep, **_aggregate(rows, self.cfg)))
        return out

    def summary(self) -> list[dict]:
        """Mean and standard deviation across repetitions for every view count."""
        table = self.run_table()
        out = []
        for vc in self.view_counts:
            runs = [t for t in table if t["view_count"] == vc]
            rec = {"view_count": vc, "repetitions": len(runs)}
            for key in runs[0]:
                if key in ("view_count", "repetition") or not key.startswith(("cd_", "fs_", "acc_")):
                    continue
                vals = np.array([r[key] for r in runs if r[key] is not None], dtype=np.float64)
                rec[f"{key}_mean"] = float(vals.mean()) if len(vals) else None
                # identical repetitions (every subset is the full view set) report exactly zero spread
                rec[f"{key}_std"] = (float(vals.std()) if np.ptp(vals) > 0 else 0.0) if len(vals) else None
            rec["failed_hand"] = int(sum(r["failed_hand"] for r in runs))
            rec["failed_object"] = int(sum(r["failed_object"] for r in runs))
            out.append(rec)
        return out

    def per_object(self) -> list[dict]:
        """Object F-score per label and view count, averaged over frames and repetitions."""
        labels = sorted({r.object_label for r in self.rows})
        tau = self.cfg.f_thresholds_object[0]
        out = []
        for label in labels:
            for vc in self.view_counts:
                vals = [r.fs_object[tau] for r in self.rows
                        if r.object_label == label and r.view_count == vc and r.fs_object]
                out.append({"object_label": label, "view_count": vc,
                            f"fs_object@{_mm(tau)}": float(np.mean(vals)) if vals else None,
                            "n": len(vals)})
        return out

    def to_json(self) -> dict:
        return {
            "metric_config": {
                "n_samples": self.cfg.n_samples,
                "f_thresholds_hand_m": list(self.cfg.f_thresholds_hand),
                "f_thresholds_object_m": list(self.cfg.f_thresholds_object),
                "seed": self.cfg.seed,
            },
            "view_counts": self.view_counts,
            "repetitions": self.repetitions,
            "runs": self.run_table(),
            "summary": self.summary(),
            "per_object": self.per_object(),
        }


def _mm(tau: float) -> str:
    return f"{tau * 1000:g}mm"


def _aggregate(rows: list[EvalRow], cfg: MetricConfig) -> dict:
    out = {}
    for shape, taus in (("hand", cfg.f_thresholds_hand), ("object", cfg.f_thresholds_object)):
        ok = [r for r in rows if getattr(r, f"cd_{shape}") is not None]
        out[f"cd_{shape}"] = float(np.mean([getattr(r, f"cd_{shape}") for r in ok])) if ok else None
        for t in taus:
            out[f"fs_{shape}@{_mm(t)}"] = float(np.mean([getattr(r, f"fs_{shape}")[t] for r in ok])) if ok else None
        accs = [getattr(r, f"acc_{shape}") for r in rows if getattr(r, f"acc_{shape}") is not None]
        out[f"acc_{shape}"] = float(np.mean(accs)) if accs else None
        out[f"failed_{shape}"] = len(rows) - len(ok)
    out["frames"] = len(rows)
    return out


def select_view_subsets(view_ids: list[str], count: int, repetitions: int, seed: int, frame_key: str) -> list[list[str]]:
    """Seeded draws without replacement, one subset per repetition."""
    digest = int(hashlib.sha256(frame_key.encode()).hexdigest()[:8], 16)
    out = []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, digest, count, rep])
        pick = rng.choice(len(view_ids), size=min(count, len(view_ids)), replace=False)
        out.append([view_ids[i] for i in sorted(pick)])
    return out


def evaluate_run(frames, view_counts, predictor: ViewPredictor, hand_model: ShapeAutoencoder,
                 object_model: ShapeAutoencoder, repetitions: int = 6, cfg: MetricConfig = MetricConfig(),
                 subset_seed: int = 0, targets: dict | None = None) -> EvalReport:
    """Reconstruct each frame from random view subsets and score against ground truth.

    ``frames`` are loaded frames whose meshes are already in the hand-wrist
    frame.  ``targets`` optionally maps frame id to (hand cube, object cube)
    for per-cell argmax accuracy.
    """
    report = EvalReport(cfg=cfg, view_counts=list(view_counts), repetitions=repetitions)
    dh, do = Decoder(hand_model), Decoder(object_model)
    for frame in frames:
        per_view = predict_views(frame.views, predictor)
        ids = [v.view_id for v in frame.views]
        for vc in view_counts:
            for rep, subset in enumerate(select_view_subsets(ids, vc, repetitions, subset_seed, frame.frame_id)):
                hand, obj = fuse_predictions(per_view, subset)
                mh, mo = dh(hand.indices), do(obj.indices)
                sh = score_meshes(mh, frame.hand_mesh, cfg.f_thresholds_hand, cfg)
                so = score_meshes(mo, frame.object_mesh, cfg.f_thresholds_object, cfg)
                acc_h = acc_o = None
                if targets is not None and frame.frame_id in targets:
                    th, to = targets[frame.frame_id]
                    acc_h = float((hand.indices == th).mean())
                    acc_o = float((obj.indices == to).mean())
                report.rows.append(EvalRow(
                    view_count=vc, repetition=rep, frame_id=frame.frame_id,
                    object_label=frame.record.object_label, view_ids=subset,
                    cd_hand=sh.chamfer if sh else None, cd_object=so.chamfer if so else None,
                    fs_hand=sh.fscores if sh else {}, fs_object=so.fscores if so else {},
                    acc_hand=acc_h, acc_object=acc_o,
                ))
    return report
