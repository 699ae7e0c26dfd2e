"""Multi-view fusion: average per-view codebook-index probabilities, pick the
most likely index per latent cell."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import SHAPE_CLASSES


@dataclass
class ViewProbabilities:
    probs: np.ndarray  # (n, n, n, K)
    shape_class: str
    view_id: str = "0"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 4:
            raise ValueError("expected an (n, n, n, K) probability cube")
        if self.shape_class not in SHAPE_CLASSES:
            raise ValueError(f"shape_class must be one of {SHAPE_CLASSES}")

    @property
    def num_codes(self) -> int:
        return self.probs.shape[-1]


@dataclass
class FusedPrediction:
    probs: np.ndarray
    indices: np.ndarray
    shape_class: str
    view_ids: list[str]

    def entropy_summary(self) -> dict:
        p = np.clip(self.probs, 1e-12, 1.0)
        h = -(p * np.log(p)).sum(-1)
        return {"mean": float(h.mean()), "max": float(h.max()), "min": float(h.min())}


def _view_sort_key(view_id: str):
    return (0, int(view_id), "") if str(view_id).isdigit() else (1, 0, str(view_id))


def fuse(per_view) -> np.ndarray:
    """Element-wise mean of per-view probability cubes.

    Views are summed in ascending view-id order so the result does not depend
    on the order the caller supplies them in.
    """
    views = list(per_view)
    if not views:
        raise ValueError("no views to fuse")
    first = views[0]
    for v in views[1:]:
        if v.probs.shape != first.probs.shape:
            raise ValueError(f"mismatched probability cubes {v.probs.shape} vs {first.probs.shape}")
        if v.shape_class != first.shape_class:
            raise ValueError("cannot fuse hand and object predictions")
    views.sort(key=lambda v: _view_sort_key(v.view_id))
    total = np.zeros_like(first.probs)
    for v in views:
        total += v.probs
    return total / len(views)


def select_indices(probs) -> np.ndarray:
    """Cell-wise argmax; ties go to the smallest index."""
    return np.argmax(np.asarray(probs), axis=-1).astype(np.int64)


def fuse_and_select(per_view) -> FusedPrediction:
    views = list(per_view)
    p = fuse(views)
    return FusedPrediction(
        probs=p,
        indices=select_indices(p),
        shape_class=views[0].shape_class,
        view_ids=sorted((v.view_id for v in views), key=_view_sort_key),
    )
