"""Figures written next to the CSV tables: F-score vs. view count, per-object curves, loss curves."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamps or version strings in the files, so reruns are byte-identical
_PNG_META = {"Software": None}


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def fscore_vs_views_rows(summary: list[dict]) -> list[dict]:
    """Long-format plot data: one row per (shape, threshold, view count)."""
    rows = []
    for rec in summary:
        for key, val in rec.items():
            if key.startswith("fs_") and key.endswith("_mean"):
                name = key[: -len("_mean")]
                shape, tau = name[3:].split("@")
                rows.append({
                    "shape": shape,
                    "threshold": tau,
                    "view_count": rec["view_count"],
                    "mean": val,
                    "std": rec.get(name + "_std"),
                })
    return rows


def plot_fscore_vs_views(rows: list[dict], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
    for ax, shape in zip(axes, ("hand", "object")):
        taus = sorted({r["threshold"] for r in rows if r["shape"] == shape})
        for tau in taus:
            sel = [r for r in rows if r["shape"] == shape and r["threshold"] == tau and r["mean"] is not None]
            x = [r["view_count"] for r in sel]
            y = [r["mean"] for r in sel]
            err = [r["std"] or 0.0 for r in sel]
            ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=f"F@{tau}")
        ax.set_title(shape)
        ax.set_xlabel("number of views")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    axes[0].set_ylabel("F-score")
    fig.tight_layout()
    return _save(fig, path)


def plot_per_object(rows: list[dict], path) -> Path:
    key = next((k for r in rows for k in r if k.startswith("fs_object@")), None)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label in sorted({r["object_label"] for r in rows}):
        sel = [r for r in rows if r["object_label"] == label and r.get(key) is not None]
        ax.plot([r["view_count"] for r in sel], [r[key] for r in sel], marker="o", label=label or "?")
    ax.set_xlabel("number of views")
    ax.set_ylabel(key.replace("fs_object@", "object F@") if key else "F-score")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(logs: dict[str, list[dict]], path, key: str = "loss") -> Path:
    """One line per named training log, log-scaled."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, recs in logs.items():
        if recs:
            ax.plot([r["step"] for r in recs], [r[key] for r in recs], lw=0.8, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
