"""Command line entry point.

Every subcommand reads a JSON run config (``--config``), applies flag
overrides on top, validates the result and finishes by printing one JSON line
listing the artifacts it wrote.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 acceptance failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("hoshape")

EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_ACCEPTANCE = 2, 3, 4


class MissingDependency(RuntimeError):
    """A prerequisite artifact is absent; the message names the command that makes it."""


class AcceptanceFailure(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs, **flags) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _emit(command: str, artifacts: dict, **extra) -> None:
    payload = {"command": command, "artifacts": {k: str(v) for k, v in artifacts.items()}, **extra}
    click.echo(json.dumps(payload, sort_keys=True))


def _write_jsonl(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return path


def _read_jsonl(path) -> list[dict]:
    return [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]


def _require(path: Path, command: str, what: str) -> Path:
    if not Path(path).exists():
        raise MissingDependency(f"{what} not found at {path}; run `hoshape {command}` first")
    return Path(path)


def _run(command: str, fn, cfg_path, overrides) -> None:
    """Shared error handling so every subcommand maps failures to the same exit codes."""
    try:
        cfg = load_config(cfg_path, overrides)
        fn(cfg)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except MissingDependency as e:
        click.echo(f"missing dependency: {e}", err=True)
        sys.exit(EXIT_DEPENDENCY)
    except AcceptanceFailure as e:
        click.echo(f"acceptance failure: {e}", err=True)
        sys.exit(EXIT_ACCEPTANCE)


def _dirs(cfg: RunConfig) -> dict[str, Path]:
    return {
        "ae_hand": cfg.path("ae_hand"),
        "ae_object": cfg.path("ae_object"),
        "latents": cfg.path("latents"),
        "predictor": cfg.path("predictor"),
        "eval": cfg.path("eval"),
        "plots": cfg.path("plots"),
        "reconstruct": cfg.path("reconstruct"),
    }


def _frames(cfg: RunConfig, split: str):
    from .datasets.adapters import load_manifest

    root = Path(cfg.dataset)
    if not root.exists():
        raise MissingDependency(f"dataset {root} does not exist; run `hoshape toy-generate` first")
    res = load_manifest(root, cfg.dataset_format, cfg.max_contact_distance, splits=(split,))
    if not res.frames:
        raise MissingDependency(f"no {split!r} frames under {root}; run `hoshape toy-generate` first")
    return res.frames


def _load_autoencoders(cfg: RunConfig):
    from .autoencoder import ShapeAutoencoder

    d = _dirs(cfg)
    for key in ("ae_hand", "ae_object"):
        _require(d[key] / "manifest.json", "ae-train", f"{key} checkpoint")
    return ShapeAutoencoder.load(d["ae_hand"]), ShapeAutoencoder.load(d["ae_object"])


def _load_predictor(cfg: RunConfig):
    from .predictor import ViewPredictor

    d = _dirs(cfg)
    _require(d["predictor"] / "manifest.json", "pred-train", "predictor checkpoint")
    return ViewPredictor.load(d["predictor"])


# -- stages -----------------------------------------------------------------------

def stage_toy_generate(cfg: RunConfig, force: bool = False) -> dict:
    from .datasets.toy import write_toy_dataset

    root = write_toy_dataset(cfg.dataset, cfg.toy, cfg.toy_train, cfg.toy_test, force=force)
    return {"dataset": root, "manifest": root / "manifest.jsonl", "toy_config": root / "toy_config.json"}


def stage_ae_train(cfg: RunConfig, shapes=("hand", "object")) -> dict:
    from .autoencoder import train_autoencoder
    from .datasets.adapters import load_frame

    frames = [load_frame(r, cfg.grid_spec, images=False) for r in _frames(cfg, "train")]
    out = {}
    for shape in shapes:
        grids = [f.hand_tsdf if shape == "hand" else f.object_tsdf for f in frames]
        grids = [g for g in grids if g is not None]
        if not grids:
            raise MissingDependency(f"training frames carry no {shape} geometry")
        ae_cfg = cfg.ae_hand if shape == "hand" else cfg.ae_object
        log.info("training %s autoencoder on %d grids", shape, len(grids))
        res = train_autoencoder(grids, ae_cfg, shape, cfg.patch_spec)
        ckpt_dir = _dirs(cfg)[f"ae_{shape}"]
        res.model.save(ckpt_dir)
        out[f"ae_{shape}"] = ckpt_dir
        out[f"ae_{shape}_log"] = _write_jsonl(res.log, ckpt_dir / "train_log.jsonl")
    return out


def stage_latents_extract(cfg: RunConfig) -> dict:
    from .autoencoder import extract_latents, write_latent_dataset
    from .datasets.adapters import load_frame

    hand_model, object_model = _load_autoencoders(cfg)
    frames = [load_frame(r, cfg.grid_spec, images=False) for r in _frames(cfg, "train")]
    records, skipped = extract_latents(frames, hand_model, object_model)
    out_dir = write_latent_dataset(records, _dirs(cfg)["latents"])
    return {"latents": out_dir, "index": out_dir / "index.jsonl"}


def stage_pred_train(cfg: RunConfig) -> dict:
    from .autoencoder import read_latent_dataset
    from .datasets.adapters import load_frame
    from .predictor import TrainingSample, train_predictor

    d = _dirs(cfg)
    _require(d["latents"] / "index.jsonl", "latents-extract", "latent dataset")
    hand_model, object_model = _load_autoencoders(cfg)
    latents = {(r.frame_id, r.view_id): r for r in read_latent_dataset(d["latents"])}
    samples = []
    for rec in _frames(cfg, "train"):
        frame = load_frame(rec, None, images=True)
        for v in frame.views:
            lat = latents.get((frame.frame_id, v.view_id))
            if lat is None:
                continue
            samples.append(TrainingSample(lat.image_id, v.image, v.intrinsics, v.pose, lat.hand, lat.obj))
    if not samples:
        raise MissingDependency("latent dataset does not match the training frames; rerun `hoshape latents-extract`")
    model, records = train_predictor(samples, hand_model, object_model, cfg.predictor)
    model.save(d["predictor"])
    return {"predictor": d["predictor"], "predictor_log": _write_jsonl(records, d["predictor"] / "train_log.jsonl")}


def _find_frame(cfg: RunConfig, frame_id: str):
    for split in ("test", "train"):
        try:
            for r in _frames(cfg, split):
                if r.frame_id == frame_id:
                    return r
        except MissingDependency:
            continue
    raise ConfigError(f"frame {frame_id!r} not found in {cfg.dataset}")


def stage_reconstruct(cfg: RunConfig, frame_id: str, view_ids=None, num_views=None) -> dict:
    from .datasets.adapters import load_frame
    from .pipeline import ViewSet, reconstruct, select_view_subsets

    predictor = _load_predictor(cfg)
    hand_model, object_model = _load_autoencoders(cfg)
    frame = load_frame(_find_frame(cfg, frame_id), None, images=True)
    ids = [v.view_id for v in frame.views]
    if view_ids:
        selected = list(view_ids)
    elif num_views:
        if num_views > len(ids):
            raise ConfigError(f"frame {frame_id} has only {len(ids)} views")
        selected = select_view_subsets(ids, num_views, 1, cfg.evaluation.subset_seed, frame_id)[0]
    else:
        selected = ids
    try:
        views = ViewSet(frame.views, selected)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    rec = reconstruct(views, predictor, hand_model, object_model)
    return rec.write(_dirs(cfg)["reconstruct"] / frame_id.replace("/", "_"))


def stage_evaluate(cfg: RunConfig) -> tuple[dict, dict]:
    from .autoencoder import encode_grid
    from .datasets.adapters import load_frame
    from .pipeline import evaluate_run
    from .plotting import fscore_vs_views_rows, write_csv

    predictor = _load_predictor(cfg)
    hand_model, object_model = _load_autoencoders(cfg)
    ev = cfg.evaluation
    records = _frames(cfg, ev.split)
    if ev.max_frames is not None:
        records = records[: ev.max_frames]
    frames = [load_frame(r, cfg.grid_spec, images=True) for r in records]
    frames = [f for f in frames if f.hand_mesh is not None and f.object_mesh is not None]
    targets = {}
    for f in frames:
        if f.hand_tsdf is not None and f.object_tsdf is not None:
            targets[f.frame_id] = (encode_grid(f.hand_tsdf, hand_model)[1], encode_grid(f.object_tsdf, object_model)[1])
    report = evaluate_run(frames, ev.view_counts, predictor, hand_model, object_model, ev.repetitions,
                          cfg.metrics, ev.subset_seed, targets)
    out_dir = _dirs(cfg)["eval"]
    out_dir.mkdir(parents=True, exist_ok=True)
    data = report.to_json()
    data["frames"] = [f.frame_id for f in frames]
    arts = {"report": out_dir / "report.json"}
    arts["report"].write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    arts["runs_csv"] = write_csv(data["runs"], out_dir / "runs.csv")
    arts["summary_csv"] = write_csv(data["summary"], out_dir / "summary.csv")
    arts["per_object_csv"] = write_csv(data["per_object"], out_dir / "per_object.csv")
    arts["fscore_vs_views_csv"] = write_csv(fscore_vs_views_rows(data["summary"]), out_dir / "fscore_vs_views.csv")
    arts.update(stage_plot(cfg))
    return arts, acceptance_checks(data, cfg)


def acceptance_checks(report: dict, cfg: RunConfig) -> dict:
    """Toy-scale checks: hand F@5mm non-decreasing from the fewest to the most views; cell accuracy."""
    summary = {s["view_count"]: s for s in report["summary"]}
    lo, hi = min(summary), max(summary)
    key = f"fs_hand@{cfg.metrics.f_thresholds_hand[-1] * 1000:g}mm_mean"
    f_lo, f_hi = summary[lo].get(key), summary[hi].get(key)
    accs = [r[f"acc_{s}"] for r in report["runs"] for s in ("hand", "object") if r.get(f"acc_{s}") is not None]
    acc = float(np.mean(accs)) if accs else None
    return {
        "fs_hand_fewest_views": f_lo,
        "fs_hand_most_views": f_hi,
        "fs_hand_trend_ok": f_lo is not None and f_hi is not None and f_hi >= f_lo,
        "cell_accuracy": acc,
        "cell_accuracy_ok": acc is not None and acc > cfg.evaluation.min_cell_accuracy,
    }


def stage_plot(cfg: RunConfig) -> dict:
    from .plotting import fscore_vs_views_rows, plot_fscore_vs_views, plot_loss_curves, plot_per_object

    d = _dirs(cfg)
    report_path = _require(d["eval"] / "report.json", "evaluate", "evaluation report")
    data = json.loads(report_path.read_text())
    arts = {
        "fscore_vs_views_png": plot_fscore_vs_views(fscore_vs_views_rows(data["summary"]),
                                                    d["plots"] / "fscore_vs_views.png"),
        "per_object_png": plot_per_object(data["per_object"], d["plots"] / "per_object.png"),
    }
    logs = {}
    for name in ("ae_hand", "ae_object", "predictor"):
        p = d[name] / "train_log.jsonl"
        if p.exists():
            logs[name] = _read_jsonl(p)
    if logs:
        arts["loss_curves_png"] = plot_loss_curves(logs, d["plots"] / "loss_curves.png")
    return arts


# -- click wiring ------------------------------------------------------------------

def _common(f):
    f = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                     help="Override a config key (dotted path, JSON value), e.g. --set ae_hand.steps=500.")(f)
    f = click.option("--output-dir", type=click.Path(file_okay=False), default=None,
                     help="Directory for checkpoints, latents and reports.")(f)
    f = click.option("--dataset", type=click.Path(file_okay=False), default=None,
                     help="Dataset root directory.")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="JSON run config; flags override its values.")(f)
    return f


@click.group()
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]), help="Logging verbosity on stderr.")
def main(log_level):
    """Multi-view hand and object shape reconstruction from quantized shape codes."""
    logging.basicConfig(level=log_level, format="%(levelname)s %(name)s: %(message)s")


@main.command("toy-generate")
@_common
@click.option("--n-train", type=int, default=None, help="Number of training scenes.")
@click.option("--n-test", type=int, default=None, help="Number of held-out scenes.")
@click.option("--seed", type=int, default=None, help="Toy scene seed.")
@click.option("--force", is_flag=True, help="Regenerate scenes that already exist.")
def toy_generate(config_path, dataset, output_dir, sets, n_train, n_test, seed, force):
    """Generate and render procedural toy scenes."""
    def run(cfg):
        _emit("toy-generate", stage_toy_generate(cfg, force=force))
    _run("toy-generate", run, config_path,
         _safe_overrides(sets, dataset=dataset, output_dir=output_dir, toy_train=n_train,
                         toy_test=n_test, **{"toy.seed": seed}))


@main.command("ae-train")
@_common
@click.option("--shape", type=click.Choice(["hand", "object", "both"]), default="both", show_default=True,
              help="Which autoencoder to train.")
@click.option("--steps", type=int, default=None, help="Training steps for the selected autoencoder(s).")
def ae_train(config_path, dataset, output_dir, sets, shape, steps):
    """Train the hand and/or object autoencoder on training-split TSDFs."""
    shapes = ("hand", "object") if shape == "both" else (shape,)
    extra = {f"ae_{s}.steps": steps for s in shapes}

    def run(cfg):
        _emit("ae-train", stage_ae_train(cfg, shapes))
    _run("ae-train", run, config_path, _safe_overrides(sets, dataset=dataset, output_dir=output_dir, **extra))


@main.command("latents-extract")
@_common
def latents_extract(config_path, dataset, output_dir, sets):
    """Encode every training frame to index cubes, one record per view."""
    def run(cfg):
        _emit("latents-extract", stage_latents_extract(cfg))
    _run("latents-extract", run, config_path, _safe_overrides(sets, dataset=dataset, output_dir=output_dir))


@main.command("pred-train")
@_common
@click.option("--epochs", type=int, default=None, help="Predictor training epochs.")
def pred_train(config_path, dataset, output_dir, sets, epochs):
    """Train the single-view code predictor on the latent dataset."""
    def run(cfg):
        _emit("pred-train", stage_pred_train(cfg))
    _run("pred-train", run, config_path,
         _safe_overrides(sets, dataset=dataset, output_dir=output_dir, **{"predictor.epochs": epochs}))


@main.command("reconstruct")
@_common
@click.option("--frame", "frame_id", required=True, help="Frame id to reconstruct.")
@click.option("--view-ids", default=None, help="Comma-separated view ids to fuse.")
@click.option("--views", "num_views", type=int, default=None,
              help="Number of views to fuse, drawn with the evaluation subset seed.")
def reconstruct_cmd(config_path, dataset, output_dir, sets, frame_id, view_ids, num_views):
    """Reconstruct hand and object meshes for one frame from selected views."""
    ids = [s.strip() for s in view_ids.split(",") if s.strip()] if view_ids else None

    def run(cfg):
        if ids and num_views:
            raise ConfigError("use either --view-ids or --views, not both")
        arts = stage_reconstruct(cfg, frame_id, ids, num_views)
        sidecar = json.loads(Path(arts["sidecar"]).read_text())
        _emit("reconstruct", arts, view_ids=sidecar["view_ids"])
    _run("reconstruct", run, config_path, _safe_overrides(sets, dataset=dataset, output_dir=output_dir))


@main.command("evaluate")
@_common
@click.option("--view-counts", default=None, help="Comma-separated view counts, e.g. 1,2,4,8.")
@click.option("--repetitions", type=int, default=None, help="Seeded view subsets per view count.")
@click.option("--max-frames", type=int, default=None, help="Evaluate at most this many frames.")
@click.option("--acceptance/--no-acceptance", default=None,
              help="Exit with status 4 when the toy acceptance checks fail.")
def evaluate_cmd(config_path, dataset, output_dir, sets, view_counts, repetitions, max_frames, acceptance):
    """Score reconstructions over view counts and write JSON, CSV tables and figures."""
    counts = None
    if view_counts:
        try:
            counts = [int(x) for x in view_counts.split(",")]
        except ValueError:
            click.echo(f"config error: bad --view-counts {view_counts!r}", err=True)
            sys.exit(EXIT_CONFIG)

    def run(cfg):
        arts, checks = stage_evaluate(cfg)
        _emit("evaluate", arts, acceptance=checks)
        if cfg.evaluation.acceptance and not (checks["fs_hand_trend_ok"] and checks["cell_accuracy_ok"]):
            raise AcceptanceFailure(json.dumps(checks, sort_keys=True))
    _run("evaluate", run, config_path, _safe_overrides(
        sets, dataset=dataset, output_dir=output_dir, **{
            "evaluation.view_counts": counts, "evaluation.repetitions": repetitions,
            "evaluation.max_frames": max_frames, "evaluation.acceptance": acceptance}))


@main.command("plot")
@_common
def plot_cmd(config_path, dataset, output_dir, sets):
    """Render figures from an existing evaluation report and training logs."""
    def run(cfg):
        _emit("plot", stage_plot(cfg))
    _run("plot", run, config_path, _safe_overrides(sets, dataset=dataset, output_dir=output_dir))


def _safe_overrides(sets, **flags) -> dict:
    try:
        return _overrides(sets, **flags)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


if __name__ == "__main__":
    main()
