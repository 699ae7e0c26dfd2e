"""Run configuration shared by every CLI stage.

A run is described by one JSON file.  Unknown keys are rejected so typos fail
loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autoencoder import AEConfig
from .datasets.adapters import FORMATS
from .datasets.toy import ToySceneConfig
from .metrics import MetricConfig
from .predictor import PredictorConfig
from .tsdf import GridSpec, PatchSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def toy_ae_config(seed: int = 0) -> AEConfig:
    """Autoencoder settings sized for the 32^3 toy grid."""
    return AEConfig(num_codes=64, code_dim=32, encoder_widths=(32, 64), decoder_hidden=128,
                    decoder_frequencies=4, learning_rate=2e-3, steps=2000, batch_size=4,
                    points_per_shape=2048, lr_schedule="cosine", seed=seed)


@dataclass
class EvalSettings:
    view_counts: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    repetitions: int = 6
    subset_seed: int = 0
    split: str = "test"
    max_frames: int | None = None
    # toy acceptance: hand F-score at the largest view count must not drop below
    # the smallest one, and per-cell argmax accuracy must exceed this value
    acceptance: bool = False
    min_cell_accuracy: float = 0.8


@dataclass
class RunConfig:
    dataset: str = "data/toy"
    output_dir: str = "runs/toy"
    dataset_format: str = "dexycb-style"
    max_contact_distance: float | None = 0.005
    device: str = "cpu"
    toy: ToySceneConfig = field(default_factory=ToySceneConfig)
    toy_train: int = 200
    toy_test: int = 20
    patches_per_axis: int = 8
    ae_hand: AEConfig = field(default_factory=toy_ae_config)
    ae_object: AEConfig = field(default_factory=lambda: toy_ae_config(seed=1))
    predictor: PredictorConfig = field(default_factory=lambda: PredictorConfig(epochs=6, batch_size=16))
    metrics: MetricConfig = field(default_factory=MetricConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    schema_version: int = SCHEMA_VERSION

    # -- derived -------------------------------------------------------------
    @property
    def grid_spec(self) -> GridSpec:
        return self.toy.grid_spec

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.patches_per_axis, self.grid_spec.resolution // self.patches_per_axis)

    def path(self, *parts) -> Path:
        return Path(self.output_dir).joinpath(*parts)

    # -- validation ----------------------------------------------------------
    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.dataset_format not in FORMATS:
            raise ConfigError(f"dataset_format must be one of {FORMATS}")
        if self.device != "cpu":
            raise ConfigError("only device 'cpu' is supported")
        if self.toy_train < 0 or self.toy_test < 0 or self.toy_train + self.toy_test == 0:
            raise ConfigError("toy_train and toy_test must be non-negative and not both zero")
        try:
            self.patch_spec.check(self.grid_spec)
            GridSpec(**self.toy.grid)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"grid/patch mismatch: {e}") from e
        for name, ae in (("ae_hand", self.ae_hand), ("ae_object", self.ae_object)):
            if ae.num_codes < 2 or ae.code_dim < 1 or ae.steps < 1 or ae.batch_size < 1:
                raise ConfigError(f"{name}: num_codes >= 2, code_dim >= 1, steps >= 1, batch_size >= 1 required")
            if ae.decoder_frequencies < 0:
                raise ConfigError(f"{name}: decoder_frequencies must be >= 0")
            if ae.lr_schedule not in ("constant", "cosine") or ae.recon_norm not in ("l1", "l2"):
                raise ConfigError(f"{name}: unknown lr_schedule or recon_norm")
        p = self.predictor
        if p.epochs < 1 or p.batch_size < 2:
            raise ConfigError("predictor: epochs >= 1 and batch_size >= 2 required")
        ev = self.evaluation
        if not ev.view_counts or any(v < 1 for v in ev.view_counts):
            raise ConfigError("evaluation.view_counts must be a non-empty list of positive integers")
        if ev.view_counts != sorted(set(ev.view_counts)):
            raise ConfigError("evaluation.view_counts must be strictly increasing")
        if ev.repetitions < 1:
            raise ConfigError("evaluation.repetitions must be >= 1")
        return self

    # -- (de)serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = {
            "n_samples": self.metrics.n_samples,
            "f_thresholds_hand": list(self.metrics.f_thresholds_hand),
            "f_thresholds_object": list(self.metrics.f_thresholds_object),
            "seed": self.metrics.seed,
        }
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        _reject_unknown(cls, d, "")
        nested = {
            "toy": ToySceneConfig.from_dict,
            "ae_hand": AEConfig.from_dict,
            "ae_object": AEConfig.from_dict,
            "predictor": lambda x: PredictorConfig(**x),
            "metrics": _metric_config,
            "evaluation": lambda x: EvalSettings(**x),
        }
        kinds = {"toy": ToySceneConfig, "ae_hand": AEConfig, "ae_object": AEConfig,
                 "predictor": PredictorConfig, "metrics": MetricConfig, "evaluation": EvalSettings}
        for key, build in nested.items():
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"{key} must be an object")
                _reject_unknown(kinds[key], d[key], key + ".")
                base = cls().__getattribute__(key)
                merged = {**_plain(base), **d[key]}
                try:
                    d[key] = build(merged)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{key}: {e}") from e
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _plain(obj) -> dict:
    if isinstance(obj, MetricConfig):
        return {"n_samples": obj.n_samples, "f_thresholds_hand": list(obj.f_thresholds_hand),
                "f_thresholds_object": list(obj.f_thresholds_object), "seed": obj.seed}
    return asdict(obj)


def _metric_config(d: dict) -> MetricConfig:
    return MetricConfig(n_samples=d["n_samples"], f_thresholds_hand=tuple(d["f_thresholds_hand"]),
                        f_thresholds_object=tuple(d["f_thresholds_object"]), seed=d["seed"])


def _reject_unknown(kind, d: dict, prefix: str) -> None:
    known = {f.name for f in fields(kind)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in extra)}")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply dotted-key overrides."""
    d: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be an object")
    for key, value in (overrides or {}).items():
        set_dotted(d, key, value)
    return RunConfig.from_dict(d).validate()


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {key}: {p} is not an object")
    cur[parts[-1]] = value
