"""Declarative experiment configuration (JSON) and its digest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .scene import CORR_GRID, DEFAULT_CORR_LENGTH, SCALE_GRID, TUNED_STD, default_scene

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    master_seed: int = 20260401
    trials: int = 256
    scenes: tuple[str, ...] = ("S1", "S2", "S3")
    references: tuple[str, ...] = ("B", "M", "U")
    calibration_count: int = 256
    default_scale: float = 1.0
    scale_grid: tuple[float, ...] = SCALE_GRID
    corr_grid: tuple[float, ...] = CORR_GRID
    proxy_scales: tuple[float, ...] = (0.01, 0.30, 1.10)
    convergence_counts: tuple[int, ...] = (200, 500, 1000, 2000)
    validity_threshold: float = 1e-2
    split: int = 128
    energy_frac: float = 0.9
    random_psd_count: int = 100
    std: dict = field(default_factory=lambda: {k: dict(v) for k, v in TUNED_STD.items()})
    corr_length: dict = field(default_factory=lambda: dict(DEFAULT_CORR_LENGTH))

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.trials < 2:
            raise ConfigError("trials must be >= 2")
        if not 0 < self.split < self.trials:
            raise ConfigError("split must leave trials on both sides")
        unknown = set(self.scenes) - set(TUNED_STD)
        if unknown:
            raise ConfigError(f"unknown scene(s) {sorted(unknown)}")
        if set(self.references) - {"B", "M", "U"}:
            raise ConfigError("references must be drawn from B, M, U")
        if "B" not in self.references:
            raise ConfigError("reference B is required (errors are measured against it)")
        if any(s < 0 for s in self.scale_grid) or list(self.scale_grid) != sorted(self.scale_grid):
            raise ConfigError("scale grid must be nonnegative and increasing")
        if self.master_seed < 0 or self.master_seed >= 2**64:
            raise ConfigError("master seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def scene(self, scene_id: str):
        base = default_scene(scene_id, trials=self.trials, master_seed=self.master_seed,
                             scale_grid=tuple(self.scale_grid), corr_grid=tuple(self.corr_grid))
        pert = replace(base.pert, std=dict(self.std[scene_id]), corr_length=float(self.corr_length[scene_id]),
                       scale=float(self.default_scale))
        return base.with_pert(pert)


_TUPLE_FIELDS = ("scenes", "references", "scale_grid", "corr_grid", "proxy_scales", "convergence_counts")


def config_from_dict(data: dict) -> ExperimentConfig:
    known = set(ExperimentConfig.__dataclass_fields__)
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown config key(s): {sorted(extra)}")
    if "schema_version" not in data:
        raise ConfigError("config is missing schema_version")
    kw = dict(data)
    for k in _TUPLE_FIELDS:
        if k in kw:
            kw[k] = tuple(kw[k])
    base = ExperimentConfig()
    if "std" in kw:
        kw["std"] = {**base.std, **kw["std"]}
    if "corr_length" in kw:
        kw["corr_length"] = {**base.corr_length, **kw["corr_length"]}
    return ExperimentConfig(**kw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    return config_from_dict(data)
