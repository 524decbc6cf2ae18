"""Run configuration loaded from a YAML file.

Every section is optional; anything left out takes the documented default,
so an empty file reproduces the reference protocol (window 100, pool 3,
500 epochs, 70/30 split).  Relative paths resolve against the config file.

Example::

    output_dir: runs/house2
    seed: 7
    data:
      refit_csv: CLEAN_House2.csv
      appliances: {kettle: 8, microwave: 5}
      region: {start: 0, length: 100000}
    model: {conv_filters: 48, conv_kernel_width: 4}
    train: {epochs: 500, batch_size: 32}
    evaluation:
      thresholds: {kettle: 10}
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import ApplianceSpec, SyntheticConfig
from .evaluation import DEFAULT_THRESHOLD
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    refit_csv: Path | None = None
    appliances: dict[str, int] = field(default_factory=dict)
    region_start: int = 0
    region_length: int | None = None
    train_fraction: float = 0.7
    train_stride: int = 1
    test_stride: int | None = None  # None: window_len
    inference_stride: int | None = None  # None: window_len
    nominal_spacing: float = 8.0


@dataclass
class RunConfig:
    output_dir: Path = Path("runs/default")
    seed: int | None = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: dict[str, float] = field(default_factory=dict)
    default_threshold: float = DEFAULT_THRESHOLD
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    synth_output: Path | None = None
    source: Path | None = None

    def threshold(self, appliance: str) -> float:
        return float(self.thresholds.get(appliance, self.default_threshold))

    @property
    def window_len(self) -> int:
        return self.model.window_len

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed),
                       train=replace(self.train, seed=seed), synth=replace(self.synth, seed=seed))


def _take(section: dict, cls, name: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    return dict(section)


def _section(raw: dict, key: str) -> dict:
    val = raw.get(key) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"[{key}] must be a mapping")
    return val


def parse_config(raw: dict | None, base_dir: Path = Path(".")) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = {"output_dir", "seed", "data", "model", "train", "evaluation", "synth"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    def path(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else (base_dir / p)

    try:
        d = dict(_section(raw, "data"))
        region = d.pop("region", None) or {}
        if region:
            d["region_start"] = int(region.get("start", 0))
            d["region_length"] = region.get("length")
        data = DataSection(**_take(d, DataSection, "data"))
        data.refit_csv = path(data.refit_csv)
        data.appliances = {str(k): int(v) for k, v in (data.appliances or {}).items()}
        for name, col in data.appliances.items():
            if not 1 <= col <= 9:
                raise ConfigError(f"[data] appliance {name!r} column {col} outside 1..9")
        if not 0.0 < data.train_fraction < 1.0:
            raise ConfigError("[data] train_fraction must be in (0, 1)")
        if data.train_stride < 1:
            raise ConfigError("[data] train_stride must be >= 1")

        model = ModelConfig.from_dict(_take(_section(raw, "model"), ModelConfig, "model"))
        train = TrainConfig(**_take(_section(raw, "train"), TrainConfig, "train"))

        ev = dict(_section(raw, "evaluation"))
        thresholds = {str(k): float(v) for k, v in (ev.pop("thresholds", None) or {}).items()}
        default_threshold = float(ev.pop("default_threshold", DEFAULT_THRESHOLD))
        if ev:
            raise ConfigError(f"[evaluation] unknown keys: {sorted(ev)}")
        if default_threshold < 0 or any(v < 0 for v in thresholds.values()):
            raise ConfigError("[evaluation] thresholds must be >= 0")

        s = dict(_section(raw, "synth"))
        synth_output = path(s.pop("output", None))
        specs = [ApplianceSpec(**{**a, "on_range": tuple(a.get("on_range", (10, 20))),
                                  "off_range": tuple(a.get("off_range", (30, 60)))})
                 for a in (s.pop("appliances", None) or [])]
        synth = SyntheticConfig(appliances=specs, **_take(s, SyntheticConfig, "synth"))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig(
        output_dir=path(raw.get("output_dir", "runs/default")),
        seed=raw.get("seed"),
        data=data, model=model, train=train,
        thresholds=thresholds, default_threshold=default_threshold,
        synth=synth, synth_output=synth_output,
    )
    if cfg.seed is not None:
        cfg = cfg.with_seed(int(cfg.seed))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = parse_config(raw, path.parent)
    cfg.source = path
    return cfg
