"""Run configuration: JSON file with full defaulting, validation and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .calibration import VARIANTS
from .domain import ALL_KINDS, AttributeKind
from .encoder import INPUT_MODES
from .evaluation import ABLATION_INPUTS, ABLATION_LENGTHS, ABLATION_THRESHOLDS
from .inference import DEFAULT_THRESHOLD
from .model import ArchitectureSpec, TrainConfig
from .simulator import DEFAULT_MARGINALS, validate_marginals


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CatalogConfig:
    num_miniapps: int = 1000
    num_buttons: int = 300


@dataclass(frozen=True)
class DataConfig:
    train_users: int = 200
    validation_users: int = 200
    test_users: int = 1000
    samples_per_user: int = 5
    test_samples_per_user: int | None = None
    signal_strength: float = 1.0
    length: int = 200
    independent_mini_h: bool = False
    marginals: dict = field(default_factory=lambda: {k.value: list(v) for k, v in DEFAULT_MARGINALS.items()})

    def __post_init__(self):
        # unspecified attributes keep their default marginal
        merged = {k.value: list(v) for k, v in DEFAULT_MARGINALS.items()}
        merged.update({str(k): list(v) for k, v in dict(self.marginals).items()})
        object.__setattr__(self, "marginals", merged)

    def kind_marginals(self) -> dict[AttributeKind, list[float]]:
        return {AttributeKind.parse(k): list(v) for k, v in self.marginals.items()}


@dataclass(frozen=True)
class AblationConfig:
    thresholds: tuple[float, ...] = ABLATION_THRESHOLDS
    inputs: tuple[str, ...] = ABLATION_INPUTS
    lengths: tuple[int, ...] = ABLATION_LENGTHS


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    catalog: CatalogConfig = CatalogConfig()
    data: DataConfig = DataConfig()
    architecture: ArchitectureSpec = ArchitectureSpec()
    training: TrainConfig = TrainConfig()
    calibrator: str = "temperature"
    threshold: float = DEFAULT_THRESHOLD
    attributes: tuple[str, ...] = tuple(k.value for k in ALL_KINDS)
    ablation: AblationConfig = AblationConfig()
    out_dir: str = "runs/default"

    def __post_init__(self):
        # one run seed drives everything, including the training substreams
        if self.training.seed != self.seed:
            object.__setattr__(self, "training", replace(self.training, seed=self.seed))
        validate(self)

    @property
    def kinds(self) -> tuple[AttributeKind, ...]:
        return tuple(AttributeKind.parse(a) for a in self.attributes)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output directory is excluded."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        return hashlib.sha256(json.dumps({n: d[n] for n in names}, sort_keys=True).encode()).hexdigest()[:16]

    def data_hash(self) -> str:
        """Identity of the generated dataset."""
        return self.section_hash("seed", "catalog", "data")

    def model_hash(self) -> str:
        """Identity of a trained backbone (before calibration)."""
        return self.section_hash("seed", "catalog", "data", "architecture", "training")

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None,
                       threshold: float | None = None, attributes=None) -> "RunConfig":
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if out_dir is not None:
            changes["out_dir"] = str(out_dir)
        if threshold is not None:
            changes["threshold"] = threshold
        if attributes is not None:
            changes["attributes"] = tuple(AttributeKind.parse(a).value for a in attributes)
        return replace(self, **changes)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def validate(cfg: RunConfig) -> None:
    try:
        marg = cfg.data.kind_marginals()
    except ValueError as e:
        raise ConfigError(f"data.marginals: {e}") from None
    try:
        validate_marginals(marg)
    except ValueError as e:
        raise ConfigError(f"data.marginals: {e}") from None
    d = cfg.data
    for name in ("train_users", "validation_users", "test_users", "samples_per_user", "length"):
        if getattr(d, name) < 1:
            raise ConfigError(f"data.{name} must be positive")
    if d.test_samples_per_user is not None and d.test_samples_per_user < 1:
        raise ConfigError("data.test_samples_per_user must be positive")
    if not 0.0 <= d.signal_strength <= 1.0:
        raise ConfigError(f"data.signal_strength must lie in [0, 1], got {d.signal_strength}")
    if cfg.catalog.num_miniapps < 28 or cfg.catalog.num_buttons < 4:
        raise ConfigError("catalog needs >= 28 mini-apps and >= 4 buttons (three special roles plus one generic)")
    if cfg.calibrator not in VARIANTS:
        raise ConfigError(f"calibrator must be one of {VARIANTS}, got {cfg.calibrator!r}")
    if not 0.0 < cfg.threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {cfg.threshold}")
    if cfg.training.input_mode not in INPUT_MODES:
        raise ConfigError(f"training.input_mode must be one of {INPUT_MODES}")
    if cfg.training.epochs < 1 or cfg.training.batch_size < 1 or cfg.training.lr <= 0:
        raise ConfigError("training needs epochs >= 1, batch_size >= 1 and lr > 0")
    for a in cfg.attributes:
        try:
            AttributeKind.parse(a)
        except ValueError:
            raise ConfigError(f"unknown attribute {a!r}") from None
    for m in cfg.ablation.inputs:
        if m not in INPUT_MODES:
            raise ConfigError(f"ablation.inputs: unknown input mode {m!r}")
    for t in cfg.ablation.thresholds:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"ablation.thresholds: {t} outside (0, 1)")


def _build(cls, data: Mapping, path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    nested = {"catalog": CatalogConfig, "data": DataConfig, "architecture": ArchitectureSpec,
              "training": TrainConfig, "ablation": AblationConfig}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if cls is RunConfig and key in nested:
            kwargs[key] = _build(nested[key], value, sub)
        elif isinstance(value, list) and key != "marginals":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def from_dict(data: Mapping) -> RunConfig:
    return _build(RunConfig, data, "")


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    return from_dict(data)
