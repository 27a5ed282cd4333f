"""Flat `key = value` run configuration with dotted keys.

One resolved config file accompanies every run output. Unknown keys are
rejected; files round-trip exactly (floats serialize via repr).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .distill import BridgeConfig, DistillDirection, LossWeights
from .flow import TvL1Params
from .network import TapPoint
from .optim import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = ""
    regime: str = ""
    num_classes: int = 8
    clips_per_class: int = 20
    clip_t: int = 8
    clip_h: int = 32
    clip_w: int = 32
    camera_noise_sigma: float = 0.0
    appearance_cue: bool = False
    train_fraction: float = 0.8
    speed: float = 2.0


@dataclass
class NetConfig:
    block_channels: tuple[int, ...] = (8, 16, 32, 64)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 6
    stream: str = "rgb"
    fusion_epochs: int = 10


@dataclass
class PathsConfig:
    teacher_checkpoint: str = ""
    rgb_checkpoint: str = ""
    flow_checkpoint: str = ""
    fusion_checkpoint: str = ""


@dataclass
class EvalConfig:
    target: str = "rgb"
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    parallel: int = 1
    direction: DistillDirection = DistillDirection.FLOW_TEACHES_RGB
    bridge_teacher_tap: TapPoint = TapPoint.MEDIUM
    bridge_student_tap: TapPoint = TapPoint.MEDIUM
    data: DataConfig = field(default_factory=DataConfig)
    flow: TvL1Params = field(default_factory=TvL1Params)
    net: NetConfig = field(default_factory=NetConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def bridge(self) -> BridgeConfig:
        return BridgeConfig(self.bridge_teacher_tap, self.bridge_student_tap)

    def validate(self) -> None:
        """Re-run every section's own invariants; raises ConfigError."""
        try:
            self.flow = replace(self.flow)
            self.optim = replace(self.optim)
            self.loss = replace(self.loss)
            BridgeConfig(self.bridge_teacher_tap, self.bridge_student_tap)
            if self.train.stream not in ("rgb", "flow"):
                raise ValueError(f"train.stream must be rgb or flow, got {self.train.stream!r}")
            if self.eval.target not in ("rgb", "flow", "fused"):
                raise ValueError(f"eval.target must be rgb, flow or fused, got {self.eval.target!r}")
            if self.eval.split not in ("train", "test"):
                raise ValueError(f"eval.split must be train or test, got {self.eval.split!r}")
            if self.data.regime and self.data.regime not in ("motion-favored", "camera-noisy"):
                raise ValueError(f"unknown data.regime {self.data.regime!r}")
            if self.train.epochs < 0 or self.train.fusion_epochs < 0:
                raise ValueError("epoch counts must be >= 0")
            if self.train.batch_size < 1:
                raise ValueError("train.batch_size must be >= 1")
            if self.parallel < 1:
                raise ValueError("parallel must be >= 1")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ConfigError(f"expected true or false, got {raw!r}")


def _parse_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {raw!r}") from exc


def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"expected a float, got {raw!r}") from exc


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from exc


def _parse_tap(raw: str) -> TapPoint:
    try:
        return TapPoint(raw)
    except ValueError as exc:
        raise ConfigError(f"expected front/medium/rear, got {raw!r}") from exc


def _parse_direction(raw: str) -> DistillDirection:
    try:
        return DistillDirection(raw)
    except ValueError as exc:
        raise ConfigError(f"expected flow-teaches-rgb or rgb-teaches-flow, got {raw!r}") from exc


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, (TapPoint, DistillDirection)):
        return value.value
    return str(value)


_PARSERS = {int: _parse_int, float: _parse_float, bool: _parse_bool, str: lambda raw: raw}


def _build_registry() -> dict:
    """key -> (section attr or None, field name). Parsing is type-driven."""
    registry: dict[str, tuple[str | None, str]] = {
        "seed": (None, "seed"),
        "out": (None, "out"),
        "parallel": (None, "parallel"),
        "distill.direction": (None, "direction"),
        "bridge.teacher_tap": (None, "bridge_teacher_tap"),
        "bridge.student_tap": (None, "bridge_student_tap"),
    }
    sections = {
        "data": DataConfig,
        "flow": TvL1Params,
        "net": NetConfig,
        "optim": OptimizerConfig,
        "loss": LossWeights,
        "train": TrainConfig,
        "paths": PathsConfig,
        "eval": EvalConfig,
    }
    for prefix, cls in sections.items():
        for f in fields(cls):
            key = f.name[:-1] if f.name.endswith("_") else f.name  # lambda_ -> lambda
            registry[f"{prefix}.{key}"] = (prefix, f.name)
    return registry


_REGISTRY = _build_registry()
_SPECIAL_PARSERS = {
    "distill.direction": _parse_direction,
    "bridge.teacher_tap": _parse_tap,
    "bridge.student_tap": _parse_tap,
    "net.block_channels": _parse_int_tuple,
}


def config_keys() -> list[str]:
    return sorted(_REGISTRY)


def _target(cfg: RunConfig, key: str):
    section, name = _REGISTRY[key]
    return (cfg if section is None else getattr(cfg, section)), name


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    if key not in _REGISTRY:
        raise ConfigError(f"unknown config key {key!r}")
    obj, name = _target(cfg, key)
    if key in _SPECIAL_PARSERS:
        value = _SPECIAL_PARSERS[key](raw.strip())
    else:
        current = getattr(obj, name)
        value = _PARSERS[type(current)](raw.strip())
    try:
        setattr(obj, name, value)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def get_key(cfg: RunConfig, key: str) -> str:
    obj, name = _target(cfg, key)
    return _fmt(getattr(obj, name))


def config_to_text(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {get_key(cfg, k)}" for k in config_keys()) + "\n"


def apply_config_text(cfg: RunConfig, text: str, source: str = "config") -> None:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        set_key(cfg, key.strip(), raw)


def load_config_file(cfg: RunConfig, path) -> None:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    apply_config_text(cfg, p.read_text(encoding="utf-8"), source=str(path))


def config_from_text(text: str) -> RunConfig:
    cfg = RunConfig()
    apply_config_text(cfg, text)
    return cfg
