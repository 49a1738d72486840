"""Line-oriented ``key = value`` experiment configuration and run manifests."""
from __future__ import annotations

import dataclasses
import os
import subprocess
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .errors import ConfigError, MissingFileError

MANIFEST_NAME = "manifest.txt"
ADAM_DEFAULT_LR = 0.001
SGD_DEFAULT_LR = 0.05
PATH_KEYS = ("world_dir", "init", "pred_dir", "out_dir")


def manifest_name(command: str) -> str:
    return f"manifest-{command}.txt" if command else MANIFEST_NAME


@dataclass
class ExperimentConfig:
    """Everything a command needs; a manifest of these fields re-derives a run."""

    command: str = ""
    seed: int = 0
    # paths
    world_dir: str = "world"
    init: str = ""
    pred_dir: str = ""
    out_dir: str = "out"
    # synthetic world
    scenes: int = 4
    classes: int = 8
    points_per_scene: int = 10000
    # network
    levels: int = 3
    base_channels: int = 16
    teacher_classes: int = 8
    task_classes: int = 8
    resolution: int = 64
    # optimization
    optimizer: str = "sgd"
    lr: float = 0.0  # 0 selects the optimizer's default
    momentum: float = 0.9
    power: float = 0.9
    epochs: int = 10
    batch_size: int = 1
    augment: bool = True
    # data split and budget, scene ranges as "start:stop" over sorted scene ids
    pretrain_scenes: str = ""
    train_scenes: str = ""
    eval_scenes: str = ""
    budget: str = "la:20"
    pseudo_fraction: float = 0.2
    self_train: bool = False
    # teacher
    teacher: str = "oracle:0.1,0.5"
    # semi-supervised
    entropy_weight: float = 0.25
    consistency_weight: float = 10.0
    ema_alpha: float = 0.999
    rampup_epochs: int = 30
    task: str = "seg"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.levels >= 1, "levels must be >= 1"),
            (self.base_channels >= 1, "base_channels must be >= 1"),
            (self.resolution >= 1, "resolution must be >= 1"),
            (self.teacher_classes >= 1 and self.task_classes >= 1, "class counts must be >= 1"),
            (self.optimizer in ("sgd", "adam"), f"optimizer must be sgd or adam, got {self.optimizer!r}"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.scenes >= 1, "scenes must be >= 1"),
            (0 < self.pseudo_fraction <= 1, "pseudo_fraction must lie in (0, 1]"),
            (self.entropy_weight >= 0 and self.consistency_weight >= 0, "loss weights must be >= 0"),
            (0 <= self.ema_alpha <= 1, "ema_alpha must lie in [0, 1]"),
            (self.rampup_epochs >= 0, "rampup_epochs must be >= 0"),
            (self.task in ("seg", "cls"), f"task must be seg or cls, got {self.task!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def effective_lr(self) -> float:
        if self.lr > 0:
            return self.lr
        return ADAM_DEFAULT_LR if self.optimizer == "adam" else SGD_DEFAULT_LR

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, text: str):
    kind = FIELD_TYPES[key]
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    if kind in ("bool", bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>", base: Path | None = None) -> ExperimentConfig:
    """Parse config text; relative paths are taken against ``base`` when given."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key == "version":
            continue
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, val)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {val!r}") from None
        if base is not None and key in PATH_KEYS and values[key]:
            values[key] = os.path.normpath(base / values[key])
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such config file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path), path.resolve().parent)


def version_string() -> str:
    """``v<package version>``, with a ``git describe`` suffix when available."""
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              cwd=Path(__file__).parent, capture_output=True, text=True,
                              timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"v{__version__}-{desc}" if desc else f"v{__version__}"


def config_text(config: ExperimentConfig, base: Path | None = None) -> str:
    """One ``key = value`` line per field; paths relative to ``base`` when given."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if base is not None and f.name in PATH_KEYS and value:
            value = os.path.relpath(Path(value).resolve(), base)
        lines.append(f"{f.name} = {format_value(value)}\n")
    return "".join(lines)


def save_manifest(config: ExperimentConfig, out_dir) -> Path:
    """Write the config snapshot plus the version; readable by ``load_config``.

    Paths are stored relative to the manifest's directory so the artifact
    directory can be moved or copied as a whole.
    """
    out = Path(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    path = out / manifest_name(config.command)
    path.write_text(f"# distill3d run manifest\nversion = {version_string()}\n" + config_text(config, out),
                    encoding="utf-8")
    return path


def parse_range(spec: str, n: int) -> list[int]:
    """Scene selection ``start:stop`` (Python slice bounds) or ``all``/empty."""
    spec = spec.strip()
    if spec in ("", "all"):
        return list(range(n))
    try:
        parts = [int(p) if p else None for p in spec.split(":")]
    except ValueError:
        raise ConfigError(f"bad scene range {spec!r}") from None
    if len(parts) == 1:
        return [parts[0]]
    if len(parts) != 2:
        raise ConfigError(f"bad scene range {spec!r}")
    return list(range(n))[slice(*parts)]
