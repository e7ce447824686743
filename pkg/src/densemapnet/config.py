"""Flat ``key=value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset_dir: str = ""
    dmax: float = 192.0
    channels: int = 3
    lr: float = 1e-3
    decay: float = 1e-6
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    checkpoint_path: str = "densemapnet.dmnw"
    output_dir: str = "."
    checkpoint_every: int = 0
    # "split" applies the disparity filter and the 90/10 split before training;
    # "all" trains on every sample. eval_split picks what `eval` scores.
    train_split: str = "split"
    eval_split: str = "test"

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not self.dmax > 0:
            raise ConfigError(f"dmax must be > 0, got {self.dmax}")
        if self.train_split not in ("split", "all"):
            raise ConfigError(f"train_split must be 'split' or 'all', got {self.train_split!r}")
        if self.eval_split not in ("train", "test", "all"):
            raise ConfigError(f"eval_split must be 'train', 'test' or 'all', got {self.eval_split!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("batch_size must be >= 1; epochs and checkpoint_every >= 0")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


def _convert(name, raw):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return str(raw)


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        if key not in RunConfig.keys():
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value.strip())
    return values


def load_config(path=None, overrides=None):
    """Merge a config file (optional) with non-None ``overrides``."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in RunConfig.keys():
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, value)
    return RunConfig(**values)


def dump_config(cfg: RunConfig):
    return "".join(f"{name}={getattr(cfg, name)}\n" for name in RunConfig.keys())
