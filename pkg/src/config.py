"""Configuration Module for the Retrosynthesis Engine.

A RunConfig is read from a flat 'key = value' text file, then overridden by
RETRO_<KEY> environment variables, then by command-line flags.
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional

logger = logging.getLogger(__name__)

ENV_PREFIX = 'RETRO_'

# Keys that change parameter shapes; a checkpoint is tied to these
MODEL_KEYS = ('layers', 'width', 'latent', 'class_known', 'class_width', 'head_hidden')


class ConfigError(ValueError):
    """Raised for unknown keys, unparseable values or out-of-range settings."""


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter of a run; defaults are the full-scale values."""
    layers: int = 4
    width: int = 512
    latent: int = 10
    lam: float = 20.0
    lr: float = 0.0001
    batch: int = 128
    epochs: int = 100
    beam: int = 10
    max_steps: int = 20
    threshold: float = 0.5
    seed: int = 0
    class_known: bool = False
    class_width: int = 32
    head_hidden: int = 256
    mc_traces: int = 1
    centers_k: int = 1
    samples: int = 1
    workers: int = 1
    data_path: str = 'data/desk_corpus.tsv'
    checkpoint_dir: str = 'checkpoints'

    def __post_init__(self):
        positive = ('layers', 'width', 'latent', 'batch', 'beam', 'max_steps', 'class_width',
                    'head_hidden', 'mc_traces', 'centers_k', 'samples', 'workers')
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lam < 1.0:
            raise ConfigError(f"lam must be >= 1, got {self.lam}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"threshold must be in [0, 1), got {self.threshold}")

    def with_overrides(self, **overrides) -> 'RunConfig':
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        return replace(self, **overrides)

    def to_text(self) -> str:
        return ''.join(f"{key} = {_format_value(value)}\n" for key, value in asdict(self).items())

    def config_hash(self) -> str:
        """SHA-256 over the model-shaping keys, in sorted order."""
        values = asdict(self)
        text = ';'.join(f"{key}={_format_value(values[key])}" for key in sorted(MODEL_KEYS))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


def _coerce(key: str, raw: str):
    field_types = {f.name: f.type for f in fields(RunConfig)}
    if key not in field_types:
        raise ConfigError(f"Unknown config key: {key}")
    kind = field_types[key]
    raw = raw.strip()
    try:
        if kind in (bool, 'bool'):
            lowered = raw.lower()
            if lowered in ('true', 'yes', '1', 'on'):
                return True
            if lowered in ('false', 'no', '0', 'off'):
                return False
            raise ValueError(raw)
        if kind in (int, 'int'):
            return int(raw)
        if kind in (float, 'float'):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> Dict[str, object]:
    """
    Parse 'key = value' lines; '#' starts a comment.

    Raises:
        ConfigError: On malformed lines, unknown keys or bad values
    """
    values: Dict[str, object] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"Line {number}: expected 'key = value', got {line!r}")
        key, raw = line.split('=', 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, object]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional file, the environment and overrides.

    Args:
        path: Optional config file
        overrides: Values that win over everything else (None values are ignored)
        environ: Environment mapping (defaults to os.environ)

    Raises:
        FileNotFoundError: If path does not exist
        ConfigError: On any invalid key or value
    """
    values: Dict[str, object] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        values.update(parse_config_text(config_path.read_text(encoding='utf-8')))
        logger.info(f"Loaded config from {config_path}")

    environ = os.environ if environ is None else environ
    for f in fields(RunConfig):
        env_key = ENV_PREFIX + f.name.upper()
        if env_key in environ:
            values[f.name] = _coerce(f.name, environ[env_key])
            logger.info(f"Config {f.name} overridden by {env_key}")

    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    unknown = set(values) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)
