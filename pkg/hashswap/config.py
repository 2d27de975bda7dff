"""Pipeline configuration from flags, an optional JSON file and the environment."""

import json
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

import jsonschema

from hashswap.bundle import DEFAULT_BUNDLE
from hashswap.errors import ConfigError, UnknownAlgorithm
from hashswap.signatures import hash_profile

logger = logging.getLogger(__name__)

SCHEMA_PATH = os.path.join(os.path.dirname(__file__), 'data', 'config.schema.json')
DEFAULT_GAS = 50_000_000
DEFAULT_REPLACEMENT = 'SHA-256'
DEFAULT_REPORTS = 'reports'


def _env_gas() -> int:
    raw = os.environ.get('HASHSWAP_GAS')
    if raw is None:
        return DEFAULT_GAS
    try:
        return int(raw, 0)
    except ValueError:
        raise ConfigError(f"HASHSWAP_GAS must be an integer, got {raw!r}")


@dataclass
class PipelineConfig:
    binary: Optional[str] = None
    out: Optional[str] = None
    replacement: str = DEFAULT_REPLACEMENT
    bundle: str = field(default_factory=lambda: os.environ.get('HASHSWAP_BUNDLE', DEFAULT_BUNDLE))
    scripts: List[str] = field(default_factory=list)
    changes: Optional[str] = None
    reports: str = DEFAULT_REPORTS
    gas: int = field(default_factory=_env_gas)
    signatures: Optional[str] = None
    target: Optional[int] = None

    def validate(self):
        if self.gas <= 0:
            raise ConfigError(f"gas budget must be positive, got {self.gas}")
        if self.binary and self.out and os.path.abspath(self.binary) == os.path.abspath(self.out):
            raise ConfigError("output path must differ from the input binary")
        try:
            profile = hash_profile(self.replacement)
        except UnknownAlgorithm:
            raise ConfigError(f"unknown replacement algorithm {self.replacement!r}")
        if profile.weak or not profile.replaceable:
            raise ConfigError(f"{self.replacement} cannot serve as a replacement")

    def require(self, *names: str):
        missing = [name for name in names if not getattr(self, name)]
        if missing:
            raise ConfigError(f"missing required option(s): {', '.join('--' + n for n in missing)}")


def load_schema() -> Dict[str, Any]:
    with open(SCHEMA_PATH) as f:
        return json.load(f)


def load_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    try:
        jsonschema.validate(instance=data, schema=load_schema())
    except jsonschema.exceptions.ValidationError as e:
        raise ConfigError(f"{path}: {e.message} at {e.json_path}")
    if isinstance(data.get('target'), str):
        data['target'] = int(data['target'], 16)
    logger.debug(f"loaded config {path}: {sorted(data)}")
    return data


def build_config(overrides: Dict[str, Any], config_file: Optional[str] = None) -> PipelineConfig:
    """File values first, then every override that is not None."""
    config = PipelineConfig()
    known = {f.name for f in fields(PipelineConfig)}
    values: Dict[str, Any] = load_config_file(config_file) if config_file else {}
    values.update({k: v for k, v in overrides.items() if k in known and v not in (None, [])})
    for name, value in values.items():
        setattr(config, name, value)
    return config
