"""Pipeline configuration with flag > environment > file > default precedence."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from urllib.parse import urlparse

from .evaluation import DEFAULT_K_GRID

ENV_PREFIX = "TABRAG_"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    corpus: str | None = None
    params: str | None = None
    index: str | None = None
    rules: str | None = None
    n_retrieve: int = 50
    n_rerank: int = 10
    k_keep: int = 1
    scorer: str = "planted"  # planted | proxy | remote
    scorer_endpoint: str | None = None
    epsilon: float = 0.0
    gen: str = "echo"  # echo | remote
    gen_endpoint: str | None = None
    seed: int = 0
    k_grid: list[int] = field(default_factory=lambda: list(DEFAULT_K_GRID))
    backend: str = "exact"  # exact | partitioned
    scorer_pass_flops: float | None = None
    gen_pass_flops: float | None = None

    def validate(self) -> "PipelineConfig":
        if not 1 <= self.k_keep <= self.n_rerank <= self.n_retrieve:
            raise ConfigError("need 1 <= k_keep <= n_rerank <= n_retrieve")
        if self.scorer not in ("planted", "proxy", "remote"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if self.gen not in ("echo", "remote"):
            raise ConfigError(f"unknown generation backend {self.gen!r}")
        if self.backend not in ("exact", "partitioned"):
            raise ConfigError(f"unknown index backend {self.backend!r}")
        for name, kind in (("scorer_endpoint", self.scorer), ("gen_endpoint", self.gen)):
            if kind == "remote":
                url = urlparse(getattr(self, name) or "")
                if url.scheme not in ("http", "https") or not url.netloc:
                    raise ConfigError(f"{name} must be an http(s) URL when the remote backend is selected")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, value):
    types = {f.name: f.type for f in fields(PipelineConfig)}
    t = str(types[name])
    if value is None:
        return None
    if name == "k_grid":
        if isinstance(value, str):
            return [int(x) for x in value.replace(" ", "").split(",") if x]
        return [int(x) for x in value]
    if t.startswith("int"):
        return int(value)
    if t.startswith("float"):
        return float(value)
    return str(value)


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return data


def resolve_config(flags: dict, config_file: str | None = None, environ=None) -> PipelineConfig:
    """Merge the four layers. ``flags`` holds only options given on the command line."""
    environ = os.environ if environ is None else environ
    known = {f.name for f in fields(PipelineConfig)}
    merged: dict = {}
    if config_file:
        for k, v in read_config_file(config_file).items():
            k = k.replace("-", "_")
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
    for k in known:
        env_key = ENV_PREFIX + k.upper()
        if env_key in environ:
            merged[k] = _coerce(k, environ[env_key])
    for k, v in flags.items():
        if k in known and v is not None:
            merged[k] = _coerce(k, v)
    return PipelineConfig(**merged).validate()
