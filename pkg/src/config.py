"""
Flat experiment configuration files.

One ``key = value`` pair per line with dotted keys mirroring the nesting of
``ExperimentConfig``::

    # desk benchmark
    seed = 7
    data.scene.num_classes = 4
    data.shift.channel_bias = [-0.05, -0.1, 0.1]
    selector.mode = instance_adaptive
    model.hidden_dims = [32]

Values are parsed as JSON (numbers, booleans, lists, null) and fall back to
a bare string. Validation is delegated to the pydantic models.
"""

import hashlib
import json
import os
import types
from pathlib import Path
from typing import Any, Union, get_args, get_origin

import structlog
from pydantic import BaseModel, ValidationError

from .trainer import ExperimentConfig

logger = structlog.get_logger(__name__)

THREADS_ENV = "IAST_THREADS"


class ConfigError(Exception):
    """Invalid or incomplete configuration; the message names the dotted key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _submodel(annotation: Any) -> type[BaseModel] | None:
    """The BaseModel class behind ``annotation`` (unwrapping ``X | None``)."""
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    if get_origin(annotation) in (Union, types.UnionType):
        for arg in get_args(annotation):
            found = _submodel(arg)
            if found is not None:
                return found
    return None


def check_key(key: str, model: type[BaseModel] = ExperimentConfig) -> None:
    parts = key.split(".")
    for depth, name in enumerate(parts):
        field = model.model_fields.get(name)
        if field is None:
            raise ConfigError(key, "unknown key")
        sub = _submodel(field.annotation)
        last = depth == len(parts) - 1
        if last and sub is not None:
            raise ConfigError(key, "is a section; set one of its keys instead")
        if not last:
            if sub is None:
                raise ConfigError(key, f"{name!r} has no sub-keys")
            model = sub


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_lines(text: str, source: str = "<config>") -> dict[str, Any]:
    """
    Read ``key = value`` lines into a flat dict.

    Raises:
        ConfigError: malformed line, duplicate or unknown key
    """
    flat: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line.strip()!r}")
        if key in flat:
            raise ConfigError(key, f"set twice ({source}:{lineno})")
        check_key(key)
        flat[key] = _parse_value(value.strip())
    return flat


def _nest(flat: dict[str, Any]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return tree


def build_config(flat: dict[str, Any]) -> ExperimentConfig:
    """
    Validate a flat key/value mapping.

    Raises:
        ConfigError: the first failing key, including missing required keys
    """
    for key in flat:
        check_key(key)
    try:
        return ExperimentConfig.model_validate(_nest(flat))
    except ValidationError as e:
        err = e.errors()[0]
        key = ".".join(str(p) for p in err["loc"] if not isinstance(p, int)) or "<root>"
        if err["type"] == "missing":
            raise ConfigError(key, "required key is missing") from e
        raise ConfigError(key, f"{err['msg']} (got {err.get('input')!r})") from e


def parse_config(
    text: str, overrides: dict[str, Any] | None = None, source: str = "<config>"
) -> ExperimentConfig:
    """Parse config text, apply ``overrides`` (dotted keys) and validate."""
    flat = parse_lines(text, source)
    flat.update(overrides or {})
    return build_config(flat)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """
    Read and validate a config file.

    Raises:
        ConfigError: unreadable file or invalid content
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(str(path), f"cannot read config: {e}") from e
    cfg = parse_config(text, overrides, source=str(path))
    logger.debug("config_loaded", path=str(path), hash=config_hash(cfg)[:12])
    return cfg


def _flatten(prefix: str, value: Any, out: list[tuple[str, Any]]) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    elif value is not None:
        out.append((prefix, value))


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialise to the flat format; ``parse_config(dump_config(c)) == c``."""
    pairs: list[tuple[str, Any]] = []
    _flatten("", cfg.model_dump(mode="json"), pairs)
    return "".join(f"{key} = {json.dumps(value)}\n" for key, value in pairs)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the dumped config."""
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()


def parse_override(item: str) -> tuple[str, Any]:
    """Parse one ``key=value`` command-line override."""
    key, sep, value = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(item, "override must look like key=value")
    check_key(key)
    return key, _parse_value(value.strip())


def worker_threads() -> int:
    """Concurrent sweep workers allowed by ``IAST_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(THREADS_ENV, f"must be >= 1, got {threads}")
    return threads
