"""Flat ``key = value`` config files for :class:`TrainConfig`.

Lines starting with ``#`` and blank lines are ignored; trailing ``# ...``
comments are stripped. Keys are the config field names (``lambda`` for the
weight decay). Overrides of the same form are applied after the file.
"""

import hashlib
from dataclasses import fields

from .errors import ConfigError
from .trainer import TrainConfig

_TYPES = {("lambda" if f.name == "lam" else f.name): f.type for f in fields(TrainConfig)}


def _convert(key, raw):
    typ = _TYPES[key]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_pairs(lines, source="<config>"):
    """Parse ``key = value`` lines into a dict of typed values."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}; valid keys: {', '.join(sorted(_TYPES))}")
        out[key] = _convert(key, raw)
    return out


def build_config(values):
    kwargs = dict(values)
    if "lambda" in kwargs:
        kwargs["lam"] = kwargs.pop("lambda")
    return TrainConfig(**kwargs)


def load_config(path=None, overrides=(), extra=None):
    """Read ``path`` (optional), then apply ``extra`` and ``--set`` overrides.

    ``extra`` holds values from dedicated flags such as ``--seed``; the
    ``--set`` list wins over both.
    """
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values.update(parse_pairs(fh, source=str(path)))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
    if extra:
        values.update({k: v for k, v in extra.items() if v is not None})
    values.update(parse_pairs(overrides, source="--set"))
    return build_config(values)


def dump_config(config):
    lines = [f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}" for key, value in config.as_dict().items()]
    return "\n".join(lines) + "\n"


def config_hash(config):
    return hashlib.sha256(dump_config(config).encode()).hexdigest()
