from dataclasses import fields, is_dataclass, replace
from os import PathLike
from typing import Any, TypeVar

import yaml

T = TypeVar("T")

SECTIONS = ("preprocess", "predictor", "detection", "evaluation", "pipeline", "synth")


class ConfigurationError(ValueError):
    """Invalid parameters, weights or tensor dimensions."""


class InsufficientHistoryError(ValueError):
    """Not enough points to build a feature sequence."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CliqueLimitError(RuntimeError):
    """Clique enumeration exceeded its configured limit."""


def load_config(filename: str | PathLike | None) -> dict[str, dict[str, Any]]:
    """Read a YAML config file into per-section dictionaries."""
    if filename is None:
        return {}
    with open(filename, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigurationError("Config file must contain a mapping of sections.")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"Unknown config sections: {sorted(unknown)}.")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ConfigurationError(f"Config section '{name}' must be a mapping.")
    return data


def merge(base: T, *layers: dict[str, Any] | None) -> T:
    """Apply override layers (later wins, None values skipped) to a dataclass."""
    if not is_dataclass(base):
        raise TypeError("merge() expects a dataclass instance.")
    names = {f.name for f in fields(base)}
    updates: dict[str, Any] = {}
    for layer in layers:
        if not layer:
            continue
        unknown = set(layer) - names
        if unknown:
            raise ConfigurationError(
                f"Unknown {type(base).__name__} keys: {sorted(unknown)}."
            )
        updates.update({k: v for k, v in layer.items() if v is not None})
    return replace(base, **updates)
