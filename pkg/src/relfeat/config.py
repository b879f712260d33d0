"""Strict config parsing helpers.

JSON configs are rejected on any unknown key, naming the key, so a
typo never silently trains with a default.
"""

from __future__ import annotations

import dataclasses
import json


def dataclass_from_dict(cls, data: dict, where: str = "config",
                        skip_fields=()):
    """Build a dataclass from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ValueError(f"{where} must be a JSON object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip_fields)
    for key in data:
        if key not in names:
            raise ValueError(f"unknown {where} key: {key!r} "
                             f"(known: {', '.join(sorted(names))})")
    return cls(**data)


def load_json_config(path) -> dict:
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data
