"""Bundled example cases."""
from __future__ import annotations

from pathlib import Path

_HERE = Path(__file__).resolve().parent


def fixtures():
    """Names of the bundled cases."""
    return sorted(p.stem for p in _HERE.glob("*.json"))


def fixture_path(name):
    """Absolute path of a bundled case, or None if there is no such case."""
    p = _HERE / (name if name.endswith(".json") else f"{name}.json")
    return str(p) if p.exists() else None
