"""Run configuration files (YAML or JSON) for the CLI."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Any, Dict

import yaml

from .errors import ConfigError


def _enforce_limits(text: str, max_bytes: int = 1_000_000, max_nesting: int = 50) -> None:
    """Guardrails: limit file size and approximate nesting depth."""
    if len(text.encode("utf-8")) > max_bytes:
        raise ConfigError("config file too large.")
    depth = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        leading = len(line) - len(line.lstrip(" "))
        depth = max(depth, leading // 2)
        if depth > max_nesting:
            raise ConfigError("config nesting too deep.")


def _reject_yaml_advanced(text: str) -> None:
    """Reject anchors (&), aliases (*), custom tags (!) and merge keys (<<:)."""
    for raw in text.splitlines():
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if re.search(r"(^|\s)&[A-Za-z0-9_-]+", line):
            raise ConfigError("YAML anchors (&name) are not allowed in config files.")
        if re.search(r"(^|\s)\*[A-Za-z0-9_-]+", line):
            raise ConfigError("YAML aliases (*name) are not allowed in config files.")
        if re.search(r"(^|\s)!\S+", line):
            raise ConfigError("YAML custom tags (!tag) are not allowed in config files.")
        if re.search(r"(^|\s)<<\s*:\s*", line):
            raise ConfigError("YAML merge keys (<<:) are not allowed in config files.")


def parse_config(text: str) -> Dict[str, Any]:
    """Parse config text into a flat {dest: value} mapping (dashes become underscores)."""
    _enforce_limits(text)
    _reject_yaml_advanced(text)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML/JSON syntax: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("Top level of a config file must be a mapping.")
    return {str(k).lstrip("-").replace("-", "_"): v for k, v in data.items()}


def load_config(path) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found.")
    return parse_config(p.read_text(encoding="utf-8"))
