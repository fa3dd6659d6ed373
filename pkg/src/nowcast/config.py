"""Run configuration files and run manifests.

A run config is YAML with optional top-level sections ``data``, ``model``,
``train`` and ``loss`` plus a top-level ``seed``. CLI flags override file
values, which override the defaults below.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import yaml

from nowcast.errors import ConfigurationError

DATA_DIR_ENV = "NOWCAST_DATA_DIR"
MANIFEST_NAME = "manifest.json"

DEFAULTS = {
    "seed": 0,
    "data": {
        "grid": "desk",
        "regions": ["roxi_0004", "roxi_0005"],
        "years": [2019, 2020],
        "samples": {"train": 8, "val": 4},
    },
    "model": {},
    "train": {},
    "loss": {},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None) -> tuple[dict, str]:
    """Defaults merged with the file at ``path``; also returns the raw file text."""
    if path is None:
        return copy.deepcopy(DEFAULTS), ""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    try:
        loaded = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    if not isinstance(loaded, dict):
        raise ConfigurationError(f"{path} must hold a mapping at top level")
    unknown = set(loaded) - set(DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)} in {path}")
    return deep_merge(DEFAULTS, loaded), text


def content_hash(text: str | bytes) -> str:
    """Git blob hash of ``text``."""
    data = text.encode() if isinstance(text, str) else text
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def data_root(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise ConfigurationError(f"no dataset directory: pass --data or set {DATA_DIR_ENV}")


def write_manifest(out_dir, command: str, *, config_path=None, config: dict | None = None,
                   config_text: str = "", seed=None, inputs=(), outputs=(), started=None) -> Path:
    """Write the single ``manifest.json`` of an artifact directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = json.dumps(config or {}, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_path": str(config_path) if config_path else None,
        "config_hash": content_hash(config_text or resolved),
        "resolved_config": json.loads(resolved),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started": started or datetime.now(timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
