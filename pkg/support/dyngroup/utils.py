"""Small, reusable helpers shared by the library and the scripts."""

from __future__ import annotations

import json
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import yaml


def safe_str(value: Any) -> str:
    return str(value or "").strip()


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def env_flag(name: str, default: str = "") -> bool:
    return safe_str(os.getenv(name, default)).lower() in {"1", "true", "yes"}


def read_int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        return default
    return value if value > 0 else default


def progress(msg: str) -> None:
    if env_flag("DYNGROUP_PROGRESS", "1"):
        print(msg, flush=True)


def debug(msg: str) -> None:
    if env_flag("DYNGROUP_DEBUG"):
        print(msg, flush=True)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not_json_serializable:{type(value).__name__}")


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, default=_json_default),
        encoding="utf-8",
    )


def read_json(path: Path) -> dict[str, Any]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ValueError(f"invalid_json_document:{path}")
    return payload


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a YAML or JSON config file into a mapping (JSON parses as YAML)."""
    raw = Path(path).read_text(encoding="utf-8")
    payload = yaml.safe_load(raw) if raw.strip() else {}
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise ValueError(f"invalid_config:not_a_mapping:{path}")
    return payload


def reject_unknown_keys(payload: dict[str, Any], allowed: set[str], *, where: str) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ValueError(f"invalid_config:{where}:unknown_keys={unknown}")
