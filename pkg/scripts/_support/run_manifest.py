from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from support.dyngroup import __version__
from support.dyngroup.utils import read_json, safe_str, utc_now_iso, write_json

TERMINAL_RUN_STATUSES = {"completed", "failed", "capped", "aborted"}
MANIFEST_NAME = "run_manifest.json"
STATUS_NAME = "run_status.json"
REPORT_NAME = "report.json"
STATUS_EXIT_CODES = {"completed": 0, "capped": 2, "failed": 1, "aborted": 1}


def resolve_status_path(path_or_dir: str | Path) -> Path:
    path = Path(path_or_dir).expanduser().resolve()
    if path.name == STATUS_NAME:
        return path
    return path / STATUS_NAME


def resolve_manifest_path(path_or_dir: str | Path) -> Path:
    path = Path(path_or_dir).expanduser().resolve()
    if path.name == MANIFEST_NAME:
        return path
    return path / MANIFEST_NAME


def format_run_status_line(payload: dict[str, Any] | None) -> str:
    row = payload if isinstance(payload, dict) else {}
    bits = [
        f"command={safe_str(row.get('command')) or '-'}",
        f"status={safe_str(row.get('status')) or '-'}",
        f"progress={safe_str(row.get('progress_label')) or '-'}",
    ]
    iteration = row.get("iteration")
    mse = row.get("mse")
    done = row.get("cells_done")
    total = row.get("cells_total")
    reason = safe_str(row.get("stop_reason"))
    exit_code = row.get("exit_code")
    error = safe_str(row.get("error"))
    if isinstance(iteration, int) and iteration >= 0:
        bits.append(f"iter={iteration}")
    if isinstance(mse, (int, float)):
        bits.append(f"mse={float(mse):.6e}")
    if isinstance(done, int) and isinstance(total, int) and total > 0:
        bits.append(f"cells={done}/{total}")
    if reason:
        bits.append(f"reason={reason}")
    if isinstance(exit_code, int):
        bits.append(f"exit={exit_code}")
    if error:
        bits.append(f"error={error[:96]}")
    return " ".join(bits)


def _run_dir(path_or_dir: str | Path) -> Path:
    path = Path(path_or_dir).expanduser().resolve()
    return path.parent if path.name in {STATUS_NAME, MANIFEST_NAME, REPORT_NAME} else path


def _read_if_complete(path: Path) -> dict[str, Any]:
    try:
        return read_json(path)
    except (OSError, ValueError):
        return {}


def collect_run_state(path_or_dir: str | Path) -> dict[str, Any]:
    """Status of one output directory, completed by ``report.json`` and ``run_manifest.json`` once they exist.

    The fit report overrides iteration and MSE with its final values and adds ``stop_reason``;
    the manifest adds ``exit_code`` and ``duration_s``. Half-written report or manifest files are skipped.
    """
    root = _run_dir(path_or_dir)
    status_path = resolve_status_path(root)
    state: dict[str, Any] = {}
    if status_path.exists():
        try:
            state = read_json(status_path)
        except (OSError, ValueError) as exc:
            state = {"status": "invalid_status_file", "error": str(exc), "status_file": str(status_path)}
    report = _read_if_complete(root / REPORT_NAME)
    if report.get("stop_reason"):
        state["stop_reason"] = safe_str(report["stop_reason"])
        state["iteration"] = int(report.get("iterations") or 0)
        trace = report.get("mse_trace")
        if isinstance(trace, list) and trace:
            state["mse"] = float(trace[-1])
    manifest = _read_if_complete(root / MANIFEST_NAME)
    if isinstance(manifest.get("exit_code"), int):
        state["exit_code"] = int(manifest["exit_code"])
        state["duration_s"] = manifest.get("duration_s")
        state.setdefault("command", manifest.get("command"))
    return state


def exit_code_for(state: dict[str, Any]) -> int:
    """Recorded exit code when the manifest is written, otherwise the one implied by a terminal status."""
    if isinstance(state.get("exit_code"), int):
        return int(state["exit_code"])
    return STATUS_EXIT_CODES.get(safe_str(state.get("status")), 0)


@dataclass
class RunStatusSupervisor:
    """Keeps ``run_status.json`` current for a long-running command; terminal states are sticky."""

    out_dir: Path
    command: str
    status_path: Path = field(init=False)
    started_at: str = field(default_factory=utc_now_iso)
    terminal_locked: bool = False

    def __post_init__(self) -> None:
        self.out_dir = Path(self.out_dir).resolve()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.status_path = self.out_dir / STATUS_NAME

    def update(
        self,
        *,
        status: str,
        progress_label: str,
        iteration: int | None = None,
        mse: float | None = None,
        cells_done: int | None = None,
        cells_total: int | None = None,
        error: str = "",
        extra: dict[str, Any] | None = None,
    ) -> None:
        if self.terminal_locked:
            return
        payload: dict[str, Any] = {
            "contract_version": "dyngroup_run_status.v1",
            "command": safe_str(self.command),
            "status": safe_str(status),
            "progress_label": safe_str(progress_label),
            "iteration": -1 if iteration is None else int(iteration),
            "mse": None if mse is None else float(mse),
            "cells_done": 0 if cells_done is None else int(cells_done),
            "cells_total": 0 if cells_total is None else int(cells_total),
            "error": safe_str(error),
            "output_dir": str(self.out_dir),
            "started_at": self.started_at,
            "updated_at": utc_now_iso(),
        }
        if isinstance(extra, dict) and extra:
            payload["extra"] = extra
        write_json(self.status_path, payload)
        if safe_str(status) in TERMINAL_RUN_STATUSES:
            self.terminal_locked = True

    def observe_iteration(self, iteration: int, mse: float) -> None:
        self.update(status="running", progress_label=f"fit.iteration:{iteration}", iteration=iteration, mse=mse)


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    config_files: dict[str, Any] = field(default_factory=dict)
    started_at: str = field(default_factory=utc_now_iso)
    finished_at: str = ""
    duration_s: float = 0.0
    exit_code: int | None = None
    version: str = __version__
    _t0: float = field(default_factory=time.monotonic, repr=False)

    def finish(self, exit_code: int) -> None:
        self.exit_code = int(exit_code)
        self.finished_at = utc_now_iso()
        self.duration_s = round(time.monotonic() - self._t0, 3)

    def to_dict(self) -> dict[str, Any]:
        return {
            "contract_version": "dyngroup_run_manifest.v1",
            "command": self.command,
            "argv": list(self.argv),
            "config": self.config,
            "seed": self.seed,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "config_file_snapshot": dict(self.config_files),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "duration_s": self.duration_s,
            "exit_code": self.exit_code,
            "version": self.version,
            "python": platform.python_version(),
        }

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        write_json(path, self.to_dict())
        return path


def load_manifest(path_or_dir: str | Path) -> dict[str, Any]:
    payload = read_json(resolve_manifest_path(path_or_dir))
    argv = payload.get("argv")
    if not isinstance(argv, list) or not argv or not all(isinstance(v, str) for v in argv):
        raise ValueError("run_manifest_invalid:argv")
    return payload
