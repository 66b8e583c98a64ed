from __future__ import annotations

import asyncio
import copy
import os
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import pandas as pd

from support.dyngroup.estimator import FitConfig, align_to_truth, fit, mse, recover_tensor
from support.dyngroup.generator import GenConfig, apply_missing_mask, sample_dataset
from support.dyngroup.model import DynamicTensor
from support.dyngroup.order_select import init_params
from support.dyngroup.utils import read_int_env

SWEEP_AXES = ("n", "I", "T", "missing")
INIT_MODES = ("kmeans", "truth")
DATA_SEED_OFFSET = 7919


@dataclass(frozen=True)
class SweepCell:
    axis: str
    value: float
    run: int
    seed: int
    gen: dict[str, Any]
    fit: dict[str, Any]
    init: str = "kmeans"


def default_workers() -> int:
    return read_int_env("DYNGROUP_THREADS", os.cpu_count() or 1)


def build_cells(
    axis: str,
    values: Sequence[float],
    *,
    runs: int,
    gen_payload: dict[str, Any],
    fit_payload: dict[str, Any] | None = None,
    init: str = "kmeans",
    base_seed: int = 0,
) -> list[SweepCell]:
    """One cell per (value, run); the run index alone fixes the generating parameters so values are paired."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"invalid_argument:sweep_axis:{axis}")
    if init not in INIT_MODES:
        raise ValueError(f"invalid_argument:init_mode:{init}")
    if int(runs) < 1 or not values:
        raise ValueError("invalid_argument:empty_sweep")
    if axis == "I" and not isinstance(gen_payload.get("synthetic"), dict):
        raise ValueError("invalid_config:sweep_I_requires_synthetic_params")
    return [
        SweepCell(axis=axis, value=float(v), run=r, seed=base_seed + r, gen=dict(gen_payload), fit=dict(fit_payload or {}), init=init)
        for v in values
        for r in range(int(runs))
    ]


def cell_gen_config(cell: SweepCell) -> tuple[GenConfig, float]:
    payload = copy.deepcopy(cell.gen)
    payload["seed"] = cell.seed + DATA_SEED_OFFSET
    if isinstance(payload.get("synthetic"), dict):
        payload["synthetic"]["seed"] = cell.seed
    fraction = 0.0
    if cell.axis == "n":
        payload["fixed_n"] = int(cell.value)
        payload.pop("poisson_rate", None)
    elif cell.axis == "T":
        payload["T"] = int(cell.value)
    elif cell.axis == "I":
        payload["synthetic"]["I"] = int(cell.value)
    else:
        fraction = float(cell.value)
    return GenConfig.from_mapping(payload), fraction


def run_cell(cell: SweepCell) -> dict[str, Any]:
    gen_cfg, fraction = cell_gen_config(cell)
    complete, _ = sample_dataset(gen_cfg)
    data = apply_missing_mask(complete, fraction, seed=cell.seed + 1) if fraction > 0 else complete
    fit_cfg = FitConfig.from_mapping({**cell.fit, "seed": cell.seed})
    truth = gen_cfg.params
    if cell.init == "truth":
        init = truth
    else:
        init = init_params(
            data, truth.dims.J, truth.dims.state_counts, seed=cell.seed, fit_cfg=fit_cfg, verbose=False
        )
    report = fit(data, init, fit_cfg, verbose=False)
    recovered = recover_tensor(report.params, report.decoded_states)
    row: dict[str, Any] = {
        "axis": cell.axis,
        "value": cell.value,
        "run": cell.run,
        "seed": cell.seed,
        "init": cell.init,
        "mse": report.mse_trace[-1],
        "iterations": report.iterations,
        "converged": report.converged,
        "stop_reason": report.stop_reason,
    }
    if cell.axis == "missing":
        row["mse_vs_masked"] = mse(recovered, data)
        row["mse_vs_original"] = mse(recovered, complete)
        row["mse_input_vs_original"] = mse(DynamicTensor(slices=data.Z), complete)
    try:
        errors = align_to_truth(report.params, truth).errors
    except ValueError:
        errors = {}
    for name, value in errors.items():
        row[f"err_{name}"] = value
    return row


async def run_sweep(
    cells: Sequence[SweepCell],
    *,
    max_workers: int | None = None,
    use_processes: bool = True,
    on_cell_done: Callable[[int, int, dict[str, Any]], None] | None = None,
) -> list[dict[str, Any]]:
    workers = max(1, min(int(max_workers or default_workers()), len(cells)))
    pool: Executor = ProcessPoolExecutor(max_workers=workers) if use_processes else ThreadPoolExecutor(max_workers=workers)
    loop = asyncio.get_running_loop()
    rows: list[dict[str, Any]] = []
    with pool:
        futures = [loop.run_in_executor(pool, run_cell, cell) for cell in cells]
        for done, fut in enumerate(asyncio.as_completed(futures), start=1):
            row = await fut
            rows.append(row)
            if on_cell_done is not None:
                on_cell_done(done, len(cells), row)
    return sorted(rows, key=lambda r: (r["value"], r["run"]))


def summarize(rows: Sequence[dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    metrics = [c for c in frame.columns if c == "mse" or c.startswith("mse_") or c.startswith("err_")]
    grouped = frame.groupby("value", sort=True)
    summary = grouped[metrics].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary.insert(0, "runs", grouped.size())
    summary.insert(0, "axis", frame["axis"].iloc[0])
    summary = summary.reset_index()
    if frame["axis"].iloc[0] == "missing" and (summary["value"] == 0).any():
        base = float(summary.loc[summary["value"] == 0, "mse_vs_original_mean"].iloc[0])
        if base > 0:
            for col in ("mse_vs_masked_mean", "mse_vs_original_mean", "mse_input_vs_original_mean"):
                summary[f"{col}_normalized"] = summary[col] / base
    return summary
