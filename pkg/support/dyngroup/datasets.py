"""Dataset directory layout.

    meta.json            dims, T, n table, free-form provenance
    counts_t{t}.csv      source,k,n,count (nonzero cells only)
    mask.csv             t,source,k,n of masked cells (optional)
    hidden_states.csv    t,source,group,state (optional)
    truth_params.json    generating ModelParams (optional)
    original/            the complete dataset before masking (optional)
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .generator import DatasetBundle, HiddenRecord, ObservationSet, normalize_counts
from .model import ModelParams
from .utils import read_json, write_json

LAYOUT_VERSION = "dyngroup_dataset.v1"
COUNT_COLUMNS = ["source", "k", "n", "count"]


def save_dataset(
    out_dir: Path,
    obs: ObservationSet,
    *,
    hidden: HiddenRecord | None = None,
    truth: ModelParams | None = None,
    original: ObservationSet | None = None,
    meta: dict[str, Any] | None = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in range(obs.T):
        src, k, n = np.nonzero(obs.counts[t])
        frame = pd.DataFrame({"source": src, "k": k, "n": n, "count": obs.counts[t][src, k, n]}, columns=COUNT_COLUMNS)
        frame.to_csv(out_dir / f"counts_t{t}.csv", index=False)
    if obs.mask is not None:
        t, src, k, n = np.nonzero(obs.mask)
        pd.DataFrame({"t": t, "source": src, "k": k, "n": n}).to_csv(out_dir / "mask.csv", index=False)
    if hidden is not None:
        T, I, J = hidden.states.shape
        tt, ii, jj = np.meshgrid(np.arange(T), np.arange(I), np.arange(J), indexing="ij")
        pd.DataFrame(
            {"t": tt.ravel(), "source": ii.ravel(), "group": jj.ravel(), "state": hidden.states.ravel()}
        ).to_csv(out_dir / "hidden_states.csv", index=False)
        if hidden.group_draws is not None:
            np.savetxt(out_dir / "group_draws.csv", hidden.group_draws.reshape(T * I, J), fmt="%d", delimiter=",")
    if truth is not None:
        truth.save_json(out_dir / "truth_params.json")
    if original is not None:
        save_dataset(out_dir / "original", original)
    write_json(
        out_dir / "meta.json",
        {
            "layout": LAYOUT_VERSION,
            "dims": {"T": obs.T, "I": obs.I, "K": obs.K, "N": obs.N},
            "n": obs.n.tolist(),
            "has_mask": obs.mask is not None,
            "extra": dict(meta or {}),
        },
    )
    return out_dir


def _read_counts(path: Path, dims: tuple[int, int, int], t: int) -> np.ndarray:
    I, K, N = dims
    out = np.zeros((I, K, N), dtype=np.int64)
    if not path.exists():
        raise ValueError(f"dataset_incomplete:missing_counts_file:t={t}")
    frame = pd.read_csv(path)
    if list(frame.columns) != COUNT_COLUMNS:
        raise ValueError(f"dataset_invalid_header:{path.name}:{list(frame.columns)}")
    if frame.empty:
        return out
    src = frame["source"].to_numpy(dtype=np.int64)
    k = frame["k"].to_numpy(dtype=np.int64)
    n = frame["n"].to_numpy(dtype=np.int64)
    bad = (src < 0) | (src >= I) | (k < 0) | (k >= K) | (n < 0) | (n >= N)
    if bad.any():
        row = int(np.argmax(bad)) + 2
        raise ValueError(f"dataset_index_out_of_range:{path.name}:line={row}")
    np.add.at(out, (src, k, n), frame["count"].to_numpy(dtype=np.int64))
    return out


def load_dataset(path: Path) -> DatasetBundle:
    root = Path(path)
    meta = read_json(root / "meta.json")
    if meta.get("layout") != LAYOUT_VERSION:
        raise ValueError(f"dataset_layout_unsupported:{meta.get('layout')}")
    dims = meta["dims"]
    T, I, K, N = (int(dims[key]) for key in ("T", "I", "K", "N"))
    counts = np.stack([_read_counts(root / f"counts_t{t}.csv", (I, K, N), t) for t in range(T)])
    n = np.asarray(meta["n"], dtype=np.int64).reshape(T, I)
    Z, _ = normalize_counts(counts, n)
    mask = None
    if meta.get("has_mask"):
        mask = np.zeros((T, I, K, N), dtype=bool)
        frame = pd.read_csv(root / "mask.csv")
        mask[frame["t"], frame["source"], frame["k"], frame["n"]] = True
    obs = ObservationSet(Z=Z, counts=counts, n=n, mask=mask)

    hidden = None
    states_path = root / "hidden_states.csv"
    if states_path.exists():
        frame = pd.read_csv(states_path)
        J = int(frame["group"].max()) + 1
        states = np.zeros((T, I, J), dtype=np.int64)
        states[frame["t"], frame["source"], frame["group"]] = frame["state"]
        draws = None
        draws_path = root / "group_draws.csv"
        if draws_path.exists():
            draws = np.loadtxt(draws_path, dtype=np.int64, delimiter=",", ndmin=2).reshape(T, I, J)
        hidden = HiddenRecord(states=states, group_draws=draws)

    truth_path = root / "truth_params.json"
    truth = ModelParams.load_json(truth_path) if truth_path.exists() else None
    original = load_dataset(root / "original").obs if (root / "original" / "meta.json").exists() else None
    return DatasetBundle(obs=obs, hidden=hidden, truth=truth, original=original, meta=dict(meta.get("extra") or {}))
