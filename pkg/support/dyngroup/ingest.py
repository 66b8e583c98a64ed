"""Count-table and co-authorship ingestion into ObservationSet form."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .generator import ObservationSet, normalize_counts
from .model import ModelParams
from .utils import read_json, write_json

EVENT_COLUMNS = ["source", "time", "x", "y", "count"]
COAUTHOR_COLUMNS = ["source", "time", "author_a", "author_b", "weight"]


@dataclass(frozen=True)
class EventRecord:
    source_id: int
    time_bucket: int
    x_index: int
    y_index: int
    count: int


@dataclass(frozen=True)
class CoauthorRecord:
    source_id: str
    time_bucket: int
    author_a: str
    author_b: str
    weight: int

    def __post_init__(self) -> None:
        if int(self.weight) < 1:
            raise ValueError(f"coauthor_record_invalid:weight_below_one:{self.author_a}-{self.author_b}")
        if self.author_a == self.author_b:
            raise ValueError(f"coauthor_record_invalid:self_edge:{self.author_a}")


def _meta_path_for(path: Path) -> Path:
    sidecar = path.with_name(f"{path.stem}.meta.json")
    return sidecar if sidecar.exists() else path.with_name("meta.json")


def _read_header_checked(path: Path, columns: list[str]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if list(frame.columns) != columns:
        raise ValueError(f"invalid_header:{path.name}:expected={columns}:got={list(frame.columns)}")
    return frame


def _int_column(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna() | (values != values.round())
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise ValueError(f"events_parse_error:{path.name}:line={line}:column={column}")
    return values.to_numpy(dtype=np.int64)


def load_events(path: Path, *, meta_path: Path | None = None) -> ObservationSet:
    """Aggregate an events CSV (source,time,x,y,count) into counts per (t, i)."""
    path = Path(path)
    meta = read_json(meta_path or _meta_path_for(path))
    try:
        K, N, I, T = (int(meta[key]) for key in ("K", "N", "I", "T"))
    except KeyError as exc:
        raise ValueError(f"events_meta_missing_key:{exc.args[0]}") from exc
    frame = _read_header_checked(path, EVENT_COLUMNS)
    cols = {name: _int_column(frame, name, path) for name in EVENT_COLUMNS}
    limits = {"source": I, "time": T, "x": K, "y": N}
    for name, limit in limits.items():
        bad = (cols[name] < 0) | (cols[name] >= limit)
        if bad.any():
            line = int(np.flatnonzero(bad)[0]) + 2
            raise ValueError(f"events_index_out_of_range:line={line}:column={name}")
    if np.any(cols["count"] < 1):
        line = int(np.flatnonzero(cols["count"] < 1)[0]) + 2
        raise ValueError(f"events_index_out_of_range:line={line}:column=count")
    counts = np.zeros((T, I, K, N), dtype=np.int64)
    np.add.at(counts, (cols["time"], cols["source"], cols["x"], cols["y"]), cols["count"])
    n = counts.sum(axis=(2, 3))
    Z, _ = normalize_counts(counts, n)
    return ObservationSet(Z=Z, counts=counts, n=n)


def iter_event_records(obs: ObservationSet) -> Iterable[EventRecord]:
    t, i, k, n = np.nonzero(obs.counts)
    for row in zip(t, i, k, n):
        yield EventRecord(
            source_id=int(row[1]),
            time_bucket=int(row[0]),
            x_index=int(row[2]),
            y_index=int(row[3]),
            count=int(obs.counts[row]),
        )


def export_events(obs: ObservationSet, path: Path) -> Path:
    """Write the events CSV and its ``<stem>.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [(r.source_id, r.time_bucket, r.x_index, r.y_index, r.count) for r in iter_event_records(obs)]
    pd.DataFrame(rows, columns=EVENT_COLUMNS).to_csv(path, index=False)
    write_json(path.with_name(f"{path.stem}.meta.json"), {"K": obs.K, "N": obs.N, "I": obs.I, "T": obs.T})
    return path


def load_coauthor_records(path: Path) -> list[CoauthorRecord]:
    path = Path(path)
    frame = _read_header_checked(path, COAUTHOR_COLUMNS)
    times = _int_column(frame, "time", path)
    weights = _int_column(frame, "weight", path)
    out = []
    for idx, (src, a, b) in enumerate(zip(frame["source"], frame["author_a"], frame["author_b"])):
        try:
            out.append(CoauthorRecord(source_id=str(src), time_bucket=int(times[idx]), author_a=str(a), author_b=str(b), weight=int(weights[idx])))
        except ValueError as exc:
            raise ValueError(f"{exc}:line={idx + 2}") from exc
    return out


@dataclass(frozen=True)
class CoauthorTensor:
    obs: ObservationSet
    entity_index: dict[str, int]
    source_index: dict[str, int]
    bucket_starts: tuple[int, ...]
    symmetric: bool = True

    def meta(self) -> dict[str, object]:
        return {
            "entities": sorted(self.entity_index, key=self.entity_index.__getitem__),
            "sources": sorted(self.source_index, key=self.source_index.__getitem__),
            "bucket_starts": list(self.bucket_starts),
            "symmetric": self.symmetric,
        }


def build_coauthor_tensor(
    records: Iterable[CoauthorRecord],
    *,
    time_bucket_len: int = 1,
    min_entity_count: int = 0,
    min_source_count: int = 0,
    start: int | None = None,
    entity_counts: Mapping[str, int] | None = None,
    source_counts: Mapping[tuple[str, int], int] | None = None,
) -> CoauthorTensor:
    """Symmetric weighted co-authorship slices per (bucket, source), normalized by their total weight.

    Buckets are left-closed ``[start + b * len, start + (b + 1) * len)``. Authors whose
    publication count is below ``min_entity_count`` are dropped, as are sources with fewer than
    ``min_source_count`` publications in any bucket. Without explicit counts, an author's count is
    its total incident edge weight and a source's count per bucket is its total edge weight.
    """
    records = list(records)
    if not records:
        raise ValueError("coauthor_records_empty")
    if int(time_bucket_len) < 1:
        raise ValueError(f"invalid_argument:time_bucket_len:{time_bucket_len}")
    origin = min(r.time_bucket for r in records) if start is None else int(start)
    if any(r.time_bucket < origin for r in records):
        raise ValueError("invalid_argument:record_before_start")

    def bucket_of(r: CoauthorRecord) -> int:
        return (r.time_bucket - origin) // time_bucket_len

    T = max(bucket_of(r) for r in records) + 1

    if entity_counts is None:
        tally: Counter[str] = Counter()
        for r in records:
            tally[r.author_a] += r.weight
            tally[r.author_b] += r.weight
        entity_counts = tally
    if source_counts is None:
        per_source: Counter[tuple[str, int]] = Counter()
        for r in records:
            per_source[(r.source_id, bucket_of(r))] += r.weight
        source_counts = per_source

    sources = sorted({r.source_id for r in records})
    kept_sources = [s for s in sources if all(source_counts.get((s, b), 0) >= min_source_count for b in range(T))]
    authors = sorted({a for r in records for a in (r.author_a, r.author_b)})
    kept_authors = [a for a in authors if entity_counts.get(a, 0) >= min_entity_count]
    if not kept_sources or not kept_authors:
        raise ValueError(f"coauthor_filters_removed_everything:sources={len(kept_sources)}:authors={len(kept_authors)}")
    source_index = {s: idx for idx, s in enumerate(kept_sources)}
    entity_index = {a: idx for idx, a in enumerate(kept_authors)}

    E = len(entity_index)
    counts = np.zeros((T, len(source_index), E, E), dtype=np.int64)
    for r in records:
        i = source_index.get(r.source_id)
        a = entity_index.get(r.author_a)
        b = entity_index.get(r.author_b)
        if i is None or a is None or b is None:
            continue
        t = bucket_of(r)
        counts[t, i, a, b] += r.weight
        counts[t, i, b, a] += r.weight
    n = counts.sum(axis=(2, 3))
    Z, _ = normalize_counts(counts, n)
    return CoauthorTensor(
        obs=ObservationSet(Z=Z, counts=counts, n=n),
        entity_index=entity_index,
        source_index=source_index,
        bucket_starts=tuple(origin + b * time_bucket_len for b in range(T)),
    )


@dataclass(frozen=True)
class MembershipSummary:
    active: tuple[frozenset[int], ...]
    exclusive: tuple[int, ...]
    shared: dict[tuple[int, int], int]

    def to_dict(self, entities: Sequence[str] | None = None) -> dict[str, object]:
        def name(k: int) -> object:
            return entities[k] if entities is not None else k

        return {
            "groups": [
                {"group": j, "active": [name(k) for k in sorted(members)], "exclusive": self.exclusive[j]}
                for j, members in enumerate(self.active)
            ],
            "shared": [{"groups": [a, b], "count": count} for (a, b), count in sorted(self.shared.items())],
        }


def group_membership_summary(params: ModelParams, *, threshold: float) -> MembershipSummary:
    """Entities active in each group (dictionary mass above ``threshold`` in any state)."""
    active = []
    for dic in params.dictionaries:
        mass = np.maximum(dic.X.max(axis=1), dic.Y.max(axis=1)) if dic.X.shape == dic.Y.shape else dic.X.max(axis=1)
        active.append(frozenset(int(k) for k in np.flatnonzero(mass > threshold)))
    exclusive = []
    for j, members in enumerate(active):
        others = set().union(*(m for g, m in enumerate(active) if g != j)) if len(active) > 1 else set()
        exclusive.append(len(members - others))
    shared = {(a, b): len(active[a] & active[b]) for a in range(len(active)) for b in range(a + 1, len(active))}
    return MembershipSummary(active=tuple(active), exclusive=tuple(exclusive), shared=shared)
