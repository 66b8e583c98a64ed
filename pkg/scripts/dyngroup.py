from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import yaml
from dotenv import load_dotenv

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))
load_dotenv(ROOT / ".env", override=False)

from scripts._support.run_manifest import (
    TERMINAL_RUN_STATUSES,
    RunManifest,
    RunStatusSupervisor,
    collect_run_state,
    exit_code_for,
    format_run_status_line,
    load_manifest,
)
from scripts._support.sweep_support import SWEEP_AXES, build_cells, default_workers, run_sweep, summarize
from support.dyngroup.datasets import load_dataset, save_dataset
from support.dyngroup.estimator import (
    FitConfig,
    FitReport,
    align_to_truth,
    fit,
    mse,
    recover_tensor,
)
from support.dyngroup.generator import GenConfig, apply_missing_mask, sample_dataset
from support.dyngroup.ingest import build_coauthor_tensor, group_membership_summary, load_coauthor_records, load_events
from support.dyngroup.model import DynamicTensor
from support.dyngroup.order_select import init_params, select_orders
from support.dyngroup.utils import env_flag, load_config_file, progress, write_json

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CAPPED = 2


def parse_orders(raw: str) -> tuple[int, tuple[int, ...]] | None:
    """``auto`` or ``J:Q1,Q2,...``."""
    token = str(raw or "").strip().lower()
    if token in {"", "auto"}:
        return None
    try:
        head, tail = token.split(":", 1)
        J = int(head)
        counts = tuple(int(q) for q in tail.split(",") if q.strip())
    except ValueError as exc:
        raise ValueError(f"invalid_orders:{raw}") from exc
    if J < 1 or len(counts) != J or any(q < 1 for q in counts):
        raise ValueError(f"invalid_orders:{raw}")
    return J, counts


def parse_values(raw: str) -> list[float]:
    try:
        return [float(v) for v in str(raw).split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"invalid_sweep_values:{raw}") from exc


def _fit_config(path: str | None, *, seed: int | None, symmetric: bool) -> FitConfig:
    payload = load_config_file(path) if path else {}
    cfg = FitConfig.from_mapping(payload)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    if symmetric:
        cfg = dataclasses.replace(cfg, symmetric=True)
    return cfg


def cmd_simulate(args: argparse.Namespace, manifest: RunManifest) -> int:
    payload = load_config_file(args.config)
    cfg = GenConfig.from_mapping(payload, base_dir=Path(args.config).resolve().parent)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed))
    manifest.config = {"gen": cfg.snapshot(), "missing_fraction": args.missing_fraction}
    manifest.seed = cfg.seed
    manifest.inputs["config"] = str(Path(args.config).resolve())
    progress(f"[simulate] T={cfg.T} dims={cfg.params.dims} seed={cfg.seed}")
    obs, hidden = sample_dataset(cfg)
    if args.missing_fraction > 0:
        masked = apply_missing_mask(obs, args.missing_fraction, seed=cfg.seed + 1)
        save_dataset(args.out, masked, hidden=hidden, truth=cfg.params, original=obs, meta={"missing_fraction": args.missing_fraction})
    else:
        save_dataset(args.out, obs, hidden=hidden, truth=cfg.params)
    manifest.outputs["dataset"] = str(Path(args.out).resolve())
    progress(f"[simulate] wrote {args.out}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace, manifest: RunManifest) -> int:
    bundle = load_dataset(Path(args.dataset))
    obs = bundle.obs
    symmetric = bool(args.symmetric or bundle.meta.get("symmetric"))
    cfg = _fit_config(args.config, seed=args.seed, symmetric=symmetric)
    orders = parse_orders(args.orders) if args.orders else None
    manifest.config = {"fit": cfg.snapshot(), "orders": args.orders, "init": args.init}
    manifest.seed = cfg.seed
    manifest.inputs["dataset"] = str(Path(args.dataset).resolve())
    status = RunStatusSupervisor(out_dir=Path(args.out), command="fit")
    status.update(status="running", progress_label="fit.init")

    if args.init == "truth":
        if bundle.truth is None:
            raise ValueError("fit_init_truth_unavailable:truth_params.json_missing")
        init = bundle.truth
        if orders is not None and orders != (init.dims.J, init.dims.state_counts):
            raise ValueError(f"orders_mismatch:data_truth={init.dims.state_counts}:requested={orders[1]}")
    else:
        if orders is None:
            plan = select_orders(obs, args.k_max, seed=cfg.seed)
            orders = (plan.J, plan.state_counts)
        init = init_params(obs, orders[0], orders[1], symmetric=symmetric, seed=cfg.seed, fit_cfg=cfg)
    if (init.dims.K, init.dims.N, init.dims.I) != (obs.K, obs.N, obs.I):
        raise ValueError(f"dims_mismatch:data={(obs.K, obs.N, obs.I)}:model={(init.dims.K, init.dims.N, init.dims.I)}")

    trace_path = Path(args.out) / "filter_trace.csv" if env_flag("DYNGROUP_FILTER_TRACE") else None
    report = fit(obs, init, cfg, on_iteration=status.observe_iteration, trace_path=trace_path)
    report.save(Path(args.out))
    manifest.outputs["report"] = str((Path(args.out) / "report.json").resolve())
    if report.stop_reason.startswith("aborted:"):
        code, final = EXIT_FAILED, "aborted"
    elif report.converged:
        code, final = EXIT_OK, "completed"
    else:
        code, final = EXIT_CAPPED, "capped"
    status.update(
        status=final,
        progress_label=f"fit.{report.stop_reason}",
        iteration=report.iterations,
        mse=report.mse_trace[-1],
        error=report.stop_reason if code == EXIT_FAILED else "",
    )
    progress(f"[fit] done iterations={report.iterations} converged={report.converged} reason={report.stop_reason}")
    return code


def cmd_select_order(args: argparse.Namespace, manifest: RunManifest) -> int:
    bundle = load_dataset(Path(args.dataset))
    manifest.config = {"k_max": args.k_max, "kind": args.kind, "threshold": args.threshold}
    manifest.seed = args.seed
    manifest.inputs["dataset"] = str(Path(args.dataset).resolve())
    plan = select_orders(bundle.obs, args.k_max, kind=args.kind, threshold=args.threshold, seed=args.seed)
    rows: list[dict[str, Any]] = []
    for k, f_k in plan.group_selection.scores.items():
        rows.append({"level": "groups", "group": -1, "k": k, "f_k": f_k, "distortion": plan.group_selection.distortions[k]})
    for j, sel in enumerate(plan.state_selections):
        if sel is None:
            continue
        for k, f_k in sel.scores.items():
            rows.append({"level": "states", "group": j, "k": k, "f_k": f_k, "distortion": sel.distortions[k]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["level", "group", "k", "f_k", "distortion"]).to_csv(out / "order_curve.csv", index=False)
    write_json(
        out / "orders.json",
        {"J": plan.J, "state_counts": list(plan.state_counts), "orders": f"{plan.J}:{','.join(str(q) for q in plan.state_counts)}"},
    )
    manifest.outputs["order_curve"] = str((out / "order_curve.csv").resolve())
    return EXIT_OK


def _evaluate_report(args: argparse.Namespace, manifest: RunManifest) -> int:
    report = FitReport.load(Path(args.report))
    bundle = load_dataset(Path(args.dataset))
    manifest.inputs.update({"report": str(Path(args.report).resolve()), "dataset": str(Path(args.dataset).resolve())})
    recovered = recover_tensor(report.params, report.decoded_states)
    rows = [("mse_vs_input", mse(recovered, bundle.obs)), ("iterations", float(report.iterations))]
    if bundle.original is not None:
        rows.append(("mse_vs_original", mse(recovered, bundle.original)))
        rows.append(("mse_input_vs_original", mse(DynamicTensor(slices=bundle.obs.Z), bundle.original)))
    if bundle.truth is not None:
        alignment = align_to_truth(report.params, bundle.truth)
        rows.extend((f"err_{name}", value) for name, value in alignment.errors.items())
        if bundle.hidden is not None:
            mapped = alignment.map_states(report.decoded_states)
            rows.append(("state_accuracy", float(np.mean(mapped == bundle.hidden.states))))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["metric", "value"]).to_csv(out / "metrics.csv", index=False)
    manifest.outputs["metrics"] = str((out / "metrics.csv").resolve())
    return EXIT_OK


async def _evaluate_sweep(args: argparse.Namespace, manifest: RunManifest) -> int:
    if not args.config:
        raise ValueError("evaluate_sweep_requires_config")
    gen_payload = load_config_file(args.config)
    fit_payload = load_config_file(args.fit_config) if args.fit_config else {}
    values = parse_values(args.values)
    cells = build_cells(
        args.sweep,
        values,
        runs=args.runs,
        gen_payload=gen_payload,
        fit_payload=fit_payload,
        init=args.init,
        base_seed=args.seed or 0,
    )
    manifest.config = {"gen": gen_payload, "fit": fit_payload, "sweep": args.sweep, "values": values, "runs": args.runs}
    manifest.seed = args.seed or 0
    manifest.inputs["config"] = str(Path(args.config).resolve())
    out = Path(args.out)
    status = RunStatusSupervisor(out_dir=out, command=f"evaluate.sweep:{args.sweep}")
    status.update(status="running", progress_label="sweep.start", cells_total=len(cells))

    def _on_cell(done: int, total: int, row: dict[str, Any]) -> None:
        status.update(status="running", progress_label="sweep.cell", cells_done=done, cells_total=total, mse=row["mse"])
        progress(f"[sweep] {done}/{total} {row['axis']}={row['value']:g} run={row['run']} mse={row['mse']:.6e}")

    rows = await run_sweep(cells, max_workers=default_workers(), on_cell_done=_on_cell)
    pd.DataFrame(rows).to_csv(out / "sweep_runs.csv", index=False)
    summarize(rows).to_csv(out / "sweep_summary.csv", index=False)
    status.update(status="completed", progress_label="sweep.done", cells_done=len(cells), cells_total=len(cells))
    manifest.outputs.update(
        {"runs": str((out / "sweep_runs.csv").resolve()), "summary": str((out / "sweep_summary.csv").resolve())}
    )
    return EXIT_OK


async def cmd_evaluate(args: argparse.Namespace, manifest: RunManifest) -> int:
    if args.sweep:
        return await _evaluate_sweep(args, manifest)
    if not (args.report and args.dataset):
        raise ValueError("evaluate_requires_report_and_dataset_or_sweep")
    return _evaluate_report(args, manifest)


def _write_membership(args: argparse.Namespace, manifest: RunManifest, *, entities: list[str]) -> None:
    params = FitReport.load(Path(args.membership_from)).params
    if params.dims.K != len(entities):
        raise ValueError(f"membership_dims_mismatch:entities={len(entities)}:model_K={params.dims.K}")
    summary = group_membership_summary(params, threshold=args.membership_threshold)
    path = Path(args.out) / "group_membership.json"
    write_json(path, {"threshold": args.membership_threshold, **summary.to_dict(entities)})
    manifest.inputs["membership_from"] = str(Path(args.membership_from).resolve())
    manifest.outputs["group_membership"] = str(path.resolve())
    progress(f"[ingest] group membership exclusive={list(summary.exclusive)}")


def cmd_ingest(args: argparse.Namespace, manifest: RunManifest) -> int:
    if bool(args.events) == bool(args.coauthor):
        raise ValueError("ingest_requires_exactly_one_of_events_or_coauthor")
    if args.membership_from and not args.coauthor:
        raise ValueError("membership_requires_coauthor")
    if args.events:
        obs = load_events(Path(args.events), meta_path=Path(args.meta) if args.meta else None)
        save_dataset(args.out, obs, meta={"source_format": "events"})
        manifest.inputs["events"] = str(Path(args.events).resolve())
    else:
        records = load_coauthor_records(Path(args.coauthor))
        tensor = build_coauthor_tensor(
            records,
            time_bucket_len=args.bucket_len,
            min_entity_count=args.min_entity_count,
            min_source_count=args.min_source_count,
            start=args.start,
        )
        obs = tensor.obs
        save_dataset(args.out, obs, meta={"source_format": "coauthor", **tensor.meta()})
        manifest.inputs["coauthor"] = str(Path(args.coauthor).resolve())
        if args.membership_from:
            _write_membership(args, manifest, entities=sorted(tensor.entity_index, key=tensor.entity_index.__getitem__))
    manifest.config = {
        "bucket_len": args.bucket_len,
        "min_entity_count": args.min_entity_count,
        "min_source_count": args.min_source_count,
        "start": args.start,
        "membership_threshold": args.membership_threshold,
    }
    manifest.outputs["dataset"] = str(Path(args.out).resolve())
    progress(f"[ingest] T={obs.T} I={obs.I} K={obs.K} N={obs.N} missing_slices={int((~obs.observed).sum())}")
    return EXIT_OK


async def cmd_watch(args: argparse.Namespace) -> int:
    """Print the state of a fit or sweep output directory; ``--follow`` polls until it finishes."""
    if not args.follow:
        state = collect_run_state(args.path)
        print(json.dumps(state, ensure_ascii=False, indent=2) if args.json else format_run_status_line(state), flush=True)
        return EXIT_OK
    last_line = ""
    polls = 0
    while True:
        state = collect_run_state(args.path)
        line = format_run_status_line(state)
        if line != last_line:
            print(line, flush=True)
            last_line = line
        if "exit_code" in state or state.get("status") in TERMINAL_RUN_STATUSES:
            return exit_code_for(state)
        polls += 1
        if args.max_polls is not None and polls >= args.max_polls:
            return EXIT_OK
        await asyncio.sleep(max(0.05, float(args.interval_s)))


def _materialize_replay_argv(payload: dict[str, Any], out_override: str | None) -> list[str]:
    argv = list(payload["argv"])
    out_dir = Path(out_override) if out_override else None
    for idx, token in enumerate(argv[:-1]):
        if token == "--out" and out_dir is not None:
            argv[idx + 1] = str(out_dir)
    snapshot = payload.get("config_file_snapshot")
    for idx, token in enumerate(argv[:-1]):
        if token in {"--config", "--fit-config"} and not Path(argv[idx + 1]).exists() and isinstance(snapshot, dict):
            content = snapshot.get(token)
            if content is None:
                continue
            target_dir = out_dir or Path.cwd()
            target_dir.mkdir(parents=True, exist_ok=True)
            target = target_dir / f"replay{token.replace('--', '_')}.yaml"
            target.write_text(yaml.safe_dump(content, sort_keys=True), encoding="utf-8")
            argv[idx + 1] = str(target)
    return argv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dynamic latent-group tensor model: simulate, fit, select orders, evaluate, ingest.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate a synthetic dataset directory")
    p.add_argument("--config", required=True, help="YAML/JSON generator config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--missing-fraction", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="Run filter-based EM on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None, help="YAML/JSON fit config")
    p.add_argument("--orders", default=None, help="auto | J:Q1,Q2,...")
    p.add_argument("--init", choices=("kmeans", "truth"), default="kmeans")
    p.add_argument("--k-max", type=int, default=6)
    p.add_argument("--symmetric", action="store_true", default=False)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("select-order", help="Choose J and Q_j from k-means distortion curves")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k-max", type=int, default=6)
    p.add_argument("--kind", choices=("slices", "degree"), default="slices")
    p.add_argument("--threshold", type=float, default=0.85)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="Metrics for a fit report, or an MSE sweep")
    p.add_argument("--report", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--sweep", choices=SWEEP_AXES, default=None)
    p.add_argument("--values", default="")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--config", default=None, help="Base generator config for sweeps")
    p.add_argument("--fit-config", default=None)
    p.add_argument("--init", choices=("kmeans", "truth"), default="kmeans", help="truth starts every cell at the generating parameters (oracle)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="Build a dataset directory from an events or co-author CSV")
    p.add_argument("--events", default=None)
    p.add_argument("--meta", default=None)
    p.add_argument("--coauthor", default=None)
    p.add_argument("--bucket-len", type=int, default=1)
    p.add_argument("--min-entity-count", type=int, default=0)
    p.add_argument("--min-source-count", type=int, default=0)
    p.add_argument("--start", type=int, default=None)
    p.add_argument("--membership-from", default=None, help="Fit output directory on the same co-author data; writes group_membership.json")
    p.add_argument("--membership-threshold", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("watch", help="Show iteration, MSE, stop reason and exit code of an output directory")
    p.add_argument("path", help="Output directory or one of its run_status.json / run_manifest.json / report.json")
    p.add_argument("--follow", action="store_true", default=False, help="Poll until the run finishes")
    p.add_argument("--interval-s", type=float, default=1.5)
    p.add_argument("--max-polls", type=int, default=None)
    p.add_argument("--json", action="store_true", default=False, help="Print the merged state as JSON")

    p = sub.add_parser("replay", help="Re-run the command recorded in a run manifest")
    p.add_argument("manifest", help="run_manifest.json or its directory")
    p.add_argument("--out", default=None, help="Write outputs here instead of the recorded directory")
    return parser


def _config_snapshot(argv: Sequence[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for idx, token in enumerate(argv[:-1]):
        if token in {"--config", "--fit-config"} and Path(argv[idx + 1]).exists():
            out[token] = load_config_file(argv[idx + 1])
    return out


async def run(argv: Sequence[str]) -> int:
    args = build_parser().parse_args(list(argv))
    if args.command == "replay":
        payload = load_manifest(args.manifest)
        replay_argv = _materialize_replay_argv(payload, args.out)
        progress(f"[replay] {' '.join(replay_argv)}")
        return await run(replay_argv)
    if args.command == "watch":
        return await cmd_watch(args)

    manifest = RunManifest(command=args.command, argv=list(argv))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "simulate":
            code = cmd_simulate(args, manifest)
        elif args.command == "fit":
            code = cmd_fit(args, manifest)
        elif args.command == "select-order":
            code = cmd_select_order(args, manifest)
        elif args.command == "evaluate":
            code = await cmd_evaluate(args, manifest)
        else:
            code = cmd_ingest(args, manifest)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"✗ {exc}", file=sys.stderr, flush=True)
        if args.command in {"fit", "evaluate"}:
            RunStatusSupervisor(out_dir=out, command=args.command).update(
                status="failed", progress_label=f"{args.command}.error", error=str(exc)
            )
        code = EXIT_FAILED
    manifest.config_files = _config_snapshot(argv)
    manifest.finish(code)
    manifest.write(out)
    return code


async def main() -> int:
    if env_flag("DYNGROUP_DEBUG"):
        print(f"[dyngroup] workers={default_workers()} pid={os.getpid()}", flush=True)
    return await run(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(asyncio.run(main()))
