from __future__ import annotations

import json
import shutil
from pathlib import Path

import pandas as pd
import pytest

from scripts._support.run_manifest import RunStatusSupervisor
from scripts.dyngroup import parse_orders, parse_values, run
from support.dyngroup.datasets import load_dataset


def _read(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


async def _simulate(fixtures_dir: Path, out: Path, *extra: str) -> int:
    return await run(["simulate", "--config", str(fixtures_dir / "small_synthetic.yaml"), "--out", str(out), *extra])


def test_parse_orders() -> None:
    assert parse_orders("auto") is None
    assert parse_orders("2:2,3") == (2, (2, 3))
    for bad in ("2:2", "x:1", "1:0", "0:"):
        with pytest.raises(ValueError, match="invalid_orders"):
            parse_orders(bad)
    assert parse_values("0,0.1, 0.2") == [0.0, 0.1, 0.2]


async def test_simulate_writes_dataset_and_manifest(tmp_path, fixtures_dir) -> None:
    out = tmp_path / "sim"
    assert await _simulate(fixtures_dir, out, "--missing-fraction", "0.25") == 0

    bundle = load_dataset(out)
    assert bundle.truth is not None
    assert bundle.hidden is not None
    assert bundle.original is not None
    assert bundle.obs.mask is not None and bundle.obs.mask.any()
    manifest = _read(out / "run_manifest.json")
    assert manifest["command"] == "simulate"
    assert manifest["exit_code"] == 0
    assert manifest["seed"] == 5
    assert manifest["config_file_snapshot"]["--config"]["T"] == 12


async def test_fit_from_truth_reports_and_sets_exit_code(tmp_path, fixtures_dir, monkeypatch) -> None:
    monkeypatch.setenv("DYNGROUP_FILTER_TRACE", "1")
    await _simulate(fixtures_dir, tmp_path / "sim")
    out = tmp_path / "fit"

    code = await run(
        ["fit", "--dataset", str(tmp_path / "sim"), "--config", str(fixtures_dir / "fit_quick.yaml"), "--init", "truth", "--out", str(out)]
    )

    report = _read(out / "report.json")
    status = _read(out / "run_status.json")
    assert code == (0 if report["converged"] else 2)
    assert status["status"] == ("completed" if report["converged"] else "capped")
    assert (out / "mse_trace.csv").exists()
    assert (out / "decoded_states.csv").exists()
    assert (out / "filter_trace.csv").exists()
    assert _read(out / "run_manifest.json")["exit_code"] == code


async def test_fit_with_explicit_orders_and_kmeans_init(tmp_path, fixtures_dir) -> None:
    await _simulate(fixtures_dir, tmp_path / "sim")
    out = tmp_path / "fit"
    code = await run(
        ["fit", "--dataset", str(tmp_path / "sim"), "--config", str(fixtures_dir / "fit_quick.yaml"), "--orders", "2:2,1", "--out", str(out)]
    )
    assert code in {0, 2}
    assert _read(out / "report.json")["params"]["dims"]["Q"] == [2, 1]


async def test_fit_failure_exits_one_and_marks_status(tmp_path, fixtures_dir, capsys) -> None:
    await _simulate(fixtures_dir, tmp_path / "sim")
    out = tmp_path / "fit"
    code = await run(["fit", "--dataset", str(tmp_path / "sim"), "--init", "truth", "--orders", "1:3", "--out", str(out)])
    assert code == 1
    assert "✗ orders_mismatch" in capsys.readouterr().err
    assert _read(out / "run_status.json")["status"] == "failed"
    assert _read(out / "run_manifest.json")["exit_code"] == 1


async def test_select_order_writes_curve_and_orders(tmp_path, fixtures_dir) -> None:
    await _simulate(fixtures_dir, tmp_path / "sim")
    out = tmp_path / "orders"
    assert await run(["select-order", "--dataset", str(tmp_path / "sim"), "--k-max", "4", "--out", str(out)]) == 0
    curve = pd.read_csv(out / "order_curve.csv")
    assert list(curve.columns) == ["level", "group", "k", "f_k", "distortion"]
    assert curve.loc[(curve["level"] == "groups") & (curve["k"] == 1), "f_k"].tolist() == [1.0]
    orders = _read(out / "orders.json")
    assert orders["J"] == len(orders["state_counts"])


async def test_evaluate_single_report(tmp_path, fixtures_dir) -> None:
    await _simulate(fixtures_dir, tmp_path / "sim", "--missing-fraction", "0.1")
    await run(
        ["fit", "--dataset", str(tmp_path / "sim"), "--config", str(fixtures_dir / "fit_quick.yaml"), "--init", "truth", "--out", str(tmp_path / "fit")]
    )
    out = tmp_path / "eval"
    assert await run(["evaluate", "--report", str(tmp_path / "fit"), "--dataset", str(tmp_path / "sim"), "--out", str(out)]) == 0
    metrics = dict(pd.read_csv(out / "metrics.csv").itertuples(index=False))
    assert {"mse_vs_input", "mse_vs_original", "mse_input_vs_original", "err_X", "err_A", "state_accuracy"} <= set(metrics)
    assert 0.0 <= metrics["state_accuracy"] <= 1.0


async def test_evaluate_requires_inputs(tmp_path) -> None:
    assert await run(["evaluate", "--out", str(tmp_path / "eval")]) == 1


async def test_ingest_events_and_coauthor(tmp_path, fixtures_dir) -> None:
    events_out = tmp_path / "events"
    assert await run(["ingest", "--events", str(fixtures_dir / "events_small.csv"), "--out", str(events_out)]) == 0
    assert load_dataset(events_out).obs.n.tolist() == [[4, 4], [4, 0], [5, 4]]

    co_out = tmp_path / "co"
    assert await run(["ingest", "--coauthor", str(fixtures_dir / "coauthor_small.csv"), "--bucket-len", "2", "--out", str(co_out)]) == 0
    bundle = load_dataset(co_out)
    assert bundle.meta["symmetric"] is True
    assert bundle.meta["bucket_starts"] == [2001, 2003]

    fit_out = tmp_path / "co_fit"
    code = await run(
        ["fit", "--dataset", str(co_out), "--config", str(fixtures_dir / "fit_quick.yaml"), "--orders", "1:2", "--out", str(fit_out)]
    )
    assert code in {0, 2}
    params = _read(fit_out / "report.json")["params"]
    assert params["X"] == params["Y"]
    assert _read(fit_out / "run_manifest.json")["config"]["fit"]["symmetric"] is True

    member_out = tmp_path / "co_members"
    assert await run(
        ["ingest", "--coauthor", str(fixtures_dir / "coauthor_small.csv"), "--bucket-len", "2",
         "--membership-from", str(fit_out), "--membership-threshold", "0", "--out", str(member_out)]
    ) == 0
    membership = _read(member_out / "group_membership.json")
    assert membership["threshold"] == 0.0
    assert membership["groups"] == [{"group": 0, "active": bundle.meta["entities"], "exclusive": 4}]
    assert membership["shared"] == []
    assert _read(member_out / "run_manifest.json")["outputs"]["group_membership"] == str((member_out / "group_membership.json").resolve())


async def test_ingest_requires_exactly_one_source(tmp_path, fixtures_dir) -> None:
    assert await run(["ingest", "--out", str(tmp_path / "x")]) == 1
    events = str(fixtures_dir / "events_small.csv")
    assert await run(["ingest", "--events", events, "--membership-from", str(tmp_path), "--out", str(tmp_path / "y")]) == 1


async def test_replay_reproduces_simulation_bit_for_bit(tmp_path, fixtures_dir) -> None:
    config = tmp_path / "gen.yaml"
    shutil.copy(fixtures_dir / "small_synthetic.yaml", config)
    first = tmp_path / "first"
    assert await run(["simulate", "--config", str(config), "--out", str(first)]) == 0
    config.unlink()

    second = tmp_path / "second"
    assert await run(["replay", str(first), "--out", str(second)]) == 0

    for name in ("counts_t0.csv", "counts_t11.csv", "hidden_states.csv", "truth_params.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert (second / "replay_config.yaml").exists()


@pytest.mark.slow
async def test_evaluate_sweep_over_sample_size(tmp_path, fixtures_dir, monkeypatch) -> None:
    monkeypatch.setenv("DYNGROUP_THREADS", "2")
    out = tmp_path / "sweep"
    code = await run(
        [
            "evaluate",
            "--sweep",
            "n",
            "--values",
            "50,400",
            "--runs",
            "2",
            "--config",
            str(fixtures_dir / "small_synthetic.yaml"),
            "--fit-config",
            str(fixtures_dir / "fit_quick.yaml"),
            "--out",
            str(out),
        ]
    )
    assert code == 0
    runs = pd.read_csv(out / "sweep_runs.csv")
    summary = pd.read_csv(out / "sweep_summary.csv")
    assert len(runs) == 4
    assert set(runs["init"]) == {"kmeans"}
    assert summary["value"].tolist() == [50.0, 400.0]
    low_n, high_n = summary["mse_mean"].tolist()
    assert high_n < low_n
    assert _read(out / "run_status.json")["status"] == "completed"


async def test_watch_reports_the_finished_fit(tmp_path, fixtures_dir, capsys) -> None:
    await _simulate(fixtures_dir, tmp_path / "sim")
    out = tmp_path / "fit"
    code = await run(
        ["fit", "--dataset", str(tmp_path / "sim"), "--config", str(fixtures_dir / "fit_quick.yaml"), "--init", "truth", "--out", str(out)]
    )
    report = _read(out / "report.json")
    capsys.readouterr()

    assert await run(["watch", str(out), "--follow", "--interval-s", "0.05"]) == code
    line = capsys.readouterr().out.strip()
    assert f"reason={report['stop_reason']}" in line
    assert f"iter={report['iterations']}" in line
    assert f"exit={code}" in line

    assert await run(["watch", str(out / "run_status.json"), "--json"]) == 0
    state = json.loads(capsys.readouterr().out)
    assert state["mse"] == report["mse_trace"][-1]
    assert state["exit_code"] == code


async def test_watch_gives_up_on_a_running_fit_after_max_polls(tmp_path, capsys) -> None:
    RunStatusSupervisor(out_dir=tmp_path, command="fit").observe_iteration(3, 0.1)
    assert await run(["watch", str(tmp_path), "--follow", "--interval-s", "0.05", "--max-polls", "2"]) == 0
    assert "iter=3" in capsys.readouterr().out
