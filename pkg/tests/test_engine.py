from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List

import pytest

from obpuf import tuning
from obpuf.config_service import ConfigService, RunConfig
from obpuf.engine import operating_point, run_command
from obpuf.reports import RunLog, read_table, write_table


def _config(command: str, out: Path, **values: Any) -> RunConfig:
    return RunConfig.from_sources(command, {}, {"seed": 17, "out": out, **values})


def _small_protocol(out: Path, **values: Any) -> RunConfig:
    base = dict(
        k=16,
        n_ins=2,
        p=2,
        m=2,
        xors=1,
        devices=1,
        genuine_sessions=3,
        impostor_sessions=3,
        n=60,
        n_th=18,
        trial_budget=4,
    )
    base.update(values)
    return _config("protocol", out, **base)


@pytest.fixture
def fast_calibration(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(tuning, "CALIBRATION_TRIALS", 20_000)


def test_capability_writes_tables_and_run_log(tmp_path: Path) -> None:
    cfg = _config("capability", tmp_path, configs=[[2, 2, 0], [4, 4, 0]], targets=[1e-6])
    report = run_command(cfg)
    rows = read_table(tmp_path / "capability.csv")
    assert [row["config"] for row in rows] == ["OB-PUF(2,2,0)", "OB-PUF(4,4,0)"]
    assert rows[0]["n"] == "294"
    assert (tmp_path / "estimator_sweep.csv").exists()
    assert (tmp_path / "capability_discrepancy.csv").exists()
    log_dir = tmp_path / "logs" / report["run_id"]
    assert "Seed: 17" in (log_dir / "run_log.txt").read_text(encoding="utf-8")
    saved = json.loads((log_dir / "run_report.json").read_text(encoding="utf-8"))
    assert saved["summary"]["rows"] == 2
    assert saved["tuning"]["P_INTRA_PUF"] == tuning.P_INTRA_PUF


def test_primary_outputs_depend_only_on_the_seed(tmp_path: Path) -> None:
    for name in ("a", "b"):
        run_command(_config("design", tmp_path / name, k=32, m=2, p=2, n_ins=2, trial_budget=4))
    for output in ("design_fhd.csv", "pattern_set.json"):
        first = (tmp_path / "a" / output).read_bytes()
        assert first == (tmp_path / "b" / output).read_bytes(), f"{output} differs between identical runs"


def test_adversarial_design_reports_low_divergence(tmp_path: Path) -> None:
    report = run_command(_config("design", tmp_path, adversarial_first_positions=True))
    summary = report["summary"]
    assert summary["family"] == "first-positions"
    assert summary["challenge_fhd_mean"] == pytest.approx((8 / 6) / 64, abs=1e-6)
    assert summary["expected_response_fhd"] == pytest.approx(0.078, abs=1e-3)
    assert summary["response_fhd_mean"] == pytest.approx(summary["expected_response_fhd"], abs=0.03)
    assert 0.03 < summary["response_fhd_floor"] <= summary["expected_response_fhd"]
    assert any("below" in warning for warning in report["warnings"])
    ps = ConfigService().load_pattern_set(tmp_path / "pattern_set.json")
    assert all(pv.insert_positions == (1, 2, 3) for pv in ps.patterns)


def test_operating_point() -> None:
    cfg = RunConfig.from_sources("protocol", {}, {"seed": 1, "n_ins": 2, "p": 2, "m": 1, "eer_target": 1e-6})
    params = operating_point(cfg)
    assert (params.n, params.n_th) == (294, 57)
    explicit = RunConfig.from_sources("protocol", {}, {"seed": 1, "n": 10})
    assert (operating_point(explicit).n, operating_point(explicit).n_th) == (10, 0)


def test_protocol_run(tmp_path: Path, fast_calibration: None) -> None:
    events: List[Dict[str, Any]] = []
    report = run_command(_small_protocol(tmp_path / "a"), progress_callback=events.append)
    assert report["summary"]["genuine"]["sessions"] == 3
    assert report["summary"]["impostor"]["accepted"] == 0
    assert report["summary"]["genuine"]["accepted"] == 3
    lines = (tmp_path / "a" / "transcripts.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 6
    assert {json.loads(line)["label"] for line in lines} == {"genuine", "impostor"}
    (server,) = ConfigService().load_enrollment(tmp_path / "a" / "enrollment.json")
    assert server.device_id == "device-0"
    assert events[0]["event"] == "start"

    run_command(_small_protocol(tmp_path / "b", transport="socket", workers=2))
    assert (tmp_path / "a" / "transcripts.jsonl").read_bytes() == (tmp_path / "b" / "transcripts.jsonl").read_bytes()


def test_attack_run_writes_report_and_trace(tmp_path: Path) -> None:
    cfg = _config("attack", tmp_path, target="apuf", k=16, crps=200, generations=3)
    report = run_command(cfg)
    assert len(report["summary"]["p_pred"]) == 1
    assert len(read_table(tmp_path / "attack_trace.csv")) == 3
    assert read_table(tmp_path / "attack_report.csv")[0]["target"] == "apuf"


def test_distances_run(tmp_path: Path, fast_calibration: None) -> None:
    cfg = _config("distances", tmp_path, k=16, n_ins=2, p=2, m=2, xors=1, devices=2, trials=400, trial_budget=4)
    report = run_command(cfg)
    row = report["summary"]
    assert 0.0 <= row["p_intra_hat"] <= row["p_intra_ci_high"] <= 1.0
    assert row["p_inter_hat"] is not None
    histogram = read_table(tmp_path / "distances_histogram.csv")
    assert len(histogram) == 3


def test_write_table_formats(tmp_path: Path) -> None:
    rows = [{"a": 1, "b": 0.5}, {"a": 2, "b": None}]
    csv_path = write_table(rows, tmp_path / "t", "csv", "capability", {"seed": 3})
    first = csv_path.read_text(encoding="utf-8").splitlines()[0]
    assert first.startswith("# obpuf ") and "command=capability seed=3" in first
    assert read_table(csv_path) == [{"a": "1", "b": "0.5"}, {"a": "2", "b": ""}]
    json_path = write_table(rows, tmp_path / "t", "json", "capability", {"seed": 3})
    payload = json.loads(json_path.read_text(encoding="utf-8"))
    assert payload["provenance"] == {"seed": 3} and payload["rows"][1]["b"] is None
    with pytest.raises(ValueError):
        write_table(rows, tmp_path / "t", "xml", "capability", {})


def test_run_log_records_failures_and_swallows_callback_errors(tmp_path: Path) -> None:
    def _broken(msg: str) -> None:
        raise RuntimeError("listener gone")

    with pytest.raises(KeyError):
        with RunLog(tmp_path, "design", log_callback=_broken) as run_log:
            run_log.warn("once")
            run_log.warn("once")
            raise KeyError("boom")
    saved = json.loads(run_log.report_path.read_text(encoding="utf-8"))
    assert saved["warnings"] == ["once"]
    assert saved["error"].startswith("KeyError")
