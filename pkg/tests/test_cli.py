import json

import pytest
from click.testing import CliRunner

from mechlab.cli import main
from mechlab.experiments import (csv_to_records, parse_gammas, records_to_csv, records_to_json,
                                 run_experiment)
from mechlab.core import ConfigurationError
from mechlab.metrics import MetricsRecord, metrics_record, revenue_tight_witness
from mechlab.reduction_midr import ProductGammaDistribution


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, list(args), catch_exceptions=False)


def test_run_is_byte_identical(runner, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / str(k)
        res = invoke(runner, "run", "--config", "midr_demo", "--seed", "7", "--out", str(out))
        assert res.exit_code == 0, res.output
        outs.append((out / "run-midr-seed7.json").read_bytes())
    assert outs[0] == outs[1]


def test_sweep_csv_has_nine_rows(runner, tmp_path):
    res = invoke(runner, "sweep", "--gammas", "0.1:0.9:0.1", "--n", "3", "--out", str(tmp_path))
    assert res.exit_code == 0, res.output
    text = (tmp_path / "sweep-seed0.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == ",".join(MetricsRecord.columns())
    assert len(lines) == 10
    rows = csv_to_records(text)
    assert [r["gamma"] for r in rows] == parse_gammas("0.1:0.9:0.1")
    assert all(r["truth_residual_max"] <= 1e-9 for r in rows)
    assert all(r["revenue_ratio"] >= r["precision"] - 1e-12 for r in rows)


def test_scenario_two_slot_case(runner, tmp_path):
    res = invoke(runner, "scenario-ppc", "--case", "appendix-a", "--samples", "50000",
                 "--out", str(tmp_path))
    assert res.exit_code == 0, res.output
    payload = json.loads((tmp_path / "scenario-ppc-seed0.json").read_text())
    assert payload["report"]["profitable"] is True
    assert payload["report"]["u_lie"] == pytest.approx(0.099)
    assert payload["report"]["u_truth"] == pytest.approx(0.0918182, abs=1e-6)
    assert payload["naive_truthful"] is False and payload["bks_truthful"] is True


def test_verify_records_small_residual(runner, tmp_path):
    res = invoke(runner, "verify", "--samples", "10", "--out", str(tmp_path))
    assert res.exit_code == 0, res.output
    payload = json.loads((tmp_path / "verify-seed0.json").read_text())
    assert all(r["truth_residual_max"] <= 1e-9 for r in payload["records"])


def test_every_bundled_config_runs(runner, tmp_path):
    for name in ("midr_demo", "bks_demo", "sweep_demo", "ppc_demo"):
        res = invoke(runner, "run", "--config", name, "--samples", "20000", "--out", str(tmp_path))
        assert res.exit_code == 0, (name, res.output)


def test_invalid_config_exit_1(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert invoke(runner, "run", "--config", str(bad)).exit_code == 1
    bad.write_text(json.dumps({"experiment": "teleport"}))
    assert invoke(runner, "run", "--config", str(bad)).exit_code == 1
    bad.write_text(json.dumps({"experiment": "run-midr", "gamma": 1.0,
                               "instance": {"generator": "random-midr", "n": 2}}))
    assert invoke(runner, "run", "--config", str(bad), "--out", str(tmp_path)).exit_code == 1
    assert invoke(runner, "sweep", "--gammas", "0.9:0.1:0.1").exit_code == 1


def test_unwritable_output_exit_2(runner, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    res = invoke(runner, "sweep", "--n", "2", "--out", str(blocker / "sub"))
    assert res.exit_code == 2


def test_property_violation_exit_3(runner, tmp_path, monkeypatch):
    from mechlab import experiments
    # a negative tolerance turns any residual, even 0, into a reported violation
    monkeypatch.setattr(experiments, "MIDR_TOL", -1.0)
    res = invoke(runner, "run", "--config", "midr_demo", "--samples", "10", "--out", str(tmp_path))
    assert res.exit_code == 3
    assert (tmp_path / "run-midr-seed0.json").exists()


def test_empty_records_give_header_only_csv():
    assert records_to_csv([]) == ",".join(MetricsRecord.columns()) + "\n"


def test_sweep_row_closed_forms():
    payload = run_experiment({"experiment": "sweep", "n": 2, "gammas": [0.5]})
    row = payload["records"][0]
    assert row["precision"] == 0.25 and row["coeff_variance"] == pytest.approx(1.0)


def test_csv_json_round_trip():
    rec = metrics_record("rt", revenue_tight_witness(3), ProductGammaDistribution(0.2, 3), 5,
                         truth_residual_max=1 / 3)
    rows = [rec.as_dict(), {**rec.as_dict(), "gamma": 0.1 + 0.2}]
    back = csv_to_records(records_to_csv(rows))
    assert back == rows
    assert json.loads(records_to_json({"records": back}))["records"] == rows


def test_parse_gammas():
    assert parse_gammas("0.1:0.9:0.1") == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert parse_gammas("0.5:0.5:0.1") == [0.5]
    with pytest.raises(ConfigurationError):
        parse_gammas("0.1-0.9")
