#!/usr/bin/env python3
"""
Tests for the peerbed command line
"""

import json

import pytest

from peerbed_cli import EXIT_CONFIG, EXIT_OK, build_parser, main


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("PEERBED_MODE", "PEERBED_SEED", "PEERBED_OUTPUT_DIR", "PEERBED_BASE_PORT", "PEERBED_HOST",
                 "PEERBED_AUTH_TOKEN", "PEERBED_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


def test_print_defaults(capsys):
    assert main(["run", "--print-defaults"]) == EXIT_OK
    defaults = json.loads(capsys.readouterr().out)
    assert defaults["scenario"]["mode"] == "SIM"
    assert defaults["network"]["delay_ms"] == 1


def test_invalid_config_exits_with_config_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "epos": {\n    "agents": -4\n  }\n}\n')
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    assert f"{path}:3:" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG


def test_small_run_completes(tmp_path, capsys):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "scenario": {"service": "EPOS", "seed": 2},
        "monitoring": {"enabled": False},
        "epos": {"agents": 4, "plans_per_agent": 2, "dimension": 6, "iterations": 3},
    }))
    out = tmp_path / "run"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert "Run completed" in capsys.readouterr().out
    assert (out / "metrics_sim.csv").exists()
    assert main(["report", "--run-dir", str(out)]) == EXIT_OK
    assert "global cost over 3 rows" in capsys.readouterr().out


def test_gen_dataset_writes_plan_files(tmp_path, capsys):
    out = tmp_path / "plans"
    assert main(["gen-dataset", "--agents", "3", "--plans", "2", "--dimension", "8", "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["agent_0000.plans", "agent_0001.plans", "agent_0002.plans"]
    assert "Wrote 3 plan files" in capsys.readouterr().out


def test_stream_prints_one_line_per_tick(capsys):
    assert main(["stream", "--ticks", "3", "--sources", "4", "--seed", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [line.split(",")[0] for line in lines] == ["0", "1", "2"]
    assert all(len(line.split(",")) == 5 for line in lines)


def test_report_of_empty_directory(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path)]) == EXIT_CONFIG


def test_compare_with_missing_rows(tmp_path):
    header = "run_id,t,g_s,g_l,l_s,l_l,rel_g,rel_l,latency,wat,dias_err,intensity\n"
    sim = tmp_path / "metrics_sim.csv"
    live = tmp_path / "metrics_live.csv"
    sim.write_text(header + "0,1,2.0,,,,,,,,,\n0,2,1.0,,,,,,,,,\n")
    live.write_text(header + "0,1,2.0,,,,,,,,,\n")
    assert main(["compare", "--sim", str(sim), "--live", str(live), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_oracle_command(capsys):
    assert main(["oracle", "--instances", "3", "--iterations", "5"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "instances:     3" in out
    assert "bound violated: 0" in out


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
