#!/usr/bin/env python3
"""
End-to-end SIM scenario runs, SIM/LIVE comparison and report rendering
"""

import hashlib
import math

import pytest

from dynamics_harness import MetricsRecord, write_metrics
from peerbed_errors import ConfigError, ServiceError
from scenario_runner import compare_runs, create_ascii_bar, create_cost_graph, report_from_dir, run_scenario
from services.epos import GlobalCostFunction, run_epos

EPOS_SECTIONS = {
    "scenario": {"service": "EPOS", "seed": 3, "horizon_ms": 60_000},
    "epos": {"agents": 6, "plans_per_agent": 3, "dimension": 8, "iterations": 5},
}


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_epos_sim_run_completes(small_epos_config):
    result = run_scenario(small_epos_config)
    assert not result.aborted
    assert len(result.records) == 5
    costs = [r.g_s for r in result.records]
    assert all(later <= earlier + 1e-12 for earlier, later in zip(costs, costs[1:]))
    out = small_epos_config.output_dir
    assert (out / "metrics_sim.csv").exists()
    assert (out / "report.txt").exists()
    assert (out / "trace.csv").exists()
    assert not (out / "ABORTED").exists()


def test_identical_sim_runs_write_identical_metrics(config_factory):
    first = config_factory(EPOS_SECTIONS, name="first")
    second = config_factory(EPOS_SECTIONS, name="second")
    run_scenario(first)
    run_scenario(second)
    assert _digest(first.output_dir / "metrics_sim.csv") == _digest(second.output_dir / "metrics_sim.csv")
    assert _digest(first.output_dir / "trace.csv") == _digest(second.output_dir / "trace.csv")


def test_distributed_run_matches_in_process_run(small_epos_config):
    result = run_scenario(small_epos_config)
    reference = run_epos(result.plan_sets, GlobalCostFunction(), iterations=5, seed=small_epos_config.epos_seed)
    expected = [r.global_cost for r in reference.state.history]
    assert [r.g_s for r in result.records] == pytest.approx(expected, rel=1e-9)


def test_dias_sim_run_converges(small_dias_config):
    result = run_scenario(small_dias_config)
    assert not result.aborted
    assert result.dias_errors
    assert all(math.isfinite(e) for e in result.dias_errors)
    assert result.dias_errors[-1] <= result.dias_errors[0] + 1e-9
    assert all(r.dias_err is not None for r in result.records)


def test_report_lists_cost_chart(small_epos_config):
    run_scenario(small_epos_config)
    text = report_from_dir(small_epos_config.output_dir)
    assert "I-EPOS" in text
    assert "metrics_sim.csv: global cost over 5 rows" in text


def test_report_without_artifacts_rejected(tmp_path):
    with pytest.raises(ConfigError, match="no run artifacts"):
        report_from_dir(tmp_path)


def _metrics(tmp_path, name, costs):
    path = tmp_path / name
    write_metrics(path, [MetricsRecord(0, t, g_s=c, l_s=0.5) for t, c in enumerate(costs, start=1)])
    return path


def test_comparing_identical_runs_gives_zero_difference(tmp_path):
    sim = _metrics(tmp_path, "metrics_sim.csv", [4.0, 3.0, 2.5])
    live = _metrics(tmp_path, "metrics_live.csv", [4.0, 3.0, 2.5])
    comparison = compare_runs(sim, live, tmp_path / "compare.csv")
    assert comparison.mean_abs_rel_g == 0.0
    assert comparison.mean_abs_rel_l == 0.0
    assert [r.rel_g for r in comparison.records] == [0.0, 0.0, 0.0]
    assert (tmp_path / "compare.csv").exists()


def test_comparison_reports_relative_difference(tmp_path):
    sim = _metrics(tmp_path, "metrics_sim.csv", [10.0])
    live = _metrics(tmp_path, "metrics_live.csv", [9.0])
    assert compare_runs(sim, live).records[0].rel_g == pytest.approx(0.1)


def test_comparison_of_different_shapes_rejected(tmp_path):
    sim = _metrics(tmp_path, "metrics_sim.csv", [4.0, 3.0, 2.5])
    live = _metrics(tmp_path, "metrics_live.csv", [4.0, 3.0])
    with pytest.raises(ServiceError, match="run shapes differ"):
        compare_runs(sim, live)


def test_ascii_helpers():
    assert create_ascii_bar(5, 10, width=10) == "#####....."
    assert create_ascii_bar(1, 0, width=4) == "...."
    assert create_cost_graph([]) == "No data available"
    assert create_cost_graph([2.0, 2.0]) == "Constant cost: 2"


def test_single_agent_run_completes_many_iterations(config_factory):
    config = config_factory({
        "scenario": {"service": "EPOS", "seed": 2, "horizon_ms": 60_000},
        "epos": {"agents": 1, "plans_per_agent": 3, "dimension": 4, "iterations": 600},
    }, name="solo")
    result = run_scenario(config)
    assert not result.aborted
    assert result.callback_errors == 0
    assert len(result.records) == 600
