#!/usr/bin/env python3
"""
Tests for scenario configuration loading, overrides and validation
"""

import json
from pathlib import Path

import pytest

from config_manager import DEFAULTS, ConfigurationManager
from peerbed_errors import ConfigError, PeerbedError

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def _write(tmp_path, text, name="scenario.json"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def manager():
    return ConfigurationManager(environ={})


def test_config_error_carries_location():
    error = ConfigError("bad value", path="a.json", line=4)
    assert str(error) == "a.json:4: bad value"
    assert str(ConfigError("bad value", path="a.json")) == "a.json: bad value"
    assert str(ConfigError("bad value")) == "bad value"
    assert isinstance(error, PeerbedError)
    assert isinstance(error, ValueError)


def test_defaults_are_printable_json(manager):
    assert json.loads(manager.print_defaults()) == json.loads(json.dumps(DEFAULTS))
    config = manager.defaults()
    assert config.mode == "SIM"
    assert config.epos_seed == config.seed == 0


def test_unknown_key_reported_with_line(manager, tmp_path):
    path = _write(tmp_path, '{\n  "epos": {\n    "agentz": 3\n  }\n}\n')
    with pytest.raises(ConfigError) as info:
        manager.load(path)
    assert info.value.line == 3
    assert str(info.value) == f"{path}:3: unknown key epos.agentz"


def test_unknown_section_rejected(manager, tmp_path):
    path = _write(tmp_path, '{\n  "routing": {}\n}\n')
    with pytest.raises(ConfigError, match="unknown section"):
        manager.load(path)


def test_invalid_json_reports_line(manager, tmp_path):
    path = _write(tmp_path, '{\n  "scenario": {\n    "seed": ,\n  }\n}\n')
    with pytest.raises(ConfigError) as info:
        manager.load(path)
    assert info.value.line == 3


def test_missing_file_rejected(manager, tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        manager.load(tmp_path / "absent.json")


def test_profile_fills_epos_section(manager, tmp_path):
    path = _write(tmp_path, json.dumps({"epos": {"profile": 6, "dimension": 16}}))
    epos = manager.load(path).epos
    assert (epos["agents"], epos["horizon"], epos["beta"], epos["cost_function"]) == (100, "D3", 1.0, "MIN_VAR")
    assert epos["dimension"] == 16


def test_unknown_profile_rejected(manager, tmp_path):
    with pytest.raises(ConfigError, match="profiles are 1-12"):
        manager.load(_write(tmp_path, json.dumps({"epos": {"profile": 13}})))


def test_environment_overrides_file_and_flags_override_environment(tmp_path):
    path = _write(tmp_path, json.dumps({"scenario": {"seed": 1, "mode": "SIM"}}))
    manager = ConfigurationManager(environ={"PEERBED_SEED": "42", "PEERBED_MODE": "LIVE"})
    config = manager.load(path, {"scenario.mode": "SIM", "scenario.output_dir": None})
    assert config.seed == 42
    assert config.mode == "SIM"
    assert config.sections["scenario"]["output_dir"] == "runs/out"


def test_bad_environment_value_rejected(tmp_path):
    path = _write(tmp_path, "{}")
    with pytest.raises(ConfigError, match="PEERBED_SEED"):
        ConfigurationManager(environ={"PEERBED_SEED": "many"}).load(path)


def test_unknown_override_rejected(manager, tmp_path):
    with pytest.raises(ConfigError, match="unknown override"):
        manager.load(_write(tmp_path, "{}"), {"epos.temperature": 1})


@pytest.mark.parametrize("sections, fragment", [
    ({"epos": {"agents": 0}}, "epos.agents: must be positive"),
    ({"epos": {"alpha": 0.7, "beta": 0.6}}, "alpha + beta exceeds 1"),
    ({"epos": {"alpha": 1.5}}, "outside [0, 1]"),
    ({"scenario": {"mode": "HYBRID"}}, "is not one of SIM, LIVE"),
    ({"network": {"delay_ms": -1}}, "must not be negative"),
    ({"network": {"record_trace": "yes"}}, "expected true/false"),
    ({"network": {"live_deployment": "docker"}}, "is not one of process, thread"),
    ({"network": {"host_start_timeout_s": 0}}, "must be positive"),
    ({"dias": {"bloom_m": 2, "bloom_h": 4}}, "more hashes than bits"),
    ({"dynamics": {"cycle": ["EXTREME"]}}, "dynamics.cycle"),
    ({"dynamics": {"churn_fraction": 2.0}}, "outside [0, 1]"),
    ({"epos": {"iterations": 2.5}}, "expected an integer"),
])
def test_invalid_values_rejected(manager, tmp_path, sections, fragment):
    with pytest.raises(ConfigError) as info:
        manager.load(_write(tmp_path, json.dumps(sections, indent=2)))
    assert fragment in str(info.value)
    assert info.value.line is not None


def test_missing_plan_file_named(manager, tmp_path):
    plans = tmp_path / "plans"
    plans.mkdir()
    (plans / "agent_0000.plans").write_text("0.0:1,2\n")
    path = _write(tmp_path, json.dumps({"epos": {"agents": 2, "plan_dir": "plans"}}))
    with pytest.raises(ConfigError) as info:
        manager.load(path)
    assert "agent_0001.plans" in str(info.value)


def test_steering_file_resolved_relative_to_config(manager, tmp_path):
    (tmp_path / "steer.txt").write_text("1,2,3\n")
    config = manager.load(_write(tmp_path, json.dumps({"epos": {"steering_file": "steer.txt"}})))
    assert config.resolve(config.epos["steering_file"]) == tmp_path / "steer.txt"


def test_trace_types_must_be_integers(manager, tmp_path):
    with pytest.raises(ConfigError, match="trace_types"):
        manager.load(_write(tmp_path, json.dumps({"network": {"trace_types": ["ping"]}})))


@pytest.mark.parametrize("name", sorted(p.name for p in SCENARIOS.glob("*.json")))
def test_shipped_scenarios_validate(manager, name):
    config = manager.load(SCENARIOS / name)
    assert config.service in ("EPOS", "DIAS", "BOTH")


def test_readiness_timeout_defaults_by_mode(manager, tmp_path):
    assert manager.load(_write(tmp_path, "{}")).readiness_timeout_ms == 1000
    live = manager.load(_write(tmp_path, json.dumps({"scenario": {"mode": "LIVE"}})))
    assert live.readiness_timeout_ms == 10_000
    pinned = manager.load(_write(tmp_path, json.dumps({"gateway": {"readiness_timeout_ms": 250}})))
    assert pinned.readiness_timeout_ms == 250
