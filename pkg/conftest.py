"""
Shared pytest fixtures: small scenario configurations with tmp_path output dirs
"""

import copy

import pytest

from config_manager import ConfigurationManager


@pytest.fixture
def config_factory(tmp_path):
    """Build a validated config from section overrides, isolated from the environment"""
    manager = ConfigurationManager(environ={})

    def build(sections=None, name="test"):
        raw = copy.deepcopy(sections or {})
        scenario = raw.setdefault("scenario", {})
        scenario.setdefault("name", name)
        scenario.setdefault("output_dir", str(tmp_path / name))
        config = manager.from_dict(raw)
        manager.validate(config)
        return config

    return build


@pytest.fixture
def small_epos_config(config_factory):
    return config_factory({
        "scenario": {"service": "EPOS", "seed": 3, "horizon_ms": 60_000},
        "network": {"record_trace": True},
        "epos": {"agents": 6, "plans_per_agent": 3, "dimension": 8, "iterations": 5},
    }, name="epos")


@pytest.fixture
def small_dias_config(config_factory):
    return config_factory({
        "scenario": {"service": "DIAS", "seed": 5, "horizon_ms": 60_000},
        "monitoring": {"enabled": False},
        "dias": {"agents": 8, "view_size": 4, "duration_ms": 3000, "probe_period_ms": 200},
    }, name="dias")
