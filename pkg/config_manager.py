#!/usr/bin/env python3
"""
Scenario configuration
JSON files with flat sections; environment variables (.env honoured) and
command-line flags override file values, in that order.
"""

import copy
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

from peerbed_errors import ConfigError

load_dotenv()

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "scenario": {
        "name": "scenario",
        "mode": "SIM",
        "service": "EPOS",
        "seed": 0,
        "output_dir": "runs/out",
        "horizon_ms": 600_000,
        "repetitions": 1,
    },
    "network": {
        "delay_ms": 1,
        "host": "127.0.0.1",
        "base_port": 0,
        "queue_capacity": 10_000,
        "connect_attempts": 3,
        "backoff_ms": 200,
        "record_trace": True,
        "trace_types": [],
        "live_time_limit_s": 120,
        "live_deployment": "process",
        "host_start_timeout_s": 30,
    },
    "gateway": {
        "readiness_timeout_ms": None,
        "embedded": False,
        "submit_delay_ms": 10,
        "retry_ms": 100,
        "max_attempts": 50,
    },
    "monitoring": {
        "enabled": True,
        "backend": "file",
        "commit_period_ms": 500,
        "commit_batch": 500,
        "buffer_size": 1000,
        "flush_period_ms": 100,
        "memory_period_ms": 0,
        "auth_token": "",
    },
    "epos": {
        "profile": None,
        "agents": 50,
        "plans_per_agent": 4,
        "horizon": "D1",
        "dimension": None,
        "iterations": 50,
        "alpha": 0.0,
        "beta": 0.0,
        "cost_function": "MIN_VAR",
        "steering_file": None,
        "steering_level": None,
        "plan_dir": None,
        "runs": 1,
        "run_interval_ms": 0,
        "sync": "lockstep",
        "straggler_timeout_ms": 0,
        "normalize": False,
        "seed": None,
    },
    "dias": {
        "agents": 20,
        "k": 9,
        "view_size": 10,
        "gossip_period_ms": 100,
        "dissemination_period_ms": 200,
        "bloom_m": 2048,
        "bloom_h": 4,
        "probe_period_ms": 200,
        "duration_ms": 10_000,
        "source": "clock",
        "rolling_window": 20,
    },
    "dynamics": {
        "enabled": False,
        "period_length_ms": 60_000,
        "cycle": ["LOW", "MEDIUM", "HIGH"],
        "churn_fraction": 0.25,
        "change_timeout_ms": 2000,
    },
}

# (agents, horizon, alpha, beta, cost function); rows of the small/medium/large profile table
PROFILES = {
    1: (50, "D1", 0.0, 0.0, "MIN_VAR"),
    2: (50, "D1", 0.0, 1.0, "MIN_VAR"),
    3: (50, "D1", 0.0, 0.0, "MIN_RMSE"),
    4: (50, "D1", 0.0, 1.0, "MIN_RMSE"),
    5: (100, "D3", 0.0, 0.0, "MIN_VAR"),
    6: (100, "D3", 0.0, 1.0, "MIN_VAR"),
    7: (100, "D3", 0.0, 0.0, "MIN_RMSE"),
    8: (100, "D3", 0.0, 1.0, "MIN_RMSE"),
    9: (300, "D7", 0.0, 0.0, "MIN_VAR"),
    10: (300, "D7", 0.0, 1.0, "MIN_VAR"),
    11: (300, "D7", 0.0, 0.0, "MIN_RMSE"),
    12: (300, "D7", 0.0, 1.0, "MIN_RMSE"),
}

ENV_OVERRIDES = {
    "PEERBED_MODE": ("scenario", "mode", str),
    "PEERBED_SEED": ("scenario", "seed", int),
    "PEERBED_OUTPUT_DIR": ("scenario", "output_dir", str),
    "PEERBED_BASE_PORT": ("network", "base_port", int),
    "PEERBED_HOST": ("network", "host", str),
    "PEERBED_AUTH_TOKEN": ("monitoring", "auth_token", str),
}

CHOICES = {
    ("scenario", "mode"): ("SIM", "LIVE"),
    ("scenario", "service"): ("EPOS", "DIAS", "BOTH"),
    ("monitoring", "backend"): ("file", "sqlite"),
    ("epos", "horizon"): ("D1", "D3", "D7"),
    ("epos", "cost_function"): ("MIN_VAR", "MIN_RMSE"),
    ("epos", "sync"): ("lockstep", "timeout"),
    ("dias", "source"): ("clock", "news"),
    ("network", "live_deployment"): ("process", "thread"),
}

POSITIVE = {
    ("scenario", "horizon_ms"), ("scenario", "repetitions"), ("network", "queue_capacity"),
    ("network", "connect_attempts"), ("network", "live_time_limit_s"), ("network", "host_start_timeout_s"),
    ("gateway", "max_attempts"),
    ("monitoring", "commit_period_ms"), ("monitoring", "commit_batch"), ("monitoring", "buffer_size"),
    ("monitoring", "flush_period_ms"), ("epos", "agents"), ("epos", "plans_per_agent"), ("epos", "iterations"),
    ("epos", "runs"), ("dias", "agents"), ("dias", "k"), ("dias", "view_size"), ("dias", "gossip_period_ms"),
    ("dias", "dissemination_period_ms"), ("dias", "bloom_m"), ("dias", "bloom_h"), ("dias", "probe_period_ms"),
    ("dias", "duration_ms"), ("dias", "rolling_window"), ("dynamics", "period_length_ms"),
    ("dynamics", "change_timeout_ms"),
}

NON_NEGATIVE = {
    ("scenario", "seed"), ("network", "delay_ms"), ("network", "base_port"), ("network", "backoff_ms"),
    ("gateway", "readiness_timeout_ms"), ("gateway", "submit_delay_ms"), ("gateway", "retry_ms"),
    ("monitoring", "memory_period_ms"), ("epos", "straggler_timeout_ms"), ("epos", "run_interval_ms"),
}

OPTIONAL_NUMBERS = ("dimension", "steering_level", "seed", "readiness_timeout_ms")

INTENSITIES = ("LOW", "MEDIUM", "HIGH")

# readiness timeout when the config leaves it unset: virtual ms in SIM, wall-clock ms in LIVE
READINESS_TIMEOUT_MS = {"SIM": 1000, "LIVE": 10_000}


@dataclass
class ScenarioConfig:
    sections: Dict[str, Dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    path: Optional[Path] = None

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    @property
    def mode(self) -> str:
        return self.sections["scenario"]["mode"]

    @property
    def service(self) -> str:
        return self.sections["scenario"]["service"]

    @property
    def seed(self) -> int:
        return self.sections["scenario"]["seed"]

    @property
    def epos_seed(self) -> int:
        seed = self.sections["epos"]["seed"]
        return self.seed if seed is None else seed

    @property
    def readiness_timeout_ms(self) -> int:
        timeout = self.sections["gateway"]["readiness_timeout_ms"]
        return READINESS_TIMEOUT_MS[self.mode] if timeout is None else int(timeout)

    @property
    def output_dir(self) -> Path:
        return Path(self.sections["scenario"]["output_dir"])

    def resolve(self, value: Optional[str]) -> Optional[Path]:
        """Paths in a config file are relative to that file"""
        if value is None:
            return None
        path = Path(value)
        if not path.is_absolute() and self.path is not None:
            path = self.path.parent / path
        return path

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)


def _line_of(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    if not text:
        return None
    match = re.search(rf'"{re.escape(section)}"\s*:', text)
    if match is None:
        return None
    start = match.start()
    if key is not None:
        inner = re.compile(rf'"{re.escape(key)}"\s*:').search(text, match.end())
        if inner is None:
            return text.count("\n", 0, start) + 1
        start = inner.start()
    return text.count("\n", 0, start) + 1


class ConfigurationManager:
    """Loads, overrides and validates scenario configurations"""

    def __init__(self, environ: Optional[Mapping[str, str]] = None):
        self.environ = environ

    def defaults(self) -> ScenarioConfig:
        return ScenarioConfig()

    def print_defaults(self) -> str:
        return json.dumps(DEFAULTS, indent=2)

    def load(self, path, overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError("config file not found", path=str(path))
        text = path.read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno) from e
        config = self.from_dict(raw, text, path)
        self.apply_env(config)
        if overrides:
            self.apply_overrides(config, overrides)
        self.validate(config, text)
        return config

    def from_dict(self, raw: Mapping[str, Any], text: str = "", path: Optional[Path] = None) -> ScenarioConfig:
        where = str(path) if path else None
        if not isinstance(raw, dict):
            raise ConfigError("top level must be an object of sections", path=where, line=1)
        config = ScenarioConfig(path=path)
        profile = (raw.get("epos") or {}).get("profile")
        if profile is not None:
            self.apply_profile(config, profile, text, where)
        for section, values in raw.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section {section!r}", path=where, line=_line_of(text, section))
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object", path=where, line=_line_of(text, section))
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {section}.{key}", path=where, line=_line_of(text, section, key))
                config.sections[section][key] = value
        return config

    def apply_profile(self, config: ScenarioConfig, profile, text: str = "", where: Optional[str] = None):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; profiles are 1-12", path=where,
                              line=_line_of(text, "epos", "profile"))
        agents, horizon, alpha, beta, cost = PROFILES[profile]
        config.sections["epos"].update(profile=profile, agents=agents, horizon=horizon, alpha=alpha, beta=beta,
                                       cost_function=cost)

    def apply_env(self, config: ScenarioConfig):
        environ = os.environ if self.environ is None else self.environ
        for name, (section, key, kind) in ENV_OVERRIDES.items():
            value = environ.get(name)
            if value in (None, ""):
                continue
            try:
                config.sections[section][key] = kind(value)
            except ValueError:
                raise ConfigError(f"environment variable {name}={value!r} is not a valid {kind.__name__}") from None

    def apply_overrides(self, config: ScenarioConfig, overrides: Mapping[str, Any]):
        """Keys of the form section.key; None values are left alone"""
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown override {dotted}")
            config.sections[section][key] = value

    def validate(self, config: ScenarioConfig, text: str = ""):
        where = str(config.path) if config.path else None

        def fail(section, key, message):
            raise ConfigError(f"{section}.{key}: {message}", path=where, line=_line_of(text, section, key))

        for section, values in config.sections.items():
            for key, value in values.items():
                default = DEFAULTS[section][key]
                if default is not None and value is not None:
                    if isinstance(default, bool) and not isinstance(value, bool):
                        fail(section, key, f"expected true/false, got {value!r}")
                    if isinstance(default, int) and not isinstance(default, bool) and \
                            (isinstance(value, bool) or not isinstance(value, int)):
                        fail(section, key, f"expected an integer, got {value!r}")
                    if isinstance(default, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
                        fail(section, key, f"expected a number, got {value!r}")
                    if isinstance(default, str) and not isinstance(value, str):
                        fail(section, key, f"expected a string, got {value!r}")
                    if isinstance(default, list) and not isinstance(value, list):
                        fail(section, key, f"expected a list, got {value!r}")
                elif default is None and value is not None and key in OPTIONAL_NUMBERS:
                    if isinstance(value, bool) or not isinstance(value, (int, float)):
                        fail(section, key, f"expected a number, got {value!r}")
                if (section, key) in POSITIVE and value is not None and value <= 0:
                    fail(section, key, f"must be positive, got {value}")
                if (section, key) in NON_NEGATIVE and value is not None and value < 0:
                    fail(section, key, f"must not be negative, got {value}")
                choices = CHOICES.get((section, key))
                if choices and value not in choices:
                    fail(section, key, f"{value!r} is not one of {', '.join(choices)}")

        epos = config.sections["epos"]
        for key in ("alpha", "beta"):
            if not 0.0 <= epos[key] <= 1.0:
                fail("epos", key, f"{epos[key]} outside [0, 1]")
        if epos["alpha"] + epos["beta"] > 1.0 + 1e-12:
            fail("epos", "beta", "alpha + beta exceeds 1")
        if epos["dimension"] is not None and epos["dimension"] < 1:
            fail("epos", "dimension", "must be positive")
        if epos["steering_file"] is not None and not config.resolve(epos["steering_file"]).exists():
            fail("epos", "steering_file", f"file not found: {config.resolve(epos['steering_file'])}")
        if epos["plan_dir"] is not None:
            plan_dir = config.resolve(epos["plan_dir"])
            for agent in range(epos["agents"]):
                expected = plan_dir / f"agent_{agent:04d}.plans"
                if not expected.exists():
                    fail("epos", "plan_dir", f"missing plan file {expected}")

        dias = config.sections["dias"]
        if dias["bloom_h"] > dias["bloom_m"]:
            fail("dias", "bloom_h", "more hashes than bits")

        dynamics = config.sections["dynamics"]
        if not dynamics["cycle"] or any(str(n).upper() not in INTENSITIES for n in dynamics["cycle"]):
            fail("dynamics", "cycle", f"needs a non-empty list of {', '.join(INTENSITIES)}")
        if not 0.0 <= dynamics["churn_fraction"] <= 1.0:
            fail("dynamics", "churn_fraction", "outside [0, 1]")

        for kind in config.sections["network"]["trace_types"]:
            if isinstance(kind, bool) or not isinstance(kind, int):
                fail("network", "trace_types", f"message types are integers, got {kind!r}")
        return config


# Global instance
config_manager = ConfigurationManager()


def load_scenario(path, overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
    return config_manager.load(path, overrides)
