#!/usr/bin/env python3
"""
Tests for process-per-peer LIVE deployment: layout, launcher bookkeeping and a hosted child
"""

import subprocess
import sys
import time

import pytest

from peer_host import ChildPeer, PeerLayout, ProcessLauncher
from scenario_runner import DRIVER_ID, EPOS_AGENT_BASE, LOG_GATEWAY_ID, ScenarioRun

LIVE_EPOS = {
    "scenario": {"service": "EPOS", "mode": "LIVE", "seed": 3},
    "epos": {"agents": 2, "plans_per_agent": 2, "dimension": 4, "iterations": 2},
}


def _layout(tmp_path, base_port=0, sections=None):
    return PeerLayout("127.0.0.1", base_port, 3, time.time(), tmp_path, sections or {})


def test_layout_assigns_ports_from_base_in_creation_order(tmp_path):
    layout = _layout(tmp_path, base_port=7100)
    assert layout.assign(3) == "127.0.0.1:7100"
    assert layout.assign(1000) == "127.0.0.1:7101"
    assert layout.assign(2) == "127.0.0.1:7102"
    assert layout.assign(1000) == "127.0.0.1:7101"
    assert layout.port(2) == 7102


def test_layout_reloads_from_its_file(tmp_path, config_factory):
    config = config_factory(LIVE_EPOS, name="layout")
    layout = _layout(tmp_path, base_port=7200, sections=config.to_dict())
    for peer_id in (3, 1, 1000, 2000):
        layout.assign(peer_id)
    layout.save(tmp_path / "layout.json")

    loaded = PeerLayout.load(tmp_path / "layout.json")
    assert loaded.addresses == layout.addresses
    assert list(loaded.addresses) == [3, 1, 1000, 2000]
    assert loaded.epoch == layout.epoch
    assert loaded.seed == 3
    assert loaded.config().mode == "LIVE"
    assert loaded.config().epos["agents"] == 2


def test_launcher_counts_failed_and_silent_exits_as_crashes(tmp_path):
    launcher = ProcessLauncher(_layout(tmp_path), tmp_path / "hosts")
    launcher.result_path(5, 0).write_text('{"peer": 5}', encoding="utf-8")
    exits = {5: "pass", 6: "pass", 7: "import sys; sys.exit(3)"}
    for peer_id, code in exits.items():
        process = subprocess.Popen([sys.executable, "-c", code])
        process.wait(timeout=30)
        log_file = open(tmp_path / f"{peer_id}.log", "ab")
        launcher.children[peer_id] = ChildPeer(peer_id, 0, process, log_file, launcher.result_path(peer_id, 0))

    assert launcher.poll() == 2
    assert launcher.results() == [{"peer": 5}]
    assert launcher.poll() == 2


def test_process_deployment_is_the_live_default(config_factory):
    run = ScenarioRun(config_factory(LIVE_EPOS, name="process"))
    assert run.launcher is not None
    assert run.hosted == {DRIVER_ID}

    sections = {**LIVE_EPOS, "network": {"live_deployment": "thread"}}
    threaded = ScenarioRun(config_factory(sections, name="thread"))
    assert threaded.launcher is None
    assert threaded.hosted is None


@pytest.mark.live
def test_hosted_build_creates_only_its_own_peer(tmp_path, config_factory):
    config = config_factory(LIVE_EPOS, name="hosted")
    layout = _layout(tmp_path, sections=config.to_dict())
    run = ScenarioRun(config, seed=3, output_dir=tmp_path, hosted={EPOS_AGENT_BASE}, layout=layout).build()
    try:
        assert [p.id for p in run.network.peers] == [EPOS_AGENT_BASE]
        assert run.network.peers[0].address == layout.address(EPOS_AGENT_BASE)
        assert run.network.address_of(DRIVER_ID) == layout.address(DRIVER_ID)
        assert run.network.id_for_address(layout.address(LOG_GATEWAY_ID)) == LOG_GATEWAY_ID
        assert run.log_gateway is None
        assert run.gateway is None
    finally:
        run.network.stop_all()


@pytest.mark.live
def test_child_process_hosts_the_log_gateway(config_factory):
    config = config_factory(LIVE_EPOS, name="child")
    run = ScenarioRun(config).build()
    launcher = run.launcher
    try:
        launcher.save_layout()
        launcher.launch([LOG_GATEWAY_ID])
        launcher.stop([LOG_GATEWAY_ID])
    finally:
        run.network.stop_all()

    assert launcher.crashes == 0
    [result] = launcher.results()
    assert result["peer"] == LOG_GATEWAY_ID
    assert result["reason"] == "stopped"
    assert result["callback_errors"] == 0
    assert result["violations"] == []
    assert (config.output_dir / "monitoring").is_dir()
