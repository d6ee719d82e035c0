#!/usr/bin/env python3
"""
Process-per-peer LIVE deployment.

The CLI process keeps the experiment driver and orchestrates; every other
peer of the scenario runs in a child process started as

    peerbed_cli.py host --layout <run>/hosts/layout.json --peer <id> --incarnation <n>

A child rebuilds the scenario from the layout, creates only its own peer on
the port the layout assigns and reaches every other peer through the
layout's address table. SIGTERM (or SIGINT) makes it stop its peer, which
runs the peerlets' stop callbacks, and write a result file for the
orchestrator to merge. A peer that leaves through churn ends its process
the same way; bringing it back spawns a new process on the same port.
"""

import json
import logging
import os
import signal
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

from config_manager import ScenarioConfig
from peerbed_errors import ScenarioAbort

logger = logging.getLogger(__name__)

CLI_PATH = Path(__file__).resolve().parent / "peerbed_cli.py"
LAYOUT_FILE = "layout.json"


def free_port(host):
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind((host, 0))
        return sock.getsockname()[1]


class PeerLayout:
    """Address of every peer of one LIVE run plus what a child needs to rebuild the scenario"""

    def __init__(self, host, base_port, seed, epoch, output_dir, sections, config_path=None, addresses=None):
        self.host = host
        self.base_port = base_port
        self.seed = seed
        self.epoch = epoch
        self.output_dir = Path(output_dir)
        self.sections = sections
        self.config_path = config_path
        # creation order; with a base port, peer i listens on base_port + i
        self.addresses = dict(addresses or {})

    @classmethod
    def for_run(cls, config, seed, output_dir):
        network = config.network
        return cls(network["host"], network["base_port"], seed, time.time(), output_dir, config.to_dict(),
                   str(config.path) if config.path else None)

    def assign(self, peer_id):
        if peer_id not in self.addresses:
            if self.base_port:
                port = self.base_port + len(self.addresses)
            else:
                port = free_port(self.host)
            self.addresses[peer_id] = f"{self.host}:{port}"
        return self.addresses[peer_id]

    def address(self, peer_id):
        return self.addresses[peer_id]

    def port(self, peer_id):
        return int(self.addresses[peer_id].rpartition(":")[2])

    def config(self):
        return ScenarioConfig(json.loads(json.dumps(self.sections)), Path(self.config_path) if self.config_path else None)

    def save(self, path):
        record = {
            "host": self.host, "base_port": self.base_port, "seed": self.seed, "epoch": self.epoch,
            "output_dir": str(self.output_dir), "config_path": self.config_path, "sections": self.sections,
            "addresses": [[peer_id, address] for peer_id, address in self.addresses.items()],
        }
        Path(path).write_text(json.dumps(record, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path):
        record = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(record["host"], record["base_port"], record["seed"], record["epoch"], record["output_dir"],
                   record["sections"], record["config_path"],
                   {int(peer_id): address for peer_id, address in record["addresses"]})


def wait_listening(host, port, timeout_s, alive=None):
    """Poll until something accepts TCP connections on host:port"""
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if alive is not None and not alive():
            return False
        try:
            with socket.create_connection((host, port), timeout=0.2):
                return True
        except OSError:
            time.sleep(0.05)
    return False


class ChildPeer:
    def __init__(self, peer_id, incarnation, process, log_file, result_path):
        self.peer_id = peer_id
        self.incarnation = incarnation
        self.process = process
        self.log_file = log_file
        self.result_path = result_path
        self.reaped = False

    @property
    def alive(self):
        return self.process.poll() is None


class ProcessLauncher:
    """Starts, respawns, stops and reaps the child processes of one LIVE run"""

    def __init__(self, layout, hosts_dir, start_timeout_s=30):
        self.layout = layout
        self.hosts_dir = Path(hosts_dir)
        self.hosts_dir.mkdir(parents=True, exist_ok=True)
        self.layout_path = self.hosts_dir / LAYOUT_FILE
        self.start_timeout_s = start_timeout_s
        self.children = {}
        self.finished = []
        self.crashes = 0
        self._lock = threading.RLock()

    def save_layout(self):
        self.layout.save(self.layout_path)

    def result_path(self, peer_id, incarnation):
        return self.hosts_dir / f"peer-{peer_id}-{incarnation}.json"

    def spawn(self, peer_id, incarnation=0):
        result_path = self.result_path(peer_id, incarnation)
        if result_path.exists():
            result_path.unlink()
        log_file = open(self.hosts_dir / f"peer-{peer_id}.log", "ab")
        cmd = [sys.executable, str(CLI_PATH), "host", "--layout", str(self.layout_path),
               "--peer", str(peer_id), "--incarnation", str(incarnation)]
        env = os.environ.copy()
        env["PYTHONDONTWRITEBYTECODE"] = "1"
        process = subprocess.Popen(cmd, stdout=log_file, stderr=subprocess.STDOUT, env=env,
                                   cwd=str(CLI_PATH.parent))
        child = ChildPeer(peer_id, incarnation, process, log_file, result_path)
        with self._lock:
            self.children[peer_id] = child
        logger.debug(f"peer {peer_id} incarnation {incarnation} started as pid {process.pid}")
        return child

    def launch(self, peer_ids):
        """Spawn every peer at once, then wait until all of them listen"""
        children = [self.spawn(peer_id) for peer_id in peer_ids]
        for child in children:
            self._await_listening(child)

    def _await_listening(self, child):
        if not wait_listening(self.layout.host, self.layout.port(child.peer_id), self.start_timeout_s,
                              lambda: child.alive):
            self.poll()
            raise ScenarioAbort(f"peer {child.peer_id} did not start listening on "
                                f"{self.layout.address(child.peer_id)} (see {self.hosts_dir})")

    def respawn(self, peer_id):
        """Run a departed peer again in a fresh process on its old port"""
        old = self.children.get(peer_id)
        incarnation = 0
        if old is not None:
            try:
                old.process.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                logger.warning(f"peer {peer_id} still running on rejoin, stopping it")
                self.stop([peer_id])
            self.poll()
            incarnation = old.incarnation + 1
        self._await_listening(self.spawn(peer_id, incarnation))

    def poll(self):
        """Reap exited children; a nonzero exit or a missing result file counts as a crash"""
        with self._lock:
            for child in self.children.values():
                if child.reaped or child.alive:
                    continue
                child.reaped = True
                child.log_file.close()
                code = child.process.returncode
                if code != 0 or not child.result_path.exists():
                    self.crashes += 1
                    logger.error(f"peer {child.peer_id} process exited with code {code}")
                self.finished.append(child)
            return self.crashes

    def stop(self, peer_ids, timeout_s=10.0):
        children = [self.children[p] for p in peer_ids if p in self.children and self.children[p].alive]
        for child in children:
            child.process.terminate()
        for child in children:
            try:
                child.process.wait(timeout=timeout_s)
            except subprocess.TimeoutExpired:
                logger.error(f"peer {child.peer_id} ignored SIGTERM, killing pid {child.process.pid}")
                child.process.kill()
                child.process.wait()
        self.poll()

    def stop_all(self, last=()):
        others = [p for p in self.children if p not in last]
        self.stop(others)
        self.stop([p for p in last if p in self.children])

    def results(self):
        results = []
        for child in self.finished:
            if child.result_path.exists():
                results.append(json.loads(child.result_path.read_text(encoding="utf-8")))
        return results


def host_peer(layout_path, peer_id, incarnation=0):
    """Body of a child process: run one peer until it leaves or the orchestrator stops it"""
    from conformance import invariant_violations
    from runtime_core import ExecutionMode, PeerState
    from scenario_runner import ScenarioRun

    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    # the orchestrator may stop us while the scenario is still being built
    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)

    layout = PeerLayout.load(layout_path)
    run = ScenarioRun(layout.config(), seed=layout.seed, output_dir=layout.output_dir,
                      hosted={peer_id}, layout=layout, incarnation=incarnation).build()
    peer = run.network.peer(peer_id)
    if peer is None:
        raise ScenarioAbort(f"peer {peer_id} is not part of this scenario")

    peer.start()
    logger.info(f"peer {peer_id} incarnation {incarnation} running at {peer.address}")
    while not stop.is_set() and peer.state is not PeerState.STOPPED:
        stop.wait(0.1)
    reason = "stopped" if stop.is_set() else "left"
    peer.stop()
    run.network.engine(ExecutionMode.LIVE).join(peer, timeout=10.0)
    if run.log_gateway is not None:
        run.log_gateway.commit()
        run.log_gateway.store.close()

    result = {
        "peer": peer_id,
        "incarnation": incarnation,
        "reason": reason,
        "messages": run.network.stats.snapshot(),
        "callback_errors": run.network.callback_errors,
        "selections": {str(agent): index for agent, index in run.selections().items()},
        "violations": invariant_violations(run),
    }
    path = Path(layout_path).parent / f"peer-{peer_id}-{incarnation}.json"
    path.write_text(json.dumps(result), encoding="utf-8")
    logger.info(f"peer {peer_id} {reason}")
    return result
