#!/usr/bin/env python3
"""
Builds a scenario from its configuration, runs it in SIM or LIVE mode and
writes the run artifacts:

  metrics_<mode>.csv            per-iteration / per-probe metrics
  monitoring/records.log(.idx)  monitoring store (or records.sqlite)
  trace.csv                     SIM event trace
  report.txt                    summary with an ASCII cost chart
  ABORTED                       marker when the run did not complete
"""

import logging
import math
import random
import statistics
import time
from pathlib import Path

import numpy as np

from bootstrap_protocol import DeviceInfo, GatewayPeerlet, ServiceMetadata, ServiceRequest
from data_generators import (
    Horizon,
    NewsStreamSpec,
    PlanDatasetSpec,
    SyntheticNewsStream,
    clock_possible_states,
    derive_possible_states,
    generate_agent_plans,
    load_plan_dir,
)
from dynamics_harness import (
    ChangeInjector,
    DiasDriver,
    EposDriver,
    HarnessDevicePeerlet,
    IntensitySchedule,
    MetricsRecord,
    read_metrics,
    relative_difference,
    write_metrics,
)
from monitoring import LogGateway, LogGatewayPeerlet, MonitoringPeerlet, open_store
from peer_host import PeerLayout, ProcessLauncher
from peerbed_errors import ConfigError, ScenarioAbort, ServiceError
from runtime_core import ExecutionMode, PeerNetwork
from services.dias import DIAS_SERVICE, DiasPeerlet
from services.epos import (
    EPOS_SERVICE,
    AgentPreferences,
    CostKind,
    EposPeerlet,
    GlobalCostFunction,
    load_steering,
    night_steering,
)

logger = logging.getLogger(__name__)

GATEWAY_ID = 1
DRIVER_ID = 2
LOG_GATEWAY_ID = 3
EPOS_AGENT_BASE = 1000
EPOS_DEVICE_BASE = 2000
DIAS_AGENT_BASE = 3000
DIAS_DEVICE_BASE = 4000

SIM_STEP_MS = 1000


class RunResult:
    def __init__(self, mode, output_dir):
        self.mode = mode
        self.output_dir = output_dir
        self.records = []
        self.epos_history = {}
        self.selections = {}
        self.plan_sets = {}
        self.dias_errors = []
        self.timings = []
        self.changes_applied = 0
        self.change_counts = {}
        self.joins_leaves = 0
        self.messages = {}
        self.callback_errors = 0
        self.elapsed_ms = 0
        self.aborted = False
        self.abort_reason = ""
        self.artifacts = []
        # reported by peer processes of a process-deployed LIVE run
        self.violations = []
        self.process_crashes = 0

    @property
    def final_cost(self):
        if not self.epos_history:
            return None
        last = self.epos_history[max(self.epos_history)]
        return last[-1].global_cost if last else None


def build_gcf(config, dimension, plan_sets):
    epos = config.epos
    steering = None
    if epos["steering_file"] is not None:
        steering = load_steering(config.resolve(epos["steering_file"]), dimension)
    else:
        level = epos["steering_level"]
        if level is None:
            # mean total demand spread over the night slots
            total = float(np.mean([sum(p.values.sum() for p in plans) / len(plans) for plans in plan_sets]))
            night = int(np.count_nonzero(night_steering(dimension, 1.0)))
            level = total / max(1, night)
        steering = night_steering(dimension, level)
    kind = CostKind(epos["cost_function"])
    return GlobalCostFunction(kind, steering if kind is CostKind.MIN_RMSE else None), steering


class ScenarioRun:
    """
    One repetition of a scenario on its own PeerNetwork.

    A process-deployed LIVE run builds the same scenario in every process:
    `hosted` names the peers this process runs, every other peer is only an
    address from the shared layout.
    """

    def __init__(self, config, seed=None, output_dir=None, hosted=None, layout=None, incarnation=0):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.mode = ExecutionMode.SIM if config.mode == "SIM" else ExecutionMode.LIVE
        self.output_dir = Path(output_dir or config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        network = config.network
        self.launcher = None
        if (layout is None and hosted is None and self.mode is ExecutionMode.LIVE
                and network["live_deployment"] == "process"):
            layout = PeerLayout.for_run(config, self.seed, self.output_dir)
            self.launcher = ProcessLauncher(layout, self.output_dir / "hosts", network["host_start_timeout_s"])
            hosted = {DRIVER_ID}
        self.layout = layout
        self.hosted = hosted
        self.incarnation = incarnation
        self.network = PeerNetwork(seed=self.seed, delay_ms=network["delay_ms"], host=network["host"],
                                   base_port=network["base_port"], queue_capacity=network["queue_capacity"],
                                   connect_attempts=network["connect_attempts"], backoff_ms=network["backoff_ms"],
                                   record_trace=network["record_trace"],
                                   trace_types=network["trace_types"] or None,
                                   live_epoch=layout.epoch if layout is not None else None)
        self.log_gateway = None
        self.gateway = None
        self.gateway_id = GATEWAY_ID
        self.epos_driver = None
        self.dias_driver = None
        self.epos_devices = {}
        self.dias_devices = {}
        self.plan_sets = {}
        self.interrupted = False
        self._start_order = []

    @property
    def services(self):
        service = self.config.service
        return [s for s in (EPOS_SERVICE, DIAS_SERVICE) if service == "BOTH" or service == s.upper()]

    # Peer construction

    def monitor(self):
        monitoring = self.config.monitoring
        if not monitoring["enabled"]:
            return []
        return [MonitoringPeerlet(LOG_GATEWAY_ID, monitoring["auth_token"] or None, monitoring["buffer_size"],
                                  monitoring["flush_period_ms"], monitoring["memory_period_ms"])]

    def _gateway_peerlet(self, service_ids, device_ids):
        return GatewayPeerlet(service_ids, device_ids, self.config.readiness_timeout_ms)

    def epos_peerlets(self, agent):
        epos = self.config.epos
        prefs = AgentPreferences(epos["alpha"], epos["beta"])
        return self.monitor() + [EposPeerlet(self.gateway_id, prefs, epos["normalize"])]

    def dias_peerlets(self, agent):
        dias = self.config.dias
        return self.monitor() + [DiasPeerlet(self.gateway_id, dias["view_size"], dias["gossip_period_ms"],
                                             dias["dissemination_period_ms"], dias["bloom_m"], dias["bloom_h"])]

    def _embedded_extra(self, agent, gateway):
        return [gateway] if gateway is not None and agent == self.gateway_id else []

    def rejoin(self, agent):
        if self.launcher is not None:
            self.launcher.respawn(agent)
            return
        if EPOS_AGENT_BASE <= agent < EPOS_DEVICE_BASE:
            peerlets = self.epos_peerlets(agent)
        else:
            peerlets = self.dias_peerlets(agent)
        self.network.restart_peer(agent, peerlets)

    def hosts(self, peer_id):
        return self.hosted is None or peer_id in self.hosted

    def _create(self, peer_id, peerlets):
        if self.layout is None:
            self.network.create_peer(peer_id, peerlets, self.mode)
        elif self.hosts(peer_id):
            self.layout.assign(peer_id)
            self.network.create_peer(peer_id, peerlets, self.mode, port=self.layout.port(peer_id),
                                     incarnation=self.incarnation)
        else:
            self.network.add_remote(peer_id, self.layout.assign(peer_id))
        self._start_order.append(peer_id)

    def build(self):
        config = self.config
        monitoring = config.monitoring
        if monitoring["enabled"]:
            peerlets = []
            if self.hosts(LOG_GATEWAY_ID):
                store = open_store(monitoring["backend"], self.output_dir / "monitoring")
                tokens = [monitoring["auth_token"]] if monitoring["auth_token"] else []
                self.log_gateway = LogGateway(store, monitoring["commit_batch"], auth_tokens=tokens,
                                              gateway_agent=LOG_GATEWAY_ID,
                                              clock=self.network.engine(self.mode).now_ms)
                peerlets = [LogGatewayPeerlet(self.log_gateway, monitoring["commit_period_ms"])]
            self._create(LOG_GATEWAY_ID, peerlets)

        service_ids = {}
        device_ids = {}
        if EPOS_SERVICE in self.services:
            n = config.epos["agents"]
            service_ids[EPOS_SERVICE] = [EPOS_AGENT_BASE + i for i in range(n)]
            device_ids[EPOS_SERVICE] = [EPOS_DEVICE_BASE + i for i in range(n)]
        if DIAS_SERVICE in self.services:
            n = config.dias["agents"]
            service_ids[DIAS_SERVICE] = [DIAS_AGENT_BASE + i for i in range(n)]
            device_ids[DIAS_SERVICE] = [DIAS_DEVICE_BASE + i for i in range(n)]

        embedded = config.gateway["embedded"]
        gateway = self._gateway_peerlet(service_ids, device_ids)
        if embedded:
            self.gateway_id = next(iter(service_ids.values()))[0]
        if self.hosts(self.gateway_id):
            self.gateway = gateway
        if not embedded:
            self._create(GATEWAY_ID, self.monitor() + [gateway])
            gateway = None

        driver_peerlets = []
        schedule = None
        if config.dynamics["enabled"]:
            schedule = IntensitySchedule.from_names(config.dynamics["period_length_ms"], config.dynamics["cycle"])
        gateway_kwargs = {"submit_delay_ms": config.gateway["submit_delay_ms"],
                          "retry_ms": config.gateway["retry_ms"], "max_attempts": config.gateway["max_attempts"]}
        if EPOS_SERVICE in service_ids:
            driver_peerlets.append(self._build_epos(service_ids[EPOS_SERVICE], device_ids[EPOS_SERVICE],
                                                    gateway, schedule, gateway_kwargs))
        if DIAS_SERVICE in service_ids:
            driver_peerlets.append(self._build_dias(service_ids[DIAS_SERVICE], device_ids[DIAS_SERVICE],
                                                    gateway, schedule, gateway_kwargs))
        self._create(DRIVER_ID, self.monitor() + driver_peerlets)
        # the gateway announces on start, so it goes last in LIVE mode
        if not embedded and self.mode is ExecutionMode.LIVE:
            self._start_order.remove(GATEWAY_ID)
            self._start_order.append(GATEWAY_ID)
        return self

    def _request(self, serv_info, agents):
        params = {"driver": DRIVER_ID, "members": agents}
        return ServiceRequest(serv_info, ServiceMetadata(len(agents), len(agents), (), params))

    def _protected(self):
        return {self.gateway_id} if self.config.gateway["embedded"] else set()

    def _build_epos(self, agents, devices, gateway, schedule, gateway_kwargs):
        config = self.config
        epos = config.epos
        if epos["plan_dir"] is not None:
            loaded = load_plan_dir(config.resolve(epos["plan_dir"]), len(agents))
            dimension = loaded[0][0].dimension
        else:
            loaded = None
            dimension = epos["dimension"] or Horizon.parse(epos["horizon"]).value
        spec = PlanDatasetSpec(len(agents), epos["plans_per_agent"], epos["horizon"], config.epos_seed, dimension)
        for index, (agent, device) in enumerate(zip(agents, devices)):
            plans = loaded[index] if loaded else generate_agent_plans(spec, index)
            self.plan_sets[agent] = plans
            self._create(agent, self.epos_peerlets(agent) + self._embedded_extra(agent, gateway))
            peerlet = HarnessDevicePeerlet(EPOS_SERVICE, DeviceInfo("ev", f"zone-{index % 5}"), plans=plans,
                                           plan_source=lambda seed, i=index: generate_agent_plans(spec, i, seed))
            self.epos_devices[agent] = peerlet
            self._create(device, [peerlet])
        gcf, steering = build_gcf(config, dimension, list(self.plan_sets.values()))
        injector = None
        if schedule is not None:
            injector = ChangeInjector(schedule, self.seed, config.dynamics["churn_fraction"], self._protected())
        self.epos_driver = EposDriver(
            self._request(EPOS_SERVICE, agents), self.gateway_id, dict(zip(agents, devices)),
            runs=epos["runs"], iterations=epos["iterations"], seed=config.epos_seed, gcf=gcf, steering=steering,
            sync=epos["sync"], straggler_timeout_ms=epos["straggler_timeout_ms"], injector=injector,
            run_interval_ms=epos["run_interval_ms"],
            rejoin=self.rejoin, change_timeout_ms=config.dynamics["change_timeout_ms"], **gateway_kwargs)
        return self.epos_driver

    def _build_dias(self, agents, devices, gateway, schedule, gateway_kwargs):
        config = self.config
        dias = config.dias
        for index, (agent, device) in enumerate(zip(agents, devices)):
            rng = random.Random(f"{self.seed}/dias-device/{index}")
            states_source = None
            if dias["source"] == "news":
                stream = SyntheticNewsStream(NewsStreamSpec(len(agents), seed=self.seed))
                window = [counts[index] for counts in stream.ticks(27)]
                states = derive_possible_states(window, dias["k"], seed=self.seed + index)
                raw = float(window[-1])

                def raw_source(u, states, stream=stream, window=window, index=index):
                    window.append(stream.tick()[index])
                    return float(window[-1])

                def states_source(stream=stream, window=window, index=index):
                    return derive_possible_states(window, dias["k"], seed=self.seed + index + len(window))
            else:
                states = clock_possible_states(0, rng, dias["k"])
                raw = states[0] + rng.random() * (states[-1] - states[0])
                raw_source = None
            self._create(agent, self.dias_peerlets(agent) + self._embedded_extra(agent, gateway))
            peerlet = HarnessDevicePeerlet(DIAS_SERVICE, DeviceInfo("news", f"source-{index}"), raw=raw,
                                           states=states, raw_source=raw_source,
                                           states_source=states_source)
            self.dias_devices[agent] = peerlet
            self._create(device, [peerlet])
        injector = None
        if schedule is not None:
            injector = ChangeInjector(schedule, self.seed + 1, config.dynamics["churn_fraction"], self._protected())
        self.dias_driver = DiasDriver(
            self._request(DIAS_SERVICE, agents), self.gateway_id, dict(zip(agents, devices)),
            duration_ms=dias["duration_ms"], probe_period_ms=dias["probe_period_ms"], injector=injector,
            rolling_window=dias["rolling_window"], rejoin=self.rejoin,
            change_timeout_ms=config.dynamics["change_timeout_ms"], **gateway_kwargs)
        return self.dias_driver

    # Execution

    @property
    def drivers(self):
        return [d for d in (self.epos_driver, self.dias_driver) if d is not None]

    def finished(self):
        return all(d.finished for d in self.drivers)

    def _start_all(self):
        if self.launcher is None:
            for peer_id in self._start_order:
                self.network.peer(peer_id).start()
            return
        self.launcher.save_layout()
        remote = [p for p in self._start_order if not self.hosts(p)]
        first = [p for p in remote if p == LOG_GATEWAY_ID]
        last = [p for p in remote if p == GATEWAY_ID]
        # operator submits are not retried, so the gateway must listen before the driver starts
        for batch in (first, [p for p in remote if p not in first and p not in last], last):
            if batch:
                self.launcher.launch(batch)
        for peer_id in self._start_order:
            if self.hosts(peer_id):
                self.network.peer(peer_id).start()

    def run(self):
        started = time.monotonic()
        limit_reached = False
        try:
            if self.mode is ExecutionMode.SIM:
                limit_reached = self._run_sim()
            else:
                limit_reached = self._run_live()
        except KeyboardInterrupt:
            logger.warning("interrupted, stopping all peers")
            self.interrupted = True
        except ScenarioAbort:
            self._shutdown()
            raise
        self._shutdown()
        result = self.collect(limit_reached)
        result.elapsed_ms = int((time.monotonic() - started) * 1000)
        return result

    def _run_sim(self):
        self.network.reseed(self.seed)
        self._start_all()
        horizon = self.config.scenario["horizon_ms"]
        sim = self.network.sim
        while not self.finished():
            if sim.now >= horizon:
                return True
            if sim.pending() == 0:
                logger.error("simulation ran out of events before the scenario finished")
                return True
            sim.run(min(horizon, sim.now + SIM_STEP_MS))
        # let the completion messages and last log flushes land
        sim.run(sim.now + 10 * max(1, self.network.delay_ms))
        return False

    def _run_live(self):
        self._start_all()
        deadline = time.monotonic() + self.config.network["live_time_limit_s"]
        while not self.finished():
            if time.monotonic() >= deadline:
                logger.error("LIVE time limit reached before the scenario finished")
                return True
            if self.launcher is not None:
                self.launcher.poll()
            time.sleep(0.05)
        time.sleep(0.1)
        return False

    def _shutdown(self):
        others = [p.id for p in self.network.peers if p.id != LOG_GATEWAY_ID]
        for peer_id in others:
            self.network.peer(peer_id).stop()
        if self.mode is ExecutionMode.SIM:
            self.network.sim.run(self.network.sim.now + 10 * max(1, self.network.delay_ms))
        else:
            for peer_id in others:
                self.network.engine(self.mode).join(self.network.peer(peer_id), timeout=5.0)
            time.sleep(0.2)
        if self.launcher is not None:
            self.launcher.stop_all(last=[LOG_GATEWAY_ID])
        log_peer = self.network.peer(LOG_GATEWAY_ID)
        if log_peer is not None:
            log_peer.stop()
            if self.mode is ExecutionMode.LIVE:
                self.network.engine(self.mode).join(log_peer, timeout=5.0)
        if self.log_gateway is not None:
            self.log_gateway.commit()
            self.log_gateway.store.close()

    def selections(self):
        """Last plan index each locally hosted EPOS device actuated, by agent"""
        selections = {}
        for agent, device in self.epos_devices.items():
            runs = [a for a in device.actuations if isinstance(a, dict) and "plan_index" in a]
            if runs:
                selections[agent] = runs[-1]["plan_index"]
        return selections

    def collect(self, limit_reached=False):
        result = RunResult(self.config.mode, self.output_dir)
        result.plan_sets = dict(self.plan_sets)
        for driver in self.drivers:
            result.records.extend(driver.records)
            result.changes_applied += driver.changes_applied
            for kind, count in driver.change_counts.items():
                result.change_counts[kind] = result.change_counts.get(kind, 0) + count
        result.joins_leaves = result.change_counts.get("JOIN", 0) + result.change_counts.get("LEAVE", 0)
        if self.epos_driver is not None:
            result.epos_history = dict(self.epos_driver.run_history)
            result.timings = list(self.epos_driver.timings)
        result.selections = self.selections()
        if self.dias_driver is not None:
            result.dias_errors = [e.instant for e in self.dias_driver.errors]
        result.messages = self.network.stats.snapshot()
        result.callback_errors = self.network.callback_errors
        if self.launcher is not None:
            for hosted in self.launcher.results():
                for name, count in hosted["messages"].items():
                    result.messages[name] = result.messages.get(name, 0) + count
                result.callback_errors += hosted["callback_errors"]
                result.selections.update({int(agent): index for agent, index in hosted["selections"].items()})
                result.violations.extend(hosted["violations"])
            result.process_crashes = self.launcher.crashes
        reasons = []
        if self.interrupted:
            reasons.append("interrupted")
        if limit_reached:
            reasons.append("time limit reached")
        if any(getattr(d, "aborted", False) for d in self.drivers):
            reasons.append("run aborted by straggler timeout")
        result.aborted = bool(reasons)
        result.abort_reason = ", ".join(reasons)
        return result


def run_scenario(config):
    """Run every repetition and write the artifacts; the result of the last repetition carries all records"""
    output_dir = config.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    combined = None
    repetitions = config.scenario["repetitions"]
    for repetition in range(repetitions):
        run = ScenarioRun(config, seed=config.seed + repetition, output_dir=output_dir).build()
        logger.info(f"running {config.scenario['name']} repetition {repetition + 1}/{repetitions} "
                    f"in {config.mode} mode, seed {run.seed}")
        result = run.run()
        offset = repetition * max(1, config.epos["runs"] if EPOS_SERVICE in run.services else 1)
        for record in result.records:
            record.run_id += offset
        if combined is None:
            combined = result
        else:
            combined.records.extend(result.records)
            combined.dias_errors.extend(result.dias_errors)
            combined.changes_applied += result.changes_applied
            combined.joins_leaves += result.joins_leaves
            combined.callback_errors += result.callback_errors
            combined.process_crashes += result.process_crashes
            combined.violations.extend(result.violations)
            combined.epos_history = result.epos_history
            combined.selections = result.selections
            combined.aborted = combined.aborted or result.aborted
            combined.abort_reason = combined.abort_reason or result.abort_reason
        if run.mode is ExecutionMode.SIM and config.network["record_trace"]:
            trace_path = output_dir / "trace.csv"
            run.network.sim.trace.write(trace_path)
            combined.artifacts.append(trace_path)
        if result.aborted:
            break
    write_artifacts(combined, config)
    return combined


def write_artifacts(result, config):
    out = result.output_dir
    metrics_path = out / f"metrics_{result.mode.lower()}.csv"
    write_metrics(metrics_path, result.records)
    report_path = out / "report.txt"
    report_path.write_text(render_report(result, config), encoding="utf-8")
    result.artifacts.extend([metrics_path, report_path, out / "monitoring"])
    marker = out / "ABORTED"
    if result.aborted:
        marker.write_text(result.abort_reason + "\n", encoding="utf-8")
        result.artifacts.append(marker)
    elif marker.exists():
        marker.unlink()


def create_ascii_bar(value, max_value, width=20, char='#', empty_char='.'):
    if max_value == 0:
        filled = 0
    else:
        filled = int((value / max_value) * width)
    return char * filled + empty_char * (width - filled)


def create_cost_graph(costs, height=8, width=60):
    """Column chart of the per-iteration global cost"""
    if not costs:
        return "No data available"
    values = list(costs)[-width:]
    low, high = min(values), max(values)
    if high == low:
        return f"Constant cost: {high:.6g}"
    rows = []
    for level in range(height, 0, -1):
        threshold = low + (high - low) * (level - 0.5) / height
        rows.append("|" + "".join("#" if v >= threshold else " " for v in values))
    rows.append("+" + "-" * len(values))
    rows.append(f"Range: {low:.6g} - {high:.6g} over {len(values)} iterations")
    return "\n".join(rows)


def _mean(values):
    values = [v for v in values if v is not None and not math.isnan(v) and not math.isinf(v)]
    return statistics.fmean(values) if values else None


def render_report(result, config=None):
    lines = ["peerbed run report", "=" * 40]
    if config is not None:
        lines.append(f"Scenario:   {config.scenario['name']}")
        lines.append(f"Service:    {config.service}")
        lines.append(f"Seed:       {config.seed}")
    lines.append(f"Mode:       {result.mode}")
    lines.append(f"Status:     {'ABORTED (' + result.abort_reason + ')' if result.aborted else 'completed'}")
    lines.append(f"Elapsed:    {result.elapsed_ms} ms")
    lines.append(f"Messages:   {result.messages}")
    lines.append(f"Crashes:    {result.callback_errors} callback errors")
    if result.process_crashes:
        lines.append(f"Processes:  {result.process_crashes} peer processes crashed")
    if result.violations:
        lines.append(f"Violations: {len(result.violations)}, first: {result.violations[0]}")
    if result.changes_applied:
        lines.append(f"Changes:    {result.changes_applied} applied, {result.joins_leaves} joins/leaves")
        for kind, count in sorted(result.change_counts.items()):
            lines.append(f"  {kind:24s} {count}")

    if result.epos_history:
        last_run = max(result.epos_history)
        history = result.epos_history[last_run]
        lines += ["", "I-EPOS", "-" * 40]
        lines.append(f"Runs completed:    {len(result.epos_history)}")
        lines.append(f"Final global cost: {result.final_cost:.6g}" if result.final_cost is not None else
                     "Final global cost: n/a")
        if history:
            lines.append(f"Final local cost:  {history[-1].local_cost:.6g}")
            lines.append(f"Final unfairness:  {history[-1].unfairness:.6g}")
        lines.append("")
        lines.append(f"Global cost per iteration (run {last_run}):")
        lines.append(create_cost_graph([r.global_cost for r in history]))
        lines.append("")
        for record in history:
            lines.append(f"  t={record.t:3d} cost={record.global_cost:.6g} "
                         f"{'accepted' if record.accepted else 'reverted'}")
        if result.selections:
            counts = {}
            for index in result.selections.values():
                counts[index] = counts.get(index, 0) + 1
            lines.append("")
            lines.append("Selected plan indices:")
            for index in sorted(counts):
                lines.append(f"  plan {index}: {create_ascii_bar(counts[index], len(result.selections))} "
                             f"{counts[index]}")
        if result.timings:
            lines.append("")
            lines.append("Run timings (working / adaptivity ms, latency, WAT):")
            for timing in result.timings:
                latency_text = f"{timing['latency']:.3f}" if timing["latency"] is not None else "n/a"
                lines.append(f"  run {timing['run']:3d} {timing['intensity'] or '-':6s} "
                             f"{timing['working_ms']:8.0f} / {timing['adaptivity_ms']:8.0f}  "
                             f"{latency_text}  {timing['wat']:.3f}")

    if result.dias_errors:
        lines += ["", "DIAS", "-" * 40]
        lines.append(f"Probes:            {len(result.dias_errors)}")
        lines.append(f"Mean abs error:    {_mean(result.dias_errors):.6g}")
        lines.append(f"Final abs error:   {result.dias_errors[-1]:.6g}")
        lines.append("Absolute error per probe:")
        lines.append(create_cost_graph(result.dias_errors))
    return "\n".join(lines) + "\n"


class Comparison:
    def __init__(self, records, mean_abs_rel_g, mean_abs_rel_l, mean_abs_rel_g_after):
        self.records = records
        self.mean_abs_rel_g = mean_abs_rel_g
        self.mean_abs_rel_l = mean_abs_rel_l
        self.mean_abs_rel_g_after = mean_abs_rel_g_after


def compare_runs(sim_csv, live_csv, out_csv=None, after_iteration=10):
    """Per-iteration relative global and local cost differences of a SIM and a LIVE run"""
    sim = read_metrics(sim_csv)
    live = read_metrics(live_csv)
    sim_keys = [(r.run_id, r.t) for r in sim if r.g_s is not None]
    live_keys = [(r.run_id, r.t) for r in live if (r.g_l if r.g_l is not None else r.g_s) is not None]
    if sim_keys != live_keys:
        raise ServiceError(f"run shapes differ: {len(sim_keys)} SIM rows vs {len(live_keys)} LIVE rows")
    live_by_key = {(r.run_id, r.t): r for r in live}
    merged = []
    for s in sim:
        if s.g_s is None:
            continue
        other = live_by_key[(s.run_id, s.t)]
        g_l = other.g_l if other.g_l is not None else other.g_s
        l_l = other.l_l if other.l_l is not None else other.l_s
        rel_l = relative_difference(s.l_s, l_l) if s.l_s is not None and l_l is not None else None
        merged.append(MetricsRecord(s.run_id, s.t, g_s=s.g_s, g_l=g_l, l_s=s.l_s, l_l=l_l,
                                    rel_g=relative_difference(s.g_s, g_l), rel_l=rel_l,
                                    latency=other.latency, wat=other.wat, intensity=s.intensity))
    if out_csv is not None:
        write_metrics(out_csv, merged)
    return Comparison(
        merged,
        _mean([abs(r.rel_g) for r in merged]),
        _mean([abs(r.rel_l) for r in merged if r.rel_l is not None]),
        _mean([abs(r.rel_g) for r in merged if r.t >= after_iteration]),
    )


def render_comparison(comparison):
    def fmt(value):
        return "n/a" if value is None else f"{value:.6g}"
    lines = ["SIM vs LIVE comparison", "=" * 40,
             f"Rows:                         {len(comparison.records)}",
             f"Mean |rel_g|:                 {fmt(comparison.mean_abs_rel_g)}",
             f"Mean |rel_g| (t >= 10):       {fmt(comparison.mean_abs_rel_g_after)}",
             f"Mean |rel_l|:                 {fmt(comparison.mean_abs_rel_l)}"]
    return "\n".join(lines) + "\n"


def report_from_dir(run_dir):
    """Re-render a report from the artifacts of a finished run"""
    run_dir = Path(run_dir)
    report = run_dir / "report.txt"
    metrics = sorted(run_dir.glob("metrics_*.csv"))
    if not metrics and not report.exists():
        raise ConfigError("no run artifacts found", path=str(run_dir))
    lines = []
    if report.exists():
        lines.append(report.read_text(encoding="utf-8").rstrip("\n"))
    for path in metrics:
        records = read_metrics(path)
        costs = [r.g_s if r.g_s is not None else r.g_l for r in records]
        costs = [c for c in costs if c is not None]
        if costs:
            lines += ["", f"{path.name}: global cost over {len(costs)} rows", create_cost_graph(costs)]
    if (run_dir / "ABORTED").exists():
        lines += ["", "Run was aborted: " + (run_dir / "ABORTED").read_text(encoding="utf-8").strip()]
    return "\n".join(lines) + "\n"
