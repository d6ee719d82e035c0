#!/usr/bin/env python3
"""
Conformance checks for peerbed runs:
- brute-force optimum for tiny I-EPOS instances
- central replay of DIAS supplier histories
- bootstrap protocol order and one-to-one checks over SIM traces
- the soak runner
"""

import copy
import itertools
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from bootstrap_protocol import PROTOCOL_TYPES, MessageType
from config_manager import ScenarioConfig
from dynamics_harness import write_metrics
from messaging import NetworkAddress
from monitoring import LogKind, LogRecord
from peerbed_errors import ProtocolError, ServiceError
from runtime_core import EventTrace, ExecutionMode
from scenario_runner import ScenarioRun
from services.dias import DiasPeerlet
from services.epos import AgentPreferences, CostKind, GlobalCostFunction, Plan, run_epos

logger = logging.getLogger(__name__)

MAX_ORACLE_AGENTS = 6
MAX_ORACLE_PLANS = 3
MAX_ORACLE_DIMENSION = 4


@dataclass
class OracleResult:
    instance: str
    oracle_value: float
    system_value: Optional[float] = None

    @property
    def gap(self) -> Optional[float]:
        """Relative excess of the system value over the optimum"""
        if self.system_value is None:
            return None
        if self.oracle_value == 0:
            return self.system_value - self.oracle_value
        return (self.system_value - self.oracle_value) / abs(self.oracle_value)


@dataclass
class EposOptimum:
    cost: float
    selection: Tuple[int, ...]
    combinations: int


def _oracle_cost(kind: CostKind, steering: Optional[np.ndarray], response: np.ndarray) -> float:
    mean = response.sum() / response.size
    if kind is CostKind.MIN_VAR:
        return float(((response - mean) ** 2).sum() / response.size)
    diff = response - steering
    return math.sqrt(float((diff * diff).sum()) / response.size)


def epos_oracle(plan_sets: Sequence[Sequence[Plan]], gcf: GlobalCostFunction = GlobalCostFunction()) -> EposOptimum:
    """Exhaustive minimum global cost over every combination of one plan per agent"""
    if not plan_sets:
        raise ServiceError("oracle needs at least one agent")
    if len(plan_sets) > MAX_ORACLE_AGENTS:
        raise ServiceError(f"{len(plan_sets)} agents exceed the oracle bound of {MAX_ORACLE_AGENTS}")
    dimension = plan_sets[0][0].values.size
    for plans in plan_sets:
        if not plans or len(plans) > MAX_ORACLE_PLANS:
            raise ServiceError(f"oracle supports 1 to {MAX_ORACLE_PLANS} plans per agent, got {len(plans)}")
        if any(p.values.size != dimension for p in plans):
            raise ServiceError("plans of an oracle instance differ in dimension")
    if dimension > MAX_ORACLE_DIMENSION:
        raise ServiceError(f"dimension {dimension} exceeds the oracle bound of {MAX_ORACLE_DIMENSION}")
    steering = None
    if gcf.kind is CostKind.MIN_RMSE:
        steering = np.array(gcf.steering, dtype=np.float64)

    best = None
    combinations = 0
    for selection in itertools.product(*(range(len(plans)) for plans in plan_sets)):
        combinations += 1
        response = np.zeros(dimension)
        for plans, index in zip(plan_sets, selection):
            response = response + plans[index].values
        cost = _oracle_cost(gcf.kind, steering, response)
        if best is None or cost < best.cost:
            best = EposOptimum(cost, selection, 0)
    best.combinations = combinations
    return best


def random_instance(rng: np.random.Generator, max_agents: int = MAX_ORACLE_AGENTS,
                    max_plans: int = MAX_ORACLE_PLANS, max_dimension: int = MAX_ORACLE_DIMENSION) -> List[List[Plan]]:
    agents = int(rng.integers(1, max_agents + 1))
    plans = int(rng.integers(1, max_plans + 1))
    dimension = int(rng.integers(1, max_dimension + 1))
    return [[Plan(rng.uniform(0.0, 10.0, size=dimension), float(rng.uniform())) for _ in range(plans)]
            for _ in range(agents)]


@dataclass
class GapReport:
    results: List[OracleResult]
    violations: List[OracleResult]

    @property
    def median_gap(self) -> Optional[float]:
        gaps = [r.gap for r in self.results if r.gap is not None]
        return statistics.median(gaps) if gaps else None

    def render(self) -> str:
        median = self.median_gap
        lines = [f"instances:     {len(self.results)}",
                 f"median gap:    {'n/a' if median is None else f'{median:.6g}'}",
                 f"bound violated: {len(self.violations)}"]
        for result in self.violations:
            lines.append(f"  {result.instance}: oracle {result.oracle_value:.6g} > system {result.system_value:.6g}")
        return "\n".join(lines) + "\n"


def oracle_gap_report(instances: Iterable[Sequence[Sequence[Plan]]], iterations: int = 20, seed: int = 0,
                      gcf: GlobalCostFunction = GlobalCostFunction()) -> GapReport:
    """Final I-EPOS cost (alpha = beta = 0) against the exhaustive optimum of each instance"""
    results, violations = [], []
    for index, plan_sets in enumerate(instances):
        optimum = epos_oracle(plan_sets, gcf)
        outcome = run_epos({i: plans for i, plans in enumerate(plan_sets)}, gcf, AgentPreferences(0.0, 0.0),
                           iterations, seed + index)
        result = OracleResult(f"#{index} agents={len(plan_sets)} plans={len(plan_sets[0])} "
                              f"d={plan_sets[0][0].values.size}", optimum.cost, outcome.final_cost)
        results.append(result)
        if result.system_value < result.oracle_value - 1e-9 * max(1.0, abs(result.oracle_value)):
            violations.append(result)
            logger.error(f"oracle bound violated on {result.instance}")
    return GapReport(results, violations)


@dataclass(frozen=True)
class AggregatePoint:
    t: int
    sum: float
    count: int
    min: Optional[float]
    max: Optional[float]

    @property
    def avg(self) -> Optional[float]:
        return self.sum / self.count if self.count else None


def _event_fields(event) -> Tuple[int, int, Optional[float]]:
    try:
        if isinstance(event, Mapping):
            t, supplier, value = event["t"], event["supplier"], event.get("value")
        else:
            t, supplier, value = event
        return int(t), int(supplier), None if value is None else float(value)
    except (KeyError, TypeError, ValueError) as e:
        raise ServiceError(f"malformed DIAS event {event!r}: {e}") from None


def dias_oracle(events: Iterable) -> List[AggregatePoint]:
    """
    Exact aggregates after each timestamp of a supplier history. Events are
    (t, supplier, value) tuples or mappings with those keys; value None
    means the supplier left.
    """
    current: Dict[int, float] = {}
    series: List[AggregatePoint] = []
    last_t = None
    for event in events:
        t, supplier, value = _event_fields(event)
        if last_t is not None and t < last_t:
            raise ServiceError(f"DIAS event log goes back in time at t={t}")
        if last_t is not None and t != last_t:
            series.append(_point(last_t, current))
        if value is None:
            current.pop(supplier, None)
        else:
            current[supplier] = value
        last_t = t
    if last_t is not None:
        series.append(_point(last_t, current))
    return series


def _point(t: int, current: Mapping[int, float]) -> AggregatePoint:
    values = list(current.values())
    return AggregatePoint(t, math.fsum(values), len(values), min(values) if values else None,
                          max(values) if values else None)


def dias_events_from_records(records: Iterable[LogRecord], service: str = "dias") -> List[Tuple[int, int, Optional[float]]]:
    """Supplier history from monitoring records: selected values and driver LEAVE changes"""
    events = []
    for record in records:
        if record.kind is LogKind.SERVICE and record.key == f"{service}.selected":
            events.append((record.ts_ms, record.agent, float(record.value)))
        elif record.kind is LogKind.EVENT and record.key == f"{service}.change":
            kind, _, target = str(record.value).partition(":")
            if kind == "LEAVE":
                events.append((record.ts_ms, int(target), None))
    events.sort(key=lambda e: e[0])
    return events


PROTOCOL_STEPS = {
    MessageType.BROADCAST: 0,
    MessageType.REG_DEV: 1,
    MessageType.ASGN_AGN: 2,
    MessageType.READY: 3,
    MessageType.AGN_READY: 4,
    MessageType.RUN_SERV: 5,
}
DATA_STEP = 6
DATA_TYPES = frozenset({MessageType.SENSING, MessageType.ACTUATION, MessageType.SENSING_REQ})


def _address(value: Union[int, str]) -> str:
    return str(NetworkAddress.for_peer(value)) if isinstance(value, int) else str(value)


def _step(msg_type: int, sender: str, recipient: str, device: str, agent: str) -> Optional[int]:
    if msg_type in (MessageType.BROADCAST, MessageType.ASGN_AGN) and recipient == device:
        return PROTOCOL_STEPS[MessageType(msg_type)]
    if msg_type == MessageType.REG_DEV and sender == device:
        return PROTOCOL_STEPS[MessageType.REG_DEV]
    if msg_type in (MessageType.READY, MessageType.RUN_SERV) and recipient == agent:
        return PROTOCOL_STEPS[MessageType(msg_type)]
    if msg_type == MessageType.AGN_READY and sender == agent:
        return PROTOCOL_STEPS[MessageType.AGN_READY]
    if msg_type in DATA_TYPES and {sender, recipient} == {device, agent}:
        return DATA_STEP
    return None


def check_protocol_trace(trace: EventTrace, bindings: Iterable[Tuple[Union[int, str], Union[int, str]]]) -> List[str]:
    """
    Violations of the bootstrap order per (device, agent) binding and of the
    one-to-one assignment. A re-registration (regDevMsg after the binding ran)
    opens a new lifetime that must repeat the steps from regDevMsg on.
    """
    violations = []
    pairs = []
    by_device: Dict[str, str] = {}
    by_agent: Dict[str, str] = {}
    for device, agent in bindings:
        device, agent = _address(device), _address(agent)
        if by_device.setdefault(device, agent) != agent:
            violations.append(f"device {device} bound to {by_device[device]} and {agent}")
        if by_agent.setdefault(agent, device) != device:
            violations.append(f"agent {agent} bound to {by_agent[agent]} and {device}")
        if (device, agent) not in pairs:
            pairs.append((device, agent))

    deliveries = [(e, e.fields()) for e in trace.deliveries()]
    for device, agent in pairs:
        state = -1
        for event, fields in deliveries:
            try:
                msg_type = int(fields["type"])
            except (KeyError, ValueError):
                violations.append(f"unreadable trace event {event.to_line()!r}")
                continue
            if msg_type not in PROTOCOL_TYPES:
                continue
            step = _step(msg_type, fields.get("from", ""), fields.get("to", ""), device, agent)
            if step is None:
                continue
            if step == DATA_STEP:
                if state < PROTOCOL_STEPS[MessageType.RUN_SERV]:
                    violations.append(f"{device}->{agent}: type {msg_type} at {event.timestamp_ms} ms "
                                      f"before runServMsg")
            elif step in (state, state + 1):
                state = max(state, step)
            elif step == PROTOCOL_STEPS[MessageType.REG_DEV] and state > step:
                state = step
            else:
                violations.append(f"{device}->{agent}: type {msg_type} at {event.timestamp_ms} ms "
                                  f"out of order after step {state}")
    return violations


@dataclass
class SoakReport:
    duration_ms: int
    changes_applied: int = 0
    change_counts: Dict[str, int] = field(default_factory=dict)
    joins_leaves: int = 0
    messages: dict = field(default_factory=dict)
    crashes: int = 0
    process_crashes: int = 0
    violations: List[str] = field(default_factory=list)
    latency_by_intensity: Dict[str, float] = field(default_factory=dict)
    wat_by_intensity: Dict[str, float] = field(default_factory=dict)
    dias_error_mean: Optional[float] = None
    interrupted: bool = False

    @property
    def passed(self) -> bool:
        return self.crashes == 0 and self.process_crashes == 0 and not self.violations and not self.interrupted

    @property
    def latency_increasing(self) -> Optional[bool]:
        order = [self.latency_by_intensity.get(name) for name in ("LOW", "MEDIUM", "HIGH")]
        if any(v is None for v in order):
            return None
        return order[0] < order[1] < order[2]

    def render(self) -> str:
        lines = ["peerbed soak report", "=" * 40,
                 f"Status:          {'PASSED' if self.passed else 'FAILED'}",
                 f"Duration:        {self.duration_ms} ms",
                 f"Changes applied: {self.changes_applied}",
                 f"Joins/leaves:    {self.joins_leaves}",
                 f"Messages:        {self.messages}",
                 f"Crashes:         {self.crashes}",
                 f"Peer processes:  {self.process_crashes} crashed",
                 f"Violations:      {len(self.violations)}"]
        for kind, count in sorted(self.change_counts.items()):
            lines.append(f"  {kind:24s} {count}")
        for name in ("LOW", "MEDIUM", "HIGH"):
            if name in self.latency_by_intensity:
                lines.append(f"{name:6s} latency {self.latency_by_intensity[name]:.4f}  "
                             f"WAT {self.wat_by_intensity.get(name, float('nan')):.4f}")
        if self.latency_increasing is not None:
            lines.append(f"Latency increasing LOW->MEDIUM->HIGH: {self.latency_increasing}")
        if self.dias_error_mean is not None:
            lines.append(f"DIAS mean abs error: {self.dias_error_mean:.6g}")
        if self.interrupted:
            lines.append("Soak was interrupted")
        for violation in self.violations[:50]:
            lines.append(f"  violation: {violation}")
        return "\n".join(lines) + "\n"


def _finite_mean(values) -> Optional[float]:
    values = [v for v in values if v is not None and math.isfinite(v)]
    return statistics.fmean(values) if values else None


def soak_config(config: ScenarioConfig, duration_ms: int) -> ScenarioConfig:
    """Copy of the config that keeps every service busy for duration_ms under dynamics"""
    soak = ScenarioConfig(copy.deepcopy(config.sections), config.path)
    sections = soak.sections
    sections["dynamics"]["enabled"] = True
    sections["scenario"]["horizon_ms"] = duration_ms
    sections["scenario"]["repetitions"] = 1
    # runs end at the horizon, not at a run count
    sections["epos"]["runs"] = 10 ** 6
    sections["dias"]["duration_ms"] = duration_ms
    sections["network"]["live_time_limit_s"] = max(sections["network"]["live_time_limit_s"],
                                                   duration_ms // 1000 + 30)
    if soak.mode == "SIM":
        sections["network"]["record_trace"] = True
        sections["network"]["trace_types"] = sorted(PROTOCOL_TYPES)
    return soak


def invariant_violations(run: ScenarioRun) -> List[str]:
    """Gateway protocol and DIAS aggregation invariants of the peers this process hosts"""
    violations = []
    if run.gateway is not None:
        for name, state in run.gateway.states.items():
            try:
                state.check_invariants()
            except ProtocolError as e:
                violations.append(f"gateway {name}: {e}")
    for peer in run.network.peers:
        dias = peer.find_peerlet(DiasPeerlet)
        if dias is None:
            continue
        try:
            dias.aggregation.check_invariants()
        except ServiceError as e:
            violations.append(f"dias agent {peer.id}: {e}")
    if run.mode is ExecutionMode.SIM and run.gateway is not None:
        bindings = [pair for state in run.gateway.states.values() for pair in state.bindings]
        violations.extend(check_protocol_trace(run.network.sim.trace, bindings))
    return violations


def soak(config: ScenarioConfig, minutes: Optional[float] = None,
         output_dir: Optional[Union[str, Path]] = None) -> SoakReport:
    """Run the dynamics harness for the given duration and count what happened"""
    duration_ms = int(minutes * 60_000) if minutes is not None else config.scenario["horizon_ms"]
    if duration_ms <= 0:
        raise ServiceError(f"soak duration must be positive, got {duration_ms} ms")
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = ScenarioRun(soak_config(config, duration_ms), output_dir=out).build()
    logger.info(f"soak: {duration_ms} ms in {config.mode} mode, {len(run.network.peers)} peers")
    result = run.run()

    report = SoakReport(duration_ms, result.changes_applied, dict(result.change_counts), result.joins_leaves,
                        result.messages, result.callback_errors, interrupted=run.interrupted)
    report.violations = invariant_violations(run) + result.violations
    report.process_crashes = result.process_crashes
    by_intensity: Dict[str, List[dict]] = {}
    for timing in result.timings:
        by_intensity.setdefault(timing["intensity"], []).append(timing)
    for name, timings in by_intensity.items():
        latency = _finite_mean(t["latency"] for t in timings)
        if latency is not None:
            report.latency_by_intensity[name] = latency
        wat = _finite_mean(t["wat"] for t in timings)
        if wat is not None:
            report.wat_by_intensity[name] = wat
    report.dias_error_mean = _finite_mean(result.dias_errors)

    (out / "soak_report.txt").write_text(report.render(), encoding="utf-8")
    write_metrics(out / "soak_metrics.csv", result.records)
    if report.crashes:
        logger.error(f"soak: {report.crashes} callback errors")
    if report.process_crashes:
        logger.error(f"soak: {report.process_crashes} peer processes crashed, logs in {out / 'hosts'}")
    if report.violations:
        logger.error(f"soak: {len(report.violations)} invariant violations, first: {report.violations[0]}")
    return report
