#!/usr/bin/env python3
"""
Experiment dynamics: intensity schedule, change injection, evaluation
metrics and the experiment drivers.

Drivers are service operators. They never touch service state directly;
every change travels as a message (CHANGE to a service agent,
DEVICE_UPDATE to an application agent) and is acknowledged back.
"""

import csv
import logging
import math
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Union

from bootstrap_protocol import ApplicationAgentPeerlet, DeviceInfo, MessageType, OperatorPeerlet, ServiceRequest
from data_generators import clock_possible_states
from monitoring import LogKind
from peerbed_errors import ServiceError
from runtime_core import Timer
from services.dias import DiasType, PossibleStates
from services.epos import CostKind, EposType, GlobalCostFunction, IterationRecord, RunSettings, plans_to_record
from services.control import ControlType, decode_body, encode_body

logger = logging.getLogger(__name__)

EIGHT_HOURS_MS = 8 * 3600 * 1000
MINUTE_MS = 60 * 1000
HOUR_MS = 60 * MINUTE_MS
SYSTEM = "system"
DEFAULT_ROLLING_WINDOW = 20

METRICS_COLUMNS = ["run_id", "t", "g_s", "g_l", "l_s", "l_l", "rel_g", "rel_l", "latency", "wat", "dias_err",
                   "intensity"]


class Intensity(Enum):
    LOW = "LOW"
    MEDIUM = "MEDIUM"
    HIGH = "HIGH"


@dataclass(frozen=True)
class EposRates:
    plan_change: float
    weight_change: float
    gcf_change: float
    churn: float

    def __post_init__(self):
        for name, value in vars(self).items():
            if not 0.0 <= value <= 1.0:
                raise ServiceError(f"EPOS rate {name}={value} outside [0, 1]")


@dataclass(frozen=True)
class DiasPeriods:
    """Unscaled durations in ms"""
    possible_states_ms: int
    selected_state_ms: int
    churn_ms: int

    def __post_init__(self):
        for name, value in vars(self).items():
            if value <= 0:
                raise ServiceError(f"DIAS period {name}={value} must be positive")

    def scaled(self, scale: float) -> "DiasPeriods":
        return DiasPeriods(*(max(1, int(round(v * scale))) for v in
                             (self.possible_states_ms, self.selected_state_ms, self.churn_ms)))


@dataclass(frozen=True)
class IntensityLevel:
    level: Intensity
    epos_rates: EposRates
    dias_rates: DiasPeriods


INTENSITY_TABLE = {
    Intensity.LOW: IntensityLevel(Intensity.LOW, EposRates(0.10, 0.10, 0.10, 0.10),
                                  DiasPeriods(3 * HOUR_MS, 5 * MINUTE_MS, 10 * MINUTE_MS)),
    Intensity.MEDIUM: IntensityLevel(Intensity.MEDIUM, EposRates(0.20, 0.20, 0.20, 0.20),
                                     DiasPeriods(2 * HOUR_MS, 2 * MINUTE_MS, 5 * MINUTE_MS)),
    Intensity.HIGH: IntensityLevel(Intensity.HIGH, EposRates(0.50, 0.50, 0.50, 0.50),
                                   DiasPeriods(1 * HOUR_MS, 1 * MINUTE_MS, 2 * MINUTE_MS)),
}

STATIC = IntensityLevel(Intensity.LOW, EposRates(0.0, 0.0, 0.0, 0.0),
                        DiasPeriods(10 ** 12, 10 ** 12, 10 ** 12))


@dataclass
class IntensitySchedule:
    period_length_ms: int = 60_000
    cycle: List[IntensityLevel] = field(default_factory=lambda: [INTENSITY_TABLE[i] for i in Intensity])

    def __post_init__(self):
        if not self.cycle:
            raise ServiceError("intensity schedule needs a non-empty cycle")
        if self.period_length_ms <= 0:
            raise ServiceError("intensity period length must be positive")

    @classmethod
    def from_names(cls, period_length_ms: int, names: Sequence[str]) -> "IntensitySchedule":
        try:
            return cls(period_length_ms, [INTENSITY_TABLE[Intensity(n.upper())] for n in names])
        except ValueError:
            raise ServiceError(f"unknown intensity in {list(names)}") from None

    @property
    def scale(self) -> float:
        """Desk time per real time: one period stands for eight hours"""
        return self.period_length_ms / EIGHT_HOURS_MS

    def period_index(self, at_ms: int) -> int:
        return int(at_ms // self.period_length_ms)

    def level_at(self, at_ms: int) -> IntensityLevel:
        return self.cycle[self.period_index(at_ms) % len(self.cycle)]

    def dias_periods_at(self, at_ms: int) -> DiasPeriods:
        return self.level_at(at_ms).dias_rates.scaled(self.scale)

    def virtual_hour(self, at_ms: int) -> int:
        return int(at_ms / self.scale // HOUR_MS) % 24


class ChangeKind(Enum):
    PLAN_CHANGE = "PLAN_CHANGE"
    WEIGHT_CHANGE = "WEIGHT_CHANGE"
    GCF_CHANGE = "GCF_CHANGE"
    JOIN = "JOIN"
    LEAVE = "LEAVE"
    POSSIBLE_STATES_CHANGE = "POSSIBLE_STATES_CHANGE"
    SELECTED_STATE_CHANGE = "SELECTED_STATE_CHANGE"


@dataclass
class ChangeEvent:
    kind: ChangeKind
    target: Union[int, str]
    payload: Dict[str, Any] = field(default_factory=dict)
    at_ms: int = 0
    service: str = ""
    intensity: str = ""

    def __post_init__(self):
        if self.kind is ChangeKind.GCF_CHANGE and self.target != SYSTEM:
            raise ServiceError("global cost function changes are system-wide")

    def describe(self) -> str:
        return f"{self.kind.value}:{self.target}"


class ChangeInjector:
    """Seeded change generator; tracks which agents it has taken out so churn toggles membership"""

    def __init__(self, schedule: IntensitySchedule, seed: int = 0, churn_fraction: float = 0.25,
                 protected: Iterable[int] = ()):
        if not 0.0 <= churn_fraction <= 1.0:
            raise ServiceError(f"churn fraction {churn_fraction} outside [0, 1]")
        self.schedule = schedule
        # never taken out, e.g. the peer hosting an embedded gateway
        self.protected = frozenset(protected)
        self.seed = seed
        self.churn_fraction = churn_fraction
        self.departed: Dict[str, set] = {}
        self.gcf_kind = CostKind.MIN_VAR
        self.skipped = 0

    def epos_changes(self, run: int, agents: Sequence[int], at_ms: int, service: str = "epos",
                     targets: Optional[Sequence[int]] = None, min_active: int = 1) -> List[ChangeEvent]:
        """Bernoulli draws per agent at the end of a run at the rates of the current intensity"""
        level = self.schedule.level_at(at_ms)
        rates = level.epos_rates
        rng = random.Random(f"{self.seed}/{service}/{run}")
        departed = self.departed.setdefault(service, set())
        active = len([a for a in agents if a not in departed])
        events = []
        for agent in sorted(agents):
            plan, weight, churn = rng.random(), rng.random(), rng.random()
            alpha, plan_seed = rng.random(), rng.randrange(2 ** 31)
            if targets is not None and agent not in targets:
                continue
            if churn < rates.churn and agent not in self.protected:
                if agent in departed:
                    departed.discard(agent)
                    active += 1
                    events.append(ChangeEvent(ChangeKind.JOIN, agent, {}, at_ms, service, level.level.value))
                    continue
                if active > min_active:
                    departed.add(agent)
                    active -= 1
                    events.append(ChangeEvent(ChangeKind.LEAVE, agent, {}, at_ms, service, level.level.value))
                    continue
            if agent in departed:
                if plan < rates.plan_change or weight < rates.weight_change:
                    self.skipped += 1
                    logger.info(f"change for departed agent {agent} skipped")
                continue
            if plan < rates.plan_change:
                events.append(ChangeEvent(ChangeKind.PLAN_CHANGE, agent, {"seed": plan_seed}, at_ms, service,
                                          level.level.value))
            if weight < rates.weight_change:
                events.append(ChangeEvent(ChangeKind.WEIGHT_CHANGE, agent, {"alpha": alpha, "beta": 1.0 - alpha},
                                          at_ms, service, level.level.value))
        if rng.random() < rates.gcf_change:
            self.gcf_kind = CostKind.MIN_RMSE if self.gcf_kind is CostKind.MIN_VAR else CostKind.MIN_VAR
            events.append(ChangeEvent(ChangeKind.GCF_CHANGE, SYSTEM, {"kind": self.gcf_kind.value}, at_ms, service,
                                      level.level.value))
        return events

    def dias_changes(self, agents: Sequence[int], start_ms: int, until_ms: int,
                     service: str = "dias") -> List[ChangeEvent]:
        """
        Periodic changes between start_ms and until_ms, each period taken
        from the intensity in force when it begins. Churning agents leave at
        (2m+1)p and come back at (2m+2)p.
        """
        rng = random.Random(f"{self.seed}/{service}")
        members = sorted(agents)
        candidates = [a for a in members if a not in self.protected]
        churners = sorted(rng.sample(candidates, int(math.ceil(self.churn_fraction * len(candidates)))))
        events: List[ChangeEvent] = []

        def level_name(at):
            return self.schedule.level_at(at).level.value

        at = start_ms + self.schedule.dias_periods_at(start_ms).selected_state_ms
        while at < until_ms:
            for agent in members:
                events.append(ChangeEvent(ChangeKind.SELECTED_STATE_CHANGE, agent, {"u": rng.random()}, at,
                                          service, level_name(at)))
            at += self.schedule.dias_periods_at(at).selected_state_ms

        at = start_ms + self.schedule.dias_periods_at(start_ms).possible_states_ms
        while at < until_ms:
            hour = self.schedule.virtual_hour(at)
            for agent in members:
                states = clock_possible_states(hour, rng)
                events.append(ChangeEvent(ChangeKind.POSSIBLE_STATES_CHANGE, agent, {"states": list(states.states)},
                                          at, service, level_name(at)))
            at += self.schedule.dias_periods_at(at).possible_states_ms

        at, leaving = start_ms, True
        while churners:
            at += self.schedule.dias_periods_at(at).churn_ms
            if at >= until_ms:
                break
            kind = ChangeKind.LEAVE if leaving else ChangeKind.JOIN
            events.extend(ChangeEvent(kind, agent, {}, at, service, level_name(at)) for agent in churners)
            leaving = not leaving

        order = {ChangeKind.LEAVE: 0, ChangeKind.JOIN: 1, ChangeKind.POSSIBLE_STATES_CHANGE: 2,
                 ChangeKind.SELECTED_STATE_CHANGE: 3}
        events.sort(key=lambda e: (e.at_ms, order[e.kind], e.target))
        return events


def inject(schedule: IntensitySchedule, services: Mapping[str, Sequence[int]], seed: int = 0,
           until_ms: Optional[int] = None, epos_runs: Sequence = ((0, 0),),
           churn_fraction: float = 0.25) -> Iterator[ChangeEvent]:
    """
    Change stream for the given services ("epos" and/or "dias" -> agent ids).
    EPOS changes are drawn once per (run, at_ms) pair in epos_runs; DIAS
    changes cover [0, until_ms), one schedule cycle by default.
    """
    injector = ChangeInjector(schedule, seed, churn_fraction)
    if until_ms is None:
        until_ms = schedule.period_length_ms * len(schedule.cycle)
    for name, agents in services.items():
        if name.startswith("epos"):
            for run, at_ms in epos_runs:
                yield from injector.epos_changes(run, agents, at_ms, name)
        elif name.startswith("dias"):
            yield from injector.dias_changes(agents, 0, until_ms, name)
        else:
            raise ServiceError(f"unknown service {name!r} for change injection")


def relative_difference(sim_value: float, live_value: float) -> float:
    """(sim - live) / sim; NaN flags an undefined value"""
    if sim_value == 0:
        logger.warning("relative difference undefined for a zero simulation value")
        return math.nan
    return (sim_value - live_value) / sim_value


def latency(varying_ms: float, static_ms: float) -> float:
    if static_ms <= 0:
        raise ServiceError(f"static execution time must be positive, got {static_ms}")
    return varying_ms / static_ms


def wat(working_ms: float, adaptivity_ms: float) -> float:
    """Working over adaptivity time; infinity when nothing had to be adapted"""
    if adaptivity_ms <= 0:
        return math.inf
    return working_ms / adaptivity_ms


@dataclass
class DiasError:
    instant: float
    rolling_mean: float


class RollingError:
    def __init__(self, window: int = DEFAULT_ROLLING_WINDOW):
        self.values = deque(maxlen=window)

    def push(self, value: float) -> float:
        self.values.append(value)
        return sum(self.values) / len(self.values)


def dias_error(true_sum: float, estimates: Sequence[float], rolling: Optional[RollingError] = None) -> DiasError:
    if not estimates:
        raise ServiceError("DIAS error needs at least one estimate")
    instant = abs(true_sum - sum(estimates) / len(estimates))
    rolling = rolling if rolling is not None else RollingError()
    return DiasError(instant, rolling.push(instant))


@dataclass
class MetricsRecord:
    run_id: int
    t: int
    g_s: Optional[float] = None
    g_l: Optional[float] = None
    l_s: Optional[float] = None
    l_l: Optional[float] = None
    rel_g: Optional[float] = None
    rel_l: Optional[float] = None
    latency: Optional[float] = None
    wat: Optional[float] = None
    dias_err: Optional[float] = None
    intensity: str = ""

    def __post_init__(self):
        if self.latency is not None and not self.latency > 0:
            raise ServiceError(f"latency ratio must be positive, got {self.latency}")

    def row(self) -> List[str]:
        cells = []
        for name in METRICS_COLUMNS:
            value = getattr(self, name)
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(repr(value))
            else:
                cells.append(str(value))
        return cells

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "MetricsRecord":
        def number(name):
            text = row.get(name, "")
            return float(text) if text not in ("", None) else None
        return cls(int(row["run_id"]), int(row["t"]), *(number(n) for n in METRICS_COLUMNS[2:11]),
                   row.get("intensity", "") or "")


def write_metrics(path: Union[str, Path], records: Sequence[MetricsRecord]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for record in records:
            writer.writerow(record.row())


def read_metrics(path: Union[str, Path]) -> List[MetricsRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ServiceError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        return [MetricsRecord.from_row(row) for row in reader]


class HarnessDevicePeerlet(ApplicationAgentPeerlet):
    """
    Application agent whose device data can be changed by the driver
    (DEVICE_UPDATE): new plans, a new raw reading, new possible states,
    or a re-registration after its service agent rejoined.
    """

    message_types = ApplicationAgentPeerlet.message_types | frozenset({ControlType.DEVICE_UPDATE})

    def __init__(self, serv_info: str, dev_info: DeviceInfo, plans=None,
                 plan_source: Optional[Callable[[int], Any]] = None,
                 raw: Optional[float] = None, states: Optional[PossibleStates] = None,
                 raw_source: Optional[Callable[[float, PossibleStates], float]] = None,
                 states_source: Optional[Callable[[], PossibleStates]] = None):
        super().__init__(serv_info, dev_info, self._sense)
        self.plans = plans
        self.plan_source = plan_source
        self.raw = raw
        self.states = states
        self.raw_source = raw_source or (lambda u, states: states[0] + u * (states[-1] - states[0]))
        self.states_source = states_source
        self.updates = 0
        self.deferred = 0
        # set once the assigned agent has asked for sensing, i.e. its service runs
        self.serving = False

    def _sense(self, request):
        if self.plans is not None:
            return {"plans": plans_to_record(self.plans)}
        return {"raw": self.raw, "states": list(self.states.states) if self.states else None}

    def _push(self, data: dict):
        if not self.serving:
            # the agent's next sensing request picks up the new values
            self.deferred += 1
            logger.debug(f"device {self.peer.id}: update deferred until the service runs")
            return
        self.push_sensing(data)

    def handle_message(self, envelope):
        if envelope.msg_type != ControlType.DEVICE_UPDATE:
            if envelope.msg_type == MessageType.ASGN_AGN:
                self.serving = False
            super().handle_message(envelope)
            if envelope.msg_type == MessageType.SENSING_REQ and envelope.sender == self.agn_addr:
                self.serving = True
            return
        update = decode_body(envelope.body)
        if update.get("servInfo") != self.serv_info:
            return
        self.updates += 1
        kind = update.get("kind")
        if kind == "rejoin":
            self.serving = False
            self.register()
            return
        if self.agn_addr is None:
            logger.warning(f"device {self.peer.id}: update {kind} before assignment ignored")
            return
        change_id = update.get("change_id")
        if kind == "plans":
            self.plans = self.plan_source(int(update["seed"]))
            self._push({"plans": plans_to_record(self.plans), "change_id": change_id})
        elif kind == "states":
            if self.states_source is not None:
                self.states = self.states_source()
            else:
                self.states = PossibleStates(tuple(update["states"]))
            self._push({"states": list(self.states.states), "raw": self.raw, "change_id": change_id})
        elif kind == "select":
            if self.states is not None:
                self.raw = float(self.raw_source(float(update["u"]), self.states))
            self._push({"raw": self.raw, "states": None, "change_id": change_id})


class _DriverPeerlet(OperatorPeerlet):
    """Operator that also receives the service's control traffic"""

    control_types = frozenset({ControlType.CHANGE_ACK, ControlType.SERVICE_LIVE})

    def __init__(self, request: ServiceRequest, gateway_id: int, devices: Mapping[int, int],
                 rejoin: Optional[Callable[[int], None]] = None, change_timeout_ms: int = 2000, **kwargs):
        super().__init__(request, gateway_id, **kwargs)
        self.devices = dict(devices)
        self.rejoin = rejoin
        self.change_timeout_ms = change_timeout_ms
        self.members = sorted(self.devices)
        self.departed: set = set()
        self.live_agents: set = set()
        self.records: List[MetricsRecord] = []
        self.changes_applied = 0
        self.change_counts: Dict[str, int] = {}
        self.finished = False
        self.aborted = False
        self._change_seq = 0

    def handle_message(self, envelope):
        if envelope.msg_type in self.control_types or envelope.msg_type not in OperatorPeerlet.message_types:
            try:
                payload = decode_body(envelope.body)
            except ValueError:
                logger.warning(f"driver: unreadable control message type {envelope.msg_type}")
                return
            if payload.get("servInfo", self.serv_info) != self.serv_info:
                return
            self.handle_control(envelope.msg_type, payload, envelope.sender)
            return
        super().handle_message(envelope)

    def handle_control(self, msg_type: int, payload: dict, sender: str):
        pass

    def next_change_id(self) -> int:
        self._change_seq += 1
        return self._change_seq

    def count_change(self, event: ChangeEvent):
        self.changes_applied += 1
        self.change_counts[event.kind.value] = self.change_counts.get(event.kind.value, 0) + 1
        self.log(LogKind.EVENT, f"{self.serv_info}.change", event.describe())

    def send_change(self, agent: int, body: dict):
        self.send(agent, ControlType.CHANGE, encode_body(dict(body, servInfo=self.serv_info)))

    def update_device(self, agent: int, body: dict):
        self.send(self.devices[agent], ControlType.DEVICE_UPDATE, encode_body(dict(body, servInfo=self.serv_info)))

    def bring_back(self, agent: int):
        """Restart the service agent peer and have its device register again"""
        if self.rejoin is None:
            raise ServiceError("driver has no way to restart agents")
        self.rejoin(agent)
        self.update_device(agent, {"kind": "rejoin"})


class EposDriver(_DriverPeerlet):
    """
    Runs I-EPOS repeatedly. Between runs it applies the changes drawn by the
    injector one after the other, each waiting for its acknowledgment; the
    time spent there is the adaptivity time of the next run.
    """

    message_types = OperatorPeerlet.message_types | _DriverPeerlet.control_types | frozenset(
        {EposType.RUN_DONE, EposType.RUN_ABORT})

    def __init__(self, request: ServiceRequest, gateway_id: int, devices: Mapping[int, int],
                 runs: int = 1, iterations: int = 50, seed: int = 0,
                 gcf: GlobalCostFunction = GlobalCostFunction(), steering=None,
                 sync: str = "lockstep", straggler_timeout_ms: int = 0,
                 injector: Optional[ChangeInjector] = None, max_aborts: int = 3, run_interval_ms: int = 0,
                 **kwargs):
        super().__init__(request, gateway_id, devices, **kwargs)
        self.runs = runs
        # minimum time between two run starts; the wait is not adaptivity time
        self.run_interval_ms = run_interval_ms
        self._pace_timer = None
        self.iterations = iterations
        self.seed = seed
        self.gcf = gcf
        self.steering = steering if steering is not None else gcf.steering
        self.sync = sync
        self.straggler_timeout_ms = straggler_timeout_ms
        self.injector = injector
        self.max_aborts = max_aborts
        self.run_index = 0
        self.completed_runs = 0
        self.aborts = 0
        self.static_ms: Optional[float] = None
        self.run_history: Dict[int, List[IterationRecord]] = {}
        self.run_members: Dict[int, List[int]] = {}
        self.timings: List[dict] = []
        self._run_started = None
        self._adapt_started = None
        self._adapt_ms = 0.0
        self._pending: List[ChangeEvent] = []
        self._awaiting: Optional[tuple] = None
        self._change_timer = None
        self._waiting_live = True

    @property
    def active_members(self) -> List[int]:
        return [m for m in self.members if m not in self.departed]

    def on_running(self, agents):
        logger.info(f"epos driver: service running with {len(agents)} agents")

    def on_setback(self, status, detail):
        logger.warning(f"epos driver: service request {status}: {detail}")

    def handle_control(self, msg_type, payload, sender):
        if msg_type == ControlType.SERVICE_LIVE:
            agent = int(payload["agent"])
            self.live_agents.add(agent)
            if self._awaiting and self._awaiting[0] == "join" and self._awaiting[1] == agent:
                self._change_done()
            elif self._waiting_live and set(self.active_members) <= self.live_agents:
                self._waiting_live = False
                self.start_run()
        elif msg_type == ControlType.CHANGE_ACK:
            if self._awaiting and self._awaiting[0] == "ack" and payload.get("change_id") == self._awaiting[1]:
                self._change_done()
        elif msg_type == EposType.RUN_DONE:
            self._on_run_done(payload)
        elif msg_type == EposType.RUN_ABORT:
            self._on_run_abort(payload)

    def start_run(self):
        members = self.active_members
        gcf = self.gcf
        settings = RunSettings(self.run_index, members, self.seed + self.run_index, self.iterations, gcf,
                               self.sync, self.straggler_timeout_ms)
        self.run_members[self.run_index] = members
        self._run_started = self.now_ms()
        self.log(LogKind.EVENT, "epos.run_start", self.run_index)
        body = encode_body(settings.to_record())
        for agent in members:
            self.send(agent, EposType.RUN_START, body)

    def _on_run_done(self, payload):
        if payload["run"] != self.run_index:
            return
        working = self.now_ms() - self._run_started
        history = [IterationRecord.from_record(r) for r in payload["history"]]
        self.run_history[self.run_index] = history
        if self.static_ms is None:
            self.static_ms = float(working) if working > 0 else 1.0
        adapt = self._adapt_ms
        run_latency = latency(working + adapt, self.static_ms) if working + adapt > 0 else None
        run_wat = wat(working, adapt)
        intensity = self.injector.schedule.level_at(self._run_started).level.value if self.injector else ""
        for record in history:
            last = record is history[-1]
            self.records.append(MetricsRecord(self.run_index, record.t, g_s=record.global_cost,
                                              l_s=record.local_cost,
                                              latency=run_latency if last else None,
                                              wat=run_wat if last else None, intensity=intensity))
        self.timings.append({"run": self.run_index, "working_ms": working, "adaptivity_ms": adapt,
                             "latency": run_latency, "wat": run_wat, "intensity": intensity})
        self.log(LogKind.SERVICE, "epos.working_ms", working)
        self.completed_runs += 1
        logger.info(f"epos driver: run {self.run_index} done in {working} ms, final cost "
                    f"{history[-1].global_cost if history else None}")
        self.run_index += 1
        if self.completed_runs >= self.runs:
            self.finish()
            return
        self._adapt_ms = 0.0
        self._adapt_started = self.now_ms()
        if self.injector is not None:
            self._pending = self.injector.epos_changes(self.run_index, self.members, self._adapt_started,
                                                       self.serv_info)
        self._next_change()

    def _on_run_abort(self, payload):
        if payload.get("run") != self.run_index:
            return
        self.aborts += 1
        logger.warning(f"epos driver: run {self.run_index} aborted at iteration {payload.get('t')}, "
                       f"stragglers {payload.get('missing')}")
        self.log(LogKind.EVENT, "epos.run_abort", self.run_index)
        for agent in self.run_members.get(self.run_index, []):
            self.send(agent, EposType.RUN_ABORT, encode_body({"run": self.run_index}))
        if self.aborts >= self.max_aborts:
            self.aborted = True
            self.finish()
            return
        self.run_index += 1
        self.start_run()

    def _next_change(self):
        while self._pending:
            event = self._pending.pop(0)
            if self._apply(event):
                return
        self._adapt_ms = float(self.now_ms() - self._adapt_started)
        due = self._run_started + self.run_interval_ms
        if self.now_ms() >= due:
            self.start_run()
        else:
            self._pace_timer = self.schedule_timer(due - self.now_ms())

    def _apply(self, event: ChangeEvent) -> bool:
        """Sends the change; True when an acknowledgment is awaited"""
        self.count_change(event)
        if event.kind is ChangeKind.GCF_CHANGE:
            kind = CostKind(event.payload["kind"])
            self.gcf = GlobalCostFunction(kind, self.steering if kind is CostKind.MIN_RMSE else None)
            return False
        agent = event.target
        change_id = self.next_change_id()
        if event.kind is ChangeKind.LEAVE:
            self.departed.add(agent)
            self.live_agents.discard(agent)
            self.send_change(agent, {"kind": "leave", "change_id": change_id})
        elif event.kind is ChangeKind.JOIN:
            self.departed.discard(agent)
            self.bring_back(agent)
            self._await(("join", agent))
            return True
        elif event.kind is ChangeKind.WEIGHT_CHANGE:
            self.send_change(agent, {"kind": "weight", "alpha": event.payload["alpha"],
                                     "beta": event.payload["beta"], "change_id": change_id})
        elif event.kind is ChangeKind.PLAN_CHANGE:
            self.update_device(agent, {"kind": "plans", "seed": event.payload["seed"], "change_id": change_id})
        self._await(("ack", change_id))
        return True

    def _await(self, key):
        self._awaiting = key
        self._change_timer = self.schedule_timer(self.change_timeout_ms)

    def _change_done(self):
        self.cancel_timer(self._change_timer)
        self._change_timer = None
        self._awaiting = None
        self._next_change()

    def handle_timer(self, timer: Timer):
        if timer is self._change_timer:
            logger.warning(f"epos driver: change {self._awaiting} not acknowledged in time, skipped")
            self.log(LogKind.EVENT, "epos.change_timeout", str(self._awaiting))
            if self._awaiting and self._awaiting[0] == "join":
                self.departed.add(self._awaiting[1])
            self._change_timer = None
            self._awaiting = None
            self._next_change()
            return
        if timer is self._pace_timer:
            self._pace_timer = None
            self.start_run()
            return
        super().handle_timer(timer)

    def finish(self):
        self.finished = True
        self.complete()


class DiasDriver(_DriverPeerlet):
    """
    Keeps DIAS busy for a fixed duration: replays the injector's timed
    changes and probes every agent periodically to measure the error of
    the estimated sum against the true sum of selected states.
    """

    message_types = OperatorPeerlet.message_types | _DriverPeerlet.control_types | frozenset(
        {DiasType.PROBE_REPLY})

    def __init__(self, request: ServiceRequest, gateway_id: int, devices: Mapping[int, int],
                 duration_ms: int = 10_000, probe_period_ms: int = 200,
                 injector: Optional[ChangeInjector] = None, rolling_window: int = DEFAULT_ROLLING_WINDOW, **kwargs):
        super().__init__(request, gateway_id, devices, **kwargs)
        self.duration_ms = duration_ms
        self.probe_period_ms = probe_period_ms
        self.injector = injector
        self.rolling = RollingError(rolling_window)
        self.events: List[ChangeEvent] = []
        self.probe_index = 0
        self.replies: Dict[int, dict] = {}
        self.errors: List[DiasError] = []
        self.true_sums: List[float] = []
        self.started_at: Optional[int] = None
        self._event_timer = None
        self._probe_timer = None
        self._end_timer = None

    def on_running(self, agents):
        logger.info(f"dias driver: service running with {len(agents)} agents")

    def handle_control(self, msg_type, payload, sender):
        if msg_type == ControlType.SERVICE_LIVE:
            self.live_agents.add(int(payload["agent"]))
            if self.started_at is None and set(self.members) <= self.live_agents:
                self._begin()
        elif msg_type == DiasType.PROBE_REPLY:
            if payload.get("probe") == self.probe_index:
                self.replies[int(payload["agent"])] = payload

    def _begin(self):
        self.started_at = self.now_ms()
        if self.injector is not None:
            self.events = self.injector.dias_changes(self.members, 0, self.duration_ms, self.serv_info)
        self._schedule_next_event()
        self._probe_timer = self.schedule_timer(self.probe_period_ms, periodic=True)
        self._end_timer = self.schedule_timer(self.duration_ms)
        self.probe()

    def _elapsed(self) -> int:
        return self.now_ms() - self.started_at

    def _schedule_next_event(self):
        if self.events:
            self._event_timer = self.schedule_timer(max(0, self.events[0].at_ms - self._elapsed()))

    def _apply_due(self):
        while self.events and self.events[0].at_ms <= self._elapsed():
            event = self.events.pop(0)
            agent = event.target
            if event.kind is ChangeKind.JOIN:
                if agent in self.departed:
                    self.departed.discard(agent)
                    self.count_change(event)
                    self.bring_back(agent)
                continue
            if agent in self.departed:
                logger.debug(f"dias driver: {event.describe()} for departed agent skipped")
                continue
            self.count_change(event)
            if event.kind is ChangeKind.LEAVE:
                self.departed.add(agent)
                self.live_agents.discard(agent)
                self.send_change(agent, {"kind": "leave", "change_id": self.next_change_id()})
            elif event.kind is ChangeKind.SELECTED_STATE_CHANGE:
                self.update_device(agent, {"kind": "select", "u": event.payload["u"],
                                           "change_id": self.next_change_id()})
            elif event.kind is ChangeKind.POSSIBLE_STATES_CHANGE:
                self.update_device(agent, {"kind": "states", "states": event.payload["states"],
                                           "change_id": self.next_change_id()})
        self._schedule_next_event()

    def probe(self):
        """Evaluates the previous probe round, then starts the next one"""
        self.evaluate_probe()
        self.probe_index += 1
        self.replies = {}
        for agent in self.members:
            if agent not in self.departed:
                self.send(agent, DiasType.PROBE, encode_body({"probe": self.probe_index}))

    def evaluate_probe(self):
        replies = [r for a, r in sorted(self.replies.items()) if a not in self.departed]
        values = [r["value"] for r in replies if r.get("value") is not None]
        estimates = [r["estimate"]["sum"] for r in replies]
        if not replies or not values:
            return None
        true_sum = float(sum(values))
        error = dias_error(true_sum, estimates, self.rolling)
        self.errors.append(error)
        self.true_sums.append(true_sum)
        intensity = self.injector.schedule.level_at(self._elapsed()).level.value if self.injector else ""
        self.records.append(MetricsRecord(self.probe_index, self._elapsed(), dias_err=error.instant,
                                          intensity=intensity))
        self.log(LogKind.SERVICE, "dias.error", error.instant)
        return error

    def handle_timer(self, timer: Timer):
        if timer is self._event_timer:
            self._event_timer = None
            self._apply_due()
        elif timer is self._probe_timer:
            self.probe()
        elif timer is self._end_timer:
            self.cancel_timer(self._probe_timer)
            self.cancel_timer(self._event_timer)
            self.evaluate_probe()
            self.finished = True
            self.complete()
        else:
            super().handle_timer(timer)
