"""
Iterative collective learning over a balanced binary tree.

Each agent owns a few alternative plans (demand vectors with a local
discomfort cost) and selects one per iteration so that the weighted sum of
global cost, local cost and unfairness is minimized:

    (1 - alpha - beta) * f_G(response) + beta * f_L(plan) + alpha * f_U(costs)

An iteration is a bottom-up pass (leaves to root, each agent choosing
against the previous global response minus its own previous subtree plus
its children's new subtrees) followed by a top-down pass in which the root
accepts the new global response only if the global cost did not increase.
A rejected iteration reverts every agent to its previous selection.

EposAgentCore holds the per-agent computation. run_iteration/run_epos drive
it centrally; EposPeerlet drives exactly the same computation through
messages, so both produce identical floating point results.
"""

import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from bootstrap_protocol import ServiceAgentPeerlet, ServiceMetadata
from monitoring import LogKind
from peerbed_errors import ServiceError, TopologyError
from runtime_core import Timer
from services.control import ControlType, decode_body, decode_vector, encode_body, encode_vector

logger = logging.getLogger(__name__)

EPOS_SERVICE = "epos"
DEFAULT_ITERATIONS = 50


class EposType(IntEnum):
    RUN_START = 201       # driver -> every member
    UP = 202              # child -> parent: subtree response
    DOWN = 203            # parent -> child: acceptance and global response
    RUN_DONE = 204        # root -> driver
    RUN_ABORT = 205       # root -> driver on straggler, driver -> members


class CostKind(Enum):
    MIN_VAR = "MIN_VAR"
    MIN_RMSE = "MIN_RMSE"


@dataclass(frozen=True)
class Plan:
    values: np.ndarray
    local_cost: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ServiceError("plan values must be a non-empty vector")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ServiceError("plan values must be finite and non-negative")
        if not math.isfinite(self.local_cost) or self.local_cost < 0:
            raise ServiceError(f"local cost {self.local_cost} must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @property
    def dimension(self) -> int:
        return self.values.size

    def to_line(self) -> str:
        return f"{self.local_cost!r}:" + ",".join(repr(float(v)) for v in self.values)

    @classmethod
    def from_line(cls, line: str) -> "Plan":
        cost, _, values = line.strip().partition(":")
        if not values:
            raise ServiceError(f"plan line without values: {line[:40]!r}")
        return cls(np.array([float(v) for v in values.split(",")]), float(cost))


PlanSet = List[Plan]


def validate_plan_set(plans: Sequence[Plan]) -> int:
    """Returns the shared dimension"""
    if not plans:
        raise ServiceError("empty plan set")
    dims = {p.dimension for p in plans}
    if len(dims) != 1:
        raise ServiceError(f"plans of one agent differ in dimension: {sorted(dims)}")
    return dims.pop()


def plans_to_record(plans: Sequence[Plan]) -> list:
    return [[p.local_cost, encode_vector(p.values)] for p in plans]


def plans_from_record(record: Sequence) -> PlanSet:
    return [Plan(decode_vector(values), float(cost)) for cost, values in record]


def read_plan_file(path: Union[str, Path]) -> PlanSet:
    with open(path, "r", encoding="utf-8") as f:
        plans = [Plan.from_line(line) for line in f if line.strip()]
    validate_plan_set(plans)
    return plans


def write_plan_file(path: Union[str, Path], plans: Sequence[Plan]):
    with open(path, "w", encoding="utf-8") as f:
        for plan in plans:
            f.write(plan.to_line() + "\n")


@dataclass(frozen=True)
class AgentPreferences:
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        for name, value in (("alpha", self.alpha), ("beta", self.beta)):
            if not 0.0 <= value <= 1.0:
                raise ServiceError(f"{name}={value} outside [0, 1]")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise ServiceError(f"alpha + beta = {self.alpha + self.beta} exceeds 1")

    @property
    def global_weight(self) -> float:
        return max(0.0, 1.0 - (self.alpha + self.beta))


@dataclass(frozen=True)
class GlobalCostFunction:
    kind: CostKind = CostKind.MIN_VAR
    steering: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind is CostKind.MIN_RMSE:
            if self.steering is None:
                raise ServiceError("MIN_RMSE needs a steering signal")
            object.__setattr__(self, "steering", np.asarray(self.steering, dtype=np.float64))

    def to_record(self) -> dict:
        record = {"kind": self.kind.value}
        if self.steering is not None:
            record["steering"] = encode_vector(self.steering)
        return record

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "GlobalCostFunction":
        steering = record.get("steering")
        return cls(CostKind(record["kind"]), decode_vector(steering) if steering else None)


def night_steering(dimension: int, level: float = 1.0, night_start_hour: int = 22, night_end_hour: int = 6) -> np.ndarray:
    """Zero during the day, `level` during the night hours of one day mapped onto `dimension` slots"""
    hours = (np.arange(dimension) * 24.0 / dimension) % 24.0
    night = (hours >= night_start_hour) | (hours < night_end_hour)
    return np.where(night, float(level), 0.0)


def load_steering(path: Union[str, Path], dimension: int) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").replace("\n", ",")
    values = np.array([float(v) for v in text.split(",") if v.strip()])
    if values.size != dimension:
        raise ServiceError(f"steering file {path} has {values.size} values, plans have {dimension}")
    return values


def global_cost(f: GlobalCostFunction, total: np.ndarray) -> float:
    total = np.asarray(total, dtype=np.float64)
    if f.kind is CostKind.MIN_VAR:
        return float(np.var(total))
    if f.steering.shape != total.shape:
        raise ServiceError(f"steering dimension {f.steering.size} != response dimension {total.size}")
    return float(np.sqrt(np.mean((total - f.steering) ** 2)))


def unfairness(local_costs_sum: float, local_costs_sumsq: float, count: int) -> float:
    """Population standard deviation from running moments"""
    if count < 1:
        raise ServiceError("unfairness needs at least one local cost")
    mean = local_costs_sum / count
    return math.sqrt(max(0.0, local_costs_sumsq / count - mean * mean))


@dataclass(frozen=True)
class Moments:
    sum: float = 0.0
    sumsq: float = 0.0
    count: int = 0

    @classmethod
    def of(cls, cost: float) -> "Moments":
        return cls(cost, cost * cost, 1)

    def __add__(self, other: "Moments") -> "Moments":
        return Moments(self.sum + other.sum, self.sumsq + other.sumsq, self.count + other.count)

    def __sub__(self, other: "Moments") -> "Moments":
        return Moments(self.sum - other.sum, self.sumsq - other.sumsq, self.count - other.count)

    @property
    def mean(self) -> float:
        return self.sum / self.count if self.count else 0.0

    def to_record(self) -> list:
        return [self.sum, self.sumsq, self.count]

    @classmethod
    def from_record(cls, record: Sequence) -> "Moments":
        return cls(float(record[0]), float(record[1]), int(record[2]))


def _min_max(values: np.ndarray) -> np.ndarray:
    low, high = values.min(), values.max()
    if high == low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def candidate_scores(plans: Sequence[Plan], gcf: GlobalCostFunction, context: np.ndarray,
                     moments: Moments, normalize: bool = False):
    """Per-candidate global, local and unfairness terms"""
    f_g = np.array([global_cost(gcf, context + p.values) for p in plans])
    f_l = np.array([p.local_cost for p in plans])
    f_u = np.array([unfairness(*(moments + Moments.of(p.local_cost)).to_record()) for p in plans])
    if normalize:
        f_g, f_l, f_u = _min_max(f_g), _min_max(f_l), _min_max(f_u)
    return f_g, f_l, f_u


def select_plan(plans: Sequence[Plan], prefs: AgentPreferences, gcf: GlobalCostFunction,
                context: np.ndarray, moments: Moments = Moments(), normalize: bool = False) -> int:
    """Index minimizing the weighted objective; ties go to the lowest index"""
    if not plans:
        raise ServiceError("empty plan set")
    context = np.asarray(context, dtype=np.float64)
    if context.shape != plans[0].values.shape:
        raise ServiceError(f"context dimension {context.size} != plan dimension {plans[0].dimension}")
    f_g, f_l, f_u = candidate_scores(plans, gcf, context, moments, normalize)
    scores = prefs.global_weight * f_g
    if prefs.beta:
        scores = scores + prefs.beta * f_l
    if prefs.alpha:
        scores = scores + prefs.alpha * f_u
    return int(np.argmin(scores))


@dataclass
class TreeTopology:
    root: int
    parent: Dict[int, Optional[int]]
    children: Dict[int, List[int]]

    @property
    def members(self) -> List[int]:
        return list(self.parent)

    def is_leaf(self, agent: int) -> bool:
        return not self.children.get(agent)

    def depth(self) -> int:
        deepest = 0
        for agent in self.parent:
            level, node = 0, agent
            while self.parent[node] is not None:
                node = self.parent[node]
                level += 1
            deepest = max(deepest, level)
        return deepest

    def pre_order(self) -> List[int]:
        order, stack = [], [self.root]
        while stack:
            node = stack.pop()
            order.append(node)
            stack.extend(reversed(self.children.get(node, [])))
        return order

    def post_order(self) -> List[int]:
        order, stack = [], [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            stack.append((node, True))
            for child in reversed(self.children.get(node, [])):
                stack.append((child, False))
        return order

    def validate(self, agents: Optional[Sequence[int]] = None):
        reached = self.pre_order()
        if len(reached) != len(set(reached)):
            raise TopologyError("topology contains a cycle")
        if set(reached) != set(self.parent):
            raise TopologyError(f"disconnected topology: {sorted(set(self.parent) - set(reached))} unreachable")
        if agents is not None and set(agents) != set(self.parent):
            raise TopologyError("topology members differ from the participating agents")
        if any(len(c) > 2 for c in self.children.values()):
            raise TopologyError("more than two children at a node")


def build_tree(agent_ids: Sequence[int], seed: int) -> TreeTopology:
    """Complete binary tree over a seed-shuffled agent order"""
    if not agent_ids:
        raise ServiceError("cannot build a tree without agents")
    order = sorted(set(agent_ids))
    random.Random(seed).shuffle(order)
    parent = {agent: None for agent in order}
    children = {agent: [] for agent in order}
    for index, agent in enumerate(order):
        if index:
            up = order[(index - 1) // 2]
            parent[agent] = up
            children[up].append(agent)
    return TreeTopology(order[0], parent, children)


@dataclass
class SubtreeReport:
    t: int
    response: np.ndarray
    moments: Moments


@dataclass
class IterationDecision:
    t: int
    accepted: bool
    global_response: np.ndarray
    global_moments: Moments


@dataclass
class IterationRecord:
    t: int
    global_cost: float
    local_cost: float
    unfairness: float
    accepted: bool

    def to_record(self) -> list:
        return [self.t, self.global_cost, self.local_cost, self.unfairness, self.accepted]

    @classmethod
    def from_record(cls, record: Sequence) -> "IterationRecord":
        return cls(int(record[0]), float(record[1]), float(record[2]), float(record[3]), bool(record[4]))


class EposAgentCore:
    """Per-agent state of one run: accepted and tentative selections, context from the last iteration"""

    def __init__(self, agent_id: int, plans: Sequence[Plan], prefs: AgentPreferences = AgentPreferences(),
                 normalize: bool = False):
        self.agent_id = agent_id
        self.prefs = prefs
        self.normalize = normalize
        self.plans: PlanSet = []
        self.load_plans(plans)

    def load_plans(self, plans: Sequence[Plan]):
        self.dimension = validate_plan_set(plans)
        self.plans = list(plans)
        self.reset_run()

    def reset_run(self):
        zero = np.zeros(self.dimension)
        self.accepted_index: Optional[int] = None
        self.accepted_response = zero
        self.accepted_moments = Moments()
        self.prev_global = zero
        self.prev_global_moments = Moments()
        self.tentative: Optional[SubtreeReport] = None
        self.tentative_index: Optional[int] = None
        self.child_accepted: Dict[int, SubtreeReport] = {}
        self.child_tentative: Dict[int, SubtreeReport] = {}

    def stale_report(self, child: int, t: int) -> SubtreeReport:
        report = self.child_accepted.get(child)
        if report is None:
            return SubtreeReport(t, np.zeros(self.dimension), Moments())
        return SubtreeReport(t, report.response, report.moments)

    def bottom_up(self, t: int, child_reports: Mapping[int, SubtreeReport], gcf: GlobalCostFunction) -> SubtreeReport:
        """child_reports must be ordered like the topology's children list"""
        context = self.prev_global - self.accepted_response
        context_moments = self.prev_global_moments - self.accepted_moments
        children_sum = np.zeros(self.dimension)
        children_moments = Moments()
        for child, report in child_reports.items():
            children_sum = children_sum + report.response
            children_moments = children_moments + report.moments
        self.child_tentative = dict(child_reports)
        index = select_plan(self.plans, self.prefs, gcf, context + children_sum,
                            context_moments + children_moments, self.normalize)
        self.tentative_index = index
        self.tentative = SubtreeReport(t, children_sum + self.plans[index].values,
                                       children_moments + Moments.of(self.plans[index].local_cost))
        return self.tentative

    def apply(self, decision: IterationDecision, included_children: Optional[Sequence[int]] = None):
        """Top-down step. Children outside included_children were replaced by stale responses and revert."""
        if decision.accepted and self.tentative is not None:
            self.accepted_index = self.tentative_index
            self.accepted_response = self.tentative.response
            self.accepted_moments = self.tentative.moments
            for child, report in self.child_tentative.items():
                if included_children is None or child in included_children:
                    self.child_accepted[child] = report
        self.prev_global = decision.global_response
        self.prev_global_moments = decision.global_moments
        self.tentative = None
        self.tentative_index = None
        self.child_tentative = {}

    @property
    def selected_index(self) -> Optional[int]:
        return self.accepted_index


@dataclass
class IterationState:
    t: int = 1
    F: int = DEFAULT_ITERATIONS
    prev_cost: Optional[float] = None
    global_response: Optional[np.ndarray] = None
    global_moments: Moments = field(default_factory=Moments)
    history: List[IterationRecord] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.t > self.F

    def decide(self, root_report: SubtreeReport, gcf: GlobalCostFunction) -> IterationDecision:
        """Root acceptance: keep the new response only if the global cost did not increase"""
        cost = global_cost(gcf, root_report.response)
        accepted = self.prev_cost is None or cost <= self.prev_cost
        if accepted:
            self.prev_cost = cost
            self.global_response = root_report.response
            self.global_moments = root_report.moments
        moments = self.global_moments
        self.history.append(IterationRecord(
            root_report.t, self.prev_cost, moments.mean,
            unfairness(*moments.to_record()) if moments.count else 0.0, accepted))
        return IterationDecision(root_report.t, accepted, self.global_response, self.global_moments)


def run_iteration(state: IterationState, topology: TreeTopology, agents: Mapping[int, EposAgentCore],
                  gcf: GlobalCostFunction) -> IterationState:
    if state.t > state.F:
        raise ServiceError(f"iteration {state.t} beyond final iteration {state.F}")
    topology.validate(list(agents))
    reports: Dict[int, SubtreeReport] = {}
    for agent in topology.post_order():
        children = {c: reports[c] for c in topology.children.get(agent, [])}
        reports[agent] = agents[agent].bottom_up(state.t, children, gcf)
    decision = state.decide(reports[topology.root], gcf)
    for agent in topology.pre_order():
        agents[agent].apply(decision)
    state.t += 1
    return state


def finalize(state: IterationState, agents: Mapping[int, EposAgentCore]) -> Dict[int, int]:
    """Selected plan index per agent once the final iteration completed"""
    if not state.complete:
        raise ServiceError(f"finalize called at iteration {state.t} before {state.F} completed")
    return {agent_id: core.selected_index for agent_id, core in sorted(agents.items())}


@dataclass
class EposOutcome:
    state: IterationState
    topology: TreeTopology
    agents: Dict[int, EposAgentCore]

    @property
    def selections(self) -> Dict[int, int]:
        return finalize(self.state, self.agents)

    @property
    def final_cost(self) -> float:
        return self.state.prev_cost


def run_epos(plan_sets: Mapping[int, Sequence[Plan]], gcf: GlobalCostFunction = GlobalCostFunction(),
             prefs: Union[AgentPreferences, Mapping[int, AgentPreferences]] = AgentPreferences(),
             iterations: int = DEFAULT_ITERATIONS, seed: int = 0, normalize: bool = False) -> EposOutcome:
    """Run one complete I-EPOS run in-process"""
    if iterations < 1:
        raise ServiceError("at least one iteration is needed")
    topology = build_tree(list(plan_sets), seed)
    agents = {}
    for agent_id, plans in plan_sets.items():
        agent_prefs = prefs.get(agent_id, AgentPreferences()) if isinstance(prefs, Mapping) else prefs
        agents[agent_id] = EposAgentCore(agent_id, plans, agent_prefs, normalize)
    state = IterationState(F=iterations)
    while not state.complete:
        run_iteration(state, topology, agents, gcf)
    return EposOutcome(state, topology, agents)


@dataclass
class RunSettings:
    run: int
    members: List[int]
    seed: int
    iterations: int
    gcf: GlobalCostFunction
    sync: str = "lockstep"
    straggler_timeout_ms: int = 0

    def to_record(self) -> dict:
        return {"run": self.run, "members": self.members, "seed": self.seed, "iterations": self.iterations,
                "gcf": self.gcf.to_record(), "sync": self.sync, "straggler_timeout_ms": self.straggler_timeout_ms}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "RunSettings":
        return cls(int(record["run"]), [int(m) for m in record["members"]], int(record["seed"]),
                   int(record["iterations"]), GlobalCostFunction.from_record(record["gcf"]),
                   record.get("sync", "lockstep"), int(record.get("straggler_timeout_ms", 0)))


class EposPeerlet(ServiceAgentPeerlet):
    """
    I-EPOS service agent. Plans come from the application agent over
    sensing; runs are started by the experiment driver (RUN_START) and the
    root reports each finished run back (RUN_DONE).
    """

    message_types = ServiceAgentPeerlet.message_types | frozenset(
        {EposType.RUN_START, EposType.UP, EposType.DOWN, EposType.RUN_ABORT, ControlType.CHANGE})

    def __init__(self, gateway_id: int, prefs: AgentPreferences = AgentPreferences(), normalize: bool = False,
                 serv_info: str = EPOS_SERVICE, silent: bool = False):
        super().__init__(serv_info, gateway_id, silent)
        self.prefs = prefs
        self.normalize = normalize
        self.core: Optional[EposAgentCore] = None
        self.driver_id: Optional[int] = None
        self.settings: Optional[RunSettings] = None
        self.topology: Optional[TreeTopology] = None
        self.t = 0
        self.root_state: Optional[IterationState] = None
        self.reports: Dict[int, SubtreeReport] = {}
        self.selections: Dict[int, int] = {}
        self.global_history: List[np.ndarray] = []
        self._straggler_timer = None
        self._included: List[int] = []
        self._live_sent = False
        self._iterating = False
        self._next_t: Optional[int] = None

    def validate(self, serv_md: ServiceMetadata) -> bool:
        return "driver" in serv_md.params

    def on_run(self):
        self.driver_id = int(self.serv_md.params["driver"])
        self.request_sensing({"kind": "plans"})

    def on_sensing(self, data):
        if not isinstance(data, dict) or "plans" not in data:
            logger.warning(f"epos agent {self.peer.id}: sensing without plans ignored")
            return
        plans = plans_from_record(data["plans"])
        if self.core is None:
            self.core = EposAgentCore(self.peer.id, plans, self.prefs, self.normalize)
        else:
            self.core.load_plans(plans)
        if not self._live_sent:
            self._live_sent = True
            self.send(self.driver_id, ControlType.SERVICE_LIVE,
                      encode_body({"servInfo": self.serv_info, "agent": self.peer.id}))
        if data.get("change_id") is not None:
            self._ack(data["change_id"])

    def _ack(self, change_id):
        self.send(self.driver_id, ControlType.CHANGE_ACK,
                  encode_body({"servInfo": self.serv_info, "agent": self.peer.id, "change_id": change_id}))

    def handle_service_message(self, envelope):
        try:
            payload = decode_body(envelope.body)
        except ValueError as e:
            logger.warning(f"epos agent {self.peer.id}: unreadable message: {e}")
            return
        if envelope.msg_type == ControlType.CHANGE:
            self._on_change(payload)
        elif not self.running or self.core is None:
            return
        elif envelope.msg_type == EposType.RUN_START:
            self._on_run_start(RunSettings.from_record(payload))
        elif envelope.msg_type == EposType.UP:
            self._on_up(payload)
        elif envelope.msg_type == EposType.DOWN:
            self._on_down(payload)
        elif envelope.msg_type == EposType.RUN_ABORT:
            self._reset_run()

    def _on_change(self, payload):
        if payload.get("servInfo") != self.serv_info:
            return
        kind = payload.get("kind")
        if kind == "weight":
            try:
                self.prefs = AgentPreferences(float(payload["alpha"]), float(payload["beta"]))
            except ServiceError as e:
                logger.warning(f"epos agent {self.peer.id}: weight change refused: {e}")
            else:
                if self.core is not None:
                    self.core.prefs = self.prefs
            self._ack(payload.get("change_id"))
        elif kind == "leave":
            self._ack(payload.get("change_id"))
            self.peer.stop()

    def _reset_run(self):
        self.cancel_timer(self._straggler_timer)
        self._straggler_timer = None
        self.settings = None
        self.topology = None
        self.reports = {}
        self.t = 0

    def _on_run_start(self, settings: RunSettings):
        if self.peer.id not in settings.members:
            return
        self._reset_run()
        self.settings = settings
        self.topology = build_tree(settings.members, settings.seed)
        self.core.reset_run()
        self.root_state = IterationState(F=settings.iterations) if self.topology.root == self.peer.id else None
        self.global_history = []
        self._begin_iteration(1)

    def _begin_iteration(self, t: int):
        # a root that is also a leaf decides locally; iterate instead of recursing
        self._iterating = True
        try:
            while t is not None:
                self._next_t = None
                self.t = t
                self.reports = {}
                self._included = []
                if self.topology.is_leaf(self.peer.id):
                    self._complete_bottom_up()
                elif self.settings.straggler_timeout_ms > 0:
                    self._straggler_timer = self.schedule_timer(self.settings.straggler_timeout_ms)
                t = self._next_t
        finally:
            self._iterating = False

    def _on_up(self, payload):
        if self.settings is None or payload["run"] != self.settings.run or payload["t"] != self.t:
            logger.debug(f"epos agent {self.peer.id}: stale UP {payload.get('run')}/{payload.get('t')} ignored")
            return
        child = int(payload["agent"])
        if child not in self.topology.children.get(self.peer.id, []):
            return
        self.reports[child] = SubtreeReport(self.t, decode_vector(payload["response"]),
                                            Moments.from_record(payload["moments"]))
        if len(self.reports) == len(self.topology.children[self.peer.id]):
            self.cancel_timer(self._straggler_timer)
            self._straggler_timer = None
            self._complete_bottom_up()

    def handle_timer(self, timer: Timer):
        if timer is not self._straggler_timer:
            return
        self._straggler_timer = None
        missing = [c for c in self.topology.children[self.peer.id] if c not in self.reports]
        self.log(LogKind.EVENT, "epos.straggler", ",".join(map(str, missing)))
        if self.settings.sync == "timeout":
            self._complete_bottom_up()
        else:
            self.send(self.driver_id, EposType.RUN_ABORT, encode_body(
                {"servInfo": self.serv_info, "run": self.settings.run, "t": self.t, "missing": missing}))

    def _complete_bottom_up(self):
        children = self.topology.children.get(self.peer.id, [])
        ordered = {c: self.reports[c] if c in self.reports else self.core.stale_report(c, self.t) for c in children}
        self._included = [c for c in children if c in self.reports]
        report = self.core.bottom_up(self.t, ordered, self.settings.gcf)
        parent = self.topology.parent[self.peer.id]
        if parent is None:
            decision = self.root_state.decide(report, self.settings.gcf)
            record = self.root_state.history[-1]
            self.log(LogKind.SERVICE, "global_cost", record.global_cost)
            self.log(LogKind.SERVICE, "local_cost", record.local_cost)
            self._apply_decision(decision)
        else:
            self.send(parent, EposType.UP, encode_body({
                "run": self.settings.run, "t": self.t, "agent": self.peer.id,
                "response": encode_vector(report.response), "moments": report.moments.to_record()}))

    def _on_down(self, payload):
        if self.settings is None or payload["run"] != self.settings.run or payload["t"] != self.t:
            return
        decision = IterationDecision(self.t, bool(payload["accepted"]), decode_vector(payload["global"]),
                                     Moments.from_record(payload["moments"]))
        self._apply_decision(decision)

    def _apply_decision(self, decision: IterationDecision):
        self.cancel_timer(self._straggler_timer)
        self._straggler_timer = None
        included = self._included
        self.core.apply(decision, included)
        self.global_history.append(decision.global_response)
        self.selections[self.t] = self.core.selected_index
        for child in self.topology.children.get(self.peer.id, []):
            self.send(child, EposType.DOWN, encode_body({
                "run": self.settings.run, "t": self.t, "accepted": decision.accepted and child in included,
                "global": encode_vector(decision.global_response),
                "moments": decision.global_moments.to_record()}))
        if self.t < self.settings.iterations:
            if self._iterating:
                self._next_t = self.t + 1
            else:
                self._begin_iteration(self.t + 1)
            return
        self.finalize_run()

    def finalize_run(self):
        """Actuate the selected plan and, at the root, report the run to the driver"""
        index = self.core.selected_index
        self.send_actuation({"run": self.settings.run, "plan_index": index})
        if self.root_state is not None:
            self.send(self.driver_id, EposType.RUN_DONE, encode_body({
                "servInfo": self.serv_info, "run": self.settings.run,
                "members": self.settings.members,
                "history": [r.to_record() for r in self.root_state.history]}))
        self.settings = None
