#!/usr/bin/env python3
"""
Self-integration protocol between application agents (device side),
a gateway and service agents.

  gateway      --broadcastMsg-->  application agents
  application  --regDevMsg----->  gateway   --asgnAgnMsg--> application
  operator     --servReqMsg---->  gateway   --readyMsg----> service agents
  service      --agnReadyMsg--->  gateway   --runServMsg--> service agents
  service     <--sensingMsg/actuationMsg-->  application (gateway not involved)

GatewayState is the pure state machine; the peerlets below wire it to the
messaging layer. The gateway never decodes sensing or actuation payloads.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from monitoring import LogKind
from peerbed_errors import CapacityError, ProtocolError
from runtime_core import Peerlet, Timer

logger = logging.getLogger(__name__)


class MessageType(IntEnum):
    BROADCAST = 1
    REG_DEV = 2
    ASGN_AGN = 3
    SERV_REQ = 4
    READY = 5
    AGN_READY = 6
    RUN_SERV = 7
    SENSING = 8
    ACTUATION = 9
    SERV_STATUS = 10
    SENSING_REQ = 11
    SERV_DONE = 12


PROTOCOL_TYPES = frozenset(int(t) for t in MessageType)

MESSAGE_NAMES = {
    MessageType.BROADCAST: "broadcastMsg",
    MessageType.REG_DEV: "regDevMsg",
    MessageType.ASGN_AGN: "asgnAgnMsg",
    MessageType.SERV_REQ: "servReqMsg",
    MessageType.READY: "readyMsg",
    MessageType.AGN_READY: "agnReadyMsg",
    MessageType.RUN_SERV: "runServMsg",
    MessageType.SENSING: "sensingMsg",
    MessageType.ACTUATION: "actuationMsg",
    MessageType.SERV_STATUS: "servStatusMsg",
    MessageType.SENSING_REQ: "sensingReqMsg",
    MessageType.SERV_DONE: "servDoneMsg",
}

MESSAGE_FIELDS = {
    MessageType.BROADCAST: ("GWAddr", "servInfo"),
    MessageType.REG_DEV: ("devAddr", "devInfo", "servInfo"),
    MessageType.ASGN_AGN: ("agnAddr",),
    MessageType.SERV_REQ: ("servInfo", "servMD"),
    MessageType.READY: ("servInfo", "servMD"),
    MessageType.AGN_READY: ("agnAddr", "servInfo"),
    MessageType.RUN_SERV: ("servInfo",),
    MessageType.SENSING: ("servInfo", "data"),
    MessageType.ACTUATION: ("servInfo", "actuation"),
    MessageType.SERV_STATUS: ("servInfo", "status", "detail"),
    MessageType.SENSING_REQ: ("servInfo", "request"),
    MessageType.SERV_DONE: ("servInfo",),
}


class GatewayPhase(Enum):
    IDLE = "idle"
    ANNOUNCED = "announced"
    ASSIGNING = "assigning"
    PREPARING = "preparing"
    RUNNING = "running"
    DONE = "done"


@dataclass(frozen=True)
class ProtocolMessage:
    msg_type: MessageType
    fields: Mapping[str, Any]

    def __post_init__(self):
        expected = set(MESSAGE_FIELDS[self.msg_type])
        if set(self.fields) != expected:
            raise ProtocolError(f"{MESSAGE_NAMES[self.msg_type]} needs fields {sorted(expected)}, "
                                f"got {sorted(self.fields)}")

    def __getitem__(self, name):
        return self.fields[name]

    @property
    def name(self) -> str:
        return MESSAGE_NAMES[self.msg_type]

    def encode(self) -> bytes:
        return json.dumps(dict(self.fields), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def decode(cls, msg_type: int, body: bytes) -> "ProtocolMessage":
        try:
            kind = MessageType(msg_type)
            fields = json.loads(body.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as e:
            raise ProtocolError(f"undecodable protocol message type {msg_type}: {e}") from e
        if not isinstance(fields, dict):
            raise ProtocolError(f"protocol body of type {msg_type} is not a record")
        return cls(kind, fields)


def broadcast_msg(gw_addr: str, serv_info: str) -> ProtocolMessage:
    return ProtocolMessage(MessageType.BROADCAST, {"GWAddr": gw_addr, "servInfo": serv_info})


def reg_dev_msg(dev_addr: str, dev_info: "DeviceInfo", serv_info: str) -> ProtocolMessage:
    return ProtocolMessage(MessageType.REG_DEV, {"devAddr": dev_addr, "devInfo": dev_info.to_record(),
                                                 "servInfo": serv_info})


def asgn_agn_msg(agn_addr: str) -> ProtocolMessage:
    return ProtocolMessage(MessageType.ASGN_AGN, {"agnAddr": agn_addr})


def serv_req_msg(request: "ServiceRequest") -> ProtocolMessage:
    return ProtocolMessage(MessageType.SERV_REQ, {"servInfo": request.serv_info,
                                                  "servMD": request.serv_md.to_record()})


def ready_msg(serv_info: str, serv_md: Mapping[str, Any]) -> ProtocolMessage:
    return ProtocolMessage(MessageType.READY, {"servInfo": serv_info, "servMD": dict(serv_md)})


def agn_ready_msg(agn_addr: str, serv_info: str) -> ProtocolMessage:
    return ProtocolMessage(MessageType.AGN_READY, {"agnAddr": agn_addr, "servInfo": serv_info})


def run_serv_msg(serv_info: str) -> ProtocolMessage:
    return ProtocolMessage(MessageType.RUN_SERV, {"servInfo": serv_info})


def sensing_msg(serv_info: str, data: Any) -> ProtocolMessage:
    return ProtocolMessage(MessageType.SENSING, {"servInfo": serv_info, "data": data})


def actuation_msg(serv_info: str, actuation: Any) -> ProtocolMessage:
    return ProtocolMessage(MessageType.ACTUATION, {"servInfo": serv_info, "actuation": actuation})


def serv_status_msg(serv_info: str, status: str, detail: Any = None) -> ProtocolMessage:
    return ProtocolMessage(MessageType.SERV_STATUS, {"servInfo": serv_info, "status": status, "detail": detail})


def sensing_req_msg(serv_info: str, request: Any = None) -> ProtocolMessage:
    return ProtocolMessage(MessageType.SENSING_REQ, {"servInfo": serv_info, "request": request})


def serv_done_msg(serv_info: str) -> ProtocolMessage:
    return ProtocolMessage(MessageType.SERV_DONE, {"servInfo": serv_info})


@dataclass(frozen=True)
class DeviceInfo:
    device_type: str
    location: str

    def to_record(self) -> dict:
        return {"device_type": self.device_type, "location": self.location}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "DeviceInfo":
        return cls(str(record.get("device_type", "")), str(record.get("location", "")))


@dataclass(frozen=True)
class DeviceRegistration:
    dev_addr: str
    dev_info: DeviceInfo
    serv_info: str

    @classmethod
    def from_message(cls, msg: ProtocolMessage) -> "DeviceRegistration":
        return cls(msg["devAddr"], DeviceInfo.from_record(msg["devInfo"] or {}), msg["servInfo"])


@dataclass(frozen=True)
class ServiceMetadata:
    agent_count: int
    device_count: int
    locations: Tuple[str, ...] = ()
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.agent_count < 1:
            raise ProtocolError(f"agent_count must be at least 1, got {self.agent_count}")
        if self.device_count < 1:
            raise ProtocolError(f"device_count must be at least 1, got {self.device_count}")

    def to_record(self) -> dict:
        return {"agent_count": self.agent_count, "device_count": self.device_count,
                "locations": list(self.locations), "params": dict(self.params)}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "ServiceMetadata":
        return cls(int(record["agent_count"]), int(record["device_count"]),
                   tuple(record.get("locations", ())), dict(record.get("params", {})))


@dataclass(frozen=True)
class ServiceRequest:
    serv_info: str
    serv_md: ServiceMetadata

    @classmethod
    def from_message(cls, msg: ProtocolMessage) -> "ServiceRequest":
        return cls(msg["servInfo"], ServiceMetadata.from_record(msg["servMD"]))


Outbound = Tuple[str, ProtocolMessage]


class GatewayState:
    """Gateway state machine of one service; every method returns the messages to emit"""

    def __init__(self, gw_addr: str, serv_info: str, service_agents: Sequence[str]):
        self.gw_addr = gw_addr
        self.serv_info = serv_info
        self.free_agents = list(service_agents)
        self.registrations: Dict[str, str] = {}
        self.agent_owner: Dict[str, str] = {}
        self.device_info: Dict[str, DeviceInfo] = {}
        self.pending_service: Optional[ServiceRequest] = None
        self.ready_agents: Set[str] = set()
        self.late_pending: Set[str] = set()
        self.phase = GatewayPhase.IDLE
        self.bindings: List[Tuple[str, str]] = []

    def _require(self, *phases: GatewayPhase):
        if self.phase not in phases:
            raise ProtocolError(f"{self.serv_info}: operation not allowed in phase {self.phase.value}")

    def check_invariants(self):
        if len(set(self.registrations.values())) != len(self.registrations):
            raise ProtocolError("registration map is not injective")
        if {v: k for k, v in self.registrations.items()} != self.agent_owner:
            raise ProtocolError("reverse registration map out of sync")

    @property
    def assigned_agents(self) -> List[str]:
        return list(self.registrations.values())

    def announce(self, app_agents: Iterable[str]) -> List[Outbound]:
        self._require(GatewayPhase.IDLE)
        self.phase = GatewayPhase.ANNOUNCED
        return [(addr, broadcast_msg(self.gw_addr, self.serv_info)) for addr in app_agents]

    def register_device(self, reg: DeviceRegistration) -> ProtocolMessage:
        if reg.serv_info != self.serv_info:
            raise ProtocolError(f"registration for {reg.serv_info!r} sent to {self.serv_info!r}")
        if reg.dev_addr in self.registrations:
            self._require(GatewayPhase.ANNOUNCED, GatewayPhase.ASSIGNING,
                          GatewayPhase.PREPARING, GatewayPhase.RUNNING)
            return asgn_agn_msg(self.registrations[reg.dev_addr])
        self._require(GatewayPhase.ANNOUNCED, GatewayPhase.ASSIGNING, GatewayPhase.RUNNING)
        if not self.free_agents:
            raise CapacityError("capacity")
        agn_addr = self.free_agents.pop(0)
        self.registrations[reg.dev_addr] = agn_addr
        self.agent_owner[agn_addr] = reg.dev_addr
        self.device_info[reg.dev_addr] = reg.dev_info
        self.bindings.append((reg.dev_addr, agn_addr))
        if self.phase is GatewayPhase.ANNOUNCED:
            self.phase = GatewayPhase.ASSIGNING
        self.check_invariants()
        return asgn_agn_msg(agn_addr)

    def _serv_md_for(self, agn_addr: str) -> dict:
        record = self.pending_service.serv_md.to_record()
        record["params"] = dict(record["params"], devAddr=self.agent_owner[agn_addr])
        return record

    def request_service(self, req: ServiceRequest) -> List[Outbound]:
        self._require(GatewayPhase.ASSIGNING)
        if req.serv_info != self.serv_info:
            raise ProtocolError(f"service request for {req.serv_info!r} sent to {self.serv_info!r}")
        if len(self.registrations) < req.serv_md.agent_count:
            raise ProtocolError(f"{len(self.registrations)} agents assigned, "
                                f"{req.serv_md.agent_count} requested")
        self.pending_service = req
        self.ready_agents = set()
        self.phase = GatewayPhase.PREPARING
        return [(agn, ready_msg(self.serv_info, self._serv_md_for(agn))) for agn in self.assigned_agents]

    def rejoin(self, agn_addr: str) -> List[Outbound]:
        """One-agent readiness round for a device (re)registering while the service runs"""
        if self.phase is not GatewayPhase.RUNNING or agn_addr not in self.agent_owner:
            return []
        self.ready_agents.discard(agn_addr)
        self.late_pending.add(agn_addr)
        return [(agn_addr, ready_msg(self.serv_info, self._serv_md_for(agn_addr)))]

    def agent_ready(self, msg: ProtocolMessage) -> List[Outbound]:
        if msg["servInfo"] != self.serv_info:
            raise ProtocolError(f"agnReadyMsg for unknown service {msg['servInfo']!r}")
        agn_addr = msg["agnAddr"]
        if agn_addr not in self.agent_owner:
            raise ProtocolError(f"agnReadyMsg from unassigned agent {agn_addr}")
        if self.phase is GatewayPhase.RUNNING:
            if agn_addr not in self.late_pending:
                return []
            self.late_pending.discard(agn_addr)
            self.ready_agents.add(agn_addr)
            return [(agn_addr, run_serv_msg(self.serv_info))]
        self._require(GatewayPhase.PREPARING)
        self.ready_agents.add(agn_addr)
        if self.ready_agents != set(self.assigned_agents):
            return []
        self.phase = GatewayPhase.RUNNING
        return [(agn, run_serv_msg(self.serv_info)) for agn in self.assigned_agents]

    def abort_readiness(self) -> List[str]:
        """Readiness timeout: back to ASSIGNING; returns the agents that never answered"""
        self._require(GatewayPhase.PREPARING)
        silent = sorted(set(self.assigned_agents) - self.ready_agents)
        self.phase = GatewayPhase.ASSIGNING
        self.pending_service = None
        self.ready_agents = set()
        return silent

    def complete(self):
        self._require(GatewayPhase.RUNNING)
        self.phase = GatewayPhase.DONE


def gateway_announce(gw: GatewayState, agents: Iterable[str]) -> List[Outbound]:
    return gw.announce(agents)


def register_device(gw: GatewayState, reg: DeviceRegistration) -> ProtocolMessage:
    return gw.register_device(reg)


def request_service(gw: GatewayState, req: ServiceRequest) -> List[Outbound]:
    return gw.request_service(req)


class _ProtocolPeerlet(Peerlet):
    """Shared send/decode helpers"""

    def emit(self, to, msg: ProtocolMessage):
        return self.send(to, int(msg.msg_type), msg.encode())

    def decode(self, envelope) -> Optional[ProtocolMessage]:
        try:
            return ProtocolMessage.decode(envelope.msg_type, envelope.body)
        except ProtocolError as e:
            logger.warning(f"peer {self.peer.id}: dropping message from {envelope.sender}: {e}")
            return None


class GatewayPeerlet(_ProtocolPeerlet):
    """
    Gateway for one or more services, keyed by servInfo. Sensing and
    actuation types are not subscribed, so their bodies never reach it.
    """

    message_types = frozenset({MessageType.REG_DEV, MessageType.SERV_REQ,
                               MessageType.AGN_READY, MessageType.SERV_DONE})

    def __init__(self, services: Mapping[str, Sequence[int]], app_agents: Mapping[str, Sequence[int]],
                 readiness_timeout_ms: int = 1000):
        super().__init__()
        self.service_agents = {name: list(agents) for name, agents in services.items()}
        self.app_agents = {name: list(agents) for name, agents in app_agents.items()}
        self.readiness_timeout_ms = readiness_timeout_ms
        self.states: Dict[str, GatewayState] = {}
        self.operators: Dict[str, str] = {}
        self.ignored = 0
        self._readiness_timers: Dict[str, Timer] = {}
        self._late_timers: Dict[Timer, Tuple[str, str]] = {}

    def start(self):
        for name, agents in self.service_agents.items():
            addresses = [self.peer.address_of(a) for a in agents]
            state = GatewayState(self.peer.address, name, addresses)
            self.states[name] = state
            apps = [self.peer.address_of(a) for a in self.app_agents.get(name, [])]
            self._emit_all(state.announce(apps))
            self.log(LogKind.EVENT, f"{name}.phase", state.phase.value)

    def _emit_all(self, outbound: List[Outbound]):
        for addr, msg in outbound:
            self.emit(addr, msg)

    def _status(self, name: str, status: str, detail=None):
        operator = self.operators.get(name)
        if operator is not None:
            self.emit(operator, serv_status_msg(name, status, detail))
        self.log(LogKind.EVENT, f"{name}.status", status)

    def _state_for(self, msg: ProtocolMessage) -> Optional[GatewayState]:
        state = self.states.get(msg["servInfo"])
        if state is None:
            self.ignored += 1
            logger.warning(f"gateway: {msg.name} for unknown service {msg['servInfo']!r} ignored")
        return state

    def handle_message(self, envelope):
        msg = self.decode(envelope)
        if msg is None:
            return
        if msg.msg_type is MessageType.REG_DEV:
            self._on_register(msg)
        elif msg.msg_type is MessageType.SERV_REQ:
            self._on_request(msg, envelope.sender)
        elif msg.msg_type is MessageType.AGN_READY:
            self._on_ready(msg)
        elif msg.msg_type is MessageType.SERV_DONE:
            self._on_done(msg, envelope.sender)

    def _on_register(self, msg: ProtocolMessage):
        state = self._state_for(msg)
        if state is None:
            return
        reg = DeviceRegistration.from_message(msg)
        known = reg.dev_addr in state.registrations
        try:
            reply = state.register_device(reg)
        except ProtocolError as e:
            logger.warning(f"gateway: registration of {reg.dev_addr} refused: {e}")
            self.log(LogKind.EVENT, f"{state.serv_info}.register_refused", str(e))
            return
        self.emit(reg.dev_addr, reply)
        if not known:
            self.log(LogKind.EVENT, f"{state.serv_info}.assigned", f"{reg.dev_addr}>{reply['agnAddr']}")
        if state.phase is GatewayPhase.RUNNING:
            late = state.rejoin(reply["agnAddr"])
            self._emit_all(late)
            if late and self.readiness_timeout_ms > 0:
                self._late_timers[self.schedule_timer(self.readiness_timeout_ms)] = (state.serv_info, reply["agnAddr"])

    def _on_request(self, msg: ProtocolMessage, sender: str):
        state = self._state_for(msg)
        if state is None:
            return
        self.operators[state.serv_info] = sender
        try:
            request = ServiceRequest.from_message(msg)
            outbound = state.request_service(request)
        except (ProtocolError, KeyError, TypeError, ValueError) as e:
            logger.info(f"gateway: service request for {state.serv_info} rejected: {e}")
            self._status(state.serv_info, "rejected", str(e))
            return
        self._emit_all(outbound)
        self.log(LogKind.EVENT, f"{state.serv_info}.phase", state.phase.value)
        if self.readiness_timeout_ms > 0:
            self._readiness_timers[state.serv_info] = self.schedule_timer(self.readiness_timeout_ms)

    def _on_ready(self, msg: ProtocolMessage):
        state = self._state_for(msg)
        if state is None:
            return
        was_preparing = state.phase is GatewayPhase.PREPARING
        try:
            outbound = state.agent_ready(msg)
        except ProtocolError as e:
            self.ignored += 1
            logger.warning(f"gateway: {e}")
            return
        self._emit_all(outbound)
        if was_preparing and state.phase is GatewayPhase.RUNNING:
            self.cancel_timer(self._readiness_timers.pop(state.serv_info, None))
            self.log(LogKind.EVENT, f"{state.serv_info}.phase", state.phase.value)
            ids = [self.peer.network.id_for_address(a) for a in state.assigned_agents]
            self._status(state.serv_info, "running", {"agents": [i for i in ids if i is not None]})

    def _on_done(self, msg: ProtocolMessage, sender: str):
        state = self._state_for(msg)
        if state is None:
            return
        try:
            state.complete()
        except ProtocolError as e:
            logger.warning(f"gateway: {e}")
            return
        self.operators.setdefault(state.serv_info, sender)
        self.log(LogKind.EVENT, f"{state.serv_info}.phase", state.phase.value)
        self._status(state.serv_info, "done")

    def handle_timer(self, timer: Timer):
        for name, pending in list(self._readiness_timers.items()):
            if pending is timer:
                del self._readiness_timers[name]
                state = self.states[name]
                if state.phase is GatewayPhase.PREPARING:
                    silent = state.abort_readiness()
                    logger.warning(f"gateway: readiness timeout for {name}, silent agents {silent}")
                    self.log(LogKind.EVENT, f"{name}.phase", state.phase.value)
                    self._status(name, "aborted", {"silent": silent})
                return
        late = self._late_timers.pop(timer, None)
        if late is not None:
            name, agn_addr = late
            state = self.states[name]
            if agn_addr in state.late_pending:
                state.late_pending.discard(agn_addr)
                logger.warning(f"gateway: late agent {agn_addr} of {name} never became ready")
                self.log(LogKind.EVENT, f"{name}.late_timeout", agn_addr)


class ApplicationAgentPeerlet(_ProtocolPeerlet):
    """
    Device-side agent. Registers on broadcast, answers sensing requests from
    its assigned service agent and records actuations.
    """

    message_types = frozenset({MessageType.BROADCAST, MessageType.ASGN_AGN, MessageType.SENSING_REQ,
                               MessageType.ACTUATION})

    def __init__(self, serv_info: str, dev_info: DeviceInfo,
                 sensing_source: Optional[Callable[[Any], Any]] = None):
        super().__init__()
        self.serv_info = serv_info
        self.dev_info = dev_info
        self.sensing_source = sensing_source or (lambda request: None)
        self.gateway_addr: Optional[str] = None
        self.agn_addr: Optional[str] = None
        self.actuations: List[Any] = []
        self.rejected = 0

    def register(self):
        if self.gateway_addr is None:
            raise ProtocolError("no gateway announced yet")
        self.emit(self.gateway_addr, reg_dev_msg(self.peer.address, self.dev_info, self.serv_info))

    def push_sensing(self, data: Any):
        """Unsolicited sensing update to the assigned service agent"""
        if self.agn_addr is None:
            raise ProtocolError("device has no service agent yet")
        self.emit(self.agn_addr, sensing_msg(self.serv_info, data))

    def handle_message(self, envelope):
        msg = self.decode(envelope)
        if msg is None:
            return
        if msg.msg_type is MessageType.BROADCAST:
            if msg["servInfo"] != self.serv_info:
                return
            self.gateway_addr = msg["GWAddr"]
            self.register()
        elif msg.msg_type is MessageType.ASGN_AGN:
            self.agn_addr = msg["agnAddr"]
        elif msg.msg_type is MessageType.SENSING_REQ:
            if envelope.sender != self.agn_addr or msg["servInfo"] != self.serv_info:
                self.rejected += 1
                logger.warning(f"device {self.peer.id}: sensing request from {envelope.sender} rejected")
                return
            self.emit(self.agn_addr, sensing_msg(self.serv_info, self.sensing_source(msg["request"])))
        elif msg.msg_type is MessageType.ACTUATION:
            if envelope.sender != self.agn_addr or msg["servInfo"] != self.serv_info:
                self.rejected += 1
                logger.warning(f"device {self.peer.id}: actuation from {envelope.sender} rejected")
                return
            self.actuations.append(msg["actuation"])


class ServiceAgentPeerlet(_ProtocolPeerlet):
    """
    Service-side agent lifecycle: validates readyMsg, answers agnReadyMsg,
    runs on runServMsg. Services subclass it and override on_run,
    on_sensing and validate.
    """

    message_types = frozenset({MessageType.READY, MessageType.RUN_SERV, MessageType.SENSING})

    def __init__(self, serv_info: str, gateway_id: int, silent: bool = False):
        super().__init__()
        self.serv_info = serv_info
        self.gateway_id = gateway_id
        self.silent = silent
        self.serv_md: Optional[ServiceMetadata] = None
        self.dev_addr: Optional[str] = None
        self.prepared = False
        self.running = False
        self.duplicate_runs = 0
        self.rejected_sensing = 0

    def validate(self, serv_md: ServiceMetadata) -> bool:
        return True

    def on_run(self):
        pass

    def on_sensing(self, data: Any):
        pass

    def request_sensing(self, request: Any = None):
        if not self.running:
            raise ProtocolError("sensing requested before runServMsg")
        self.emit(self.dev_addr, sensing_req_msg(self.serv_info, request))

    def send_actuation(self, actuation: Any):
        if not self.running:
            raise ProtocolError("actuation before runServMsg")
        self.emit(self.dev_addr, actuation_msg(self.serv_info, actuation))

    def handle_message(self, envelope):
        if envelope.msg_type not in ServiceAgentPeerlet.message_types:
            self.handle_service_message(envelope)
            return
        msg = self.decode(envelope)
        if msg is None:
            return
        if msg["servInfo"] != self.serv_info:
            logger.warning(f"agent {self.peer.id}: {msg.name} for foreign service {msg['servInfo']!r} ignored")
            return
        if msg.msg_type is MessageType.READY:
            self._on_ready(msg)
        elif msg.msg_type is MessageType.RUN_SERV:
            if self.running:
                self.duplicate_runs += 1
                logger.info(f"agent {self.peer.id}: duplicate runServMsg ignored")
                return
            if not self.prepared:
                logger.warning(f"agent {self.peer.id}: runServMsg before readyMsg ignored")
                return
            self.running = True
            self.on_run()
        elif msg.msg_type is MessageType.SENSING:
            if not self.running:
                self.rejected_sensing += 1
                logger.warning(f"agent {self.peer.id}: sensing for a service not running rejected")
                return
            self.on_sensing(msg["data"])

    def handle_service_message(self, envelope):
        pass

    def _on_ready(self, msg: ProtocolMessage):
        try:
            serv_md = ServiceMetadata.from_record(msg["servMD"])
        except (KeyError, TypeError, ValueError) as e:
            logger.warning(f"agent {self.peer.id}: invalid servMD: {e}")
            return
        if not self.validate(serv_md):
            logger.warning(f"agent {self.peer.id}: servMD rejected by service validation")
            return
        self.serv_md = serv_md
        self.dev_addr = serv_md.params.get("devAddr")
        self.prepared = True
        if self.silent:
            return
        self.emit(self.peer.network.address_of(self.gateway_id), agn_ready_msg(self.peer.address, self.serv_info))


class OperatorPeerlet(_ProtocolPeerlet):
    """Service operator: submits servReqMsg, retries on rejection, tracks gateway status"""

    message_types = frozenset({MessageType.SERV_STATUS})

    def __init__(self, request: ServiceRequest, gateway_id: int, submit_delay_ms: int = 10,
                 retry_ms: int = 100, max_attempts: int = 50):
        super().__init__()
        self.request = request
        self.gateway_id = gateway_id
        self.submit_delay_ms = submit_delay_ms
        self.retry_ms = retry_ms
        self.max_attempts = max_attempts
        self.attempts = 0
        self.status: Optional[str] = None
        self.status_history: List[str] = []
        self.running_agents: List[int] = []
        self._submit_timer = None

    @property
    def serv_info(self) -> str:
        return self.request.serv_info

    def start(self):
        self._submit_timer = self.schedule_timer(self.submit_delay_ms)

    def submit(self):
        self.attempts += 1
        self.emit(self.gateway_id, serv_req_msg(self.request))

    def complete(self):
        self.emit(self.gateway_id, serv_done_msg(self.serv_info))

    def handle_timer(self, timer: Timer):
        if timer is self._submit_timer:
            self._submit_timer = None
            self.submit()

    def handle_message(self, envelope):
        msg = self.decode(envelope)
        if msg is None or msg["servInfo"] != self.serv_info:
            return
        self.status = msg["status"]
        self.status_history.append(self.status)
        if self.status in ("rejected", "aborted"):
            if self.attempts < self.max_attempts:
                self._submit_timer = self.schedule_timer(self.retry_ms)
            else:
                logger.error(f"operator: giving up on {self.serv_info} after {self.attempts} attempts")
            self.on_setback(self.status, msg["detail"])
        elif self.status == "running":
            self.running_agents = list((msg["detail"] or {}).get("agents", []))
            self.on_running(self.running_agents)
        elif self.status == "done":
            self.on_done()

    def on_running(self, agents: List[int]):
        pass

    def on_setback(self, status: str, detail):
        pass

    def on_done(self):
        pass
