"""
Decentralized aggregation (DIAS).

Every agent is a data supplier and a data consumer. As a supplier it maps
its raw stream value onto one of k possible states and pushes that
selected state to consumers found through a peer sampling service. As a
consumer it keeps duplicate-insensitive sum/count/min/max aggregates,
recognizing suppliers and states through Bloom filters and correcting
earlier contributions when a supplier's selected state changes.

Sessions are push-pull: a consumer answers a supplier's session with an
acknowledgment carrying its own session and its current estimate.

Session line: supplier_id;version;new_state_index;new_value;prev_version;prev_value
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from bootstrap_protocol import ServiceAgentPeerlet, ServiceMetadata
from monitoring import LogKind
from peerbed_errors import ServiceError
from runtime_core import Timer
from services.bloom_filter import DEFAULT_BITS, DEFAULT_HASHES, BloomFilter
from services.control import ControlType, decode_body, encode_body

logger = logging.getLogger(__name__)

DIAS_SERVICE = "dias"
DEFAULT_VIEW_SIZE = 10
DEFAULT_GOSSIP_PERIOD_MS = 100
DEFAULT_DISSEMINATION_PERIOD_MS = 200
VERSION_BITS = 32


class DiasType(IntEnum):
    GOSSIP_REQ = 300
    GOSSIP_RESP = 301
    SESSION = 302
    SESSION_ACK = 303
    LEAVE_NOTICE = 304
    PROBE = 305
    PROBE_REPLY = 306


@dataclass(frozen=True)
class PossibleStates:
    states: Tuple[float, ...]

    def __post_init__(self):
        states = tuple(float(s) for s in self.states)
        if not states:
            raise ServiceError("possible states must not be empty")
        if any(b <= a for a, b in zip(states, states[1:])):
            raise ServiceError("possible states must be sorted ascending without duplicates")
        object.__setattr__(self, "states", states)

    @property
    def k(self) -> int:
        return len(self.states)

    def __getitem__(self, index: int) -> float:
        return self.states[index]


def summarize(raw: float, states: PossibleStates) -> int:
    """Index of the nearest state; equal distances resolve to the lower value"""
    if states is None or not states.states:
        raise ServiceError("no possible states to summarize into")
    best, best_distance = 0, abs(raw - states[0])
    for index in range(1, states.k):
        distance = abs(raw - states[index])
        if distance < best_distance:
            best, best_distance = index, distance
    return best


def make_version(incarnation: int, counter: int) -> int:
    return (incarnation << VERSION_BITS) | counter


def version_incarnation(version: int) -> int:
    return version >> VERSION_BITS


@dataclass(frozen=True)
class SelectedState:
    supplier: int
    state_index: int
    value: float
    version: int


@dataclass(frozen=True)
class SessionMessage:
    supplier: int
    version: int
    state_index: int
    value: float
    prev_version: Optional[int] = None
    prev_value: Optional[float] = None

    @classmethod
    def from_states(cls, current: SelectedState, previous: Optional[SelectedState] = None) -> "SessionMessage":
        if previous is None:
            return cls(current.supplier, current.version, current.state_index, current.value)
        return cls(current.supplier, current.version, current.state_index, current.value,
                   previous.version, previous.value)

    def to_line(self) -> str:
        prev_version = "" if self.prev_version is None else str(self.prev_version)
        prev_value = "" if self.prev_value is None else repr(self.prev_value)
        return f"{self.supplier};{self.version};{self.state_index};{self.value!r};{prev_version};{prev_value}"

    @classmethod
    def from_line(cls, line: str) -> "SessionMessage":
        parts = line.strip().split(";")
        if len(parts) != 6:
            raise ServiceError(f"session line needs 6 fields, got {len(parts)}: {line[:60]!r}")
        try:
            return cls(int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]),
                       int(parts[4]) if parts[4] else None, float(parts[5]) if parts[5] else None)
        except ValueError as e:
            raise ServiceError(f"malformed session line {line[:60]!r}: {e}") from e

    def encode(self) -> bytes:
        return self.to_line().encode("utf-8")

    @classmethod
    def decode(cls, body: bytes) -> "SessionMessage":
        return cls.from_line(body.decode("utf-8"))


class PeerView:
    """Partial membership view of the peer sampling service: peer id -> age"""

    def __init__(self, owner: int, size: int = DEFAULT_VIEW_SIZE, entries: Optional[Mapping[int, int]] = None):
        if size < 1:
            raise ServiceError(f"view size must be positive, got {size}")
        self.owner = owner
        self.size = size
        self.entries: Dict[int, int] = {}
        if entries:
            self.merge(entries.items())

    def __len__(self):
        return len(self.entries)

    def __contains__(self, peer_id: int) -> bool:
        return peer_id in self.entries

    def ids(self) -> List[int]:
        return sorted(self.entries)

    def increment_ages(self):
        for peer_id in self.entries:
            self.entries[peer_id] += 1

    def oldest(self) -> Optional[int]:
        if not self.entries:
            return None
        return min(self.entries, key=lambda p: (-self.entries[p], p))

    def remove(self, peer_id: int):
        self.entries.pop(peer_id, None)

    def exchange_half(self, exclude: Optional[int] = None) -> List[Tuple[int, int]]:
        """Oldest half of the view (at least one entry when possible)"""
        candidates = sorted(((p, a) for p, a in self.entries.items() if p != exclude), key=lambda e: (-e[1], e[0]))
        return candidates[:max(1, math.ceil(len(candidates) / 2))] if candidates else []

    def merge(self, received: Iterable[Tuple[int, int]]):
        merged = dict(self.entries)
        for peer_id, age in received:
            peer_id, age = int(peer_id), int(age)
            if peer_id == self.owner:
                continue
            merged[peer_id] = min(age, merged.get(peer_id, age))
        freshest = sorted(merged.items(), key=lambda e: (e[1], e[0]))[:self.size]
        self.entries = dict(freshest)


def gossip_round(view: PeerView, partner_view: PeerView) -> Tuple[PeerView, PeerView]:
    """One shuffle between view's owner and partner_view's owner, both views updated in place"""
    if not len(view):
        return view, partner_view
    view.increment_ages()
    view.remove(partner_view.owner)
    sent = view.exchange_half() + [(view.owner, 0)]
    reply = partner_view.exchange_half(exclude=view.owner)
    partner_view.merge(sent)
    view.merge(reply + [(partner_view.owner, 0)])
    return view, partner_view


class SessionOutcome(Enum):
    ADDED = "added"
    CORRECTED = "corrected"
    DUPLICATE = "duplicate"
    REJECTED = "rejected"


@dataclass
class AggregateEstimate:
    sum: float
    avg: Optional[float]
    min: Optional[float]
    max: Optional[float]
    count: int
    as_of: int

    @property
    def defined(self) -> bool:
        return self.count > 0

    def to_record(self) -> dict:
        return {"sum": self.sum, "avg": self.avg, "min": self.min, "max": self.max,
                "count": self.count, "as_of": self.as_of}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "AggregateEstimate":
        return cls(float(record["sum"]), record.get("avg"), record.get("min"), record.get("max"),
                   int(record["count"]), int(record.get("as_of", 0)))


class AggregationState:
    """Consumer memory: Bloom filters as the membership pre-check, last_contribution as the authority"""

    def __init__(self, bloom_m: int = DEFAULT_BITS, bloom_h: int = DEFAULT_HASHES):
        self.supplier_filter = BloomFilter(bloom_m, bloom_h)
        self.state_filter = BloomFilter(bloom_m, bloom_h)
        self.last_contribution: Dict[int, Tuple[float, int]] = {}
        self.tombstones: Dict[int, int] = {}
        self.sum = 0.0
        self.count = 0
        self.min: Optional[float] = None
        self.max: Optional[float] = None
        self.bloom_false_positives = 0

    def _recompute_bounds(self):
        values = [value for value, _ in self.last_contribution.values()]
        self.min = min(values) if values else None
        self.max = max(values) if values else None

    def _remember(self, msg: SessionMessage):
        self.supplier_filter.add(msg.supplier)
        self.state_filter.add(f"{msg.supplier}/{msg.version}/{msg.state_index}")
        self.last_contribution[msg.supplier] = (msg.value, msg.version)

    def apply(self, msg: SessionMessage) -> SessionOutcome:
        if msg.supplier in self.supplier_filter:
            recorded = self.last_contribution.get(msg.supplier)
            if recorded is not None:
                value, version = recorded
                if msg.version == version:
                    return SessionOutcome.DUPLICATE
                if msg.version < version:
                    logger.warning(f"session of supplier {msg.supplier} rejected: "
                                   f"version {msg.version} older than {version}")
                    return SessionOutcome.REJECTED
                self.sum += msg.value - value
                self._remember(msg)
                self._recompute_bounds()
                return SessionOutcome.CORRECTED
            if msg.supplier not in self.tombstones:
                self.bloom_false_positives += 1
        if msg.version <= self.tombstones.get(msg.supplier, -1):
            logger.debug(f"session of departed supplier {msg.supplier} at version {msg.version} ignored")
            return SessionOutcome.REJECTED
        self.tombstones.pop(msg.supplier, None)
        self.sum += msg.value
        self.count += 1
        self.min = msg.value if self.min is None else min(self.min, msg.value)
        self.max = msg.value if self.max is None else max(self.max, msg.value)
        self._remember(msg)
        return SessionOutcome.ADDED

    def leave(self, supplier: int, version: Optional[int] = None) -> bool:
        recorded = self.last_contribution.get(supplier)
        if recorded is None:
            logger.info(f"leave of unknown supplier {supplier} ignored")
            return False
        value, recorded_version = recorded
        if version is not None and version < recorded_version:
            logger.info(f"stale leave of supplier {supplier} ignored")
            return False
        del self.last_contribution[supplier]
        self.tombstones[supplier] = recorded_version if version is None else version
        self.sum -= value
        self.count -= 1
        if not self.last_contribution:
            self.sum = 0.0
        self._recompute_bounds()
        return True

    def estimate(self, now_ms: int = 0) -> AggregateEstimate:
        avg = self.sum / self.count if self.count else None
        return AggregateEstimate(self.sum, avg, self.min, self.max, self.count, now_ms)

    def check_invariants(self):
        if self.count != len(self.last_contribution):
            raise ServiceError(f"count {self.count} != {len(self.last_contribution)} contributions")
        expected = math.fsum(value for value, _ in self.last_contribution.values())
        if not math.isclose(self.sum, expected, rel_tol=1e-9, abs_tol=1e-9):
            raise ServiceError(f"sum {self.sum} drifted from contributions {expected}")


def aggregation_session(session: SessionMessage, consumer: AggregationState) -> SessionOutcome:
    return consumer.apply(session)


def handle_leave(consumer: AggregationState, supplier: int, graceful: bool = True,
                 version: Optional[int] = None) -> bool:
    """Crashes send nothing; the contribution stays until the supplier rejoins with a higher version"""
    if not graceful:
        return False
    return consumer.leave(supplier, version)


def estimate(consumer: AggregationState, now_ms: int = 0) -> AggregateEstimate:
    return consumer.estimate(now_ms)


def bootstrap_contacts(owner: int, members: Sequence[int], view_size: int, rng) -> List[int]:
    """Ring successors of the owner plus random other members"""
    ring = sorted(set(members))
    if owner not in ring:
        ring.append(owner)
        ring.sort()
    position = ring.index(owner)
    successors = max(1, view_size // 2)
    contacts = [ring[(position + i) % len(ring)] for i in range(1, min(successors, len(ring) - 1) + 1)]
    others = [m for m in ring if m != owner and m not in contacts]
    extra = min(view_size - len(contacts), len(others))
    if extra > 0:
        contacts.extend(rng.sample(others, extra))
    return contacts


class DiasPeerlet(ServiceAgentPeerlet):
    """
    DIAS service agent. servMD.params carries the member list and the
    driver id; raw values and possible states arrive as sensing data.
    """

    message_types = ServiceAgentPeerlet.message_types | frozenset(DiasType) | frozenset({ControlType.CHANGE})

    def __init__(self, gateway_id: int, view_size: int = DEFAULT_VIEW_SIZE,
                 gossip_period_ms: int = DEFAULT_GOSSIP_PERIOD_MS,
                 dissemination_period_ms: int = DEFAULT_DISSEMINATION_PERIOD_MS,
                 bloom_m: int = DEFAULT_BITS, bloom_h: int = DEFAULT_HASHES,
                 serv_info: str = DIAS_SERVICE, silent: bool = False):
        super().__init__(serv_info, gateway_id, silent)
        self.view_size = view_size
        self.gossip_period_ms = gossip_period_ms
        self.dissemination_period_ms = dissemination_period_ms
        self.aggregation = AggregationState(bloom_m, bloom_h)
        self.view: Optional[PeerView] = None
        self.members: List[int] = []
        self.driver_id: Optional[int] = None
        self.possible_states: Optional[PossibleStates] = None
        self.raw: Optional[float] = None
        self.selected: Optional[SelectedState] = None
        self.previous: Optional[SelectedState] = None
        self.delivered: Dict[int, int] = {}
        self.remote_estimates: Dict[int, AggregateEstimate] = {}
        self.graceful = True
        self.sessions_sent = 0
        self._counter = 0
        self._gossip_timer = None
        self._dissemination_timer = None
        self._last_actuated: Optional[Tuple[float, int]] = None

    def validate(self, serv_md: ServiceMetadata) -> bool:
        return "members" in serv_md.params

    def on_run(self):
        params = self.serv_md.params
        self.members = [int(m) for m in params["members"]]
        self.driver_id = params.get("driver")
        self.view = PeerView(self.peer.id, self.view_size)
        self.view.merge((c, 0) for c in bootstrap_contacts(self.peer.id, self.members, self.view_size, self.peer.rng))
        self._gossip_timer = self.schedule_timer(self.gossip_period_ms, periodic=True)
        self._dissemination_timer = self.schedule_timer(self.dissemination_period_ms, periodic=True)
        self.request_sensing({"kind": "raw"})

    # Supplier side

    def on_sensing(self, data):
        if not isinstance(data, dict):
            return
        if data.get("states") is not None:
            try:
                self.possible_states = PossibleStates(tuple(data["states"]))
            except ServiceError as e:
                logger.warning(f"dias agent {self.peer.id}: possible states refused: {e}")
        if data.get("raw") is not None:
            self.raw = float(data["raw"])
        if self.raw is not None and self.possible_states is not None:
            self.select_state()
        if data.get("change_id") is not None and self.driver_id is not None:
            self.send(self.driver_id, ControlType.CHANGE_ACK, encode_body(
                {"servInfo": self.serv_info, "agent": self.peer.id, "change_id": data["change_id"]}))

    def select_state(self) -> bool:
        """Summarize the raw value; a changed selection gets a new version"""
        index = summarize(self.raw, self.possible_states)
        value = self.possible_states[index]
        if self.selected is not None and self.selected.state_index == index and self.selected.value == value:
            return False
        self._counter += 1
        self.previous = self.selected
        self.selected = SelectedState(self.peer.id, index, value, make_version(self.peer.incarnation, self._counter))
        self.aggregation.apply(self.session())
        self.log(LogKind.SERVICE, "dias.selected", value)
        if self.previous is None and self.driver_id is not None:
            self.send(self.driver_id, ControlType.SERVICE_LIVE,
                      encode_body({"servInfo": self.serv_info, "agent": self.peer.id}))
        return True

    def session(self) -> SessionMessage:
        return SessionMessage.from_states(self.selected, self.previous)

    def disseminate(self):
        if self.selected is None or self.view is None:
            return
        for peer_id in self.view.ids():
            if self.delivered.get(peer_id) == self.selected.version:
                continue
            self.send(peer_id, DiasType.SESSION, self.session().encode())
            self.sessions_sent += 1

    # Consumer side

    def _consume(self, session: SessionMessage, sender: int):
        known = self.aggregation.last_contribution.get(session.supplier)
        if known is not None and version_incarnation(session.version) > version_incarnation(known[1]):
            self.delivered.pop(sender, None)
        outcome = self.aggregation.apply(session)
        if outcome is SessionOutcome.REJECTED:
            self.log(LogKind.EVENT, "dias.session_rejected", session.supplier)
        return outcome

    def _on_session(self, envelope, sender: int):
        try:
            session = SessionMessage.decode(envelope.body)
        except (ServiceError, UnicodeDecodeError) as e:
            logger.warning(f"dias agent {self.peer.id}: {e}")
            return
        self._consume(session, sender)
        ack = {"estimate": self.estimate().to_record(), "session": None, "acked": session.version}
        if self.selected is not None:
            ack["session"] = self.session().to_line()
            self.delivered[sender] = self.selected.version
        self.send(sender, DiasType.SESSION_ACK, encode_body(ack))

    def _on_ack(self, payload, sender: int):
        if self.selected is not None and payload.get("acked") == self.selected.version:
            self.delivered[sender] = self.selected.version
        if payload.get("session"):
            try:
                self._consume(SessionMessage.from_line(payload["session"]), sender)
            except ServiceError as e:
                logger.warning(f"dias agent {self.peer.id}: {e}")
        if payload.get("estimate"):
            self.remote_estimates[sender] = AggregateEstimate.from_record(payload["estimate"])

    def estimate(self) -> AggregateEstimate:
        return self.aggregation.estimate(self.now_ms())

    def actuate(self):
        current = self.estimate()
        key = (current.sum, current.count)
        if key == self._last_actuated or self.dev_addr is None:
            return
        self._last_actuated = key
        self.send_actuation(current.to_record())
        self.log(LogKind.SERVICE, "dias.sum", current.sum)

    # Peer sampling

    def gossip(self):
        if not len(self.view):
            self.view.merge((c, 0) for c in bootstrap_contacts(self.peer.id, self.members, self.view_size, self.peer.rng))
        partner = self.view.oldest()
        if partner is None:
            return
        self.view.increment_ages()
        self.view.remove(partner)
        sent = self.view.exchange_half() + [(self.peer.id, 0)]
        self.send(partner, DiasType.GOSSIP_REQ, encode_body({"entries": sent}))

    def _on_gossip_req(self, payload, sender: int):
        reply = self.view.exchange_half(exclude=sender)
        self.view.merge(payload["entries"])
        self.send(sender, DiasType.GOSSIP_RESP, encode_body({"entries": reply}))

    def _on_gossip_resp(self, payload, sender: int):
        self.view.merge(list(payload["entries"]) + [(sender, 0)])

    # Leaving

    def stop(self):
        if not self.graceful or self.selected is None:
            return
        notice = f"{self.peer.id};{self.selected.version}".encode("utf-8")
        targets = set(self.delivered) | set(self.view.ids() if self.view else [])
        for peer_id in sorted(targets):
            self.send(peer_id, DiasType.LEAVE_NOTICE, notice)

    def _on_leave(self, envelope):
        try:
            supplier, version = (int(p) for p in envelope.body.decode("utf-8").split(";"))
        except ValueError:
            logger.warning(f"dias agent {self.peer.id}: malformed leave notice")
            return
        if handle_leave(self.aggregation, supplier, graceful=True, version=version):
            self.log(LogKind.EVENT, "dias.leave", supplier)
        self.delivered.pop(supplier, None)
        self.view.remove(supplier)

    def _on_change(self, payload):
        if payload.get("servInfo") != self.serv_info:
            return
        kind = payload.get("kind")
        if kind in ("leave", "crash"):
            self.graceful = kind == "leave"
            if self.driver_id is not None:
                self.send(self.driver_id, ControlType.CHANGE_ACK, encode_body(
                    {"servInfo": self.serv_info, "agent": self.peer.id, "change_id": payload.get("change_id")}))
            self.peer.stop()

    def handle_service_message(self, envelope):
        if envelope.msg_type == ControlType.CHANGE:
            self._on_change(decode_body(envelope.body))
            return
        if not self.running or self.view is None:
            return
        sender = self.peer.network.id_for_address(envelope.sender)
        if envelope.msg_type == DiasType.PROBE:
            reply = {"agent": self.peer.id, "estimate": self.estimate().to_record(),
                     "value": self.selected.value if self.selected else None,
                     "probe": decode_body(envelope.body).get("probe")}
            self.send(envelope.sender, DiasType.PROBE_REPLY, encode_body(reply))
            return
        if sender is None:
            logger.debug(f"dias agent {self.peer.id}: message from unknown address {envelope.sender}")
            return
        if envelope.msg_type == DiasType.SESSION:
            self._on_session(envelope, sender)
        elif envelope.msg_type == DiasType.LEAVE_NOTICE:
            self._on_leave(envelope)
        else:
            try:
                payload = json.loads(envelope.body.decode("utf-8"))
            except ValueError as e:
                logger.warning(f"dias agent {self.peer.id}: unreadable message: {e}")
                return
            if envelope.msg_type == DiasType.SESSION_ACK:
                self._on_ack(payload, sender)
            elif envelope.msg_type == DiasType.GOSSIP_REQ:
                self._on_gossip_req(payload, sender)
            elif envelope.msg_type == DiasType.GOSSIP_RESP:
                self._on_gossip_resp(payload, sender)

    def handle_timer(self, timer: Timer):
        if timer is self._gossip_timer:
            self.gossip()
        elif timer is self._dissemination_timer:
            self.disseminate()
            self.actuate()
