#!/usr/bin/env python3
"""
Monitoring pipeline for peerbed runs.

Each agent hosts a MonitoringPeerlet with three logger modes (service,
event, memory). Records are buffered locally and pushed on their own
message type to a single logging gateway, which authenticates them,
queues them and commits them in batches to an append-only record file
(or, optionally, an sqlite database).
"""

import json
import logging
import sqlite3
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Union
from urllib.parse import unquote

from peerbed_errors import MonitoringError
from runtime_core import Peerlet, PeerState, Timer

logger = logging.getLogger(__name__)

MONITOR_LOG = 100
MONITOR_REJECT = 101

DEFAULT_COMMIT_BATCH = 100
DEFAULT_GATEWAY_QUEUE = 100000


class LogKind(Enum):
    SERVICE = "SERVICE"
    EVENT = "EVENT"
    MEMORY = "MEMORY"


def _escape(text: str) -> str:
    return text.replace("%", "%25").replace("|", "%7C").replace("\n", "%0A").replace("\r", "%0D")


def _format_value(value) -> str:
    """JSON text of a record value; strings stay quoted so "42" never reads back as 42"""
    if isinstance(value, bool):
        value = int(value)
    return json.dumps(value)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class LogRecord:
    agent: int
    ts_ms: int
    kind: LogKind
    key: str
    value: Union[int, float, str]

    def to_line(self) -> str:
        return "|".join((str(self.ts_ms), str(self.agent), self.kind.value,
                         _escape(self.key), _escape(_format_value(self.value))))

    @classmethod
    def from_line(cls, line: str) -> "LogRecord":
        parts = line.rstrip("\n").split("|")
        if len(parts) != 5:
            raise MonitoringError(f"bad record line {line!r}")
        ts, agent, kind, key, value = parts
        return cls(int(agent), int(ts), LogKind(kind), unquote(key), _parse_value(unquote(value)))

    def to_wire(self) -> list:
        return [self.agent, self.ts_ms, self.kind.value, self.key, self.value]

    @classmethod
    def from_wire(cls, item: list) -> "LogRecord":
        agent, ts, kind, key, value = item
        return cls(int(agent), int(ts), LogKind(kind), str(key), value)


@dataclass(frozen=True)
class RecordFilter:
    agent: Optional[int] = None
    kind: Optional[LogKind] = None
    start_ms: Optional[int] = None
    end_ms: Optional[int] = None

    def __post_init__(self):
        if self.start_ms is not None and self.end_ms is not None and self.start_ms > self.end_ms:
            raise MonitoringError(f"malformed range [{self.start_ms}, {self.end_ms}]")
        for bound in (self.start_ms, self.end_ms):
            if bound is not None and bound < 0:
                raise MonitoringError(f"negative range bound {bound}")

    def matches(self, record: LogRecord) -> bool:
        if self.agent is not None and record.agent != self.agent:
            return False
        if self.kind is not None and record.kind is not self.kind:
            return False
        if self.start_ms is not None and record.ts_ms < self.start_ms:
            return False
        if self.end_ms is not None and record.ts_ms > self.end_ms:
            return False
        return True

    def overlaps(self, min_ts: int, max_ts: int) -> bool:
        if self.start_ms is not None and max_ts < self.start_ms:
            return False
        if self.end_ms is not None and min_ts > self.end_ms:
            return False
        return True


def _ordered(records: Iterable[LogRecord]) -> List[LogRecord]:
    return sorted(records, key=lambda r: (r.ts_ms, r.agent))


class FileRecordStore:
    """Append-only `records.log` plus one index line per committed batch in `records.idx`"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.records_file = self.directory / "records.log"
        self.index_file = self.directory / "records.idx"
        self.lock = threading.Lock()

    def append_batch(self, records: List[LogRecord]):
        if not records:
            return
        data = "".join(r.to_line() + "\n" for r in records).encode("utf-8")
        with self.lock:
            with open(self.records_file, "ab") as f:
                offset = f.tell()
                f.write(data)
            entry = {
                "offset": offset,
                "length": len(data),
                "count": len(records),
                "min_ts": min(r.ts_ms for r in records),
                "max_ts": max(r.ts_ms for r in records),
            }
            with open(self.index_file, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry) + "\n")

    def _batches(self):
        if not self.index_file.exists():
            return []
        with open(self.index_file, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def query(self, record_filter: RecordFilter) -> List[LogRecord]:
        found = []
        with self.lock:
            if not self.records_file.exists():
                return []
            with open(self.records_file, "rb") as f:
                for batch in self._batches():
                    if not record_filter.overlaps(batch["min_ts"], batch["max_ts"]):
                        continue
                    f.seek(batch["offset"])
                    chunk = f.read(batch["length"]).decode("utf-8")
                    for line in chunk.splitlines():
                        record = LogRecord.from_line(line)
                        if record_filter.matches(record):
                            found.append(record)
        return _ordered(found)

    def count(self) -> int:
        with self.lock:
            return sum(b["count"] for b in self._batches())

    def close(self):
        pass


class SqliteRecordStore:
    """Relational backend with the same query contract as FileRecordStore"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.lock = threading.Lock()
        self.conn = sqlite3.connect(str(self.path), check_same_thread=False)
        self.conn.execute(
            "CREATE TABLE IF NOT EXISTS records ("
            "ts_ms INTEGER, agent INTEGER, kind TEXT, key TEXT, value TEXT)"
        )
        self.conn.execute("CREATE INDEX IF NOT EXISTS records_ts ON records (ts_ms, agent)")
        self.conn.commit()

    def append_batch(self, records: List[LogRecord]):
        rows = [(r.ts_ms, r.agent, r.kind.value, r.key, _format_value(r.value)) for r in records]
        with self.lock:
            with self.conn:
                self.conn.executemany("INSERT INTO records VALUES (?, ?, ?, ?, ?)", rows)

    def query(self, record_filter: RecordFilter) -> List[LogRecord]:
        clauses, params = [], []
        if record_filter.agent is not None:
            clauses.append("agent = ?")
            params.append(record_filter.agent)
        if record_filter.kind is not None:
            clauses.append("kind = ?")
            params.append(record_filter.kind.value)
        if record_filter.start_ms is not None:
            clauses.append("ts_ms >= ?")
            params.append(record_filter.start_ms)
        if record_filter.end_ms is not None:
            clauses.append("ts_ms <= ?")
            params.append(record_filter.end_ms)
        sql = "SELECT ts_ms, agent, kind, key, value FROM records"
        if clauses:
            sql += " WHERE " + " AND ".join(clauses)
        sql += " ORDER BY ts_ms, agent, rowid"
        with self.lock:
            rows = self.conn.execute(sql, params).fetchall()
        return [LogRecord(agent, ts, LogKind(kind), key, _parse_value(value)) for ts, agent, kind, key, value in rows]

    def count(self) -> int:
        with self.lock:
            return self.conn.execute("SELECT COUNT(*) FROM records").fetchone()[0]

    def close(self):
        with self.lock:
            self.conn.close()


def open_store(backend: str, directory: Union[str, Path]):
    if backend == "file":
        return FileRecordStore(directory)
    if backend == "sqlite":
        return SqliteRecordStore(Path(directory) / "records.sqlite")
    raise MonitoringError(f"unknown monitoring backend {backend!r}")


class LogGateway:
    """Authenticating, batching front of the record store. Single writer."""

    def __init__(self, store, commit_batch: int = DEFAULT_COMMIT_BATCH, queue_size: int = DEFAULT_GATEWAY_QUEUE,
                 auth_tokens: Iterable[str] = (), gateway_agent: int = 0, clock=None):
        if commit_batch <= 0:
            raise MonitoringError("commit_batch must be positive")
        self.store = store
        self.commit_batch = commit_batch
        self.auth_tokens = frozenset(auth_tokens)
        self.gateway_agent = gateway_agent
        self.clock = clock or (lambda: 0)
        self.queue = deque()
        self.queue_size = queue_size
        self.lock = threading.Lock()
        self.schemas = {}
        self.accepted = 0
        self.persisted = 0
        self.commits = 0
        self.rejected_batches = 0
        self.overflow_dropped = 0
        self.failed_dropped = 0
        self.unregistered_keys = 0

    def authorized(self, token: Optional[str]) -> bool:
        return not self.auth_tokens or token in self.auth_tokens

    def register_schema(self, agent: int, token: Optional[str], keys: Iterable[str]) -> bool:
        if not self.authorized(token):
            self.rejected_batches += 1
            return False
        self.schemas.setdefault(agent, set()).update(keys)
        return True

    def submit(self, token: Optional[str], records: List[LogRecord]) -> bool:
        if not self.authorized(token):
            self.rejected_batches += 1
            logger.warning(f"rejected {len(records)} records with an unknown token")
            return False
        with self.lock:
            for record in records:
                if len(self.queue) >= self.queue_size:
                    self.overflow_dropped += 1
                    continue
                known = self.schemas.get(record.agent)
                if known is not None and record.key not in known:
                    self.unregistered_keys += 1
                self.queue.append(record)
                self.accepted += 1
        return True

    def commit(self) -> int:
        """Commit everything queued, in batches of at most commit_batch records"""
        committed = 0
        while True:
            with self.lock:
                if not self.queue:
                    break
                batch = [self.queue.popleft() for _ in range(min(self.commit_batch, len(self.queue)))]
            if self._persist(batch):
                committed += len(batch)
        return committed

    def _persist(self, batch: List[LogRecord]) -> bool:
        for attempt in (1, 2):
            try:
                self.store.append_batch(batch)
                self.commits += 1
                self.persisted += len(batch)
                return True
            except (OSError, sqlite3.Error) as e:
                logger.error(f"commit of {len(batch)} records failed (attempt {attempt}): {e}")
        self.failed_dropped += len(batch)
        try:
            self.store.append_batch([LogRecord(self.gateway_agent, self.clock(), LogKind.EVENT,
                                               "persist_failed", len(batch))])
        except (OSError, sqlite3.Error) as e:
            logger.error(f"could not record the dropped batch: {e}")
        return False

    def flush_and_query(self, record_filter: Optional[RecordFilter] = None) -> List[LogRecord]:
        self.commit()
        return self.store.query(record_filter or RecordFilter())


def flush_and_query(gateway: LogGateway, agent: Optional[int] = None, kind: Optional[LogKind] = None,
                    start_ms: Optional[int] = None, end_ms: Optional[int] = None) -> List[LogRecord]:
    return gateway.flush_and_query(RecordFilter(agent, kind, start_ms, end_ms))


class LogGatewayPeerlet(Peerlet):
    """Hosts the LogGateway on its own peer and commits on a fixed rate"""

    message_types = frozenset({MONITOR_LOG})

    def __init__(self, gateway: LogGateway, commit_period_ms: int = 500):
        super().__init__()
        self.gateway = gateway
        self.commit_period_ms = commit_period_ms
        self._commit_timer = None

    def init(self, peer):
        super().init(peer)
        self.gateway.gateway_agent = peer.id
        self.gateway.clock = peer.now_ms

    def start(self):
        if self.commit_period_ms > 0:
            self._commit_timer = self.schedule_timer(self.commit_period_ms, periodic=True)

    def stop(self):
        self.gateway.commit()

    def handle_timer(self, timer: Timer):
        if timer is self._commit_timer:
            self.gateway.commit()

    def handle_message(self, envelope):
        try:
            payload = json.loads(envelope.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            logger.warning(f"unreadable log batch from {envelope.sender}: {e}")
            return
        token = payload.get("token")
        if "schema" in payload:
            ok = self.gateway.register_schema(int(payload["agent"]), token, payload["schema"])
            count = 0
        else:
            records = [LogRecord.from_wire(item) for item in payload.get("records", [])]
            ok = self.gateway.submit(token, records)
            count = len(records)
        if not ok:
            self.send(envelope.sender, MONITOR_REJECT, json.dumps({"count": count}).encode("utf-8"))


class MonitoringPeerlet(Peerlet):
    """Per-agent service, event and memory logger"""

    message_types = frozenset({MONITOR_REJECT})

    def __init__(self, gateway_id: int, token: Optional[str] = None, buffer_size: int = 1000,
                 flush_period_ms: int = 100, memory_period_ms: int = 0, schema_keys: Iterable[str] = ()):
        super().__init__()
        self.gateway_id = gateway_id
        self.token = token
        self.buffer = deque()
        self.buffer_size = buffer_size
        self.flush_period_ms = flush_period_ms
        self.memory_period_ms = memory_period_ms
        self.schema_keys = sorted(set(schema_keys))
        self.emitted = 0
        self.dropped = 0
        self.rejected = 0
        self._last_ts = {}
        self._flush_timer = None
        self._memory_timer = None

    def init(self, peer):
        super().init(peer)
        peer.monitor = self

    def start(self):
        self._post({"agent": self.peer.id, "schema": self.schema_keys})
        if self.flush_period_ms > 0:
            self._flush_timer = self.schedule_timer(self.flush_period_ms, periodic=True)
        if self.memory_period_ms > 0:
            self._memory_timer = self.schedule_timer(self.memory_period_ms, periodic=True)

    def stop(self):
        self.flush()

    def log(self, kind: LogKind, key: str, value) -> bool:
        if self.peer is None or self.peer.state not in (PeerState.RUNNING, PeerState.LEAVING):
            return False
        ts = max(self.peer.now_ms(), self._last_ts.get(kind, 0))
        self._last_ts[kind] = ts
        if len(self.buffer) >= self.buffer_size:
            self.buffer.popleft()
            self.dropped += 1
        self.buffer.append(LogRecord(self.peer.id, ts, kind, key, value))
        self.emitted += 1
        if self.flush_period_ms <= 0:
            self.flush()
        return True

    def flush(self):
        if not self.buffer:
            return
        records = [r.to_wire() for r in self.buffer]
        self.buffer.clear()
        self._post({"records": records})

    def _post(self, payload: dict):
        if not self.peer.network.knows(self.gateway_id):
            lost = len(payload.get("records", []))
            if lost:
                self.dropped += lost
                logger.warning(f"agent {self.peer.id}: no logging gateway {self.gateway_id}, {lost} records dropped")
            return
        payload["token"] = self.token
        self.send(self.gateway_id, MONITOR_LOG, json.dumps(payload, separators=(",", ":")).encode("utf-8"))

    def handle_timer(self, timer: Timer):
        if timer is self._flush_timer:
            self.flush()
        elif timer is self._memory_timer:
            self.log(LogKind.MEMORY, "resident_bytes", self.peer.memory_bytes())

    def handle_message(self, envelope):
        try:
            self.rejected += int(json.loads(envelope.body.decode("utf-8")).get("count", 0))
        except (ValueError, AttributeError):
            self.rejected += 1
