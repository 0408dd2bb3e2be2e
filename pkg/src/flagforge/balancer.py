"""Per-backend L4 reverse proxy with source-IP session affinity.

Selection is two-layered: a per-service stick table pins every source IP to
the replica it was first assigned, and a per-service round-robin counter over
the healthy replica list hands out first assignments. Replicas that refuse a
connection are marked suspect and skipped until a health probe clears them;
the registry's probe-driven health stays untouched by the balancer.

The data plane (``BalancerServer``) strips the frontend's ``PROXY4`` header
when configured to expect one, so stickiness keys on the participant's real
address rather than on the frontend's.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable

from ._net import (
    PROXY_HEADER_LIMIT,
    TcpListener,
    parse_proxy_header,
    read_line,
    relay,
)
from .errors import NoHealthyReplicasError
from .registry import (
    EVENT_DEREGISTERED,
    HEALTH_HEALTHY,
    HEALTH_STOPPED,
    Registry,
    ReplicaEndpoint,
)

CONNECT_TIMEOUT = 3.0


@dataclass
class StickEntry:
    source_ip: str
    replica_id: str
    last_seen: float


class StickTable:
    """Source-IP to replica pinning with a sliding TTL and an LRU size bound.

    An entry is usable iff ``now - last_seen <= ttl`` (an entry aged exactly
    ttl still counts). Inserting a new IP at capacity evicts the entry with
    the smallest (last_seen, source_ip).
    """

    def __init__(self, ttl: float, capacity: int):
        self.ttl = ttl
        self.capacity = capacity
        self._entries: dict[str, StickEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, source_ip: str, now: float) -> str | None:
        entry = self._entries.get(source_ip)
        if entry is None or now - entry.last_seen > self.ttl:
            return None
        return entry.replica_id

    def refresh(self, source_ip: str, now: float) -> None:
        self._entries[source_ip].last_seen = now

    def assign(self, source_ip: str, replica_id: str, now: float) -> None:
        if source_ip not in self._entries and len(self._entries) >= self.capacity:
            victim = min(self._entries.values(),
                         key=lambda e: (e.last_seen, e.source_ip))
            del self._entries[victim.source_ip]
        self._entries[source_ip] = StickEntry(source_ip, replica_id, now)

    def expire(self, now: float) -> int:
        aged = [ip for ip, e in self._entries.items() if now - e.last_seen > self.ttl]
        for ip in aged:
            del self._entries[ip]
        return len(aged)

    def invalidate_replica(self, replica_id: str) -> int:
        pinned = [ip for ip, e in self._entries.items()
                  if e.replica_id == replica_id]
        for ip in pinned:
            del self._entries[ip]
        return len(pinned)

    def entries(self) -> list[StickEntry]:
        return sorted(self._entries.values(), key=lambda e: e.source_ip)


class Balancer:
    def __init__(self, registry: Registry, stick_ttl: float, stick_capacity: int,
                 clock: Callable[[], float] = time.time,
                 connect_timeout: float = CONNECT_TIMEOUT):
        self.registry = registry
        self.stick_ttl = stick_ttl
        self.stick_capacity = stick_capacity
        self.clock = clock
        self.connect_timeout = connect_timeout
        self._tables: dict[str, StickTable] = {}
        self._rr: dict[str, int] = {}
        self._suspects: set[str] = set()
        self._lock = threading.RLock()
        registry.add_listener(self._on_registry_event)

    # --- selection --------------------------------------------------------

    def select_replica(self, service: str, source_ip: str,
                       now: float | None = None) -> ReplicaEndpoint:
        """Sticky pick if the pin is alive, else the next round-robin replica.

        Round robin walks the registered replica ring from the per-service
        cursor, skipping unhealthy and suspect entries, so the replica after
        a failed one is the next registration position, and first assignments
        over a stable healthy set cycle through it exactly evenly. Sticky
        hits do not advance the cursor.
        """
        with self._lock:
            now = self.clock() if now is None else now
            table = self._table(service)
            ring = self.registry.replicas_of(service)
            healthy_ids = {r.replica_id for r in ring if r.health == HEALTH_HEALTHY}
            pinned = table.lookup(source_ip, now)
            if pinned is not None and pinned in healthy_ids:
                table.refresh(source_ip, now)
                return next(r for r in ring if r.replica_id == pinned)
            start = self._rr.get(service, 0)
            for step in range(len(ring)):
                endpoint = ring[(start + step) % len(ring)]
                if (endpoint.health == HEALTH_HEALTHY
                        and endpoint.replica_id not in self._suspects):
                    self._rr[service] = (start + step + 1) % len(ring)
                    table.assign(source_ip, endpoint.replica_id, now)
                    return endpoint
            raise NoHealthyReplicasError(f"no healthy replicas for {service}")

    def connect_upstream(self, service: str,
                         source_ip: str) -> tuple[ReplicaEndpoint, socket.socket]:
        """Select and connect, retrying the selection once on connect failure."""
        last_error: OSError | None = None
        for _ in range(2):
            endpoint = self.select_replica(service, source_ip)
            try:
                upstream = socket.create_connection(
                    (endpoint.address, endpoint.port), timeout=self.connect_timeout)
                return endpoint, upstream
            except OSError as exc:
                last_error = exc
                self.mark_suspect(endpoint.replica_id)
        raise NoHealthyReplicasError(
            f"replicas of {service} refused connections: {last_error}")

    # --- table maintenance -------------------------------------------

    def configure(self, stick_ttl: float, stick_capacity: int) -> None:
        """Apply new stick settings to existing tables and future ones."""
        with self._lock:
            self.stick_ttl = stick_ttl
            self.stick_capacity = stick_capacity
            for table in self._tables.values():
                table.ttl = stick_ttl
                table.capacity = stick_capacity

    def mark_suspect(self, replica_id: str) -> None:
        """Skip a connection-refusing replica until a probe confirms it healthy."""
        with self._lock:
            self._suspects.add(replica_id)
            for table in self._tables.values():
                table.invalidate_replica(replica_id)

    def suspects(self) -> set[str]:
        with self._lock:
            return set(self._suspects)

    def invalidate_replica(self, replica_id: str) -> int:
        with self._lock:
            return sum(table.invalidate_replica(replica_id)
                       for table in self._tables.values())

    def expire_entries(self, now: float | None = None) -> int:
        with self._lock:
            now = self.clock() if now is None else now
            return sum(table.expire(now) for table in self._tables.values())

    def stick_count(self, service: str) -> int:
        with self._lock:
            return len(self._table(service))

    def table(self, service: str) -> StickTable:
        with self._lock:
            return self._table(service)

    def _table(self, service: str) -> StickTable:
        if service not in self._tables:
            self._tables[service] = StickTable(self.stick_ttl, self.stick_capacity)
        return self._tables[service]

    def _on_registry_event(self, service: str, replica_id: str, event: str) -> None:
        with self._lock:
            if event == HEALTH_HEALTHY:
                self._suspects.discard(replica_id)
            elif event in (HEALTH_STOPPED, EVENT_DEREGISTERED):
                self._suspects.discard(replica_id)
                for table in self._tables.values():
                    table.invalidate_replica(replica_id)


class BalancerServer:
    """Listener-per-service data plane in front of a Balancer."""

    def __init__(self, balancer: Balancer, bind_address: str,
                 require_proxy_header: bool = False):
        self.balancer = balancer
        self.bind_address = bind_address
        self.require_proxy_header = require_proxy_header
        self._listeners: dict[str, TcpListener] = {}
        self._lock = threading.Lock()

    def bind_service(self, service: str, port: int) -> None:
        with self._lock:
            existing = self._listeners.get(service)
            if existing is not None:
                if existing.port == port:
                    return
                existing.close()

            def handler(conn: socket.socket, peer: tuple,
                        service: str = service) -> None:
                self._handle(service, conn, peer)

            self._listeners[service] = TcpListener(self.bind_address, port, handler)

    def unbind_service(self, service: str) -> None:
        with self._lock:
            listener = self._listeners.pop(service, None)
        if listener is not None:
            listener.close()

    def ports(self) -> dict[str, int]:
        with self._lock:
            return {service: listener.port
                    for service, listener in self._listeners.items()}

    def close(self) -> None:
        with self._lock:
            listeners = list(self._listeners.values())
            self._listeners.clear()
        for listener in listeners:
            listener.close()

    def _handle(self, service: str, conn: socket.socket, peer: tuple) -> None:
        source_ip = peer[0]
        leftover = b""
        if self.require_proxy_header:
            try:
                line, leftover = read_line(conn, limit=PROXY_HEADER_LIMIT)
                source_ip = parse_proxy_header(line)
            except ValueError:
                return  # listener closes the connection
        try:
            _, upstream = self.balancer.connect_upstream(service, source_ip)
        except NoHealthyReplicasError:
            return
        if leftover:
            upstream.sendall(leftover)
        relay(conn, upstream)
