"""Runtime record of services, their private networks, and replica endpoints.

The registry is the single authority on which replicas exist and how healthy
they are. Name resolution is cyclic: each ``resolve`` call returns the healthy
replicas left-rotated one position further than the previous call, so callers
that always pick the first entry get round-robin behavior for free.

Health values are written by the supervisor's prober only; everything else
(balancer, ingress, status) reads. Listeners are invoked outside the registry
lock, so a listener may call back into the registry or into the balancer
without deadlocking.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

from .errors import (
    DuplicateReplicaError,
    EndpointInUseError,
    NetworkInUseError,
    UnknownReplicaError,
    UnknownServiceError,
)

HEALTH_STARTING = "starting"
HEALTH_HEALTHY = "healthy"
HEALTH_UNHEALTHY = "unhealthy"
HEALTH_STOPPED = "stopped"
HEALTH_STATES = (HEALTH_STARTING, HEALTH_HEALTHY, HEALTH_UNHEALTHY, HEALTH_STOPPED)

EVENT_DEREGISTERED = "deregistered"

# listener(service_name, replica_id, event); event is a health state or
# EVENT_DEREGISTERED
Listener = Callable[[str, str, str], None]


@dataclass
class ReplicaEndpoint:
    replica_id: str
    address: str
    port: int
    version: str
    health: str = HEALTH_STARTING


@dataclass
class ServiceRecord:
    name: str
    network_id: str
    replicas: list[ReplicaEndpoint] = field(default_factory=list)
    rotation_cursor: int = 0

    def healthy(self) -> list[ReplicaEndpoint]:
        return [r for r in self.replicas if r.health == HEALTH_HEALTHY]


class Registry:
    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._services: dict[str, ServiceRecord] = {}
        self._listeners: list[Listener] = []

    # --- service lifecycle ---------------------------------------------

    def create_service(self, name: str, network_id: str) -> ServiceRecord:
        with self._lock:
            if name in self._services:
                return self._services[name]
            for record in self._services.values():
                if record.network_id == network_id:
                    raise NetworkInUseError(
                        f"network {network_id} already belongs to {record.name}")
            record = ServiceRecord(name=name, network_id=network_id)
            self._services[name] = record
            return record

    def remove_service(self, name: str) -> None:
        with self._lock:
            record = self._require_service(name)
            events = [(name, r.replica_id, EVENT_DEREGISTERED)
                      for r in record.replicas]
            del self._services[name]
        self._notify(events)

    def has_service(self, name: str) -> bool:
        with self._lock:
            return name in self._services

    def services(self) -> list[str]:
        with self._lock:
            return sorted(self._services)

    def service(self, name: str) -> ServiceRecord:
        """The live record; callers must treat it as read-only."""
        with self._lock:
            return self._require_service(name)

    # --- replica lifecycle ----------------------------------------------

    def register_replica(self, service: str, endpoint: ReplicaEndpoint) -> None:
        with self._lock:
            record = self._require_service(service)
            for other_record in self._services.values():
                for other in other_record.replicas:
                    if other.replica_id == endpoint.replica_id:
                        raise DuplicateReplicaError(
                            f"duplicate replica_id {endpoint.replica_id}")
                    if (other.health != HEALTH_STOPPED
                            and (other.address, other.port) == (endpoint.address,
                                                                endpoint.port)):
                        raise EndpointInUseError(
                            f"{endpoint.address}:{endpoint.port} already used"
                            f" by {other.replica_id}")
            record.replicas.append(endpoint)

    def deregister_replica(self, replica_id: str) -> None:
        with self._lock:
            service, record, endpoint = self._find(replica_id)
            record.replicas.remove(endpoint)
        self._notify([(service, replica_id, EVENT_DEREGISTERED)])

    def mark_health(self, replica_id: str, health: str) -> None:
        if health not in HEALTH_STATES:
            raise ValueError(f"unknown health state {health!r}")
        events = []
        with self._lock:
            service, _, endpoint = self._find(replica_id)
            if endpoint.health != health:
                endpoint.health = health
                events.append((service, replica_id, health))
        self._notify(events)

    def health_of(self, replica_id: str) -> str:
        with self._lock:
            return self._find(replica_id)[2].health

    def find_replica(self, replica_id: str) -> tuple[str, ReplicaEndpoint]:
        with self._lock:
            service, _, endpoint = self._find(replica_id)
            return service, endpoint

    # --- resolution -------------------------------------------------------

    def resolve(self, service: str) -> list[ReplicaEndpoint]:
        """Healthy replicas, rotated one step further per call (read-rotate-advance)."""
        with self._lock:
            record = self._require_service(service)
            healthy = record.healthy()
            if not healthy:
                record.rotation_cursor = 0
                return []
            rot = record.rotation_cursor % len(healthy)
            record.rotation_cursor = (rot + 1) % len(healthy)
            return healthy[rot:] + healthy[:rot]

    def healthy_replicas(self, service: str) -> list[ReplicaEndpoint]:
        """Healthy replicas in registration order; does not advance the rotation."""
        with self._lock:
            return self._require_service(service).healthy()

    def replicas_of(self, service: str) -> list[ReplicaEndpoint]:
        """All replicas in registration order, whatever their health."""
        with self._lock:
            return list(self._require_service(service).replicas)

    # --- listeners ---------------------------------------------------------

    def add_listener(self, listener: Listener) -> None:
        with self._lock:
            self._listeners.append(listener)

    def _notify(self, events: list[tuple[str, str, str]]) -> None:
        if not events:
            return
        with self._lock:
            listeners = list(self._listeners)
        for service, replica_id, event in events:
            for listener in listeners:
                listener(service, replica_id, event)

    # --- internals -----------------------------------------------------------

    def _require_service(self, name: str) -> ServiceRecord:
        record = self._services.get(name)
        if record is None:
            raise UnknownServiceError(f"unknown service {name!r}")
        return record

    def _find(self, replica_id: str) -> tuple[str, ServiceRecord, ReplicaEndpoint]:
        for name, record in self._services.items():
            for endpoint in record.replicas:
                if endpoint.replica_id == replica_id:
                    return name, record, endpoint
        raise UnknownReplicaError(f"unknown replica {replica_id!r}")
