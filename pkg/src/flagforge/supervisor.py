"""Replica supervision for one backend node.

Keeps every service at its desired replica count, probes health, replaces
failed replicas, applies scale changes, and performs one-at-a-time rolling
updates. All mutating entry points serialize on one lock, so the supervisor
behaves as a single control actor per node; only the prober and runner do
real I/O.
"""

from __future__ import annotations

import secrets
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .errors import (PortExhaustedError, SpawnError, UnknownReplicaError,
                     UnknownServiceError)
from .model import ChallengeSpec, ProbeSpec
from .registry import (
    HEALTH_HEALTHY,
    HEALTH_STARTING,
    HEALTH_STOPPED,
    HEALTH_UNHEALTHY,
    Registry,
    ReplicaEndpoint,
)
from .runner import RunnerBackend

PROBE_TIMEOUT = 2.0
BANNER_READ_LIMIT = 64
SPAWN_RETRIES = 3
SPAWN_BACKOFF = 1.0
STARTUP_GRACE = 10.0


class PortAllocator:
    """Hands out ports from an inclusive range, lowest free first."""

    def __init__(self, port_range: tuple[int, int]):
        self._lo, self._hi = port_range
        self._in_use: set[int] = set()
        self._lock = threading.Lock()

    def allocate(self) -> int:
        with self._lock:
            for port in range(self._lo, self._hi + 1):
                if port not in self._in_use:
                    self._in_use.add(port)
                    return port
        raise PortExhaustedError(f"no free port in {self._lo}-{self._hi}")

    def reserve(self, port: int) -> None:
        with self._lock:
            self._in_use.add(port)

    def release(self, port: int) -> None:
        with self._lock:
            self._in_use.discard(port)


class Prober(Protocol):
    def probe(self, address: str, port: int, probe: ProbeSpec) -> bool: ...


class TcpProber:
    """TCP-connect health check with an optional expected banner prefix."""

    def __init__(self, timeout: float = PROBE_TIMEOUT):
        self.timeout = timeout

    def probe(self, address: str, port: int, probe: ProbeSpec) -> bool:
        try:
            with socket.create_connection((address, port), timeout=self.timeout) as sock:
                if probe.banner is None:
                    return True
                expected = probe.banner.encode()
                sock.settimeout(self.timeout)
                buf = b""
                while len(buf) < min(BANNER_READ_LIMIT, len(expected)):
                    chunk = sock.recv(BANNER_READ_LIMIT - len(buf))
                    if not chunk:
                        break
                    buf += chunk
                return buf[:BANNER_READ_LIMIT].startswith(expected)
        except OSError:
            return False


@dataclass
class ReplicaInstance:
    endpoint: ReplicaEndpoint
    spec_name: str
    handle: object
    started_at: float
    restarts: int = 0

    @property
    def replica_id(self) -> str:
        return self.endpoint.replica_id

    @property
    def port(self) -> int:
        return self.endpoint.port


@dataclass
class UpdateStep:
    stopped: str
    started: str | None
    outcome: str  # ok | failed
    detail: str = ""


@dataclass
class UpdateReport:
    service: str
    steps: list[UpdateStep] = field(default_factory=list)
    completed: bool = True

    @property
    def replaced(self) -> int:
        return sum(1 for s in self.steps if s.outcome == "ok")


class Supervisor:
    def __init__(self, node_id: str, bind_address: str, registry: Registry,
                 runner: RunnerBackend, allocator: PortAllocator,
                 prober: Prober | None = None,
                 clock: Callable[[], float] = time.time,
                 sleep: Callable[[float], None] = time.sleep,
                 startup_grace: float = STARTUP_GRACE):
        self.node_id = node_id
        self.bind_address = bind_address
        self.registry = registry
        self.runner = runner
        self.allocator = allocator
        self.prober = prober or TcpProber()
        self.clock = clock
        self.sleep = sleep
        self.startup_grace = startup_grace
        self.degraded: set[str] = set()
        self.on_change: Callable[[], None] | None = None
        self._desired: dict[str, ChallengeSpec] = {}
        self._counts: dict[str, int] = {}
        self._instances: dict[str, ReplicaInstance] = {}
        self._lock = threading.RLock()

    # --- desired state ----------------------------------------------------

    def set_desired(self, spec: ChallengeSpec, count: int | None = None) -> None:
        with self._lock:
            self._desired[spec.name] = spec
            self._counts[spec.name] = count if count is not None else spec.replica_count

    def drop_desired(self, service: str) -> None:
        with self._lock:
            self._desired.pop(service, None)
            self._counts.pop(service, None)
            self.degraded.discard(service)

    def desired_spec(self, service: str) -> ChallengeSpec:
        with self._lock:
            spec = self._desired.get(service)
            if spec is None:
                raise UnknownServiceError(f"unknown service {service!r}")
            return spec

    def desired_count(self, service: str) -> int:
        with self._lock:
            if service not in self._counts:
                raise UnknownServiceError(f"unknown service {service!r}")
            return self._counts[service]

    def scale(self, service: str, count: int) -> None:
        if count < 1:
            raise ValueError("replica count must be at least 1; remove the"
                             " challenge from the topology instead")
        with self._lock:
            self.desired_spec(service)
            self._counts[service] = count
        self._changed()

    def services(self) -> list[str]:
        with self._lock:
            return sorted(self._desired)

    def instances_of(self, service: str) -> list[ReplicaInstance]:
        with self._lock:
            out = [i for i in self._instances.values() if i.spec_name == service]
            out.sort(key=lambda i: (i.started_at, i.replica_id))
            return out

    def adopt(self, service: str, records: list[dict]) -> None:
        """Rebuild instances recorded by a previous process (pid-based handles)."""
        with self._lock:
            for record in records:
                self.allocator.reserve(record["port"])
                endpoint = ReplicaEndpoint(
                    replica_id=record["replica_id"], address=self.bind_address,
                    port=record["port"], version=record["version"],
                    health=HEALTH_STARTING)
                self.registry.register_replica(service, endpoint)
                self._instances[endpoint.replica_id] = ReplicaInstance(
                    endpoint=endpoint, spec_name=service,
                    handle=self.runner.adopt(record["pid"]),
                    started_at=record.get("started_at", self.clock()),
                    restarts=record.get("restarts", 0))

    def snapshot(self) -> list[dict]:
        """Persistable view of running instances."""
        with self._lock:
            out = []
            for instance in self._instances.values():
                pid = getattr(instance.handle, "pid", 0)
                out.append({
                    "replica_id": instance.replica_id,
                    "service": instance.spec_name,
                    "pid": pid,
                    "port": instance.port,
                    "version": instance.endpoint.version,
                    "started_at": instance.started_at,
                    "restarts": instance.restarts,
                })
            out.sort(key=lambda r: r["replica_id"])
            return out

    # --- reconciliation -----------------------------------------------------

    def reconcile(self, service: str) -> list[str]:
        """Converge one service to its desired count; returns actions taken."""
        with self._lock:
            spec = self.desired_spec(service)
            want = self._counts[service]
            actions: list[str] = []
            restarts = 0
            for instance in self.instances_of(service):
                dead = not self.runner.alive(instance.handle)
                failed = instance.endpoint.health == HEALTH_UNHEALTHY
                if dead or failed:
                    reason = "dead" if dead else "unhealthy"
                    restarts = max(restarts, instance.restarts + 1)
                    self._stop_instance(instance)
                    actions.append(f"stop {instance.replica_id} ({reason})")
            alive = self.instances_of(service)
            excess = len(alive) - want
            if excess > 0:
                # victims: newest first, replica_id ascending as the tie-break
                victims = sorted(alive, key=lambda i: (-i.started_at, i.replica_id))
                for instance in victims[:excess]:
                    self._stop_instance(instance)
                    actions.append(f"stop {instance.replica_id} (scale-down)")
            missing = want - len(self.instances_of(service))
            for _ in range(max(0, missing)):
                try:
                    instance = self._spawn(service, spec, restarts)
                except (SpawnError, PortExhaustedError) as exc:
                    self.degraded.add(service)
                    actions.append(f"degraded: {exc}")
                    break
                actions.append(f"spawn {instance.replica_id}")
            else:
                if len(self.instances_of(service)) == want:
                    self.degraded.discard(service)
        if actions:
            self._changed()
        return actions

    def start_one(self, service: str) -> ReplicaInstance:
        """Spawn a single replica of a desired service (one converge step)."""
        with self._lock:
            spec = self.desired_spec(service)
            instance = self._spawn(service, spec, 0)
        self._changed()
        return instance

    def stop_one(self, service: str) -> str:
        """Stop the newest instance of a service (one converge step)."""
        with self._lock:
            instances = self.instances_of(service)
            if not instances:
                raise UnknownReplicaError(f"no running replicas of {service!r}")
            victim = sorted(instances,
                            key=lambda i: (-i.started_at, i.replica_id))[0]
            self._stop_instance(victim)
        self._changed()
        return victim.replica_id

    def reconcile_all(self) -> dict[str, list[str]]:
        with self._lock:
            services = self.services()
        report = {}
        for service in services:
            actions = self.reconcile(service)
            if actions:
                report[service] = actions
        return report

    def probe_all(self, now: float | None = None) -> None:
        with self._lock:
            now = self.clock() if now is None else now
            for instance in list(self._instances.values()):
                spec = self._desired.get(instance.spec_name)
                probe = spec.probe if spec is not None else ProbeSpec()
                up = self.prober.probe(instance.endpoint.address, instance.port,
                                       probe)
                if up:
                    self.registry.mark_health(instance.replica_id, HEALTH_HEALTHY)
                elif (instance.endpoint.health == HEALTH_STARTING
                      and now - instance.started_at < self.startup_grace):
                    continue  # still booting; give it its grace period
                else:
                    self.registry.mark_health(instance.replica_id, HEALTH_UNHEALTHY)

    # --- rolling update ------------------------------------------------------

    def rolling_update(self, service: str, new_spec: ChallengeSpec,
                       timeout: float = 30.0) -> UpdateReport:
        """Replace replicas one at a time; abort on first failed replacement."""
        with self._lock:
            old_spec = self.desired_spec(service)
            instances = self.instances_of(service)
            if new_spec == old_spec and all(
                    i.endpoint.version == new_spec.version for i in instances):
                return UpdateReport(service=service, steps=[], completed=True)
            self._desired[service] = new_spec
            report = UpdateReport(service=service)
            for old in instances:  # oldest first
                old_id = old.replica_id
                self._stop_instance(old)
                try:
                    fresh = self._spawn(service, new_spec, old.restarts + 1)
                except (SpawnError, PortExhaustedError) as exc:
                    report.steps.append(UpdateStep(old_id, None, "failed", str(exc)))
                    return self._abort_update(service, old_spec, report)
                if not self._wait_healthy(fresh, new_spec, timeout):
                    self._stop_instance(fresh)
                    report.steps.append(UpdateStep(
                        old_id, fresh.replica_id, "failed",
                        f"not healthy within {timeout:g}s"))
                    return self._abort_update(service, old_spec, report)
                report.steps.append(UpdateStep(old_id, fresh.replica_id, "ok"))
        self._changed()
        return report

    def _abort_update(self, service: str, old_spec: ChallengeSpec,
                      report: UpdateReport) -> UpdateReport:
        # keep remaining old replicas untouched; desired reverts so the
        # reconcile loop heals the lost slot with the old version
        self._desired[service] = old_spec
        self.degraded.add(service)
        report.completed = False
        self._changed()
        return report

    def _wait_healthy(self, instance: ReplicaInstance, spec: ChallengeSpec,
                      timeout: float) -> bool:
        deadline = self.clock() + timeout
        while True:
            if not self.runner.alive(instance.handle):
                return False
            if self.prober.probe(instance.endpoint.address, instance.port,
                                 spec.probe):
                self.registry.mark_health(instance.replica_id, HEALTH_HEALTHY)
                return True
            if self.clock() >= deadline:
                return False
            self.sleep(0.05)

    # --- shutdown ------------------------------------------------------------

    def stop_all(self) -> None:
        with self._lock:
            for instance in list(self._instances.values()):
                self._stop_instance(instance)
        self._changed()

    # --- internals ------------------------------------------------------------

    def _spawn(self, service: str, spec: ChallengeSpec,
               restarts: int) -> ReplicaInstance:
        last_error: Exception | None = None
        for attempt in range(SPAWN_RETRIES):
            if attempt:
                self.sleep(SPAWN_BACKOFF)
            port = self.allocator.allocate()
            replica_id = f"{service}-{secrets.token_hex(4)}"
            try:
                handle = self.runner.spawn(spec, port, replica_id)
            except SpawnError as exc:
                self.allocator.release(port)
                last_error = exc
                continue
            endpoint = ReplicaEndpoint(
                replica_id=replica_id, address=self.bind_address, port=port,
                version=spec.version, health=HEALTH_STARTING)
            self.registry.register_replica(service, endpoint)
            instance = ReplicaInstance(endpoint=endpoint, spec_name=service,
                                       handle=handle, started_at=self.clock(),
                                       restarts=restarts)
            self._instances[replica_id] = instance
            return instance
        raise SpawnError(f"spawn of {service} failed after {SPAWN_RETRIES}"
                         f" attempts: {last_error}")

    def _stop_instance(self, instance: ReplicaInstance) -> None:
        self.runner.stop(instance.handle)
        self.registry.mark_health(instance.replica_id, HEALTH_STOPPED)
        self.registry.deregister_replica(instance.replica_id)
        self.allocator.release(instance.port)
        self._instances.pop(instance.replica_id, None)

    def _changed(self) -> None:
        if self.on_change is not None:
            self.on_change()
