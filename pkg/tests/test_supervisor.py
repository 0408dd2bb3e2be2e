"""Supervisor reconciliation, probing, scaling, and rolling updates."""

from __future__ import annotations

import socket
import threading

import pytest

from flagforge._net import TcpListener
from flagforge.errors import PortExhaustedError, UnknownServiceError
from flagforge.model import ChallengeSpec, ProbeSpec
from flagforge.registry import (
    EVENT_DEREGISTERED,
    HEALTH_HEALTHY,
    HEALTH_UNHEALTHY,
    Registry,
)
from flagforge.runner import MockRunner
from flagforge.supervisor import PortAllocator, Supervisor, TcpProber


class FakeClock:
    def __init__(self, start: float = 1000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, dt: float) -> None:
        self.now += dt


class FakeProber:
    """Reports a port healthy iff the mock runner's handle on it is running."""

    def __init__(self, runner: MockRunner):
        self.runner = runner
        self.port_overrides: dict[int, bool] = {}

    def probe(self, address: str, port: int, probe: ProbeSpec) -> bool:
        if port in self.port_overrides:
            return self.port_overrides[port]
        return any(h.port == port and h.running
                   for h in self.runner.handles.values())


def make_spec(name: str = "web", version: str = "v1",
              replicas: int = 3) -> ChallengeSpec:
    return ChallengeSpec(
        name=name, version=version, replica_count=replicas, internal_port=7000,
        external_port=9001, backend="worker", run_command="serve {PORT}",
        probe=ProbeSpec())


def build(replicas: int = 3):
    registry = Registry()
    registry.create_service("web", "net-web")
    runner = MockRunner()
    allocator = PortAllocator((20000, 20099))
    clock = FakeClock()
    supervisor = Supervisor(
        "worker", "127.0.0.1", registry, runner, allocator,
        prober=FakeProber(runner), clock=clock,
        sleep=lambda s: clock.advance(s), startup_grace=5.0)
    supervisor.set_desired(make_spec(replicas=replicas))
    return supervisor, runner, registry, clock


def replica_ids(supervisor: Supervisor, service: str = "web") -> list[str]:
    return [i.replica_id for i in supervisor.instances_of(service)]


def test_reconcile_from_zero():
    supervisor, runner, registry, _ = build(replicas=3)
    actions = supervisor.reconcile("web")
    # oracle: desired slots minus observed slots
    assert len([a for a in actions if a.startswith("spawn")]) == 3
    assert len(supervisor.instances_of("web")) == 3
    assert len(registry.service("web").replicas) == 3


def test_reconcile_fixed_point():
    supervisor, _, _, _ = build()
    supervisor.reconcile("web")
    assert supervisor.reconcile("web") == []


def test_probe_marks_healthy():
    supervisor, _, registry, _ = build()
    supervisor.reconcile("web")
    supervisor.probe_all()
    assert all(r.health == HEALTH_HEALTHY
               for r in registry.service("web").replicas)


def test_dead_replica_replaced():
    supervisor, runner, registry, _ = build()
    supervisor.reconcile("web")
    supervisor.probe_all()
    victim = replica_ids(supervisor)[0]
    runner.kill(victim)
    actions = supervisor.reconcile("web")
    assert actions[0] == f"stop {victim} (dead)"
    assert len([a for a in actions if a.startswith("spawn")]) == 1
    survivors = replica_ids(supervisor)
    assert victim not in survivors and len(survivors) == 3
    replacement = next(i for i in supervisor.instances_of("web")
                       if i.restarts == 1)
    assert replacement.replica_id != victim


def test_unhealthy_replica_replaced():
    supervisor, runner, registry, clock = build()
    supervisor.reconcile("web")
    supervisor.probe_all()
    target = supervisor.instances_of("web")[1]
    supervisor.prober.port_overrides[target.port] = False
    clock.advance(60)  # past the startup grace
    supervisor.probe_all()
    assert registry.health_of(target.replica_id) == HEALTH_UNHEALTHY
    actions = supervisor.reconcile("web")
    assert f"stop {target.replica_id} (unhealthy)" in actions
    assert len(supervisor.instances_of("web")) == 3


def test_starting_grace_shields_fresh_replicas():
    supervisor, runner, _, clock = build(replicas=1)
    supervisor.reconcile("web")
    instance = supervisor.instances_of("web")[0]
    supervisor.prober.port_overrides[instance.port] = False
    supervisor.probe_all()  # within grace: stays starting, not replaced
    assert supervisor.reconcile("web") == []
    clock.advance(60)
    supervisor.probe_all()
    assert supervisor.reconcile("web") != []


def test_scale_up_spawns_difference():
    supervisor, _, _, _ = build(replicas=1)
    supervisor.reconcile("web")
    supervisor.scale("web", 3)
    actions = supervisor.reconcile("web")
    assert len(actions) == 2 and all(a.startswith("spawn") for a in actions)
    assert supervisor.scale("web", 3) is None
    assert supervisor.reconcile("web") == []


def test_scale_down_stops_newest_first():
    supervisor, _, _, clock = build(replicas=1)
    supervisor.reconcile("web")
    oldest = replica_ids(supervisor)[0]
    clock.advance(10)
    supervisor.scale("web", 2)
    supervisor.reconcile("web")
    clock.advance(10)
    supervisor.scale("web", 3)
    supervisor.reconcile("web")
    by_age = supervisor.instances_of("web")  # sorted oldest first
    supervisor.scale("web", 1)
    actions = supervisor.reconcile("web")
    assert actions == [f"stop {by_age[2].replica_id} (scale-down)",
                       f"stop {by_age[1].replica_id} (scale-down)"]
    assert replica_ids(supervisor) == [oldest]


def test_scale_down_tie_break_by_replica_id():
    supervisor, _, _, _ = build(replicas=3)
    supervisor.reconcile("web")  # all three share one started_at tick
    ids = sorted(replica_ids(supervisor))
    supervisor.scale("web", 2)
    actions = supervisor.reconcile("web")
    assert actions == [f"stop {ids[0]} (scale-down)"]


def test_scale_validation():
    supervisor, _, _, _ = build()
    with pytest.raises(ValueError):
        supervisor.scale("web", 0)
    with pytest.raises(UnknownServiceError):
        supervisor.scale("ghost", 2)


def test_spawn_failure_marks_degraded_then_heals():
    supervisor, runner, _, _ = build(replicas=2)
    runner.fail_spawns = 10
    actions = supervisor.reconcile("web")
    assert supervisor.degraded == {"web"}
    assert any(a.startswith("degraded:") for a in actions)
    runner.fail_spawns = 0
    supervisor.reconcile("web")
    assert supervisor.degraded == set()
    assert len(supervisor.instances_of("web")) == 2


def test_spawn_retries_within_budget():
    supervisor, runner, _, _ = build(replicas=1)
    runner.fail_spawns = 2  # third attempt succeeds
    supervisor.reconcile("web")
    assert supervisor.degraded == set()
    assert len(supervisor.instances_of("web")) == 1


def test_rolling_update_replaces_all_one_at_a_time():
    supervisor, runner, registry, _ = build(replicas=3)
    supervisor.reconcile("web")
    supervisor.probe_all()
    old_ids = set(replica_ids(supervisor))
    deregistered: list[str] = []
    registry.add_listener(
        lambda service, rid, event:
        deregistered.append(rid) if event == EVENT_DEREGISTERED else None)
    runner.events.clear()
    report = supervisor.rolling_update("web", make_spec(version="v2"))
    assert report.completed and report.replaced == 3
    versions = {i.endpoint.version for i in supervisor.instances_of("web")}
    assert versions == {"v2"}
    assert set(replica_ids(supervisor)).isdisjoint(old_ids)
    # every stopped replica's stick pins were invalidated at its stop
    assert set(deregistered) == old_ids
    # availability floor: never fewer than replica_count - 1 running
    running, floor = 3, 3
    for event in runner.events:
        if event[0] == "spawn":
            running += 1
        elif event[0] == "stop":
            running -= 1
        floor = min(floor, running)
    assert floor == 2


def test_rolling_update_identical_spec_is_noop():
    supervisor, _, _, _ = build()
    supervisor.reconcile("web")
    report = supervisor.rolling_update("web", make_spec(version="v1"))
    assert report.completed and report.steps == []


def test_rolling_update_aborts_on_broken_version():
    supervisor, runner, _, clock = build(replicas=3)
    supervisor.reconcile("web")
    supervisor.probe_all()
    runner.dead_versions.add("v2")  # new binary exits immediately
    report = supervisor.rolling_update("web", make_spec(version="v2"),
                                       timeout=0.5)
    assert not report.completed
    assert [s.outcome for s in report.steps] == ["failed"]
    # oracle: surviving old-version instances
    survivors = supervisor.instances_of("web")
    assert len(survivors) == 2
    assert all(i.endpoint.version == "v1" for i in survivors)
    assert supervisor.desired_spec("web").version == "v1"  # reverted
    assert supervisor.degraded == {"web"}
    # the reconcile loop heals the lost slot with the old version
    supervisor.reconcile("web")
    assert len(supervisor.instances_of("web")) == 3
    assert {i.endpoint.version for i in supervisor.instances_of("web")} == {"v1"}


def test_adopt_snapshot_round_trip():
    supervisor, runner, _, _ = build(replicas=2)
    supervisor.reconcile("web")
    records = supervisor.snapshot()
    assert len(records) == 2
    assert {r["service"] for r in records} == {"web"}

    registry2 = Registry()
    registry2.create_service("web", "net-web")
    runner2 = MockRunner(adoptable_pids={r["pid"] for r in records})
    clock = FakeClock()
    supervisor2 = Supervisor(
        "worker", "127.0.0.1", registry2, runner2, PortAllocator((20000, 20099)),
        prober=FakeProber(runner2), clock=clock, sleep=lambda s: None,
        startup_grace=5.0)
    supervisor2.set_desired(make_spec(replicas=2))
    supervisor2.adopt("web", records)
    assert supervisor2.reconcile("web") == []  # adopted pids count as alive
    assert sorted(replica_ids(supervisor2)) == sorted(r["replica_id"]
                                                      for r in records)
    # an adopted pid that is gone gets replaced
    runner2.adoptable_pids.discard(records[0]["pid"])
    actions = supervisor2.reconcile("web")
    assert actions[0].startswith(f"stop {records[0]['replica_id']}")
    assert len(supervisor2.instances_of("web")) == 2


def test_stop_all_clears_everything():
    supervisor, _, registry, _ = build()
    supervisor.reconcile("web")
    supervisor.stop_all()
    assert supervisor.instances_of("web") == []
    assert registry.service("web").replicas == []


def test_port_allocator():
    allocator = PortAllocator((20000, 20002))
    assert [allocator.allocate() for _ in range(3)] == [20000, 20001, 20002]
    with pytest.raises(PortExhaustedError):
        allocator.allocate()
    allocator.release(20001)
    assert allocator.allocate() == 20001
    allocator.reserve(20000)  # idempotent with an existing reservation
    allocator.release(20000)
    assert allocator.allocate() == 20000


# --- TCP prober against real sockets -----------------------------------------


def greeting_listener(greeting: bytes) -> TcpListener:
    def handler(conn: socket.socket, peer) -> None:
        conn.sendall(greeting)

    return TcpListener("127.0.0.1", 0, handler)


def test_tcp_probe_connect_only():
    listener = greeting_listener(b"")
    try:
        assert TcpProber(timeout=2.0).probe("127.0.0.1", listener.port,
                                            ProbeSpec()) is True
    finally:
        listener.close()


def test_tcp_probe_banner_match_and_mismatch():
    prober = TcpProber(timeout=2.0)
    listener = greeting_listener(b"FLAGD v1\n")
    try:
        assert prober.probe("127.0.0.1", listener.port,
                            ProbeSpec(banner="FLAGD")) is True
        assert prober.probe("127.0.0.1", listener.port,
                            ProbeSpec(banner="HTTP/1.1")) is False
        # greeting shorter than the expected prefix
        assert prober.probe("127.0.0.1", listener.port,
                            ProbeSpec(banner="FLAGD v1 and more")) is False
    finally:
        listener.close()


def test_tcp_probe_closed_port():
    placeholder = socket.socket()
    placeholder.bind(("127.0.0.1", 0))
    port = placeholder.getsockname()[1]
    placeholder.close()
    assert TcpProber(timeout=0.5).probe("127.0.0.1", port, ProbeSpec()) is False
