"""Mapping generation, persistence, and the frontend forwarding path."""

from __future__ import annotations

import socket

import pytest

from flagforge._net import TcpListener, parse_proxy_header, read_line
from flagforge.errors import IngressError
from flagforge.ingress import (
    IngressServer,
    MappingTable,
    PortMapping,
    generate_mappings,
    load_mappings,
    parse_mappings,
    save_mappings,
    serialize_mappings,
)
from flagforge.model import parse_topology

NODES = """
node edge role=frontend bind=127.0.0.1 ports=9000-9999
node worker role=backend bind=127.0.0.1 ports=20000-20999
"""

TWO = NODES + """
challenge beta version=v1 replicas=1 internal_port=1 external_port=9002 backend=worker run="b {PORT}" probe=tcp
challenge alpha version=v1 replicas=1 internal_port=1 external_port=9001 backend=worker run="a {PORT}" probe=tcp
"""

PORTS = {"worker": {"alpha": 20000, "beta": 20001}}


def balancer_stub(name: str) -> TcpListener:
    """Backend-side stand-in: consumes PROXY4, answers `<name> <ip>`, echoes."""

    def handler(conn: socket.socket, peer) -> None:
        try:
            line, leftover = read_line(conn, 64)
            ip = parse_proxy_header(line)
        except ValueError:
            return
        conn.sendall(f"{name} {ip}\n".encode())
        if leftover:
            conn.sendall(leftover)
        while True:
            data = conn.recv(65536)
            if not data:
                return
            conn.sendall(data)

    return TcpListener("127.0.0.1", 0, handler)


def read_line_from(sock: socket.socket) -> str:
    buf = b""
    while not buf.endswith(b"\n"):
        chunk = sock.recv(64)
        if not chunk:
            raise AssertionError(f"closed early, got {buf!r}")
        buf += chunk
    return buf.decode().strip()


def table_for(port: int, backend_port: int, challenge: str = "alpha",
              generation: int = 0) -> MappingTable:
    return MappingTable((PortMapping(port, challenge, "worker", "127.0.0.1",
                                     backend_port),), generation)


# --- generation ----------------------------------------------------------------


def test_generate_empty_topology():
    table, skipped = generate_mappings(parse_topology(NODES), {})
    assert len(table) == 0 and skipped == []
    assert serialize_mappings(table) == ""


def test_generate_sorted_by_external_port():
    table, skipped = generate_mappings(parse_topology(TWO), PORTS)
    assert [m.external_port for m in table] == [9001, 9002]
    assert [m.challenge for m in table] == ["alpha", "beta"]
    assert skipped == []


def test_generate_twice_byte_identical():
    topology = parse_topology(TWO)
    first, _ = generate_mappings(topology, PORTS)
    second, _ = generate_mappings(topology, PORTS)
    assert serialize_mappings(first) == serialize_mappings(second)


def test_generate_skips_unbound_challenge():
    table, skipped = generate_mappings(
        parse_topology(TWO), {"worker": {"alpha": 20000}})
    assert [m.challenge for m in table] == ["alpha"]
    assert skipped == ["beta: no balancer port bound on worker"]


# --- persistence ----------------------------------------------------------------


def test_line_format_exact():
    table, _ = generate_mappings(parse_topology(TWO), PORTS)
    assert serialize_mappings(table) == (
        "9001 alpha worker 127.0.0.1:20000\n"
        "9002 beta worker 127.0.0.1:20001\n")


def test_parse_round_trip_and_sorting():
    text = "9002 beta worker 127.0.0.1:20001\n9001 alpha worker 127.0.0.1:20000\n"
    table = parse_mappings(text)
    assert [m.external_port for m in table] == [9001, 9002]
    assert serialize_mappings(parse_mappings(serialize_mappings(table))) \
        == serialize_mappings(table)


@pytest.mark.parametrize("line", [
    "9001 alpha worker\n",
    "9001 alpha worker 127.0.0.1\n",
    "9001 alpha worker 127.0.0.1:notaport\n",
    "900000 alpha worker 127.0.0.1:20000\n",
    "9001 alpha worker 999.0.0.1:20000\n",
])
def test_parse_malformed_lines(line):
    with pytest.raises(IngressError, match="line 1"):
        parse_mappings(line)


def test_save_load_round_trip(tmp_path):
    table, _ = generate_mappings(parse_topology(TWO), PORTS)
    path = tmp_path / "state" / "ingress.map"
    save_mappings(table, path)
    loaded = load_mappings(path)
    assert loaded.mappings == table.mappings
    save_mappings(loaded, path)
    assert path.read_text() == serialize_mappings(table)
    assert load_mappings(tmp_path / "absent.map") == MappingTable()


# --- forwarding -------------------------------------------------------------------


@pytest.fixture
def server():
    ingress = IngressServer("127.0.0.1", connect_timeout=2.0)
    yield ingress
    ingress.close()


def test_forward_end_to_end(server, free_port):
    stub = balancer_stub("A")
    external = free_port()
    try:
        report = server.apply_table(table_for(external, stub.port))
        assert report == [(external, "bound")]
        with socket.create_connection(("127.0.0.1", external), timeout=5) as sock:
            assert read_line_from(sock) == "A 127.0.0.1"
            sock.sendall(b"marco")
            assert sock.recv(64) == b"marco"
    finally:
        stub.close()


def test_unmapped_port_refused(server, free_port):
    with pytest.raises(ConnectionRefusedError):
        socket.create_connection(("127.0.0.1", free_port()), timeout=2)


def test_backend_unreachable_closes_inbound(server, free_port):
    external = free_port()
    dead_backend = free_port()  # nothing listens there
    server.apply_table(table_for(external, dead_backend))
    with socket.create_connection(("127.0.0.1", external), timeout=5) as sock:
        assert sock.recv(64) == b""


def test_restart_reproduces_listeners(tmp_path, free_port):
    stub = balancer_stub("A")
    external = free_port()
    path = tmp_path / "ingress.map"
    table = table_for(external, stub.port)
    save_mappings(table, path)

    first = IngressServer("127.0.0.1")
    first.apply_table(load_mappings(path))
    ports_before = first.bound_ports()
    first.close()

    second = IngressServer("127.0.0.1")
    try:
        second.apply_table(load_mappings(path))
        assert second.bound_ports() == ports_before == [external]
        with socket.create_connection(("127.0.0.1", external), timeout=5) as sock:
            assert read_line_from(sock) == "A 127.0.0.1"
    finally:
        second.close()
        stub.close()


def test_swap_lets_inflight_connections_drain(server, free_port):
    stub_a, stub_b = balancer_stub("A"), balancer_stub("B")
    external = free_port()
    try:
        server.apply_table(table_for(external, stub_a.port))
        held = socket.create_connection(("127.0.0.1", external), timeout=5)
        assert read_line_from(held) == "A 127.0.0.1"

        report = server.apply_table(
            table_for(external, stub_b.port, challenge="alpha", generation=1))
        assert report == [(external, "updated")]
        # the held connection keeps working against the old target
        held.sendall(b"still-here")
        assert held.recv(64) == b"still-here"
        held.close()
        # new connections reach the new target
        with socket.create_connection(("127.0.0.1", external), timeout=5) as sock:
            assert read_line_from(sock) == "B 127.0.0.1"
    finally:
        stub_a.close()
        stub_b.close()


def test_apply_empty_closes_listeners(server, free_port):
    stub = balancer_stub("A")
    external = free_port()
    try:
        server.apply_table(table_for(external, stub.port))
        assert server.bound_ports() == [external]
        report = server.apply_table(MappingTable())
        assert report == [(external, "closed")]
        assert server.bound_ports() == []
        with pytest.raises(ConnectionRefusedError):
            socket.create_connection(("127.0.0.1", external), timeout=2)
    finally:
        stub.close()


def test_foreign_bind_failure_is_isolated(server, free_port):
    stub = balancer_stub("A")
    ok_port, stolen_port = free_port(), free_port()
    squatter = socket.socket()
    squatter.bind(("127.0.0.1", stolen_port))
    squatter.listen(1)
    try:
        table = MappingTable((
            PortMapping(ok_port, "alpha", "worker", "127.0.0.1", stub.port),
            PortMapping(stolen_port, "beta", "worker", "127.0.0.1", stub.port),
        ))
        report = dict(server.apply_table(table))
        assert report[ok_port] == "bound"
        assert report[stolen_port].startswith("failed:")
        with socket.create_connection(("127.0.0.1", ok_port), timeout=5) as sock:
            assert read_line_from(sock) == "A 127.0.0.1"
    finally:
        squatter.close()
        stub.close()


def test_ports_stay_isolated(server, free_port):
    stub_a, stub_b = balancer_stub("A"), balancer_stub("B")
    port_a, port_b = free_port(), free_port()
    try:
        server.apply_table(MappingTable((
            PortMapping(port_a, "alpha", "worker", "127.0.0.1", stub_a.port),
            PortMapping(port_b, "beta", "worker", "127.0.0.1", stub_b.port),
        )))
        for _ in range(10):
            with socket.create_connection(("127.0.0.1", port_a), timeout=5) as sock:
                assert read_line_from(sock).startswith("A ")
            with socket.create_connection(("127.0.0.1", port_b), timeout=5) as sock:
                assert read_line_from(sock).startswith("B ")
    finally:
        stub_a.close()
        stub_b.close()
