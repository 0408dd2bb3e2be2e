"""Small TCP plumbing shared by the balancer, ingress, and test fixtures."""

from __future__ import annotations

import ipaddress
import re
import socket
import threading
from typing import Callable

RELAY_CHUNK = 65536

# wire protocol between the frontend relay and a backend balancer: the very
# first bytes of a forwarded connection carry the participant's address
PROXY_HEADER_RE = re.compile(rb"PROXY4 (\d{1,3}(?:\.\d{1,3}){3})\n\Z")
PROXY_HEADER_LIMIT = 64


def render_proxy_header(source_ip: str) -> bytes:
    return f"PROXY4 {source_ip}\n".encode()


def parse_proxy_header(line: bytes) -> str:
    """Decode `PROXY4 <dotted-quad>\\n`; raises ValueError when malformed."""
    m = PROXY_HEADER_RE.match(line)
    if not m:
        raise ValueError(f"malformed proxy header {line!r}")
    ip = m.group(1).decode()
    ipaddress.IPv4Address(ip)  # rejects out-of-range octets
    return ip


def read_line(sock: socket.socket, limit: int = 256) -> tuple[bytes, bytes]:
    """Read up to and including the first newline.

    Returns ``(line_with_newline, leftover)`` where leftover is whatever
    arrived after the newline and must be forwarded by the caller. Raises
    ValueError if the peer closes first or the limit is hit.
    """
    buf = b""
    while b"\n" not in buf:
        if len(buf) >= limit:
            raise ValueError("line too long")
        chunk = sock.recv(limit)
        if not chunk:
            raise ValueError("connection closed before newline")
        buf += chunk
    line, _, rest = buf.partition(b"\n")
    return line + b"\n", rest


def _pump(src: socket.socket, dst: socket.socket) -> None:
    try:
        while True:
            data = src.recv(RELAY_CHUNK)
            if not data:
                break
            dst.sendall(data)
    except OSError:
        pass
    finally:
        # Propagate EOF as a half-close so the opposite direction keeps flowing.
        try:
            dst.shutdown(socket.SHUT_WR)
        except OSError:
            pass


def relay(a: socket.socket, b: socket.socket) -> None:
    """Pump bytes both ways until each direction hits EOF, then close both."""
    t = threading.Thread(target=_pump, args=(b, a), daemon=True)
    t.start()
    _pump(a, b)
    t.join()
    for s in (a, b):
        try:
            s.close()
        except OSError:
            pass


class TcpListener:
    """Accept loop on one port with a daemon thread per connection.

    The handler receives ``(conn, peer_address)`` and owns the socket; it is
    closed after the handler returns in case the handler did not.
    """

    def __init__(self, address: str, port: int,
                 handler: Callable[[socket.socket, tuple], None]):
        self._handler = handler
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((address, port))
        self._sock.listen(128)
        self.address, self.port = self._sock.getsockname()[:2]
        self._thread = threading.Thread(
            target=self._accept_loop, name=f"listen-{self.port}", daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, peer = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._run_handler, args=(conn, peer),
                             daemon=True).start()

    def _run_handler(self, conn: socket.socket, peer: tuple) -> None:
        try:
            self._handler(conn, peer)
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def close(self) -> None:
        # shutdown first: close alone leaves the port alive while the accept
        # loop is blocked on it
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
