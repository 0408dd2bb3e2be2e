"""Shared fixtures: handing out bindable loopback ports."""

from __future__ import annotations

import socket
import sys

import pytest

# 24000-25899: below the fixed blocks the CLI and acceptance tests carve out
_counter = [24000]


@pytest.fixture
def free_port():
    """Callable giving loopback ports that are bindable right now."""

    def get() -> int:
        while True:
            port = _counter[0]
            _counter[0] += 1
            if _counter[0] >= 25900:
                _counter[0] = 24000
            with socket.socket() as probe:
                try:
                    probe.bind(("127.0.0.1", port))
                except OSError:
                    continue
                return port

    return get


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines where capture cannot hide them."""
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance")
    for line in verdicts:
        terminalreporter.write_line(line)
