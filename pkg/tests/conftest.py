import pytest

from xspeech.llm_client import LLMClient, RetryPolicy
from xspeech.mockserver import MockServer


@pytest.fixture
def serve():
    """Factory: start a mock server for a script dict; stopped at teardown."""
    servers = []

    def start(script):
        server = MockServer(script).start()
        servers.append(server)
        return server

    yield start
    for s in servers:
        s.stop()


@pytest.fixture
def client():
    delays = []
    c = LLMClient(RetryPolicy(max_attempts=5, base_delay=0.001, max_delay=0.01), sleep=delays.append)
    c.delays = delays
    yield c
    c.close()


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if rep.passed else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  criterion {name}")
