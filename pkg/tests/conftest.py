import pytest

from cryptocatch.probe import ALL_VARIANTS
from cryptocatch.sim.pool import RespondError, RespondSuccess, serve_pool


@pytest.fixture(scope="session")
def pool_matrix():
    """One running simulator per (variant, success|error)."""
    servers = {}
    for v in ALL_VARIANTS:
        for b in (RespondSuccess, RespondError):
            servers[(v, b.kind)] = serve_pool(v, b)
    yield servers
    for s in servers.values():
        s.stop()


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_log.RESULTS):
        status, title, detail = acceptance_log.RESULTS[n]
        line = f"criterion {n:2d} [{status}] {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
