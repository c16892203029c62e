import numpy as np
import pytest

from grayboxid.ssmodel import fixtures


@pytest.fixture(scope="session")
def fx():
    return fixtures()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_structure(rng, n=2, m=1, p=1, q=2):
    from grayboxid.ssmodel import ParametrizedStructure

    return ParametrizedStructure(
        [rng.standard_normal((n, n)) for _ in range(q + 1)],
        [rng.standard_normal((n, m)) for _ in range(q + 1)],
        [rng.standard_normal((p, n)) for _ in range(q + 1)],
    )


def well_conditioned(rng, n, max_cond=50.0):
    while True:
        T = rng.standard_normal((n, n))
        if np.linalg.cond(T) <= max_cond:
            return T


@pytest.fixture
def report(request):
    """Record one acceptance verdict line; printed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def _report(criterion, passed, detail, soft=False):
        tag = "PASS" if passed else ("FAIL (soft, reported)" if soft else "FAIL")
        lines.append(f"[{tag}] criterion {criterion}: {detail}")
        return passed

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
