import pytest

from helpers import CORRIDOR_GENERAL, CORRIDOR_SPECIFIC

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corridor_kb():
    from hpomdp.kbmodel import parse_kb
    return parse_kb(CORRIDOR_GENERAL, CORRIDOR_SPECIFIC)


@pytest.fixture(scope="session")
def corridor(corridor_kb):
    """(kb, bottom POMDP, SST, neighbor index) of the corridor."""
    from hpomdp.grounding import build_bottom, neighbor_pairs_bottom
    from hpomdp.hierarchy import build_sst, lift_neighbors
    bp = build_bottom(corridor_kb)
    sst = build_sst(corridor_kb, bp)
    return corridor_kb, bp, sst, lift_neighbors(sst, neighbor_pairs_bottom(corridor_kb, bp))


@pytest.fixture(scope="session")
def corridor_hierarchy(corridor):
    from hpomdp.hierarchy import build_hierarchy
    _, bp, sst, nb = corridor
    return build_hierarchy(bp, sst, nb)


@pytest.fixture(scope="session")
def small_setup():
    """Benchmark world with 2x2-cell buildings of one room and one section."""
    from hpomdp.navbench import EnvConfig, build_setup
    return build_setup(EnvConfig(2, 1, 1, kernel_sigma=0.3))


@pytest.fixture(scope="session")
def default_setup():
    from hpomdp.navbench import EnvConfig, build_setup
    return build_setup(EnvConfig())
