import pytest

from tloc.domain import partition_by_serving
from tloc.synth import WorldConfig, synthesize, twin_config, twin_scenario


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(seed=7, extent=(1200.0, 1200.0), n_stations=8, p0=10.0, eta=4.0, sigma=3.0,
                      n_devices=20, sessions=2, duration_s=300.0)
    world, samples = synthesize(cfg)
    return world, samples


@pytest.fixture(scope="session")
def small_domains(small_world):
    world, samples = small_world
    return partition_by_serving(samples, world.registry())


@pytest.fixture(scope="session")
def twin():
    sc = twin_scenario(twin_config(5, n_devices=40))
    return sc, partition_by_serving(sc.samples, sc.registry())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
