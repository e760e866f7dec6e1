import functools

import pytest

ACCEPTANCE_LINES = pytest.StashKey[list]()

from icnn_mpc import simulator as sim
from icnn_mpc.features import build_features, resample
from icnn_mpc.training import fit_model


@functools.lru_cache(maxsize=None)
def year_records(seed=1):
    """One year of randomly excited operation on the default room."""
    weather = sim.make_weather(366, start="2021-01-01", seed=seed)
    return sim.generate_dataset(sim.RoomModel(), weather, controller="random", steps=365 * 72, seed=seed)


@functools.lru_cache(maxsize=None)
def trained_pair(family, seed=1):
    """Fine (20 min) and coarse (180 min) models of ``family`` with the tuned settings."""
    rec = year_records(seed)
    fine, _ = fit_model(family, build_features(rec, "20min"))
    coarse, _ = fit_model(family, build_features(resample(rec, "180min"), "180min"))
    return fine, coarse


@pytest.fixture(scope="session")
def records_year():
    return year_records()


@pytest.fixture(scope="session")
def models():
    return trained_pair


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(n, passed, detail):
        line = f"ACCEPTANCE {n}: {'PASS' if passed else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
