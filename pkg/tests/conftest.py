from __future__ import annotations

import pytest

from oddvlm.taxonomy import mapillary_taxonomy, reference_road_context, reference_taxonomy


@pytest.fixture(scope="session")
def taxonomy():
    return reference_taxonomy()


@pytest.fixture(scope="session")
def road_table(taxonomy):
    return reference_road_context(taxonomy)


@pytest.fixture(scope="session")
def street_taxonomy():
    return mapillary_taxonomy()


_CRITERIA: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            _CRITERIA.append((value, "PASS" if report.passed else "FAIL"))


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _CRITERIA:
        terminalreporter.write_line(f"{outcome}  {name}")
