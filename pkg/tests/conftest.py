import numpy as np
import pytest

from taskseg.annotations import ClassTable, PanopticLabel, Segment


@pytest.fixture(scope="session")
def classes() -> ClassTable:
    return ClassTable.from_pairs([("car", True), ("person", True), ("road", False), ("sky", False)])


@pytest.fixture
def two_car_label() -> PanopticLabel:
    """car#1 and car#2 on a road, top rows unlabeled."""
    seg = np.zeros((8, 8), dtype=np.int64)
    seg[2:, :] = 3
    seg[3:5, 1:3] = 1
    seg[5:7, 5:8] = 2
    return PanopticLabel(seg, [Segment(1, 0, True), Segment(2, 0, True), Segment(3, 2, False)])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
