import re

import numpy as np
import pytest
from hypothesis import settings, strategies as st

from owrcnn.structures import BoundingBox

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@st.composite
def boxes(draw, size=128.0, min_side=1.0):
    x1 = draw(st.floats(0, size - min_side - 1, allow_nan=False))
    y1 = draw(st.floats(0, size - min_side - 1, allow_nan=False))
    w = draw(st.floats(min_side, size - x1, allow_nan=False))
    h = draw(st.floats(min_side, size - y1, allow_nan=False))
    return BoundingBox(x1, y1, min(x1 + w, size), min(y1 + h, size))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
