import numpy as np
import pytest

from lungwarp.imaging import Grid2D, Image2D

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_image(rng):
    """64x64 band-limited random image at 1.66 mm spacing."""
    from scipy import ndimage
    values = ndimage.gaussian_filter(rng.standard_normal((64, 64)), 2.5)
    values = (values - values.min()) / np.ptp(values)
    return Image2D(Grid2D(64, 64, 1.66), values)
