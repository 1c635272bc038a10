import numpy as np
import pytest

from chunkstream.diffusion import make_schedule
from chunkstream.videoldm import UNetConfig

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def small_cfg():
    return UNetConfig(F=4, h=4, w=4, c=2, level_channels=(4, 8), heads=2, d_text=8, groups=2, temb_dim=8)


def texture(n: int = 32) -> np.ndarray:
    """Smooth periodic texture so wrapped shifts stay smooth."""
    y, x = np.mgrid[0:n, 0:n] / n
    return 0.5 + 0.2 * np.sin(2 * np.pi * (2 * x + y)) + 0.15 * np.cos(2 * np.pi * (x - 3 * y))


def unit_shift_video(frames: int = 8, n: int = 32) -> np.ndarray:
    t = texture(n)
    return np.stack([np.roll(t, f, axis=1) for f in range(frames)])[..., None]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
