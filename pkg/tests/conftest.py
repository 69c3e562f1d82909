import pytest
import torch
from hypothesis import settings

from styledraw.encoders import stub_encoders
from styledraw.raster import render
from styledraw.stroke_model import Drawing, StrokePath

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def encoders():
    return stub_encoders()


def zigzag_style(size: int = 64):
    """Three bold black zigzags on white."""
    strokes = tuple(
        StrokePath(((0.1, y), (0.4, y + 0.1), (0.6, y - 0.1), (0.9, y)), (0, 0, 0), 1.0, 4.0)
        for y in (0.2, 0.5, 0.8)
    )
    return render(Drawing(strokes, size, size)).detach()


@pytest.fixture(scope="session")
def style_image():
    return zigzag_style()


@pytest.fixture
def textured():
    g = torch.Generator().manual_seed(0)
    return torch.rand(16, 16, 3, generator=g, dtype=torch.float64)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
