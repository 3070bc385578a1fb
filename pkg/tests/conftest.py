import pytest

from cpseg.data.synth import generate_dataset
from cpseg.data.taxonomy import default_taxonomy


@pytest.fixture(scope="session")
def taxonomy():
    return default_taxonomy()


@pytest.fixture(scope="session")
def scenes(taxonomy):
    """Forty 64x64 scenes shared by the read-only tests."""
    return generate_dataset(40, 11, taxonomy=taxonomy)


TINY_SPEC = dict(trees=(1, 3), tree_radius=(1, 3), buildings=(1, 2), building_size=(3, 5), pools=(0, 1),
                 pool_size=(2, 3), vehicles=(0, 1), vehicle_size=(1, 2), water_radius=(2, 4), road_width=(1, 2))
TINY_MODEL = dict(dim=8, text_layers=1, vision_layers=1, heads=2, pool_size=4, pool_top_k=2, max_len=12)


@pytest.fixture(scope="session")
def tiny_scenes(taxonomy):
    """Twelve 16x16 scenes for fast training tests."""
    from cpseg.data.synth import SceneSpec
    return generate_dataset(12, 5, (16, 16), spec=SceneSpec(**TINY_SPEC), taxonomy=taxonomy)


@pytest.fixture
def tiny_config():
    from cpseg.config import TrainConfig
    return TrainConfig(epochs=2, batch_size=4, **TINY_MODEL)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
