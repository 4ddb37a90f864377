import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A small synthetic dataset shared across pipeline tests (24 train / 8 val at 64 px)."""
    from hmpnet.pipeline.synth import SceneSpec, synth_dataset

    root = tmp_path_factory.mktemp("tiny")
    synth_dataset(SceneSpec(seed=5, image_size=64, num_classes=3, min_scale=0.15, max_scale=0.45,
                            max_objects=3), 32, root, val_frac=0.25)
    return root


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts recorded via ``record_property("acceptance", line)``."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines.extend(v for k, v in getattr(rep, "user_properties", []) if k == "acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):  # "[ 1]" .. "[12]" sort correctly as text
            terminalreporter.write_line(line)
