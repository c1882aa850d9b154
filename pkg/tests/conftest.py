import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from c3stability.core import SPEEDS, TERRAINS  # noqa: E402
from c3stability.simgen import CampaignEntry, SimConfig, generate_campaign  # noqa: E402


@pytest.fixture(scope="session")
def small_campaign():
    """One trial per terrain x speed class."""
    matrix = [CampaignEntry(t, v, 1) for t in TERRAINS for v in SPEEDS]
    return generate_campaign(matrix, SimConfig(seed=7, duration=8.0))


@pytest.fixture(scope="session")
def one_log(small_campaign):
    return small_campaign[-1]


@pytest.fixture(scope="session")
def default_dataset():
    """Full default campaign with grass held out, as the CLI builds it."""
    from c3stability.pipeline import build_dataset
    from c3stability.simgen import DEFAULT_MATRIX

    logs = generate_campaign(DEFAULT_MATRIX, SimConfig(seed=0))
    return build_dataset(logs, holdout_terrain="grass")


@pytest.fixture(scope="session")
def default_model(default_dataset):
    """Regressor trained with the default recipe on ``default_dataset``."""
    import numpy as np

    from c3stability.core import stack_frames
    from c3stability.model import train

    ds = default_dataset
    return train(stack_frames(ds.train), np.array([w.gt for w in ds.train]),
                 stack_frames(ds.validation), np.array([w.gt for w in ds.validation]))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
