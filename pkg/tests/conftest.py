import numpy as np
import pytest

from fedwarm import datahub
from fedwarm.datahub import ClientDataset, LabeledDataset
from fedwarm.numkit import derive_stream


@pytest.fixture
def rng():
    return derive_stream(1234, ("tests",))


@pytest.fixture
def blobs():
    """Standardized 4-class Gaussian mixture in 2-d, 40 samples per class."""
    data = datahub.gen_gaussian_mixture(4, 40, 2, 0.6, derive_stream(5, ("blobs",)))
    return datahub.standardize(data)


def quadratic_clients(centers, session=0):
    """One client per center, each holding that single point."""
    centers = np.asarray(centers, dtype=np.float64)
    parent = LabeledDataset(centers, np.zeros(len(centers), dtype=np.int64), 1, "centers")
    return parent, [ClientDataset(k, [k], session, parent) for k in range(len(centers))]


def small_config(**overrides):
    """A quick A/B/A-style Gaussian run: 6 classes, 3 per session, session 3 repeats session 1."""
    from fedwarm.config import parse_config

    base = dict(
        dataset_name="gaussian", num_classes=6, per_class=60, num_clients=5, num_sessions=4,
        num_sessions_pilot=1, num_rounds_actual=6, labels_per_session=3, session_recurrence="3:1",
        num_SGD_training="3", batch_size_training=8, num_SGD_grad_cal="3", batch_size_grad_cal=8,
        lr=0.1, seed=0,
    )
    base.update(overrides)
    return parse_config(base)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
