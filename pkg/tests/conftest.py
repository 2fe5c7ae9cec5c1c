import os
from pathlib import Path

import numpy as np
import pytest

from dcbrs.core import Instance

REPO = Path(__file__).resolve().parent.parent


def data_root() -> Path:
    return Path(os.environ.get("DCBRS_DATA", REPO / "data"))


def dataset_dir(name: str) -> Path:
    return data_root() / name


def have_dataset(name: str) -> bool:
    d = dataset_dir(name)
    return all((d / f"{s}-{p}-ubyte").exists()
               for s in ("train", "t10k") for p in ("images-idx3", "labels-idx1"))


def requires_dataset(name: str):
    return pytest.mark.skipif(not have_dataset(name),
                              reason=f"{name} IDX files not found under {dataset_dir(name)}")


def make_instance(i: int, label: int, sub_label=None, features=None) -> Instance:
    if features is None:
        features = np.zeros(1, dtype=np.float32)
    return Instance(i, np.asarray(features, dtype=np.float32), label, sub_label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
