import os

import numpy as np
import pytest
import torch

from tumorsynth.phantom import PhantomSpec, generate_dataset
from tumorsynth.volume import Grid

torch.set_num_threads(int(os.environ.get("TUMORSYNTH_THREADS", "1")))
torch.use_deterministic_algorithms(True)


SMALL_SPEC = PhantomSpec(grid=Grid((24, 24, 24)), organ_count=2, lesion_radius_range_mm=(2.0, 2.5), seed=5)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six 24^3 phantoms (4 train / 2 val) shared by the fast model tests."""
    root = tmp_path_factory.mktemp("small_ds")
    return generate_dataset(4, 2, SMALL_SPEC, root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- one pass/fail line per acceptance criterion -----------------------------

_ACCEPTANCE = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE[number] = (title, passed, detail)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
