from contextlib import contextmanager

import pytest

from emeralds.pipeline import load_config
from emeralds.synthetic import write_phantom_dataset

# (status, criterion, detail) for every acceptance criterion that ran
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Context manager that logs one PASS/FAIL line for an acceptance criterion."""

    @contextmanager
    def check(name):
        detail = {}
        try:
            yield detail
        except BaseException:
            ACCEPTANCE_LINES.append(("FAIL", name, detail.get("msg", "")))
            raise
        ACCEPTANCE_LINES.append(("PASS", name, detail.get("msg", "")))

    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, msg in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{msg}]" if msg else ""))


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    """Twelve imaged scans plus 2,000 annotation-only nodules."""
    root = tmp_path_factory.mktemp("phantom")
    write_phantom_dataset(root, n_scans=12, nodules_per_scan=6, seed=1, annotation_only=2000)
    return root


@pytest.fixture
def small_cfg(small_phantom, tmp_path):
    def make(**overrides):
        base = dict(scans_dir=small_phantom / "scans", masks_dir=small_phantom / "masks",
                    annotations=small_phantom / "annotations.csv", out_dir=tmp_path / "out")
        base.update(overrides)
        return load_config(None, **base)
    return make
