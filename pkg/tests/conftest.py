import numpy as np
import pytest

from dualseg.volumes import Geometry, MaskVolume, Study, Volume


def make_study(pid="P000", dims=(6, 8, 8), seed=0, label_a=None, label_b=None):
    """Small random study; labels default to a box (A) containing a smaller box (B)."""
    rng = np.random.default_rng(seed)
    g = Geometry(dims)
    ct = rng.uniform(-1000, 2000, dims)
    pet = rng.uniform(0, 10, dims)
    if label_b is None:
        label_b = np.zeros(dims, np.uint8)
        label_b[2:4, 3:5, 3:5] = 1
    if label_a is None:
        label_a = np.zeros(dims, np.uint8)
        label_a[1:5, 2:6, 2:6] = 1
        label_a |= label_b
    return Study(pid, Volume(ct, g, "CT"), Volume(pet, g, "PET"), MaskVolume(label_a, g, "A"), MaskVolume(label_b, g, "B"))


@pytest.fixture
def study():
    return make_study()


# -- acceptance verdicts ----------------------------------------------------------

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def criterion(request):
    """Record (and print) one pass/fail line for an acceptance criterion."""
    verdicts = request.config.stash[_VERDICTS]

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        verdicts[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
