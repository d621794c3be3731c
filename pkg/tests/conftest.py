import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_blob_mask(rng, size=32, classes=3, density=0.35):
    """Random label mask made of small rectangles (possibly touching)."""
    h, w = (size, size) if np.isscalar(size) else size
    m = np.zeros((h, w), dtype=np.int64)
    for _ in range(int(rng.integers(0, 8))):
        bh, bw = rng.integers(1, max(2, h // 3)), rng.integers(1, max(2, w // 3))
        r, c = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        m[r:r + bh, c:c + bw] = rng.integers(1, classes)
    if rng.random() < 0.3:
        speckle = rng.random((h, w)) < density / 4
        m[speckle] = rng.integers(1, classes, size=int(speckle.sum()))
    return m


@pytest.fixture
def blob_mask():
    return random_blob_mask



ACCEPTANCE = {}


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title

    def report(self, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE[self.number] = f"criterion {self.number:2d} [{status}] {self.title}: {detail}"
        return passed


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    c = Criterion(number, title)
    yield c
    if number not in ACCEPTANCE:
        ACCEPTANCE[number] = f"criterion {number:2d} [FAIL] {title}: raised before reporting"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
