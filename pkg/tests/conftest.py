import numpy as np
import pytest

from bsrkit import models as M


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained cnn3 on 16x16 inputs; cheap enough for exhaustive checks."""
    return M.build("cnn3", (3, 16, 16), 4, seed=3)


@pytest.fixture(scope="session")
def small_set():
    from bsrkit.datasets import make_shapes
    return make_shapes(200, 4, image_size=16, seed=11, motifs=(2, 3), motif_size=(6, 9))


@pytest.fixture(scope="session")
def fitted(small_set):
    return M.ConvClassifier("cnn2", (3, 16, 16), 4, seed=0, epochs=20, lr=0.1, batch_size=8,
                             schedule="constant").fit(
        small_set.images, small_set.labels)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion; any exception marks it failed."""
    class Recorder:
        def __init__(self):
            self.number = None
            self.detail = ""

        def __call__(self, number, passed, detail):
            self.number = number
            ACCEPTANCE_LINES[number] = ("PASS" if passed else "FAIL", detail)
            assert passed, detail

    rec = Recorder()
    yield rec


def pytest_runtest_makereport(item, call):
    number = getattr(item.function, "criterion", None)
    if number is not None and call.when == "call" and call.excinfo is not None and number not in ACCEPTANCE_LINES:
        ACCEPTANCE_LINES[number] = ("FAIL", f"error: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        status, detail = ACCEPTANCE_LINES[number]
        terminalreporter.write_line(f"criterion {number}: {status} - {detail}")
