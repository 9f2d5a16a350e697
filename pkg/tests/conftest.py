import numpy as np
import pytest

from paseg.core import LabelMap, Sample, SampleMeta, SpectralCube, UsImage, WavelengthAxis
from paseg.phantom import AcquisitionGrid, PhantomConfig, generate_dataset


def make_sample(sid="s0", volunteer=0, site="forearm", side="left", location=0, h=4, w=4,
                channels=26, labels=None, seed=0):
    rng = np.random.default_rng(seed)
    pa = rng.random((channels, h, w)).astype(np.float32)
    us = rng.random((h, w)).astype(np.float32)
    lab = np.zeros((h, w), np.uint8) if labels is None else np.asarray(labels, np.uint8)
    return Sample(sid, SpectralCube(pa, WavelengthAxis(count=channels)), UsImage(us), LabelMap(lab),
                  SampleMeta(volunteer, site, side, location))


@pytest.fixture(scope="session")
def small_dataset():
    """3 volunteers x 3 sites x 2 sides x 1 location of 32x32 phantoms."""
    samples, _ = generate_dataset(PhantomConfig.scaled(32), AcquisitionGrid(3, n_locations=1), seed=5)
    return samples


# --- acceptance summary ---

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store the outcome of one acceptance criterion and fail the test if it is unmet."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    assert ok, f"criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
