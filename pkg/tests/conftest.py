import numpy as np
import pytest

from ondevice_ft import model as M
from ondevice_ft import simworld as W


@pytest.fixture(scope="session")
def small_trajectory():
    return W.generate_trajectory(W.TrajectoryConfig(n_states=64), np.random.default_rng(42))


@pytest.fixture(scope="session")
def small_images(small_trajectory):
    t = small_trajectory
    return W.render_batch(t.relative, t.drone[:, 3], W.TARGET_STYLE, 42)


@pytest.fixture
def small_dataset(small_trajectory, small_images):
    def make(regime="t_a", **kw):
        return W.build_dataset(small_trajectory, regime, W.NoiseModel(), W.TARGET_STYLE, 42, images=small_images, **kw)

    return make


@pytest.fixture(scope="session")
def ref_params():
    arch = M.build_reference_architecture()
    return M.init_params(arch, 7)


ACCEPTANCE: dict = {}


def record(criterion: int, title: str, ok: bool, detail: str) -> bool:
    """Store one acceptance verdict for the end-of-session summary."""
    ACCEPTANCE[criterion] = (title, bool(ok), detail)
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d} {title}: {detail}"
    print(line)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail}")
