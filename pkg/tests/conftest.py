import numpy as np
import pytest

from regconsist.geometry import CameraModel
from regconsist.synthworld import build_world, generate_scene


@pytest.fixture(scope="session")
def small_cam():
    return CameraModel(32.0, 32.0, 32.0, 32.0, 64, 64)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory, small_cam):
    """A 4 x 3 m room rendered at 64 x 64 from 48 grid poses."""
    out = tmp_path_factory.mktemp("world")
    return build_world(out, seed=3, n_objects=4, room_extent=(4.0, 3.0, 2.5), cam=small_cam, yaw_step=45)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(3, 4, (4.0, 3.0, 2.5))


@pytest.fixture(scope="session")
def small_frames(small_world):
    return {i: small_world.load_frame(i) for i in small_world.ids}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion: ``acceptance(n, title, ok, detail)``."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (bool(ok), title, detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title} {detail}".rstrip())
