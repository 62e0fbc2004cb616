import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from curvesplat.curves import ParametricCurve
from curvesplat.render import Camera, look_at

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

ARCH = np.array([[0.0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]])


def random_cubic(rng, scale=1.0):
    return rng.normal(size=(4, 3)) * scale


def make_curve(ctrl, cid=0, opacity=0.8, thickness=0.02, n=12, logit=2.0):
    return ParametricCurve(np.asarray(ctrl, float), opacity, thickness, np.full(n, logit), cid)


def make_camera(size=32, eye=(0.0, 0.0, -3.0), target=(0.0, 0.0, 0.0), f=None, cid=0, up=(0.0, 1.0, 0.0)):
    f = size * 1.2 if f is None else f
    return Camera(f, f, size / 2, size / 2, size, size, look_at(eye, target, up), cid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(loss, get, set_, h):
    orig = get()
    set_(orig + h)
    up = loss()
    set_(orig - h)
    down = loss()
    set_(orig)
    return (up - down) / (2 * h)


def kink_aware_fd(loss, get, set_, h=1e-6):
    """Central difference, or None when the loss has a jump within the step.

    The 3-sigma footprint cutoff makes rendered images piecewise smooth; a
    coordinate whose difference quotient changes between ``h`` and ``h / 10``
    sits on a pixel entering or leaving a footprint and has no derivative.
    """
    a = central_difference(loss, get, set_, h)
    b = central_difference(loss, get, set_, h / 10)
    if abs(a - b) > 1e-2 * max(1.0, abs(a)):
        return None
    return a


def compare_gradients(analytic, fd, max_kinks=0.05):
    """Relative error ||a - fd|| / ||fd|| over the smooth coordinates."""
    keep = np.array([v is not None for v in fd])
    assert keep.mean() >= 1.0 - max_kinks, f"{(~keep).sum()} of {keep.size} coordinates straddle a cutoff"
    a = np.asarray(analytic, float)[keep]
    f = np.array([v for v in fd if v is not None], float)
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-300))


# --- acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
