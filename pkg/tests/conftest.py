import numpy as np
import pytest

from gausssurf.scene_io import Camera, Scene, look_at


def random_scene(seed: int, n: int = 5, sh_coeffs: int = 1, spread: float = 0.3,
                 scale_range=(0.15, 0.4)) -> Scene:
    rng = np.random.default_rng(seed)
    return Scene(rng.normal(0.0, spread, (n, 3)),
                 np.log(rng.uniform(*scale_range, (n, 3))),
                 rng.normal(size=(n, 4)),
                 rng.uniform(-1.0, 1.5, n),
                 rng.uniform(-1.0, 1.0, (n, sh_coeffs, 3)) * 0.5)


def front_camera(size: int = 16, f: float = 20.0, dist: float = 3.0) -> Camera:
    return Camera(size, size, f, f, size / 2, size / 2, look_at([0, 0, -dist], [0, 0, 0], [0, -1, 0]))


def central_difference(fn, arr: np.ndarray, index, h: float) -> float:
    old = arr[index]
    arr[index] = old + h
    up = fn()
    arr[index] = old - h
    down = fn()
    arr[index] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, taken from the test outcomes."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            if "test_acceptance.py::test_criterion_" not in getattr(rep, "nodeid", ""):
                continue
            name = rep.nodeid.split("::")[-1][len("test_criterion_"):]
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict}  criterion {name}  {detail}".rstrip())
