from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dopplerloc.scenario import AnchorNode, MotionPatternSpec, Scene, WorldConfig, load_scenario

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def bundled(name: str) -> Scene:
    return load_scenario(resources.files("dopplerloc.scenarios").joinpath(name).read_text())


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def layout_scene():
    return bundled("paper_layout.yaml")


@pytest.fixture(scope="session")
def walk_scene():
    return bundled("paper_walk.yaml")


@pytest.fixture(scope="session")
def single_scene():
    return bundled("single_anchor.yaml")


def shake_spec(pattern="A_mixed", **kw) -> MotionPatternSpec:
    return MotionPatternSpec(pattern=pattern, **kw)


def anchor_at(x, y, f=19000.0, **kw) -> AnchorNode:
    return AnchorNode("S", float(x), float(y), float(f), **kw)


def rms(x) -> float:
    x = np.asarray(x, float)
    return float(np.sqrt(np.mean(x ** 2)))


_TRACK_CACHE: dict = {}


def tracking_run(duty: float, seed: int = 0, initial_error: float = 0.0):
    """Tracking experiments on the bundled walk, shared between test files.

    Returns ``(TrackingResult, seconds)``.
    """
    import time

    from dopplerloc.harness import run_tracking_experiment

    key = (float(duty), int(seed), float(initial_error))
    if key not in _TRACK_CACHE:
        t0 = time.perf_counter()
        result = run_tracking_experiment(bundled("paper_walk.yaml"), duty, initial_error, "paper-like", seed)
        _TRACK_CACHE[key] = (result, time.perf_counter() - t0)
    return _TRACK_CACHE[key]
