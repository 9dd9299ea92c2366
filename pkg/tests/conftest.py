import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from laserslam.sim import LidarParams, ScenarioConfig, generate_scan, lab_world, simulate_scenario

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# acceptance results: criterion number -> (passed, detail); printed at session end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def lab():
    return lab_world()


@pytest.fixture(scope="session")
def records():
    """Simulated records keyed by (scenario, sigma, seed), built on demand."""
    cache = {}

    def get(scenario, sigma=0.02, seed=1, **kw):
        key = (scenario, sigma, seed, tuple(sorted(kw.items())))
        if key not in cache:
            cache[key] = simulate_scenario(ScenarioConfig(scenario=scenario, sigma=sigma, seed=seed, **kw))
        return cache[key]
    return get


@pytest.fixture
def clean_scan(lab):
    def make(pose, sigma=0.0, seed=0):
        return generate_scan(lab, pose, LidarParams(sigma=sigma), np.random.default_rng(seed))
    return make


def rad(deg):
    return math.radians(deg)
