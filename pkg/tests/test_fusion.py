import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from laserslam.fusion import FusionConfig, FusionState, effective_range, fuse, fuse_trajectory
from laserslam.geom import Pose2, Trajectory
from laserslam.sim import AltSample, ImuSample

LEVEL = ImuSample(0.0, 0.0, 0.0, 0.0)


def alt(r, valid=True, saturated=False):
    return AltSample(0.0, r, valid, saturated)


@pytest.mark.parametrize("cfg, want", [
    (FusionConfig(), (0.38, 12.08)),
    (FusionConfig(sensor_offset=0.0), (0.30, 12.0)),
    (FusionConfig(sensor_offset=0.10), (0.40, 12.10)),
])
def test_effective_range(cfg, want):
    assert effective_range(cfg) == want


def test_fuse_examples():
    p = Pose2(1, 2, 0.5)
    out = fuse(p, alt(1.0), LEVEL)
    assert out.z == pytest.approx(1.08) and (out.x, out.y, out.yaw) == (1, 2, 0.5)
    s = FusionState()
    assert fuse(p, alt(0.30, saturated=True), LEVEL, state=s).z == pytest.approx(0.38)
    assert s.blind_zone and not s.stale
    tilted = fuse(p, alt(1.0), ImuSample(0.0, math.radians(60), 0.0, 0.0))
    assert tilted.z == pytest.approx(0.58)
    assert tilted.roll == pytest.approx(math.radians(60))


def test_uncompensated_mode_uses_raw_range():
    cfg = FusionConfig(tilt_compensation=False)
    assert fuse(Pose2(), alt(1.0), ImuSample(0.0, 0.5, 0.3, 0.0), cfg).z == pytest.approx(1.08)


def test_invalid_sample_holds_last_value():
    s = FusionState()
    fuse(Pose2(), alt(2.0), LEVEL, state=s)
    held = fuse(Pose2(), alt(math.nan, valid=False), LEVEL, state=s)
    assert held.z == pytest.approx(2.08) and s.stale
    assert fuse(Pose2(), None, LEVEL, state=s).z == pytest.approx(2.08)


def test_no_valid_sample_yet_sits_on_floor():
    s = FusionState()
    assert fuse(Pose2(), alt(0.0, valid=False), LEVEL, state=s).z == pytest.approx(0.38)
    assert s.stale


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(alt_min=5.0, alt_max=1.0)
    with pytest.raises(ValueError):
        FusionConfig(sensor_offset=-0.1)


@given(st.floats(0.0, 13.0), st.booleans(), st.booleans(),
       st.floats(-1.4, 1.4), st.floats(-1.4, 1.4))
def test_floor_always_holds(r, valid, saturated, roll, pitch):
    s = FusionState()
    z = fuse(Pose2(), alt(r, valid, saturated), ImuSample(0.0, roll, pitch, 0.0), state=s).z
    assert z >= 0.38 - 1e-12


@given(st.floats(0.3, 12.0))
def test_level_compensation_is_identity(r):
    on = fuse(Pose2(), alt(r), LEVEL, FusionConfig(tilt_compensation=True)).z
    off = fuse(Pose2(), alt(r), LEVEL, FusionConfig(tilt_compensation=False)).z
    assert on == off


def test_fuse_trajectory_nearest_samples():
    est = Trajectory([0.0, 0.1, 0.3], [Pose2(0, 0, 0), Pose2(0.1, 0, 0), Pose2(0.3, 0, 0)])
    alts = [AltSample(0.0, 1.0), AltSample(0.1, 0.2, True, True), AltSample(0.5, 3.0)]
    imus = [ImuSample(t, 0.0, 0.0, 0.0) for t in (0.0, 0.1, 0.3)]
    traj, flags = fuse_trajectory(est, alts, imus)
    assert np.allclose([p.z for p in traj.poses], [1.08, 0.38, 0.38])
    # nothing within one scan period of t = 0.3: the floor value is held, flagged stale
    assert flags == [(False, False), (True, False), (False, True)]
    again, _ = fuse_trajectory(est, alts, imus)
    assert again.poses == traj.poses
