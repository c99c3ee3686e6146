from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ptinet.domain import (BoundingBox, GlobalContext, InvalidSequenceError, PastTrajectory,
                           PredictionOutput, compute_velocities, validate_sample)

from conftest import make_sample


def test_velocities_direct_difference():
    out = compute_velocities([(10, 10, 5, 5), (12, 13, 5, 5)])
    np.testing.assert_array_equal(out, [[0, 0, 0, 0], [2, 3, 0, 0]])


def test_velocities_second_example():
    out = compute_velocities([(0, 0, 1, 1), (1, 0, 2, 1), (1, 2, 2, 3)])
    np.testing.assert_array_equal(out, [[0, 0, 0, 0], [1, 0, 1, 0], [0, 2, 0, 2]])


def test_velocities_constant_sequence():
    out = compute_velocities([BoundingBox(3, 4, 5, 6)] * 5)
    assert out.shape == (5, 4)
    assert not out.any()


def test_velocities_too_short():
    with pytest.raises(InvalidSequenceError):
        compute_velocities([(1, 2, 3, 4)])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.just(4)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_velocities_integrate_back(pos):
    vel = compute_velocities(pos)
    assert not vel[0].any()
    np.testing.assert_allclose(pos[0] + np.cumsum(vel, axis=0), pos, rtol=1e-9, atol=1e-6)


def test_valid_sample_accepted(sample):
    result = validate_sample(sample, 16, 15)
    assert result.ok and result.reason is None and result


def test_flow_count_mismatch():
    s = make_sample()
    g = GlobalContext(s.global_ctx.images, np.zeros((16, 2, 8, 14), np.float32))
    assert validate_sample(replace(s, global_ctx=g), 16, 15).reason == "flow count mismatch"


def test_degenerate_box():
    s = make_sample()
    pos = s.past.positions.copy()
    pos[3, 2] = 0
    bad = replace(s, past=PastTrajectory.from_positions(pos))
    assert validate_sample(bad, 16, 15).reason == "degenerate box"


def test_inconsistent_velocity():
    s = make_sample()
    vel = s.past.velocities.copy()
    vel[4, 0] += 1
    bad = replace(s, past=PastTrajectory(s.past.positions, vel))
    assert validate_sample(bad, 16, 15).reason == "velocity inconsistent with positions"


@pytest.mark.parametrize("m,n,reason", [(12, 15, "past length mismatch"), (16, 10, "future length mismatch")])
def test_length_mismatches(m, n, reason):
    assert validate_sample(make_sample(), m, n).reason == reason


def test_non_binary_behavior():
    s = make_sample()
    beh = s.local.behavior_attrs.copy()
    beh[0, 0] = 0.5
    bad = replace(s, local=replace(s.local, behavior_attrs=beh))
    assert validate_sample(bad, 16, 15).reason == "behavior not binary"


def test_window_past_track_end():
    s = replace(make_sample(), anchor_index=30, track_length=45)
    assert validate_sample(s, 16, 15).reason == "window exceeds track"
    assert validate_sample(replace(s, track_length=46), 16, 15).ok


def test_prediction_output_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        PredictionOutput(np.zeros((3, 4)), np.array([0.1, 1.2, 0.3]))
    with pytest.raises(ValueError):
        PredictionOutput(np.zeros((3, 4)), np.array([0.1, 0.2]))


def test_corner_conversion_round_trip():
    box = BoundingBox.from_corners(10, 20, 30, 60)
    assert box == BoundingBox(20, 40, 20, 40)
    assert box.corners() == (10, 20, 30, 60)
    with pytest.raises(InvalidSequenceError):
        BoundingBox.from_corners(30, 20, 10, 60)
