import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartgen.exceptions import NoDrivableAreaError, ValidationError
from smartgen.geometry import (AgentState, Polyline, Pose2, check_map_topology, compose_arrays, inverse_arrays,
                               obb_intersects, se2_compose, se2_inverse, se2_relative, signed_corridor_distance,
                               transform_points, wrap_angle)

coord = st.floats(-1e3, 1e3, allow_nan=False)
angle = st.floats(-10.0, 10.0, allow_nan=False)
poses = st.builds(Pose2, coord, coord, angle)


def close(a: Pose2, b: Pose2, tol=1e-12):
    return (abs(a.x - b.x) < tol * max(1, abs(a.x)) and abs(a.y - b.y) < tol * max(1, abs(a.y))
            and abs(wrap_angle(a.yaw - b.yaw)) < tol)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_compose_identity_and_example():
    p = Pose2(1.5, -2.0, 0.3)
    assert close(se2_compose(Pose2(), p), p)
    q = se2_compose(Pose2(1, 0, math.pi / 2), Pose2(1, 0, 0))
    assert (q.x, q.y, q.yaw) == pytest.approx((1.0, 1.0, math.pi / 2), abs=1e-12)


def test_compose_inverse_is_identity():
    a = Pose2(3.0, -7.0, 2.5)
    r = se2_compose(a, se2_inverse(a))
    assert abs(r.x) < 1e-12 and abs(r.y) < 1e-12 and abs(r.yaw) < 1e-12


def test_pose_rejects_non_finite():
    with pytest.raises(ValidationError):
        Pose2(float("nan"), 0, 0)


@settings(max_examples=60, deadline=None)
@given(poses, poses, poses)
def test_group_laws(a, b, c):
    assert close(se2_compose(se2_compose(a, b), c), se2_compose(a, se2_compose(b, c)), 1e-9)
    assert close(se2_compose(se2_inverse(a), a), Pose2(), 1e-9)


def test_relative_examples():
    r = se2_relative(Pose2(2, 3, 1), Pose2(2, 3, 1))
    assert (r.dist, r.bearing, r.dyaw) == (0.0, 0.0, 0.0)
    r = se2_relative(Pose2(0, 0, 0), Pose2(1, 1, 0))
    assert r.dist == pytest.approx(math.sqrt(2), abs=1e-12)
    assert r.bearing == pytest.approx(math.pi / 4, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(poses, poses, poses)
def test_relative_frame_invariance(q, k, t):
    a = se2_relative(q, k)
    b = se2_relative(se2_compose(t, q), se2_compose(t, k))
    assert abs(a.dist - b.dist) < 1e-9 * max(1, a.dist)
    assert abs(wrap_angle(a.dyaw - b.dyaw)) < 1e-9
    if a.dist > 1e-6:
        assert abs(wrap_angle(a.bearing - b.bearing)) < 1e-6


def test_array_ops_match_scalar(rng):
    a = rng.normal(size=(20, 3)) * [10, 10, 2]
    b = rng.normal(size=(20, 3)) * [10, 10, 2]
    c = compose_arrays(a, b)
    for i in range(20):
        s = se2_compose(Pose2.from_array(a[i]), Pose2.from_array(b[i]))
        assert np.allclose(c[i], [s.x, s.y, s.yaw], atol=1e-12)
    assert np.allclose(compose_arrays(a, inverse_arrays(a)), 0, atol=1e-12)


def box(x, y=0.0, yaw=0.0, length=4.0, width=2.0):
    return AgentState(Pose2(x, y, yaw), length=length, width=width)


def test_obb_examples():
    assert obb_intersects(box(0), box(0))
    assert not obb_intersects(box(0, length=1, width=1), box(10, length=1, width=1))
    assert obb_intersects(box(0), box(3.9))
    assert not obb_intersects(box(0), box(4.1))


def test_obb_rotated_cases():
    # a box rotated 45 degrees reaches sqrt(2) * 1.5 along x
    assert obb_intersects(box(0, length=3, width=3, yaw=math.pi / 4), box(3.5, length=3, width=3))
    assert not obb_intersects(box(0, length=3, width=3, yaw=math.pi / 4), box(3.7, length=3, width=3))


@settings(max_examples=80, deadline=None)
@given(poses, poses, st.floats(0.5, 6), st.floats(0.5, 3))
def test_obb_symmetric(p, q, L, W):
    a = AgentState(Pose2(p.x / 100, p.y / 100, p.yaw), length=L, width=W)
    b = AgentState(Pose2(q.x / 100, q.y / 100, q.yaw), length=W + 1, width=L)
    assert obb_intersects(a, b) == obb_intersects(b, a)


def lane(points=((0, 0), (50, 0)), width=4.0, pid="l0"):
    return Polyline(pid, np.array(points, float), "lane", width)


def test_corridor_examples():
    m = [lane()]
    assert signed_corridor_distance((10, 0), m) == pytest.approx(-2.0, abs=1e-9)
    assert signed_corridor_distance((10, 3), m) == pytest.approx(1.0, abs=1e-9)
    assert abs(signed_corridor_distance((10, 2), m)) < 1e-9


def test_corridor_needs_lane():
    with pytest.raises(NoDrivableAreaError, match="no drivable area"):
        signed_corridor_distance((0, 0), [])
    with pytest.raises(NoDrivableAreaError):
        signed_corridor_distance((0, 0), [Polyline("e", [[0, 0], [1, 0]], "road_edge")])


@settings(max_examples=40, deadline=None)
@given(poses, st.floats(-10, 60), st.floats(-8, 8))
def test_corridor_rigid_invariance(t, px, py):
    m = [lane(((0, 0), (20, 0), (40, 10)))]
    tm = [Polyline("l0", transform_points(t, m[0].points), "lane", 4.0)]
    a = signed_corridor_distance((px, py), m)
    b = signed_corridor_distance(transform_points(t, np.array([px, py])), tm)
    assert abs(a - b) < 1e-9 * max(1.0, abs(t.x) + abs(t.y))


def test_polyline_validation():
    with pytest.raises(ValidationError):
        Polyline("a", [[0, 0]])
    with pytest.raises(ValidationError):
        Polyline("a", [[0, 0], [0, 0], [1, 0]])


def test_topology_rejects_cycles_and_dangling():
    a = Polyline("a", [[0, 0], [1, 0]], successor_ids=("b",))
    b = Polyline("b", [[1, 0], [2, 0]], successor_ids=("a",))
    with pytest.raises(ValidationError, match="cycle"):
        check_map_topology([a, b])
    with pytest.raises(ValidationError, match="unknown successor"):
        check_map_topology([Polyline("c", [[0, 0], [1, 0]], successor_ids=("zz",))])
