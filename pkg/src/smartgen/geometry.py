"""SE(2) poses, oriented-box collision and drivable-corridor distance.

Scalar helpers operate on :class:`Pose2`; the ``*_arrays`` variants take
``[..., 3]`` float arrays laid out as ``(x, y, yaw)`` and are what the
tokenizers, the model and the metrics use in bulk.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import LineString
from shapely.ops import unary_union

from .exceptions import NoDrivableAreaError, ValidationError

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angles to (-pi, pi]. Works on floats and arrays."""
    if isinstance(a, np.ndarray):
        w = math.pi - np.mod(math.pi - a, TWO_PI)
        return np.where(w <= -math.pi, w + TWO_PI, w)
    w = math.pi - math.fmod(math.fmod(math.pi - a, TWO_PI) + TWO_PI, TWO_PI)
    return w + TWO_PI if w <= -math.pi else w


class AgentClass(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"

    @property
    def index(self) -> int:
        return AGENT_CLASSES.index(self)


AGENT_CLASSES = (AgentClass.VEHICLE, AgentClass.PEDESTRIAN, AgentClass.CYCLIST)


class PolylineKind(str, enum.Enum):
    LANE = "lane"
    ROAD_EDGE = "road_edge"
    CROSSWALK = "crosswalk"

    @property
    def index(self) -> int:
        return list(PolylineKind).index(self)


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.yaw)):
            raise ValidationError(f"non-finite pose {self.x, self.y, self.yaw}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class RelPose:
    dist: float
    bearing: float
    dyaw: float


@dataclass(frozen=True)
class AgentState:
    pose: Pose2
    speed: float = 0.0
    valid: bool = True
    length: float = 4.5
    width: float = 2.0
    agent_class: AgentClass = AgentClass.VEHICLE

    def __post_init__(self):
        if self.valid and not (self.length > 0 and self.width > 0):
            raise ValidationError("valid agent state needs positive length and width")


def se2_compose(a: Pose2, b: Pose2) -> Pose2:
    """Apply ``b`` expressed in ``a``'s frame."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def se2_inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(-(c * a.x + s * a.y), s * a.x - c * a.y, -a.yaw)


def se2_relative(query: Pose2, key: Pose2) -> RelPose:
    """Distance, bearing (in the query frame) and heading offset of ``key``."""
    c, s = math.cos(query.yaw), math.sin(query.yaw)
    dx, dy = key.x - query.x, key.y - query.y
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    return RelPose(math.hypot(lx, ly), math.atan2(ly, lx), wrap_angle(key.yaw - query.yaw))


# -- array versions ---------------------------------------------------------

def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    y = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    return np.stack([x, y, wrap_angle(a[..., 2] + b[..., 2])], axis=-1)


def inverse_arrays(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    return np.stack([-(c * a[..., 0] + s * a[..., 1]), s * a[..., 0] - c * a[..., 1],
                     wrap_angle(-a[..., 2])], axis=-1)


def to_local_arrays(frame: np.ndarray, poses: np.ndarray) -> np.ndarray:
    """Express ``poses`` in ``frame`` (broadcasting), i.e. ``inverse(frame) o poses``."""
    frame = np.asarray(frame, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.float64)
    c, s = np.cos(frame[..., 2]), np.sin(frame[..., 2])
    dx = poses[..., 0] - frame[..., 0]
    dy = poses[..., 1] - frame[..., 1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy,
                     wrap_angle(poses[..., 2] - frame[..., 2])], axis=-1)


def relative_arrays(query: np.ndarray, key: np.ndarray) -> np.ndarray:
    """``[..., 3]`` array of (dist, bearing, dyaw), broadcasting query against key."""
    local = to_local_arrays(query, key)
    dist = np.hypot(local[..., 0], local[..., 1])
    bearing = np.arctan2(local[..., 1], local[..., 0])
    return np.stack([dist, bearing, local[..., 2]], axis=-1)


def apply_rigid(transform: Pose2, poses: np.ndarray) -> np.ndarray:
    return compose_arrays(transform.as_array(), poses)


def transform_points(transform: Pose2, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    c, s = math.cos(transform.yaw), math.sin(transform.yaw)
    x = transform.x + c * points[..., 0] - s * points[..., 1]
    y = transform.y + s * points[..., 0] + c * points[..., 1]
    return np.stack([x, y], axis=-1)


# -- oriented boxes ---------------------------------------------------------

def obb_intersects_arrays(pose_a, dims_a, pose_b, dims_b) -> np.ndarray:
    """Separating-axis overlap test for oriented rectangles.

    ``dims`` are ``(length, width)``. Touching boxes do not count as overlapping.
    """
    pose_a, pose_b = np.asarray(pose_a, float), np.asarray(pose_b, float)
    dims_a, dims_b = np.asarray(dims_a, float), np.asarray(dims_b, float)
    ha = np.stack([np.cos(pose_a[..., 2]), np.sin(pose_a[..., 2])], -1)
    hb = np.stack([np.cos(pose_b[..., 2]), np.sin(pose_b[..., 2])], -1)
    na = np.stack([-ha[..., 1], ha[..., 0]], -1)
    nb = np.stack([-hb[..., 1], hb[..., 0]], -1)
    d = pose_b[..., :2] - pose_a[..., :2]
    overlap = np.ones(np.broadcast_shapes(d.shape[:-1], dims_a.shape[:-1], dims_b.shape[:-1]), bool)
    for axis in (ha, na, hb, nb):
        ra = 0.5 * dims_a[..., 0] * np.abs(np.sum(axis * ha, -1)) + 0.5 * dims_a[..., 1] * np.abs(np.sum(axis * na, -1))
        rb = 0.5 * dims_b[..., 0] * np.abs(np.sum(axis * hb, -1)) + 0.5 * dims_b[..., 1] * np.abs(np.sum(axis * nb, -1))
        overlap &= np.abs(np.sum(axis * d, -1)) < ra + rb
    return overlap


def obb_intersects(a: AgentState, b: AgentState) -> bool:
    return bool(obb_intersects_arrays(a.pose.as_array(), [a.length, a.width],
                                      b.pose.as_array(), [b.length, b.width]))


def box_support(yaw, dims, direction) -> np.ndarray:
    """Half-extent of a box along unit ``direction`` (support function)."""
    h = np.stack([np.cos(yaw), np.sin(yaw)], -1)
    n = np.stack([-h[..., 1], h[..., 0]], -1)
    dims = np.asarray(dims, float)
    return 0.5 * dims[..., 0] * np.abs(np.sum(direction * h, -1)) + 0.5 * dims[..., 1] * np.abs(np.sum(direction * n, -1))


# -- map --------------------------------------------------------------------

@dataclass
class Polyline:
    id: str
    points: np.ndarray
    kind: PolylineKind = PolylineKind.LANE
    lane_width: float = 4.0
    successor_ids: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.id = str(self.id)
        self.points = np.asarray(self.points, dtype=np.float64)
        self.kind = PolylineKind(self.kind)
        self.successor_ids = tuple(str(s) for s in self.successor_ids)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise ValidationError(f"polyline {self.id}: need >= 2 points of shape (P, 2)")
        if np.any(np.all(np.diff(self.points, axis=0) == 0.0, axis=1)):
            raise ValidationError(f"polyline {self.id}: consecutive points must be distinct")

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


def check_map_topology(polylines: Sequence[Polyline]) -> None:
    """Raise if successor ids are dangling or the successor graph has a cycle."""
    ids = {p.id: p for p in polylines}
    if len(ids) != len(polylines):
        raise ValidationError("duplicate polyline ids")
    for p in polylines:
        for s in p.successor_ids:
            if s not in ids:
                raise ValidationError(f"polyline {p.id}: unknown successor {s}")
    state = {}

    def visit(pid):
        state[pid] = 1
        for s in ids[pid].successor_ids:
            if state.get(s) == 1:
                raise ValidationError(f"successor cycle through {s}")
            if s not in state:
                visit(s)
        state[pid] = 2

    for pid in ids:
        if pid not in state:
            visit(pid)


class Corridor:
    """Drivable area as the union of lane bands (centerline +- lane_width / 2)."""

    def __init__(self, polylines: Sequence[Polyline]):
        lanes = [p for p in polylines if p.kind == PolylineKind.LANE]
        if not lanes:
            raise NoDrivableAreaError()
        bands = [LineString(p.points).buffer(0.5 * p.lane_width, cap_style="flat", join_style="round")
                 for p in lanes]
        self.area = unary_union(bands)
        self.boundary = self.area.boundary
        shapely.prepare(self.area)

    def signed_distance(self, points) -> np.ndarray:
        """Negative inside, positive outside; magnitude is distance to the boundary."""
        points = np.asarray(points, dtype=np.float64)
        flat = points.reshape(-1, 2)
        pts = shapely.points(flat)
        inside = shapely.contains_xy(self.area, flat[:, 0], flat[:, 1])
        dist = shapely.distance(self.boundary, pts)
        return np.where(inside, -dist, dist).reshape(points.shape[:-1])


def signed_corridor_distance(point, polylines: Sequence[Polyline]) -> float:
    return float(Corridor(polylines).signed_distance(np.asarray(point, float)[None])[0])


# -- scenario containers ----------------------------------------------------

@dataclass
class Track:
    """One agent sampled at a fixed rate; ``states`` rows are (x, y, yaw)."""

    id: str
    agent_class: AgentClass
    length: float
    width: float
    states: np.ndarray
    valid: np.ndarray
    speed: np.ndarray | None = None

    def __post_init__(self):
        self.id = str(self.id)
        self.agent_class = AgentClass(self.agent_class)
        self.states = np.asarray(self.states, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.states.ndim != 2 or self.states.shape[1] != 3:
            raise ValidationError(f"track {self.id}: states must be (S, 3)")
        if self.valid.shape != (len(self.states),):
            raise ValidationError(f"track {self.id}: valid mask length mismatch")
        if not np.all(np.isfinite(self.states[self.valid])):
            raise ValidationError(f"track {self.id}: non-finite valid states")
        self.states[:, 2] = wrap_angle(self.states[:, 2])
        if self.speed is None:
            self.speed = finite_difference_speed(self.states, self.valid)
        else:
            self.speed = np.asarray(self.speed, dtype=np.float64)

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width])

    def state(self, i: int) -> AgentState:
        return AgentState(Pose2.from_array(self.states[i]), float(self.speed[i]), bool(self.valid[i]),
                          self.length, self.width, self.agent_class)

    def __len__(self):
        return len(self.states)


def finite_difference_speed(states: np.ndarray, valid: np.ndarray, dt: float = 0.1) -> np.ndarray:
    speed = np.zeros(len(states))
    if len(states) < 2:
        return speed
    step = np.linalg.norm(np.diff(states[:, :2], axis=0), axis=1) / dt
    ok = valid[1:] & valid[:-1]
    speed[1:] = np.where(ok, step, 0.0)
    speed[0] = speed[1] if ok[0] else 0.0
    return speed


@dataclass
class Scenario:
    map: list
    tracks: list
    history_steps: int
    future_steps: int
    dt: float = 0.1
    scenario_id: str = ""

    def __post_init__(self):
        n = self.history_steps + self.future_steps
        for t in self.tracks:
            if len(t) != n:
                raise ValidationError(f"track {t.id}: length {len(t)} != history+future {n}")
            if not t.valid.any():
                raise ValidationError(f"track {t.id}: no valid state")

    @property
    def n_steps(self) -> int:
        return self.history_steps + self.future_steps

    def transformed(self, transform: Pose2) -> "Scenario":
        """Copy with one rigid transform applied to map and tracks."""
        polylines = [Polyline(p.id, transform_points(transform, p.points), p.kind, p.lane_width, p.successor_ids)
                     for p in self.map]
        tracks = [Track(t.id, t.agent_class, t.length, t.width, apply_rigid(transform, t.states),
                        t.valid.copy(), t.speed.copy()) for t in self.tracks]
        return Scenario(polylines, tracks, self.history_steps, self.future_steps, self.dt, self.scenario_id)
