"""Deterministic synthetic maps and traffic.

Vehicles follow lane centerlines with a pure-pursuit steering law and a
jerk-limited car-following speed controller; pedestrians and cyclists move
at constant speed along a lane. Every output is a pure function of its MapSpec or TrafficSpec.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import PlacementError, ValidationError
from .geometry import (AgentClass, Corridor, Polyline, Pose2, Scenario, Track, box_support,
                       check_map_topology, obb_intersects_arrays, transform_points, wrap_angle)

DT = 0.1
ACCEL_LIMIT = 4.0
JERK_LIMIT = 6.0
YAW_RATE_LIMIT = 0.8
MIN_SPAWN_GAP = 10.0

CLASS_DIMS = {
    AgentClass.VEHICLE: (4.5, 2.0),
    AgentClass.PEDESTRIAN: (0.6, 0.6),
    AgentClass.CYCLIST: (1.8, 0.7),
}
CLASS_SPEEDS = {AgentClass.PEDESTRIAN: (0.8, 1.8), AgentClass.CYCLIST: (3.0, 6.0)}


@dataclass
class MapSpec:
    kind: str = "straight"
    n_lanes: int = 2
    lane_width: float = 4.0
    arc_radius: float = 40.0
    length: float = 100.0
    seed: int = 0

    def validate(self):
        if self.kind not in ("straight", "arc", "intersection"):
            raise ValidationError(f"MapSpec.kind: unknown kind {self.kind!r}")
        if self.n_lanes < 1:
            raise ValidationError("MapSpec.n_lanes must be >= 1")
        if self.lane_width <= 0 or self.length <= 0:
            raise ValidationError("MapSpec.lane_width and length must be positive")
        if self.kind == "arc" and not self.arc_radius > 2 * self.lane_width:
            raise ValidationError("MapSpec.arc_radius must exceed 2 * lane_width")


@dataclass
class TrafficSpec:
    n_agents: int = 6
    speed_range: tuple = (4.0, 14.0)
    horizon_steps: int = 91
    history_steps: int = 11
    lane_change_prob: float = 0.2
    class_weights: tuple = (1.0, 0.0, 0.0)
    seed: int = 0

    def validate(self):
        lo, hi = self.speed_range
        if self.n_agents < 1:
            raise ValidationError("TrafficSpec.n_agents must be >= 1")
        if not (0.0 <= lo <= hi <= 30.0):
            raise ValidationError("TrafficSpec.speed_range must lie within [0, 30]")
        if not (0 < self.history_steps < self.horizon_steps):
            raise ValidationError("TrafficSpec.history_steps must be in (0, horizon_steps)")
        if not 0.0 <= self.lane_change_prob <= 1.0:
            raise ValidationError("TrafficSpec.lane_change_prob must be a probability")


# -- maps -------------------------------------------------------------------

def _resample(points: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, math.ceil(s[-1] / spacing - 1e-9))
    t = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(t, s, points[:, 0]), np.interp(t, s, points[:, 1])], axis=1)


def _straight(start, yaw, length, spacing=1.0):
    n = max(1, math.ceil(length / spacing - 1e-9))
    t = np.linspace(0.0, length, n + 1)
    return np.stack([start[0] + t * math.cos(yaw), start[1] + t * math.sin(yaw)], axis=1)


def _arc(radius, angle, spacing=1.0):
    """Counter-clockwise arc starting at (0, -radius) heading +x, uniform chords <= spacing."""
    chord_angle = 2.0 * math.asin(min(1.0, spacing / (2.0 * radius)))
    n = max(1, math.ceil(angle / chord_angle - 1e-9))
    th = np.linspace(0.0, angle, n + 1) - math.pi / 2
    return np.stack([radius * np.cos(th), radius * np.sin(th)], axis=1)


def _bezier(p0, d0, p3, d3, spacing=0.5):
    c = 0.4 * float(np.linalg.norm(p3 - p0))
    p1, p2 = p0 + c * d0, p3 - c * d3
    t = np.linspace(0.0, 1.0, 400)[:, None]
    pts = (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3
    return _resample(pts, spacing)


def _heading(v):
    return math.atan2(v[1], v[0])


def _rot(k):
    a = k * math.pi / 2
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def _intersection(w, arm):
    h = 2.5 * w
    lines = []
    north = np.array([0.0, 1.0])
    for k in range(4):
        R = _rot(k)
        a_start, a_end = R @ [w / 2, -h - arm], R @ [w / 2, -h]
        lines.append(Polyline(f"in_{k}", _straight(a_start, _heading(R @ north), arm),
                              lane_width=w, successor_ids=(f"conn_{k}_s", f"conn_{k}_r", f"conn_{k}_l")))
        e_start = R @ [-w / 2, -h]
        lines.append(Polyline(f"out_{k}", _straight(e_start, _heading(R @ -north), arm), lane_width=w))
    for k in range(4):
        R = _rot(k)
        p0, d0 = R @ [w / 2, -h], R @ north
        # exits: straight -> out of arm k+2, right -> arm k+1, left -> arm k+3
        for tag, j in (("s", 2), ("r", 1), ("l", 3)):
            Rj = _rot((k + j) % 4)
            p3, d3 = Rj @ [-w / 2, -h], Rj @ -north
            lines.append(Polyline(f"conn_{k}_{tag}", _bezier(p0, d0, p3, d3), lane_width=w,
                                  successor_ids=(f"out_{(k + j) % 4}",)))
    return lines


def generate_map(spec: MapSpec) -> list:
    """Build lane polylines for ``spec``; a seeded rigid transform places the map."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w = spec.lane_width
    if spec.kind == "straight":
        lines = [Polyline(f"lane_{i}", _straight((0.0, i * w), 0.0, spec.length), lane_width=w)
                 for i in range(spec.n_lanes)]
    elif spec.kind == "arc":
        angle = spec.length / spec.arc_radius
        lines = [Polyline(f"lane_{i}", _arc(spec.arc_radius + i * w, angle), lane_width=w)
                 for i in range(spec.n_lanes)]
    else:
        lines = _intersection(w, spec.length)
    pose = Pose2(float(rng.uniform(-50, 50)), float(rng.uniform(-50, 50)), float(rng.uniform(-math.pi, math.pi)))
    if spec.kind == "arc" and rng.random() < 0.5:
        # mirror to get right-hand curves as well
        lines = [Polyline(p.id, p.points * [1.0, -1.0], p.kind, p.lane_width, p.successor_ids) for p in lines]
    out = [Polyline(p.id, transform_points(pose, p.points), p.kind, p.lane_width, p.successor_ids) for p in lines]
    check_map_topology(out)
    return out


# -- paths ------------------------------------------------------------------

class _Path:
    def __init__(self, polylines):
        pts = [polylines[0].points]
        for p in polylines[1:]:
            q = p.points
            if np.allclose(q[0], pts[-1][-1]):
                q = q[1:]
            pts.append(q)
        self.points = np.concatenate(pts)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.dirs = seg / self.seg_len[:, None]
        self.ids = [p.id for p in polylines]
        self.width = polylines[0].lane_width
        bounds, acc = [], 0.0
        for k, p in enumerate(polylines):
            length = p.length
            bounds.append((p.id, acc, acc + length))
            acc += length
        self.bounds = bounds
        self.length = float(self.s[-1])
        yaw = np.unwrap(np.arctan2(self.dirs[:, 1], self.dirs[:, 0]))
        curv = np.zeros(len(self.points))
        if len(yaw) > 1:
            curv[1:-1] = np.abs(np.diff(yaw)) / (0.5 * (self.seg_len[1:] + self.seg_len[:-1]))
        self.curvature = curv

    def speed_cap(self, s, horizon, lateral_accel=2.0):
        lo = int(np.searchsorted(self.s, s))
        hi = int(np.searchsorted(self.s, s + horizon)) + 1
        k = float(self.curvature[lo:hi].max(initial=0.0))
        return math.sqrt(lateral_accel / k) if k > 1e-6 else math.inf

    def point_at(self, s):
        if s >= self.length:
            return self.points[-1] + (s - self.length) * self.dirs[-1]
        s = max(s, 0.0)
        i = min(int(np.searchsorted(self.s, s, side="right")) - 1, len(self.dirs) - 1)
        return self.points[i] + (s - self.s[i]) * self.dirs[i]

    def heading_at(self, s):
        i = min(max(int(np.searchsorted(self.s, s, side="right")) - 1, 0), len(self.dirs) - 1)
        d = self.dirs[i]
        return math.atan2(d[1], d[0])

    def project(self, p, s_hint=None, window=6.0):
        """Closest point on the path; returns (arc length, signed lateral offset)."""
        n = len(self.dirs)
        lo, hi = 0, n
        if s_hint is not None:
            lo = min(max(int(np.searchsorted(self.s, s_hint - window)) - 1, 0), n - 1)
            hi = min(max(int(np.searchsorted(self.s, s_hint + window)) + 1, lo + 1), n)
        a = self.points[lo:hi]
        d = self.dirs[lo:hi]
        rel = p - a
        t = np.minimum(np.maximum((rel * d).sum(1), 0.0), self.seg_len[lo:hi])
        off = rel - t[:, None] * d
        dist2 = (off * off).sum(1)
        k = int(dist2.argmin())
        cross = d[k, 0] * rel[k, 1] - d[k, 1] * rel[k, 0]
        return float(self.s[lo + k] + t[k]), math.copysign(math.sqrt(dist2[k]), cross)


def _enumerate_paths(polylines):
    by_id = {p.id: p for p in polylines}
    has_pred = {s for p in polylines for s in p.successor_ids}
    roots = [p for p in polylines if p.id not in has_pred]
    paths = []

    def walk(chain):
        succ = chain[-1].successor_ids
        if not succ:
            paths.append(chain)
            return
        for s in succ:
            if any(c.id == s for c in chain):
                paths.append(chain)
                continue
            walk(chain + [by_id[s]])

    for r in roots:
        walk([r])
    return roots, [_Path(c) for c in paths]


# -- traffic ----------------------------------------------------------------

@dataclass
class _Agent:
    cls: AgentClass
    length: float
    width: float
    path: _Path
    s: float
    x: float
    y: float
    yaw: float
    v: float
    v_des: float
    a: float = 0.0
    next_speed_change: int = 0
    lane_change_at: int = -1
    hold: bool = False
    conflict_from: float = math.inf
    conflict_to: float = math.inf
    states: list = field(default_factory=list)
    speeds: list = field(default_factory=list)


def _pick_class(rng, weights):
    w = np.asarray(weights, float)
    return [AgentClass.VEHICLE, AgentClass.PEDESTRIAN, AgentClass.CYCLIST][int(rng.choice(3, p=w / w.sum()))]


def _box_gap(pa, da, pb, db):
    d = np.asarray(pb[:2]) - np.asarray(pa[:2])
    n = float(np.linalg.norm(d))
    if n == 0.0:
        return -1.0
    u = d / n
    return n - float(box_support(pa[2], da, u)) - float(box_support(pb[2], db, u))


def _same_lane(pose, other, lane_width):
    c, s = math.cos(pose[2]), math.sin(pose[2])
    lateral = -s * (other.x - pose[0]) + c * (other.y - pose[1])
    return abs(lateral) < 0.75 * lane_width


def _conflict_span(path: _Path, branching_ids):
    """Arc-length span of the path that lies on intersection connectors."""
    spans = [(a, b) for pid, a, b in path.bounds if pid in branching_ids]
    if not spans:
        return math.inf, math.inf
    return min(a for a, _ in spans), max(b for _, b in spans)


def generate_scenario(polylines, spec: TrafficSpec, scenario_id: str = "") -> Scenario:
    spec.validate()
    if not polylines:
        raise ValidationError("map is empty")
    rng = np.random.default_rng(spec.seed)
    roots, paths = _enumerate_paths(polylines)
    root_ids = {r.id for r in roots}
    has_pred = {s for p in polylines for s in p.successor_ids}
    connectors = {p.id for p in polylines if p.id in has_pred and p.successor_ids}

    agents: list[_Agent] = []
    for _ in range(spec.n_agents):
        cls = _pick_class(rng, spec.class_weights)
        length, width = CLASS_DIMS[cls]
        lo, hi = CLASS_SPEEDS.get(cls, spec.speed_range)
        placed = None
        for _attempt in range(300):
            path = paths[int(rng.integers(len(paths)))]
            root_len = next(b - a for pid, a, b in path.bounds if pid in root_ids)
            s_max = root_len - 5.0 if connectors else 0.6 * path.length
            if s_max <= length:
                continue
            s = float(rng.uniform(length, s_max))
            p = path.point_at(s)
            pose = np.array([p[0], p[1], path.heading_at(s)])
            ok = all(_box_gap(pose, (length, width), np.array([o.x, o.y, o.yaw]), (o.length, o.width))
                     >= (MIN_SPAWN_GAP if _same_lane(pose, o, path.width) else 1.0) for o in agents)
            if ok:
                placed = (path, s, pose)
                break
        if placed is None:
            raise PlacementError(len(agents), spec.n_agents)
        path, s, pose = placed
        v = float(rng.uniform(lo, hi))
        agents.append(_Agent(cls, length, width, path, s, pose[0], pose[1], pose[2], v, v,
                             next_speed_change=int(rng.integers(20, 60))))
        if cls == AgentClass.VEHICLE and rng.random() < spec.lane_change_prob:
            agents[-1].lane_change_at = int(rng.integers(5, max(6, spec.horizon_steps - 20)))

    for ag in agents:
        ag.conflict_from, ag.conflict_to = _conflict_span(ag.path, connectors)
    for ag in sorted(agents, key=lambda a: -a.s):
        gap, v_lead = _leader_gap(ag, agents, None)
        if math.isfinite(gap):
            ag.v = min(ag.v, v_lead + math.sqrt(2.0 * 2.0 * max(gap - 4.0, 0.0)))

    reserved = None
    for step in range(spec.horizon_steps):
        for ag in agents:
            ag.states.append((ag.x, ag.y, ag.yaw))
            ag.speeds.append(ag.v)
        if step == spec.horizon_steps - 1:
            break
        # intersection box: one agent at a time, first come first served
        if reserved is not None and reserved.s > reserved.conflict_to + reserved.length:
            reserved = None
        if reserved is None:
            waiting = [ag for ag in agents if ag.s < ag.conflict_from and ag.conflict_from - ag.s < 25.0]
            if waiting:
                reserved = min(waiting, key=lambda ag: ag.conflict_from - ag.s)
        for ag in agents:
            _maybe_lane_change(ag, agents, paths, step, rng)
            _step_agent(ag, agents, reserved, step, rng, spec)

    tracks = []
    for i, ag in enumerate(agents):
        st = np.array(ag.states)
        tracks.append(Track(f"agent_{i}", ag.cls, ag.length, ag.width, st, np.ones(len(st), bool),
                            np.array(ag.speeds)))
    return Scenario(list(polylines), tracks, spec.history_steps, spec.horizon_steps - spec.history_steps,
                    DT, scenario_id)


def _leader_gap(ag: _Agent, agents, reserved):
    gap, v_lead = math.inf, 0.0
    c, s = math.cos(ag.yaw), math.sin(ag.yaw)
    for o in agents:
        if o is ag:
            continue
        dx, dy = o.x - ag.x, o.y - ag.y
        if dx * c + dy * s <= 0.0 or dx * dx + dy * dy > 6400.0:
            continue
        s_o, lat = ag.path.project(np.array([o.x, o.y]), ag.s + dx * c + dy * s, window=12.0)
        if abs(lat) > 0.5 * ag.path.width + 0.5 * o.width or s_o <= ag.s:
            continue
        if abs(wrap_angle(o.yaw - ag.path.heading_at(s_o))) > 1.0:
            continue
        g = s_o - ag.s - 0.5 * (ag.length + o.length)
        if g < gap:
            gap, v_lead = g, o.v * math.cos(wrap_angle(o.yaw - ag.yaw))
    if reserved is not ag and ag.s < ag.conflict_from:
        g = ag.conflict_from - ag.s - 0.5 * ag.length - 1.0
        if g < gap:
            gap, v_lead = g, 0.0
    end_gap = ag.path.length - ag.s - 0.5 * ag.length - 2.0
    if end_gap < max(ag.v * ag.v / 3.0, 10.0) + 5.0 and end_gap < gap:
        gap, v_lead = end_gap, 0.0
    return gap, v_lead


def _idm(v, v_des, gap, v_lead, a_max=1.5, b=2.5, s0=2.0, headway=1.2):
    free = 1.0 - (v / max(v_des, 0.1)) ** 4
    if not math.isfinite(gap):
        return min(max(a_max * free, -ACCEL_LIMIT), ACCEL_LIMIT)
    s_star = s0 + v * headway + v * (v - v_lead) / (2 * math.sqrt(a_max * b))
    a = a_max * (free - (max(s_star, 0.0) / max(gap, 0.1)) ** 2)
    return min(max(a, -ACCEL_LIMIT), ACCEL_LIMIT)


def _step_agent(ag: _Agent, agents, reserved, step, rng, spec):
    if ag.cls == AgentClass.VEHICLE and step >= ag.next_speed_change:
        ag.v_des = float(rng.uniform(*spec.speed_range))
        ag.next_speed_change = step + int(rng.integers(20, 60))
    gap, v_lead = _leader_gap(ag, agents, reserved)
    v_des = min(ag.v_des, ag.path.speed_cap(ag.s, max(15.0, 2.0 * ag.v)))
    a_des = _idm(ag.v, v_des, gap, v_lead)
    a = ag.a + min(max(a_des - ag.a, -JERK_LIMIT * DT), JERK_LIMIT * DT)
    a = min(max(a, -ACCEL_LIMIT), ACCEL_LIMIT)
    v_new = ag.v + a * DT
    if v_new < 0.0:
        v_new, a = 0.0, -ag.v / DT
    v_avg = 0.5 * (ag.v + v_new)

    lookahead = min(max(2.0 + 0.3 * v_avg, 3.0), 8.0) if ag.cls != AgentClass.PEDESTRIAN else 2.0
    s_proj, _ = ag.path.project(np.array([ag.x, ag.y]), ag.s)
    tgt = ag.path.point_at(s_proj + lookahead)
    dx, dy = tgt[0] - ag.x, tgt[1] - ag.y
    c, s = math.cos(ag.yaw), math.sin(ag.yaw)
    alpha = math.atan2(-s * dx + c * dy, c * dx + s * dy)
    kappa = 2.0 * math.sin(alpha) / lookahead
    omega = v_avg * kappa
    omega = min(max(omega, -YAW_RATE_LIMIT), YAW_RATE_LIMIT)

    dist = v_avg * DT
    dyaw = omega * DT
    if abs(dyaw) < 1e-9:
        ag.x += dist * c
        ag.y += dist * s
    else:
        r = dist / dyaw
        ag.x += r * (math.sin(ag.yaw + dyaw) - s)
        ag.y += r * (c - math.cos(ag.yaw + dyaw))
    ag.yaw = wrap_angle(ag.yaw + dyaw)
    ag.v, ag.a = v_new, a
    ag.s, _ = ag.path.project(np.array([ag.x, ag.y]), s_proj)


def _maybe_lane_change(ag: _Agent, agents, paths, step, rng):
    if step != ag.lane_change_at:
        return
    here = np.array([ag.x, ag.y])
    options = []
    for p in paths:
        if p is ag.path:
            continue
        s_p, lat = p.project(here, None)
        if 0.8 * p.width < abs(lat) < 1.2 * p.width and abs(wrap_angle(p.heading_at(s_p) - ag.yaw)) < 0.2 \
                and s_p + 40.0 < p.length:
            options.append((p, s_p))
    for p, s_p in options:
        clear = True
        for o in agents:
            if o is ag:
                continue
            so, lat = p.project(np.array([o.x, o.y]), None)
            if abs(lat) < p.width and abs(so - s_p) < 20.0:
                clear = False
                break
        if clear:
            ag.path, ag.s = p, s_p
            ag.conflict_from = ag.conflict_to = math.inf
            return


# -- validation -------------------------------------------------------------

def finite_difference_accel(states: np.ndarray, dt: float = DT) -> np.ndarray:
    speed = np.linalg.norm(np.diff(states[:, :2], axis=0), axis=1) / dt
    return np.diff(speed) / dt


def validate_scenario(scn: Scenario, accel_limit: float = ACCEL_LIMIT, accel_tol: float = 0.2) -> dict:
    """Brute-force sanity counts for a scenario."""
    collisions = 0
    tr = scn.tracks
    for i in range(len(tr)):
        for j in range(i + 1, len(tr)):
            if tr[i].valid[0] and tr[j].valid[0]:
                collisions += bool(obb_intersects_arrays(tr[i].states[0], tr[i].dims, tr[j].states[0], tr[j].dims))
    offroad = 0
    if any(p.kind == "lane" for p in scn.map):
        corridor = Corridor(scn.map)
        for t in tr:
            d = corridor.signed_distance(t.states[t.valid, :2])
            offroad += int(np.sum(d > 0.0))
    accel = 0
    for t in tr:
        ok = t.valid[:-2] & t.valid[1:-1] & t.valid[2:]
        a = finite_difference_accel(t.states)
        accel += int(np.sum(ok & (np.abs(a) > accel_limit + accel_tol)))
    return {"collisions_at_start": collisions, "offroad_steps": offroad, "accel_violations": accel}


def generate_corpus(n: int, kinds=("straight", "arc"), n_agents=(4, 8), seed: int = 0,
                    class_weights=(1.0, 0.0, 0.0), horizon_steps: int = 91, history_steps: int = 11,
                    lane_change_prob: float = 0.2, n_lanes: int | None = None) -> list:
    """``n`` scenarios cycling through ``kinds``; scenario ``i`` uses seed ``seed * 100003 + i``.

    ``n_lanes`` fixes the lane count per direction; by default straight and
    arc maps draw 1 to 3 lanes and intersections use 1.
    """
    out = []
    for i in range(n):
        s = seed * 100003 + i
        rng = np.random.default_rng(s)
        kind = kinds[i % len(kinds)]
        if kind == "intersection":
            mspec = MapSpec("intersection", n_lanes or 1, 4.0, length=60.0, seed=s)
        elif kind == "arc":
            lanes = int(rng.integers(1, 4))
            mspec = MapSpec("arc", n_lanes or lanes, 4.0, float(rng.uniform(30, 120)), 250.0, s)
        else:
            lanes = int(rng.integers(1, 4))
            mspec = MapSpec("straight", n_lanes or lanes, 4.0, length=250.0, seed=s)
        m = generate_map(mspec)
        k = int(rng.integers(n_agents[0], n_agents[1] + 1))
        while True:
            try:
                out.append(generate_scenario(m, TrafficSpec(k, horizon_steps=horizon_steps,
                                                            history_steps=history_steps,
                                                            lane_change_prob=lane_change_prob,
                                                            class_weights=class_weights, seed=s),
                                             scenario_id=f"synth_{s}"))
                break
            except PlacementError:
                k -= 1
                if k < 1:
                    raise
    return out
