"""Desk-scale simulation metrics: nine measurements, histogram likelihood scores, minADE.

For every (agent, future step) the rollouts give R samples of each
measurement. They are binned into a fixed histogram with Laplace
smoothing, and the ground truth is scored by the probability of its bin
relative to the best a bin can reach with R samples, ``(R + a) / (R + aB)``.
A simulator whose rollouts all land in the ground-truth bin scores exactly 1;
each rollout that leaves it costs likelihood.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ValidationError
from .geometry import Corridor, Scenario, box_support, obb_intersects_arrays, to_local_arrays
from .io import SCHEMA_VERSION

DT = 0.1
TTC_MAX = 10.0
TTC_CONE = math.radians(10.0)
DIST_MAX = 50.0

KINEMATIC = ("linear_speed", "linear_accel", "angular_speed", "angular_accel")
INTERACTIVE = ("dist_to_nearest", "collision_flag", "ttc")
MAP = ("dist_to_road_edge", "offroad_flag")
GROUPS = {"kinematic": KINEMATIC, "interactive": INTERACTIVE, "map": MAP}
MEASUREMENTS = KINEMATIC + INTERACTIVE + MAP


def _edges(lo, hi, n):
    return np.linspace(lo, hi, n + 1)


@dataclass
class HistogramConfig:
    edges: dict = field(default_factory=lambda: {
        "linear_speed": _edges(0, 30, 30),
        "linear_accel": _edges(-10, 10, 40),
        "angular_speed": _edges(-2, 2, 40),
        "angular_accel": _edges(-5, 5, 40),
        "dist_to_nearest": _edges(0, DIST_MAX, 50),
        "collision_flag": np.array([-0.5, 0.5, 1.5]),
        "ttc": _edges(0, TTC_MAX, 20),
        "dist_to_road_edge": _edges(0, DIST_MAX, 50),
        "offroad_flag": np.array([-0.5, 0.5, 1.5]),
    })
    alpha: float = 1.0

    def __post_init__(self):
        for k, e in self.edges.items():
            e = np.asarray(e, float)
            if e.ndim != 1 or len(e) < 2 or not np.all(np.diff(e) > 0):
                raise ValidationError(f"histogram edges for {k} must be strictly increasing")
            self.edges[k] = e


BIN_DECIMALS = 9


def bin_index(values, edges) -> np.ndarray:
    """Bin of each value; values outside the range go to the end bins.

    Values are rounded first: exact quantities such as zero acceleration or
    a lane-centre distance land on edges, and rounding noise from a change
    of frame must not move them across.
    """
    v = np.round(np.asarray(values, float), BIN_DECIMALS)
    return np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)


def histogram_score(samples, gt, edges, alpha: float = 1.0, gt_valid=None) -> float:
    """exp(mean log(p(gt bin) / p_best)) with Laplace-smoothed bin probabilities.

    ``samples`` of shape [N] form one pooled histogram for all ground-truth
    values; shape [N, M] gives one histogram per column, scored against
    ``gt[m]``. ``p_best = (N + alpha) / (N + alpha * B)``.
    """
    samples = np.asarray(samples, float)
    gt = np.atleast_1d(np.asarray(gt, float))
    edges = np.asarray(edges, float)
    B = len(edges) - 1
    valid = np.ones(gt.shape, bool) if gt_valid is None else np.asarray(gt_valid, bool)
    if samples.shape[0] < 1:
        raise ValidationError("histogram_score needs at least one rollout sample")
    if not valid.any():
        raise ValidationError("no valid ground-truth samples")
    N = samples.shape[0]
    gb = bin_index(gt, edges)
    if samples.ndim == 1:
        counts = np.bincount(bin_index(samples, edges), minlength=B)
        c_gt = counts[gb]
    else:
        if samples.shape[1:] != gt.shape:
            raise ValidationError(f"samples {samples.shape} do not match ground truth {gt.shape}")
        sb = bin_index(samples, edges)
        c_gt = (sb == gb[None]).sum(axis=0)
    ratio = (c_gt + alpha) / (N + alpha)
    return float(np.exp(np.mean(np.log(ratio[valid]))))


# -- measurements -----------------------------------------------------------

def _unwrap(yaw, axis=-1):
    return np.unwrap(yaw, axis=axis)


def kinematics(traj: np.ndarray, dt: float = DT) -> dict:
    """traj [..., S, 3] -> speed, accel, angular speed, |angular accel| with central differences."""
    vel = np.gradient(traj[..., :2], dt, axis=-2)
    speed = np.linalg.norm(vel, axis=-1)
    accel = np.gradient(speed, dt, axis=-1)
    yaw_rate = np.gradient(_unwrap(traj[..., 2]), dt, axis=-1)
    yaw_acc = np.abs(np.gradient(yaw_rate, dt, axis=-1))
    return {"linear_speed": speed, "linear_accel": accel, "angular_speed": yaw_rate, "angular_accel": yaw_acc}


def interactions(traj: np.ndarray, dims: np.ndarray, speed: np.ndarray) -> dict:
    """traj [..., A, S, 3], dims [A, 2], speed [..., A, S]."""
    A = traj.shape[-3]
    p = np.moveaxis(traj, -3, -2)  # [..., S, A, 3]
    v = np.moveaxis(speed, -2, -1)  # [..., S, A]
    pa, pb = p[..., :, None, :], p[..., None, :, :]
    d = pb[..., :2] - pa[..., :2]
    dist = np.linalg.norm(d, axis=-1)
    u = d / np.where(dist > 0, dist, 1.0)[..., None]
    ha = box_support(pa[..., 2], dims[:, None, :], u)
    hb = box_support(pb[..., 2], dims[None, :, :], u)
    eye = np.eye(A, dtype=bool)
    clearance = np.where(eye, np.inf, np.maximum(dist - ha - hb, 0.0))
    nearest = np.minimum(clearance.min(axis=-1), DIST_MAX) if A > 1 else np.full(v.shape, DIST_MAX)
    overlap = obb_intersects_arrays(pa, dims[:, None, :], pb, dims[None, :, :]) & ~eye
    collision = overlap.any(axis=-1).astype(float)
    local = to_local_arrays(pa, pb)
    bearing = np.arctan2(local[..., 1], local[..., 0])
    lead = (local[..., 0] > 0) & (np.abs(bearing) <= TTC_CONE) & ~eye
    gap = dist - 0.5 * (dims[:, None, 0] + dims[None, :, 0])
    closing = v[..., :, None] - v[..., None, :] * np.cos(local[..., 2])
    ttc_pair = np.where(closing > 0, np.maximum(gap, 0.0) / np.where(closing > 0, closing, 1.0), TTC_MAX)
    lead_dist = np.where(lead, dist, np.inf)
    j = np.argmin(lead_dist, axis=-1)
    has = np.isfinite(np.take_along_axis(lead_dist, j[..., None], -1)[..., 0])
    ttc = np.where(has, np.take_along_axis(ttc_pair, j[..., None], -1)[..., 0], TTC_MAX)
    ttc = np.clip(ttc, 0.0, TTC_MAX)
    back = lambda x: np.moveaxis(x, -1, -2)
    return {"dist_to_nearest": back(nearest), "collision_flag": back(collision), "ttc": back(ttc)}


def map_measures(traj: np.ndarray, corridor: Corridor) -> dict:
    sd = corridor.signed_distance(traj[..., :2].reshape(-1, 2)).reshape(traj.shape[:-1])
    return {"dist_to_road_edge": np.clip(-sd, 0.0, DIST_MAX), "offroad_flag": (sd > 0).astype(float)}


def lane_corridor(scenario_map) -> Corridor:
    return Corridor(scenario_map)


def compute_measurements(traj: np.ndarray, dims: np.ndarray, corridor: Corridor, dt: float = DT) -> dict:
    """All nine measurements for trajectories [..., A, S, 3]; each value has shape [..., A, S]."""
    traj = np.asarray(traj, float)
    if traj.shape[-2] < 3:
        raise ValidationError("need at least 3 states for second differences")
    out = kinematics(traj, dt)
    out.update(interactions(traj, np.asarray(dims, float), out["linear_speed"]))
    out.update(map_measures(traj, corridor))
    return out


# -- report -----------------------------------------------------------------

@dataclass
class MetricReport:
    scores: dict
    groups: dict
    meta: float
    min_ade: float
    collision_rate: float
    offroad_rate: float
    n_rollouts: int
    scenario_id: str = ""

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "artifact": "report"} | asdict(self)

    def csv_row(self) -> dict:
        return {"scenario_id": self.scenario_id, "meta": self.meta, **{f"group_{k}": v for k, v in self.groups.items()},
                **self.scores, "min_ade": self.min_ade, "collision_rate": self.collision_rate,
                "offroad_rate": self.offroad_rate}


def evaluate_arrays(rollouts: np.ndarray, gt: np.ndarray, gt_valid: np.ndarray, dims: np.ndarray, corridor: Corridor,
                    history_tokens: int, config: HistogramConfig | None = None, scenario_id: str = "") -> MetricReport:
    """rollouts [R, A, S, 3]; gt [A, S, 3]; scored on states after the warm-start history."""
    config = config or HistogramConfig()
    R, A, S, _ = rollouts.shape
    if gt.shape != (A, S, 3):
        raise ValidationError(f"ground truth {gt.shape} does not match rollouts {(A, S, 3)}")
    first = 5 * history_tokens + 1
    if first >= S:
        raise ValidationError("no future states to score")
    gv = np.asarray(gt_valid, bool)[:, first:]
    sim = compute_measurements(rollouts, dims, corridor)
    ref = compute_measurements(np.where(np.asarray(gt_valid, bool)[..., None], gt, 0.0), dims, corridor)
    scores = {}
    for name in MEASUREMENTS:
        if name in INTERACTIVE and A < 2:
            continue
        s = sim[name][:, :, first:].reshape(R, -1)
        g = ref[name][:, first:].reshape(-1)
        scores[name] = histogram_score(s, g, config.edges[name], config.alpha, gv.reshape(-1))
    groups = {k: float(np.mean([scores[m] for m in ms])) for k, ms in GROUPS.items() if all(m in scores for m in ms)}
    meta = float(np.mean(list(groups.values())))
    disp = np.linalg.norm(rollouts[:, :, first:, :2] - gt[None, :, first:, :2], axis=-1)
    w = gv[None].astype(float)
    ade = (disp * w).sum(-1) / np.maximum(w.sum(-1), 1)
    min_ade = float(ade.min(axis=0).mean())
    coll = (sim["collision_flag"][:, :, first:] * w).max(axis=-1) if A > 1 else np.zeros((R, A))
    off = (sim["offroad_flag"][:, :, first:] * w).max(axis=-1)
    return MetricReport(scores, groups, meta, min_ade, float(coll.mean()), float(off.mean()), R, scenario_id)


def evaluate(rollout_set, scenario: Scenario, config: HistogramConfig | None = None) -> MetricReport:
    tracks = {t.id: t for t in scenario.tracks}
    missing = [a for a in rollout_set.agent_ids if a not in tracks]
    if missing:
        raise ValidationError(f"rollout agents not in scenario: {missing}")
    S = rollout_set.trajectories.shape[2]
    if S != scenario.n_steps:
        raise ValidationError(f"rollout horizon {S} states != scenario horizon {scenario.n_steps}")
    gt = np.stack([tracks[a].states for a in rollout_set.agent_ids])
    gv = np.stack([tracks[a].valid for a in rollout_set.agent_ids])
    return evaluate_arrays(rollout_set.trajectories, gt, gv, np.asarray(rollout_set.dims, float),
                           lane_corridor(scenario.map), rollout_set.history_tokens, config, scenario.scenario_id)


def oracle_rollouts(scenario: Scenario, n: int = 32, history_tokens: int | None = None):
    """``n`` copies of the ground truth packaged as a rollout set."""
    from .rollout import RolloutSet

    h = (scenario.history_steps - 1) // 5 if history_tokens is None else history_tokens
    gt = np.stack([t.states for t in scenario.tracks])
    T = (scenario.n_steps - 1) // 5
    return RolloutSet(scenario.scenario_id, [t.id for t in scenario.tracks], [t.agent_class.value for t in scenario.tracks],
                      np.array([[t.length, t.width] for t in scenario.tracks]), h,
                      np.zeros((n, len(gt), T), np.int64), np.repeat(gt[None], n, axis=0))
