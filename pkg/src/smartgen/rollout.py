"""Closed-loop multi-agent rollouts with top-k sampling and cached decoding."""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import ConfigError, ValidationError
from .geometry import Scenario, compose_arrays
from .io import SCHEMA_VERSION, check_schema
from .model import SMART, DecodeCache, MotionInputs, RoadInputs, encode_road_state
from .motion_tokens import SUBSTEPS, detokenize, tokenize_track
from .road_tokens import tokenize_map
from .scene import VocabSet


def sample_top_k(probs, k: int, temperature: float = 1.0, rng=None) -> int:
    """Keep the k most likely classes, renormalize, draw one.

    ``temperature`` rescales log-probabilities before truncation. With k=1
    this is argmax (lowest index on ties) and consumes no randomness.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError("probs must be a non-empty vector")
    if abs(p.sum() - 1.0) > 1e-5 or (p < 0).any():
        raise ValidationError(f"probs must be a distribution (sum={p.sum():.6f})")
    if not 1 <= k <= p.size:
        raise ValidationError(f"top_k must be in [1, {p.size}]")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    order = np.argsort(-p, kind="stable")
    if k == 1:
        return int(order[0])
    if temperature != 1.0:
        with np.errstate(divide="ignore"):
            lp = np.log(p) / temperature
        p = np.exp(lp - lp.max())
        p /= p.sum()
    top = order[:k]
    w = p[top]
    if w.sum() <= 0:
        return int(top[0])
    w = w / w.sum()
    rng = rng if rng is not None else np.random.default_rng()
    return int(top[min(int(np.searchsorted(np.cumsum(w), rng.random(), side="right")), k - 1)])


@dataclass
class RolloutConfig:
    n_rollouts: int = 32
    top_k: int = 5
    temperature: float = 1.0
    history_tokens: int | None = None
    future_tokens: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise ConfigError("n_rollouts", "must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k", "must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature", "must be positive")


def rollout_seed(seed: int, index: int) -> int:
    return zlib.crc32(np.array([seed, index], dtype=np.int64).tobytes())


@dataclass
class RolloutSet:
    scenario_id: str
    agent_ids: list
    agent_classes: list
    dims: np.ndarray
    history_tokens: int
    indices: np.ndarray
    trajectories: np.ndarray
    step_times: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    road_encodes: int = 0

    @property
    def n_rollouts(self) -> int:
        return self.indices.shape[0]

    def to_dict(self) -> dict:
        """Wall-clock step times are left out so reruns serialize identically."""
        return {"schema": SCHEMA_VERSION, "artifact": "rollouts", "scenario_id": self.scenario_id,
                "agent_ids": self.agent_ids, "agent_classes": self.agent_classes, "dims": self.dims.tolist(),
                "history_tokens": self.history_tokens, "excluded": self.excluded, "road_encodes": self.road_encodes,
                "rollouts": [{"agents": [{"id": aid, "tokens": self.indices[r, a].tolist(),
                                          "states": np.round(self.trajectories[r, a], 6).tolist()}
                                         for a, aid in enumerate(self.agent_ids)]}
                             for r in range(self.n_rollouts)]}

    @classmethod
    def from_dict(cls, d: dict, where: str = "<rollouts>") -> "RolloutSet":
        check_schema(d, where, "rollouts")
        rolls = d["rollouts"]
        idx = np.array([[a["tokens"] for a in r["agents"]] for r in rolls], np.int64)
        traj = np.array([[a["states"] for a in r["agents"]] for r in rolls], np.float64)
        return cls(d["scenario_id"], list(d["agent_ids"]), list(d["agent_classes"]), np.array(d["dims"], float),
                   int(d["history_tokens"]), idx, traj, [], list(d.get("excluded", [])),
                   int(d.get("road_encodes", 0)))


def _softmax(logits: torch.Tensor) -> np.ndarray:
    z = logits.detach().to(torch.float64)
    return torch.softmax(z, dim=-1).numpy()


def warm_start(vocabs: VocabSet, scenario: Scenario, history_tokens: int) -> tuple:
    """Ground-truth matched tokens for every agent usable as a rollout agent.

    Returns ``(tracks, excluded_ids)``; an agent is usable when all of its
    warm-start token steps are valid.
    """
    T = (scenario.n_steps - 1) // SUBSTEPS
    tracks, excluded = [], []
    for tr in scenario.tracks:
        tt = tokenize_track(vocabs.for_class(tr.agent_class), tr, n_steps=T)
        if history_tokens > 0 and tt.valid[:history_tokens].all():
            tracks.append(tt)
        else:
            excluded.append(tr.id)
    return tracks, excluded


def rollout(model: SMART, vocabs: VocabSet, scenario: Scenario, config: RolloutConfig | None = None) -> RolloutSet:
    config = config or RolloutConfig()
    T_total = (scenario.n_steps - 1) // SUBSTEPS
    h = config.history_tokens if config.history_tokens is not None else max(1, (scenario.history_steps - 1) // SUBSTEPS)
    F = config.future_tokens if config.future_tokens is not None else T_total - h
    if h < 1 or F < 0 or h + F > T_total:
        raise ValidationError(f"history {h} + future {F} token steps exceed the scenario ({T_total})")
    tracks, excluded = warm_start(vocabs, scenario, h)
    if not tracks:
        raise ValidationError("no agent has a valid warm-start history")
    for tt in tracks:
        if config.top_k > vocabs.for_class(tt.agent_class).size:
            raise ConfigError("top_k", f"exceeds the {tt.agent_class.value} vocabulary size")
    model.eval()
    inst, seqs = tokenize_map(vocabs.road, scenario.map)
    road = RoadInputs.from_instances(inst, seqs)
    before = model.road_encode_calls
    road_state = encode_road_state(model, road)
    A, T = len(tracks), h + F
    cls = np.array([t.agent_class.index for t in tracks])
    dims = np.array([[t.length, t.width] for t in tracks])
    vocab_of = [vocabs.for_class(t.agent_class) for t in tracks]
    indices = np.zeros((config.n_rollouts, A, T), np.int64)
    trajs = np.zeros((config.n_rollouts, A, SUBSTEPS * T + 1, 3))
    times = []
    gt_idx = np.array([t.indices[:h] for t in tracks])
    gt_pose = np.array([t.ref_poses[1:h + 1] for t in tracks])
    ones = np.ones(A, bool)
    for r in range(config.n_rollouts):
        rng = np.random.default_rng(rollout_seed(config.seed, r))
        cache = DecodeCache(model, cls, dims, T, road, road_state)
        for t in range(h):
            logits = cache.step(gt_idx[:, t], gt_pose[:, t], ones)
        indices[r, :, :h] = gt_idx
        pose = gt_pose[:, -1].copy()
        for t in range(h, T):
            start = time.perf_counter()
            probs = _softmax(logits)
            nxt = np.array([sample_top_k(probs[a], config.top_k, config.temperature, rng) for a in range(A)])
            pose = np.stack([compose_arrays(pose[a], vocab_of[a].endpoints[nxt[a]]) for a in range(A)])
            indices[r, :, t] = nxt
            if t + 1 < T:
                logits = cache.step(nxt, pose, ones)
            times.append(time.perf_counter() - start)
        for a in range(A):
            trajs[r, a] = detokenize(vocab_of[a], tracks[a].start_pose, indices[r, a])
    return RolloutSet(scenario.scenario_id, [t.agent_id for t in tracks], [t.agent_class.value for t in tracks],
                      dims, h, indices, trajs, times, excluded, model.road_encode_calls - before)


@torch.no_grad()
def incremental_equivalence_check(model: SMART, m: MotionInputs, road: RoadInputs, start: int = 0) -> float:
    """Worst |logit| gap between cached stepping and full re-encoding, over steps >= start."""
    A, T = m.shape
    if T <= start:
        return 0.0
    model.eval()
    full = model.motion_logits(m, road)
    cache = DecodeCache(model, m.cls, m.dims, T, road)
    worst = 0.0
    for t in range(T):
        step = cache.step(m.tokens[:, t], m.poses[:, t], m.valid[:, t])
        if t >= start:
            live = torch.from_numpy(m.valid[:, t])
            if bool(live.any()):
                worst = max(worst, float((step[live] - full[live, t]).abs().max()))
    return worst


def decode_cost(model: SMART, m: MotionInputs, road: RoadInputs, lengths, cached: bool, repeats: int = 3) -> list:
    """Seconds to produce logits for one new step after ``L`` committed steps.

    With ``cached`` the decoder holds the first L steps and does one
    incremental step; without it the whole L + 1 steps are re-encoded.
    Road encoding is done once up front and excluded.
    """
    model.eval()
    state = encode_road_state(model, road)
    out = []
    with torch.no_grad():
        for L in lengths:
            sub = m.take_steps(L + 1)
            best = np.inf
            if cached:
                cache = DecodeCache(model, sub.cls, sub.dims, L + 1, road, state)
                for t in range(L):
                    cache.step(sub.tokens[:, t], sub.poses[:, t], sub.valid[:, t])
                for _ in range(repeats):
                    cache.t = L
                    a = time.perf_counter()
                    cache.step(sub.tokens[:, L], sub.poses[:, L], sub.valid[:, L])
                    best = min(best, time.perf_counter() - a)
            else:
                for _ in range(repeats):
                    a = time.perf_counter()
                    model.motion_logits(sub, road, r=state["r"])
                    best = min(best, time.perf_counter() - a)
            out.append(best)
    return out


def log_log_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
