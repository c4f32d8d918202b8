"""Discrete motion tokens: k-disk vocabularies and rolling-frame matching.

A token is five (x, y, yaw) waypoints at 0.1 s spacing, expressed in the
frame of the pose where the segment starts. Tokenizing a track walks the
track 0.5 s at a time; each step is matched in the frame reached by the
previously *stored* token, so matching errors do not accumulate silently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError, VocabularyMismatchError
from .geometry import AgentClass, Pose2, Track, compose_arrays, to_local_arrays, wrap_angle
from .io import SCHEMA_VERSION, check_schema, sha256_of

SUBSTEPS = 5
YAW_WEIGHT = 1.0
DEFAULT_EPSILON = {AgentClass.VEHICLE: 0.2, AgentClass.PEDESTRIAN: 0.05, AgentClass.CYCLIST: 0.05}


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = False
    k: int = 5
    p: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("noise k must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError("noise p must be in [0, 1]")


def _segment_starts(valid: np.ndarray, n: int = SUBSTEPS) -> list:
    starts = []
    i = 0
    while i < len(valid):
        if not valid[i]:
            i += 1
            continue
        j = i
        while j < len(valid) and valid[j]:
            j += 1
        starts.extend(i + k * n for k in range((j - i - 1) // n))
        i = j
    return starts


def extract_motion_segments(track: Track, dt_token: float = 0.5, dt: float = 0.1) -> np.ndarray:
    """Cut every run of valid states into canonical segments, shape ``[N, 5, 3]``."""
    n = int(round(dt_token / dt))
    if n != SUBSTEPS:
        raise ValidationError(f"token duration must cover {SUBSTEPS} samples, got {n}")
    starts = _segment_starts(np.asarray(track.valid, bool))
    if not starts:
        return np.zeros((0, SUBSTEPS, 3))
    return np.stack([to_local_arrays(track.states[s], track.states[s + 1:s + n + 1]) for s in starts])


def jittered_segments(track: Track, copies: int, xy_jitter: float, yaw_jitter: float, seed=0) -> np.ndarray:
    """Segments seen from randomly offset start frames.

    Rolling matching looks at ground truth from a reference that is up to
    about epsilon off, so the vocabulary needs tokens that steer back onto
    the track; raw segments never contain that correction.
    """
    rng = np.random.default_rng(seed)
    out = []
    for s in _segment_starts(np.asarray(track.valid, bool)):
        for _ in range(copies):
            off = np.array([rng.uniform(-xy_jitter, xy_jitter), rng.uniform(-xy_jitter, xy_jitter),
                            rng.uniform(-yaw_jitter, yaw_jitter)])
            out.append(to_local_arrays(compose_arrays(track.states[s], off), track.states[s + 1:s + SUBSTEPS + 1]))
    if not out:
        return np.zeros((0, SUBSTEPS, 3))
    return np.stack(out)


def vocab_training_segments(tracks, agent_class, copies: int = 4, epsilon: float | None = None,
                            seed: int = 0) -> np.ndarray:
    """Raw plus jittered segments for one class; jitter scales with epsilon."""
    agent_class = AgentClass(agent_class)
    eps = DEFAULT_EPSILON[agent_class] if epsilon is None else float(epsilon)
    parts = []
    for i, tr in enumerate(tracks):
        if AgentClass(tr.agent_class) != agent_class:
            continue
        parts.append(extract_motion_segments(tr))
        if copies:
            parts.append(jittered_segments(tr, copies, 1.5 * eps, 0.25 * eps, [int(seed) & 0xFFFFFFFF, i]))
    if not parts:
        return np.zeros((0, SUBSTEPS, 3))
    return np.concatenate(parts)


def token_distance(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != (SUBSTEPS, 3) or b.shape != (SUBSTEPS, 3):
        raise ValidationError("segments must be 5 x (x, y, yaw)")
    pos = np.linalg.norm(a[:, :2] - b[:, :2], axis=1).mean()
    return float(pos + YAW_WEIGHT * np.abs(wrap_angle(a[:, 2] - b[:, 2])).mean())


def token_distances(tokens: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distance from ``target`` [5, 3] to every row of ``tokens`` [V, 5, 3]."""
    d = tokens - target[None]
    pos = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2).mean(axis=1)
    return pos + YAW_WEIGHT * np.abs(wrap_angle(d[..., 2])).mean(axis=1)


def greedy_disk_cover(items: np.ndarray, dist_fn, target_size: int, epsilon: float, seed: int) -> np.ndarray:
    """Indices of accepted items, in acceptance order."""
    if len(items) == 0:
        raise ValidationError("cannot build a vocabulary from zero segments")
    if target_size < 1:
        raise ValidationError("target_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(items))
    accepted = []
    for i in order:
        if accepted and dist_fn(items[accepted], items[i]).min() <= epsilon:
            continue
        accepted.append(int(i))
        if len(accepted) >= target_size:
            break
    return np.array(accepted, dtype=np.int64)


@dataclass
class MotionVocab:
    agent_class: AgentClass
    tokens: np.ndarray
    epsilon: float
    seed: int = 0
    target_size: int = 512

    def __post_init__(self):
        self.agent_class = AgentClass(self.agent_class)
        self.tokens = np.asarray(self.tokens, dtype=np.float64).reshape(-1, SUBSTEPS, 3)
        if len(self.tokens) == 0:
            raise ValidationError("empty motion vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return self.size

    @property
    def endpoints(self) -> np.ndarray:
        return self.tokens[:, -1]

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "artifact": "motion_vocab", "class": self.agent_class.value,
                "epsilon": self.epsilon, "seed": self.seed, "target_size": self.target_size,
                "tokens": self.tokens.tolist()}

    @classmethod
    def from_dict(cls, d: dict, where: str = "<motion vocab>") -> "MotionVocab":
        check_schema(d, where, "motion_vocab")
        return cls(d["class"], np.array(d["tokens"], dtype=np.float64), float(d["epsilon"]),
                   int(d.get("seed", 0)), int(d.get("target_size", len(d["tokens"]))))

    def digest(self) -> str:
        return sha256_of(self.to_dict())


def build_motion_vocab(segments, agent_class, target_size: int = 512, epsilon: float | None = None,
                       seed: int = 0) -> MotionVocab:
    agent_class = AgentClass(agent_class)
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, SUBSTEPS, 3)
    eps = DEFAULT_EPSILON[agent_class] if epsilon is None else float(epsilon)
    idx = greedy_disk_cover(segments, token_distances, target_size, eps, seed)
    return MotionVocab(agent_class, segments[idx].copy(), eps, seed, target_size)


def nearest_token(vocab: MotionVocab, target) -> tuple:
    d = token_distances(vocab.tokens, np.asarray(target, float))
    i = int(np.argmin(d))
    return i, float(d[i])


def topk_tokens(vocab: MotionVocab, target, k: int) -> np.ndarray:
    d = token_distances(vocab.tokens, np.asarray(target, float))
    return np.argsort(d, kind="stable")[:k]


@dataclass
class TokenizedTrack:
    """Rolling-matched token sequence for one agent.

    ``indices`` are the stored (possibly noised) tokens that drive
    ``ref_poses``; ``labels`` are the clean matches from each reference and
    are what the model is trained to predict. Steps with ``valid`` false
    carry index 0 and are masked everywhere downstream.
    """

    agent_id: str
    agent_class: AgentClass
    start_pose: np.ndarray
    indices: np.ndarray
    labels: np.ndarray
    ref_poses: np.ndarray
    noised: np.ndarray
    valid: np.ndarray
    length: float = 4.5
    width: float = 2.0

    def __len__(self):
        return len(self.indices)

    def to_dict(self) -> dict:
        return {"agent_id": self.agent_id, "class": self.agent_class.value,
                "start_pose": self.start_pose.tolist(), "indices": self.indices.tolist(),
                "labels": self.labels.tolist(), "ref_poses": self.ref_poses.tolist(),
                "noised": self.noised.tolist(), "valid": self.valid.tolist(),
                "length": self.length, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizedTrack":
        return cls(str(d["agent_id"]), AgentClass(d["class"]), np.array(d["start_pose"], float),
                   np.array(d["indices"], np.int64), np.array(d["labels"], np.int64),
                   np.array(d["ref_poses"], float), np.array(d["noised"], bool), np.array(d["valid"], bool),
                   float(d.get("length", 4.5)), float(d.get("width", 2.0)))


def tokenize_track(vocab: MotionVocab, track: Track, noise: NoiseConfig | None = None, seed: int = 0,
                   n_steps: int | None = None) -> TokenizedTrack:
    if AgentClass(track.agent_class) != vocab.agent_class:
        raise VocabularyMismatchError(
            f"track {track.id} is {track.agent_class.value} but vocabulary is {vocab.agent_class.value}")
    noise = noise or NoiseConfig()
    T = (len(track) - 1) // SUBSTEPS if n_steps is None else n_steps
    if T < 1:
        raise ValidationError(f"track {track.id} is shorter than one token")
    rng = np.random.default_rng(seed)
    states, gt_valid = track.states, np.asarray(track.valid, bool)
    indices = np.zeros(T, np.int64)
    labels = np.zeros(T, np.int64)
    noised = np.zeros(T, bool)
    valid = np.zeros(T, bool)
    ref = np.zeros((T + 1, 3))
    first = int(np.argmax(gt_valid))
    ref[0] = states[first] if gt_valid[first] else 0.0
    prev_ok = False
    for t in range(T):
        lo, hi = SUBSTEPS * t, SUBSTEPS * (t + 1)
        ok = hi < len(states) and bool(gt_valid[lo:hi + 1].all())
        if not ok:
            # gap: hold the reference, resync to ground truth when the track resumes
            ref[t + 1] = states[hi] if hi < len(states) and gt_valid[hi] else ref[t]
            prev_ok = False
            continue
        if not prev_ok:
            ref[t] = states[lo]
        target = to_local_arrays(ref[t], states[lo + 1:hi + 1])
        d = token_distances(vocab.tokens, target)
        label = int(np.argmin(d))
        idx = label
        drawn = noise.enabled and rng.random() < noise.p
        if drawn:
            cand = np.argsort(d, kind="stable")[:noise.k]
            idx = int(cand[rng.integers(len(cand))])
        indices[t], labels[t], noised[t], valid[t] = idx, label, drawn, True
        ref[t + 1] = compose_arrays(ref[t], vocab.endpoints[idx])
        prev_ok = True
    return TokenizedTrack(track.id, vocab.agent_class, ref[0].copy(), indices, labels, ref, noised, valid,
                          float(track.length), float(track.width))


def detokenize(vocab: MotionVocab, start_state, indices) -> np.ndarray:
    """States at 0.1 s: ``5 * len(indices) + 1`` rows starting at ``start_state``."""
    if isinstance(start_state, Pose2):
        pose = start_state.as_array()
    elif hasattr(start_state, "pose"):
        pose = start_state.pose.as_array()
    else:
        pose = np.asarray(start_state, float).reshape(3)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if len(indices) and (indices.min() < 0 or indices.max() >= vocab.size):
        raise ValidationError(f"token index out of range for vocabulary of size {vocab.size}")
    out = [pose[None]]
    for i in indices:
        out.append(compose_arrays(pose, vocab.tokens[i]))
        pose = compose_arrays(pose, vocab.endpoints[i])
    return np.concatenate(out, axis=0)


def replay_ref_poses(vocab: MotionVocab, tt: TokenizedTrack) -> np.ndarray:
    """Recompute reference poses from stored tokens (valid runs only)."""
    ref = tt.ref_poses.copy()
    for t in range(len(tt)):
        if tt.valid[t]:
            ref[t + 1] = compose_arrays(ref[t], vocab.endpoints[tt.indices[t]])
    return ref


def match_residuals(vocab: MotionVocab, track: Track, tt: TokenizedTrack) -> np.ndarray:
    """Distance between each valid step's ground-truth segment and its matched label.

    The segment is expressed in that step's reference frame, as during
    rolling matching.
    """
    out = []
    for t in np.flatnonzero(tt.valid):
        target = to_local_arrays(tt.ref_poses[t], track.states[SUBSTEPS * t + 1:SUBSTEPS * (t + 1) + 1])
        out.append(token_distance(vocab.tokens[tt.labels[t]], target))
    return np.array(out)
