"""Road vector tokens: <=5 m map pieces, their vocabulary, and topological sequences."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .geometry import Polyline, PolylineKind, to_local_arrays, wrap_angle
from .io import SCHEMA_VERSION, check_schema, sha256_of
from .motion_tokens import NoiseConfig, greedy_disk_cover

MAX_SEGMENT_LENGTH = 5.0
ROAD_NOISE = NoiseConfig(enabled=True, k=5, p=0.2)


@dataclass
class RoadSegment:
    polyline_id: str
    seq: int
    kind: PolylineKind
    points: np.ndarray
    start_pose: np.ndarray
    descriptor: np.ndarray
    length: float
    successors: tuple = ()

    @property
    def key(self) -> tuple:
        return (self.polyline_id, self.seq)


def _cut(points: np.ndarray, cum: np.ndarray, a: float, b: float) -> np.ndarray:
    def at(s):
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(points) - 2))
        seg = cum[i + 1] - cum[i]
        u = 0.0 if seg == 0 else (s - cum[i]) / seg
        return points[i] + u * (points[i + 1] - points[i])

    inner = points[(cum > a + 1e-12) & (cum < b - 1e-12)]
    pts = np.vstack([at(a)[None], inner, at(b)[None]])
    keep = np.ones(len(pts), bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12
    return pts[keep]


def _describe(pts: np.ndarray) -> tuple:
    d0 = pts[1] - pts[0]
    d1 = pts[-1] - pts[-2]
    start = np.array([pts[0, 0], pts[0, 1], math.atan2(d0[1], d0[0])])
    end = np.array([pts[-1, 0], pts[-1, 1], math.atan2(d1[1], d1[0])])
    desc = to_local_arrays(start, end)
    return start, desc


def split_polylines(polylines, max_len: float = MAX_SEGMENT_LENGTH) -> list:
    """Arc-length split into pieces of at most ``max_len`` metres.

    Pieces are greedy (full-length pieces then a remainder). The last piece
    of a polyline links to the first piece of each successor polyline.
    """
    out = []
    first_of = {}
    for pl in polylines:
        pts = pl.points
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        L = float(cum[-1])
        n = max(1, math.ceil(L / max_len - 1e-9))
        bounds = [min(k * max_len, L) for k in range(n)] + [L]
        segs = []
        for k in range(n):
            piece = _cut(pts, cum, bounds[k], bounds[k + 1])
            if len(piece) < 2:
                continue
            start, desc = _describe(piece)
            segs.append(RoadSegment(pl.id, len(segs), PolylineKind(pl.kind), piece, start, desc,
                                    bounds[k + 1] - bounds[k]))
        first_of[pl.id] = (pl.id, 0)
        for k, s in enumerate(segs):
            s.successors = ((pl.id, k + 1),) if k + 1 < len(segs) else ()
        segs[-1].successors = tuple(("__succ__", sid) for sid in pl.successor_ids)
        out.extend(segs)
    for s in out:
        s.successors = tuple(first_of[sid] if tag == "__succ__" else (tag, sid) for tag, sid in s.successors)
    return out


def road_distances(tokens: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = tokens - np.asarray(target)[None]
    return np.hypot(d[:, 0], d[:, 1]) + np.abs(wrap_angle(d[:, 2]))


def road_distance(a, b) -> float:
    return float(road_distances(np.asarray(a, float)[None], np.asarray(b, float))[0])


@dataclass
class RoadVocab:
    tokens: np.ndarray
    epsilon: float
    seed: int = 0
    target_size: int = 1024

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64).reshape(-1, 3)
        if len(self.tokens) == 0:
            raise ValidationError("empty road vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return self.size

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "artifact": "road_vocab", "class": "road", "epsilon": self.epsilon,
                "seed": self.seed, "target_size": self.target_size, "tokens": self.tokens.tolist()}

    @classmethod
    def from_dict(cls, d: dict, where: str = "<road vocab>") -> "RoadVocab":
        check_schema(d, where, "road_vocab")
        return cls(np.array(d["tokens"], dtype=np.float64), float(d["epsilon"]), int(d.get("seed", 0)),
                   int(d.get("target_size", len(d["tokens"]))))

    def digest(self) -> str:
        return sha256_of(self.to_dict())


def build_road_vocab(segments, size: int = 1024, epsilon: float = 0.1, seed: int = 0) -> RoadVocab:
    desc = np.array([s.descriptor if isinstance(s, RoadSegment) else s for s in segments], dtype=np.float64)
    desc = desc.reshape(-1, 3)
    idx = greedy_disk_cover(desc, road_distances, size, float(epsilon), seed)
    return RoadVocab(desc[idx].copy(), float(epsilon), seed, size)


def nearest_road_token(vocab: RoadVocab, descriptor) -> tuple:
    d = road_distances(vocab.tokens, descriptor)
    i = int(np.argmin(d))
    return i, float(d[i])


@dataclass
class RoadTokenInstance:
    pose: np.ndarray
    index: int
    label: int
    polyline_id: str
    seq: int
    kind: PolylineKind
    descriptor: np.ndarray
    length: float
    successors: tuple = ()

    def to_dict(self) -> dict:
        return {"pose": self.pose.tolist(), "index": self.index, "label": self.label,
                "polyline_id": self.polyline_id, "seq": self.seq, "kind": self.kind.value,
                "descriptor": self.descriptor.tolist(), "length": self.length,
                "successors": list(self.successors)}

    @classmethod
    def from_dict(cls, d: dict) -> "RoadTokenInstance":
        return cls(np.array(d["pose"], float), int(d["index"]), int(d.get("label", d["index"])),
                   str(d["polyline_id"]), int(d["seq"]), PolylineKind(d["kind"]),
                   np.array(d["descriptor"], float), float(d["length"]),
                   tuple(int(i) for i in d.get("successors", ())))


def _segment_seed(seed: int, key: tuple) -> list:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(str(key[0]).encode()), int(key[1])]


def road_sequences(segments) -> list:
    """Root-to-leaf chains over successor links, as lists of positions in ``segments``.

    A branch duplicates the shared prefix; a chain that re-enters a piece it
    already contains stops before it. Components without a root start from
    their lowest-index piece.
    """
    pos = {s.key: i for i, s in enumerate(segments)}
    succ = [[pos[k] for k in s.successors if k in pos] for s in segments]
    has_pred = np.zeros(len(segments), bool)
    for nxt in succ:
        for j in nxt:
            has_pred[j] = True
    seen = np.zeros(len(segments), bool)
    seqs = []

    def walk(start):
        stack = [[start]]
        while stack:
            path = stack.pop()
            seen[path] = True
            on_path = set(path)
            nxt = [j for j in succ[path[-1]] if j not in on_path]
            if not nxt:
                seqs.append(path)
                continue
            for j in reversed(nxt):
                stack.append(path + [j])

    for i in np.flatnonzero(~has_pred):
        walk(int(i))
    while not seen.all():
        walk(int(np.flatnonzero(~seen)[0]))
    return seqs


def tokenize_map(vocab: RoadVocab, polylines, noise: NoiseConfig | None = None, seed: int = 0) -> tuple:
    """Returns ``(instances, sequences)``; sequences index into ``instances``.

    Noise draws are seeded per piece from its (polyline id, position) so the
    result does not depend on the order pieces are visited.
    """
    noise = noise or NoiseConfig()
    segments = split_polylines(polylines) if polylines and isinstance(polylines[0], Polyline) else list(polylines)
    pos = {s.key: i for i, s in enumerate(segments)}
    instances = []
    for s in segments:
        d = road_distances(vocab.tokens, s.descriptor)
        label = int(np.argmin(d))
        idx = label
        if noise.enabled and noise.k > 1:
            rng = np.random.default_rng(_segment_seed(seed, s.key))
            if rng.random() < noise.p:
                cand = np.argsort(d, kind="stable")[:noise.k]
                idx = int(cand[rng.integers(len(cand))])
        instances.append(RoadTokenInstance(s.start_pose.copy(), idx, label, s.polyline_id, s.seq, s.kind,
                                           s.descriptor.copy(), float(s.length),
                                           tuple(pos[k] for k in s.successors if k in pos)))
    return instances, road_sequences(segments)
