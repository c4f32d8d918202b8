"""Tokenized scenes: motion tokens for every agent plus the tokenized map."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import VocabularyMismatchError
from .geometry import AGENT_CLASSES, AgentClass, Scenario
from .io import SCHEMA_VERSION, check_schema
from .motion_tokens import (SUBSTEPS, MotionVocab, NoiseConfig, TokenizedTrack, build_motion_vocab, tokenize_track,
                            vocab_training_segments)
from .road_tokens import RoadTokenInstance, RoadVocab, build_road_vocab, split_polylines, tokenize_map


@dataclass
class VocabSet:
    """One motion vocabulary per agent class plus the road vocabulary."""

    motion: dict
    road: RoadVocab

    def __post_init__(self):
        self.motion = {AgentClass(k): v for k, v in self.motion.items()}
        for k, v in self.motion.items():
            if v.agent_class != k:
                raise VocabularyMismatchError(f"vocabulary registered as {k.value} is {v.agent_class.value}")

    def for_class(self, c) -> MotionVocab:
        c = AgentClass(c)
        if c not in self.motion:
            raise VocabularyMismatchError(f"no motion vocabulary for class {c.value}")
        return self.motion[c]

    def sizes(self) -> dict:
        return {c.value: self.motion[c].size for c in AGENT_CLASSES if c in self.motion} | {"road": self.road.size}

    def class_sizes(self) -> list:
        """Motion vocabulary size per class in model order; absent classes get 1."""
        return [self.motion[c].size if c in self.motion else 1 for c in AGENT_CLASSES]

    def digests(self) -> dict:
        return {c.value: v.digest() for c, v in self.motion.items()} | {"road": self.road.digest()}

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "artifact": "vocab_set",
                "motion": {c.value: v.to_dict() for c, v in self.motion.items()}, "road": self.road.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, where: str = "<vocab set>") -> "VocabSet":
        check_schema(d, where, "vocab_set")
        return cls({k: MotionVocab.from_dict(v, where) for k, v in d["motion"].items()},
                   RoadVocab.from_dict(d["road"], where))


def build_vocab_set(scenarios, motion_size: int = 512, road_size: int = 1024, epsilon: dict | None = None,
                    road_epsilon: float = 0.1, seed: int = 0, copies: int = 4) -> VocabSet:
    """Motion vocabularies for every class present in ``scenarios`` plus the road vocabulary."""
    scenarios = list(scenarios)
    tracks = [t for s in scenarios for t in s.tracks]
    motion = {}
    for c in AGENT_CLASSES:
        mine = [t for t in tracks if t.agent_class == c]
        if not mine:
            continue
        eps = (epsilon or {}).get(c.value)
        segs = vocab_training_segments(mine, c, copies=copies, epsilon=eps, seed=seed)
        if len(segs):
            motion[c] = build_motion_vocab(segs, c, motion_size, eps, seed)
    if not motion:
        raise VocabularyMismatchError("no agent track long enough to build a motion vocabulary")
    road = build_road_vocab([x for s in scenarios for x in split_polylines(s.map)], road_size, road_epsilon, seed)
    return VocabSet(motion, road)


def agent_seed(seed: int, agent_id: str) -> list:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(str(agent_id).encode())]


@dataclass
class TokenizedScene:
    scenario_id: str
    tracks: list
    road: list
    road_sequences: list
    history_tokens: int
    n_token_steps: int
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.tracks)

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "artifact": "tokenized_scene", "scenario_id": self.scenario_id,
                "history_tokens": self.history_tokens, "n_token_steps": self.n_token_steps,
                "tracks": [t.to_dict() for t in self.tracks], "road": [r.to_dict() for r in self.road],
                "road_sequences": [list(map(int, s)) for s in self.road_sequences], "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict, where: str = "<tokenized scene>") -> "TokenizedScene":
        check_schema(d, where, "tokenized_scene")
        return cls(str(d["scenario_id"]), [TokenizedTrack.from_dict(t) for t in d["tracks"]],
                   [RoadTokenInstance.from_dict(r) for r in d["road"]],
                   [list(s) for s in d["road_sequences"]], int(d["history_tokens"]), int(d["n_token_steps"]),
                   dict(d.get("meta", {})))


def tokenize_scenario(vocabs: VocabSet, scenario: Scenario, motion_noise: NoiseConfig | None = None,
                      road_noise: NoiseConfig | None = None, seed: int = 0) -> TokenizedScene:
    T = (scenario.n_steps - 1) // SUBSTEPS
    tracks = [tokenize_track(vocabs.for_class(tr.agent_class), tr, motion_noise,
                             np.random.SeedSequence(agent_seed(seed, tr.id)), n_steps=T)
              for tr in scenario.tracks]
    road, seqs = tokenize_map(vocabs.road, scenario.map, road_noise, seed)
    return TokenizedScene(scenario.scenario_id, tracks, road, seqs, (scenario.history_steps - 1) // SUBSTEPS, T,
                          {"vocab_digests": vocabs.digests()})
