"""Road encoder and factorized motion decoder.

The road encoder runs self-attention over road tokens within a graph-hop
radius. The motion decoder repeats fusion blocks of
temporal -> agent-agent -> agent-map attention, all in a pre-norm residual
layout, and every key/value carries a relative positional embedding (RPE)
computed from the relative pose between query and key. Absolute
coordinates never reach the network.

Two decode paths share the weights: :meth:`SMART.motion_logits` encodes a
whole token sequence at once (training, oracle checks) and
:class:`DecodeCache` advances one token step at a time by reusing the key
and value projections of earlier steps.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .exceptions import ConfigError, VocabularyMismatchError
from .features import (RPE_DIM, Gathered, agent_gather, map_gather, road_gather, sequence_gather,
                       temporal_gather)
from .geometry import AGENT_CLASSES, PolylineKind

N_CLASSES = len(AGENT_CLASSES)
N_KINDS = len(PolylineKind)
MASKED_LOGIT = -1e9
SHAPE_SCALE = 5.0


@dataclass
class ModelConfig:
    road_layers: int = 1
    road_dim: int = 64
    road_attn_radius: int = 10
    temporal_layers: int = 1
    a2a_layers: int = 2
    m2a_layers: int = 2
    n_heads: int = 8
    head_dim: int = 8
    agent_dim: int = 64
    motion_vocab_size: int = 512
    road_vocab_size: int = 1024
    agent_radius: float = 50.0
    map_radius: float = 50.0
    map_neighbors: int = 32
    head_hidden: int = 128
    ffn_mult: int = 4
    dropout: float = ad.DROPOUT_RATE
    rvt: bool = True
    nat: bool = True
    nrvt: bool = True
    rvntp: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def fusion_blocks(self) -> int:
        return max(self.temporal_layers, self.a2a_layers, self.m2a_layers)

    def validate(self) -> None:
        for name in ("road_layers", "road_dim", "road_attn_radius", "temporal_layers", "a2a_layers",
                     "m2a_layers", "n_heads", "head_dim", "agent_dim", "motion_vocab_size", "road_vocab_size",
                     "map_neighbors", "head_hidden", "ffn_mult"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if self.agent_dim != self.n_heads * self.head_dim:
            raise ConfigError("agent_dim", f"{self.agent_dim} != n_heads * head_dim = {self.n_heads * self.head_dim}")
        if self.road_dim % self.n_heads:
            raise ConfigError("road_dim", f"{self.road_dim} is not divisible by n_heads={self.n_heads}")
        if not (self.agent_radius > 0 and self.map_radius > 0):
            raise ConfigError("agent_radius", "radii must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must be in [0, 1)")
        if self.nrvt and not self.rvt:
            raise ConfigError("nrvt", "noised road tokens require rvt")
        if self.rvntp and not self.rvt:
            raise ConfigError("rvntp", "road next-token prediction requires rvt")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown model config field")
        return cls(**d)


PRESETS = {
    "smart-1m": ModelConfig(),
    "smart-1m-tiny": ModelConfig(road_dim=16, agent_dim=16, n_heads=2, head_dim=8, a2a_layers=1, m2a_layers=1,
                                 map_neighbors=16, head_hidden=32),
}


def get_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def width_config(width: int, base: ModelConfig | None = None, **overrides) -> ModelConfig:
    """A model of the given agent/road width with 8-dim heads, for size sweeps."""
    base = base or PRESETS["smart-1m"]
    heads = max(1, width // 8)
    return replace(base, agent_dim=heads * 8, road_dim=heads * 8, n_heads=heads, head_dim=8,
                   head_hidden=2 * heads * 8, **overrides)


# -- inputs -----------------------------------------------------------------

@dataclass
class RoadInputs:
    index: np.ndarray
    label: np.ndarray
    kind: np.ndarray
    poses: np.ndarray
    geom: np.ndarray
    successors: list
    sequences: list

    @property
    def size(self) -> int:
        return len(self.index)

    @classmethod
    def from_instances(cls, instances, sequences) -> "RoadInputs":
        n = len(instances)
        geom = np.zeros((n, 5))
        for i, r in enumerate(instances):
            dx, dy, dyaw = r.descriptor
            geom[i] = [dx / SHAPE_SCALE, dy / SHAPE_SCALE, math.sin(dyaw), math.cos(dyaw), r.length / SHAPE_SCALE]
        return cls(np.array([r.index for r in instances], np.int64), np.array([r.label for r in instances], np.int64),
                   np.array([r.kind.index for r in instances], np.int64),
                   np.array([r.pose for r in instances], np.float64).reshape(n, 3), geom,
                   [list(r.successors) for r in instances], [list(s) for s in sequences])


@dataclass
class MotionInputs:
    """Token steps for A agents over T steps.

    ``poses[a, t]`` is the pose reached after applying token ``t``; it is the
    frame in which the model predicts token ``t + 1``.
    """

    tokens: np.ndarray
    labels: np.ndarray
    cls: np.ndarray
    dims: np.ndarray
    valid: np.ndarray
    poses: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.tokens.shape

    @classmethod
    def from_tracks(cls, tracks) -> "MotionInputs":
        return cls(np.array([t.indices for t in tracks], np.int64), np.array([t.labels for t in tracks], np.int64),
                   np.array([t.agent_class.index for t in tracks], np.int64),
                   np.array([[t.length, t.width] for t in tracks], np.float64),
                   np.array([t.valid for t in tracks], bool),
                   np.array([t.ref_poses[1:] for t in tracks], np.float64))

    def take_agents(self, order) -> "MotionInputs":
        return MotionInputs(*(getattr(self, f.name)[order] for f in fields(self)))

    def take_steps(self, n: int) -> "MotionInputs":
        return MotionInputs(self.tokens[:, :n], self.labels[:, :n], self.cls, self.dims, self.valid[:, :n],
                            self.poses[:, :n])


def scene_inputs(scene) -> tuple:
    return MotionInputs.from_tracks(scene.tracks), RoadInputs.from_instances(scene.road, scene.road_sequences)


class _T:
    """Gathered neighbour table converted to tensors."""

    def __init__(self, g: Gathered, dtype):
        self.nbr = torch.from_numpy(np.ascontiguousarray(g.nbr))
        self.mask = torch.from_numpy(np.ascontiguousarray(g.mask))
        self.feat = torch.from_numpy(np.ascontiguousarray(g.feat)).to(dtype)
        self.width = g.width


# -- layers -----------------------------------------------------------------

def _lin(m: nn.Linear, x, op):
    return ad.linear(x, m.weight, m.bias, op)


def _ln(m: nn.LayerNorm, x, op):
    return ad.layer_norm(x, m.weight, m.bias, m.eps, op)


class MLP(nn.Module):
    """Three linear layers with GELU in between."""

    def __init__(self, d_in, hidden, d_out, name="mlp"):
        super().__init__()
        self.l1, self.l2, self.l3 = nn.Linear(d_in, hidden), nn.Linear(hidden, hidden), nn.Linear(hidden, d_out)
        self.name = name

    def hidden(self, x):
        x = ad.gelu(_lin(self.l1, x, self.name + ".l1"))
        return ad.gelu(_lin(self.l2, x, self.name + ".l2"))

    def forward(self, x):
        return _lin(self.l3, self.hidden(x), self.name + ".l3")


class AttentionUnit(nn.Module):
    """Pre-norm attention with RPE-augmented keys/values, then a feed-forward, both residual.

    ``k_ij = W_k LN(x_j) + W_kr RPE_ij`` is the concatenation form
    ``W [x_j; RPE_ij]`` split in two so the first term can be cached.
    """

    def __init__(self, q_dim, src_dim, n_heads, head_dim, ffn_mult, dropout, cross: bool, name: str):
        super().__init__()
        inner = n_heads * head_dim
        self.n_heads, self.head_dim, self.inner, self.cross = n_heads, head_dim, inner, cross
        self.rate, self.name = dropout, name
        self.ln_q = nn.LayerNorm(q_dim)
        self.ln_src = nn.LayerNorm(src_dim) if cross else None
        self.wq = nn.Linear(q_dim, inner)
        # a key bias shifts every score of a query equally, so softmax cancels it
        self.wk = nn.Linear(src_dim, inner, bias=False)
        self.wv = nn.Linear(src_dim, inner)
        self.rpe1 = nn.Linear(RPE_DIM, inner)
        self.rpe2 = nn.Linear(inner, 2 * inner)
        self.wo = nn.Linear(inner, q_dim)
        self.ln_ff = nn.LayerNorm(q_dim)
        self.ff1 = nn.Linear(q_dim, ffn_mult * q_dim)
        self.ff2 = nn.Linear(ffn_mult * q_dim, q_dim)

    def project(self, src):
        h = _ln(self.ln_src if self.cross else self.ln_q, src, self.name + ".ln_src")
        return _lin(self.wk, h, self.name + ".wk"), _lin(self.wv, h, self.name + ".wv")

    def forward(self, x, ks, vs, g: _T, train=False, gen=None):
        N = x.shape[0]
        if g.width and ks.shape[0]:
            q = _lin(self.wq, _ln(self.ln_q, x, self.name + ".ln_q"), self.name + ".wq")
            r = _lin(self.rpe2, ad.gelu(_lin(self.rpe1, g.feat, self.name + ".rpe1")), self.name + ".rpe2")
            k = ks[g.nbr] + r[..., :self.inner]
            v = vs[g.nbr] + r[..., self.inner:]
            H, Dh = self.n_heads, self.head_dim
            o = ad.attention(q.view(N, H, Dh), k.view(N, g.width, H, Dh), v.view(N, g.width, H, Dh), g.mask,
                             self.name + ".attn")
            a = _lin(self.wo, o.reshape(N, self.inner), self.name + ".wo")
        else:
            a = self.wo.bias.expand(N, -1)
        x = x + ad.dropout(a, self.rate, train, gen)
        h = ad.gelu(_lin(self.ff1, _ln(self.ln_ff, x, self.name + ".ln_ff"), self.name + ".ff1"))
        return x + ad.dropout(_lin(self.ff2, h, self.name + ".ff2"), self.rate, train, gen)


class FusionBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, k: int):
        super().__init__()
        unit = lambda cross, name: AttentionUnit(cfg.agent_dim, cfg.road_dim if cross else cfg.agent_dim,
                                                 cfg.n_heads, cfg.head_dim, cfg.ffn_mult, cfg.dropout, cross,
                                                 f"block{k}.{name}")
        self.temporal = unit(False, "temporal") if k < cfg.temporal_layers else None
        self.a2a = unit(False, "a2a") if k < cfg.a2a_layers else None
        self.m2a = unit(True, "m2a") if k < cfg.m2a_layers else None


# -- model ------------------------------------------------------------------

class SMART(nn.Module):
    def __init__(self, config: ModelConfig, class_vocab_sizes=None, road_vocab_size: int | None = None):
        super().__init__()
        config.validate()
        c = self.config = config
        sizes = tuple(class_vocab_sizes) if class_vocab_sizes is not None else (c.motion_vocab_size,) * N_CLASSES
        if len(sizes) != N_CLASSES or any(s < 1 or s > c.motion_vocab_size for s in sizes):
            raise VocabularyMismatchError(
                f"class vocabulary sizes {sizes} do not fit motion_vocab_size={c.motion_vocab_size}")
        road_size = c.road_vocab_size if road_vocab_size is None else int(road_vocab_size)
        if not 1 <= road_size <= c.road_vocab_size:
            raise VocabularyMismatchError(f"road vocabulary size {road_size} exceeds road_vocab_size={c.road_vocab_size}")
        self.class_vocab_sizes = sizes
        self.road_vocab_actual = road_size
        d, dr = c.agent_dim, c.road_dim
        if c.rvt:
            self.road_table = nn.Parameter(torch.empty(c.road_vocab_size, dr))
        else:
            self.road_geom = nn.Linear(5, dr)
        self.road_kind = nn.Parameter(torch.empty(N_KINDS, dr))
        self.road_units = nn.ModuleList(
            AttentionUnit(dr, dr, c.n_heads, dr // c.n_heads, c.ffn_mult, c.dropout, False, f"road{i}")
            for i in range(c.road_layers))
        self.road_ln = nn.LayerNorm(dr)
        self.motion_table = nn.Parameter(torch.empty(N_CLASSES * c.motion_vocab_size, d))
        self.class_emb = nn.Parameter(torch.empty(N_CLASSES, d))
        self.shape_emb = nn.Linear(2, d)
        self.blocks = nn.ModuleList(FusionBlock(c, k) for k in range(c.fusion_blocks))
        self.motion_ln = nn.LayerNorm(d)
        self.motion_head = MLP(d, c.head_hidden, N_CLASSES * c.motion_vocab_size, "motion_head")
        self.road_head = MLP(dr, c.head_hidden, c.road_vocab_size, "road_head") if c.rvntp else None
        self.road_encode_calls = 0

    # parameters

    def init_params(self, seed: int, std: float = 0.02, jitter: float = 0.0) -> "SMART":
        """Normal(0, std) weights, zero biases, unit norm gains.

        ``jitter`` adds Normal(0, jitter) to biases and gains too, which gives
        gradient checks a point away from the symmetric initialization.
        """
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                noise = torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype)
                if name.endswith("bias"):
                    p.copy_(noise * jitter)
                elif ".ln" in name or name.startswith(("road_ln", "motion_ln")) or "_ln." in name:
                    p.copy_(1.0 + noise * jitter)
                else:
                    p.copy_(noise * std)
        return self

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def dtype(self):
        return self.motion_table.dtype

    # road

    def road_embed(self, road: RoadInputs, idx=None):
        idx = np.arange(road.size) if idx is None else idx
        kind = ad.embedding(torch.from_numpy(road.kind[idx]), self.road_kind, "road_kind")
        if self.config.rvt:
            return ad.embedding(torch.from_numpy(road.index[idx]), self.road_table, "road_table") + kind
        geom = torch.from_numpy(road.geom[idx]).to(self.dtype)
        return _lin(self.road_geom, geom, "road_geom") + kind

    def _road_stack(self, x, g: _T, train, gen):
        for u in self.road_units:
            ks, vs = u.project(x)
            x = u(x, ks, vs, g, train, gen)
        return _ln(self.road_ln, x, "road_ln")

    def road_encode(self, road: RoadInputs, train=False, gen=None, gathered: Gathered | None = None):
        self.road_encode_calls += 1
        if road.size == 0:
            return torch.zeros((0, self.config.road_dim), dtype=self.dtype)
        g = gathered or road_gather(road.poses, road.successors, self.config.road_attn_radius)
        return self._road_stack(self.road_embed(road), _T(g, self.dtype), train, gen)

    def road_ntp(self, road: RoadInputs, train=False, gen=None):
        """Logits and targets for predicting each sequence's next road token.

        Runs a separate pass over sequence positions in which a position can
        only see itself and earlier positions of the same sequence.
        """
        if self.road_head is None:
            raise ConfigError("rvntp", "model was built without the road prediction head")
        seqs = [s for s in road.sequences if len(s) >= 2]
        inst, g, nxt = sequence_gather(seqs, road.poses, self.config.road_attn_radius)
        keep = nxt >= 0
        if not keep.any():
            return torch.zeros((0, self.config.road_vocab_size), dtype=self.dtype), torch.zeros(0, dtype=torch.long)
        h = self._road_stack(self.road_embed(road, inst), _T(g, self.dtype), train, gen)
        logits = self.road_head(h[torch.from_numpy(keep)])
        logits = self._mask_road(logits)
        return logits, torch.from_numpy(road.label[nxt[keep]])

    def _mask_road(self, logits):
        if self.road_vocab_actual < self.config.road_vocab_size:
            col = torch.arange(self.config.road_vocab_size) >= self.road_vocab_actual
            logits = logits.masked_fill(col, MASKED_LOGIT)
        return logits

    # motion

    def motion_embed(self, tokens: np.ndarray, cls: np.ndarray, dims: np.ndarray):
        """tokens [A, Q] -> [A * Q, d]."""
        A, Q = tokens.shape
        sizes = np.array(self.class_vocab_sizes)
        if tokens.size and ((tokens < 0).any() or (tokens >= sizes[cls][:, None]).any()):
            raise VocabularyMismatchError("motion token index outside its class vocabulary")
        flat = (cls[:, None] * self.config.motion_vocab_size + tokens).reshape(-1)
        e = ad.embedding(torch.from_numpy(flat), self.motion_table, "motion_table").view(A, Q, -1)
        c = ad.embedding(torch.from_numpy(cls), self.class_emb, "class_emb")
        s = _lin(self.shape_emb, torch.from_numpy(dims / SHAPE_SCALE).to(self.dtype), "shape_emb")
        return (e + (c + s)[:, None, :]).reshape(A * Q, -1)

    def motion_head_logits(self, x, cls: np.ndarray, Q: int):
        """Final norm and per-class head slice; x [A * Q, d] -> [A, Q, V]."""
        c = self.config
        V = c.motion_vocab_size
        A = len(cls)
        h = self.motion_head.hidden(_ln(self.motion_ln, x, "motion_ln")).view(A, Q, -1)
        cls_t = torch.from_numpy(cls)
        W = self.motion_head.l3.weight.view(N_CLASSES, V, -1)[cls_t]
        b = self.motion_head.l3.bias.view(N_CLASSES, V)[cls_t]
        logits = ad.checked("motion_head.l3", torch.einsum("aqh,avh->aqv", h, W) + b[:, None, :])
        sizes = torch.tensor(self.class_vocab_sizes)[cls_t]
        col = torch.arange(V)[None, :] >= sizes[:, None]
        return logits.masked_fill(col[:, None, :], MASKED_LOGIT)

    def gather_motion(self, m: MotionInputs, road: RoadInputs) -> dict:
        A, T = m.shape
        c = self.config
        return {"temporal": _T(temporal_gather(m.poses, np.arange(T), m.poses, m.valid, T), self.dtype),
                "a2a": _T(agent_gather(m.poses, m.valid, c.agent_radius), self.dtype),
                "m2a": _T(map_gather(m.poses, road.poses, c.map_radius, c.map_neighbors), self.dtype)}

    def motion_logits(self, m: MotionInputs, road: RoadInputs, r=None, train=False, gen=None, gathered=None):
        """Full-sequence decode; returns logits [A, T, V] where step t predicts token t + 1."""
        A, T = m.shape
        if r is None:
            r = self.road_encode(road, train, gen)
        g = gathered or self.gather_motion(m, road)
        x = self.motion_embed(m.tokens, m.cls, m.dims)
        for blk in self.blocks:
            if blk.temporal is not None:
                ks, vs = blk.temporal.project(x)
                x = blk.temporal(x, ks, vs, g["temporal"], train, gen)
            if blk.a2a is not None:
                ks, vs = blk.a2a.project(x)
                x = blk.a2a(x, ks, vs, g["a2a"], train, gen)
            if blk.m2a is not None:
                ks, vs = blk.m2a.project(r)
                x = blk.m2a(x, ks, vs, g["m2a"], train, gen)
        return self.motion_head_logits(x, m.cls, T)


def motion_targets(m: MotionInputs) -> tuple:
    """(mask [A, T], target [A, T]): step t is supervised by the clean label of step t + 1."""
    A, T = m.shape
    mask = np.zeros((A, T), bool)
    tgt = np.zeros((A, T), np.int64)
    mask[:, :-1] = m.valid[:, :-1] & m.valid[:, 1:]
    tgt[:, :-1] = m.labels[:, 1:]
    return mask, tgt


# -- incremental decoding ---------------------------------------------------

class DecodeCache:
    """Per-rollout state for one-step-at-a-time decoding.

    Holds, for every temporal attention layer, the key and value source
    projections of all committed steps, plus the reference poses and
    validity of those steps. Road embeddings and their key/value
    projections are computed once and may be shared across rollouts.
    """

    def __init__(self, model: SMART, cls, dims, capacity: int, road: RoadInputs, road_state=None):
        self.model = model
        self.cls = np.asarray(cls, np.int64)
        self.dims = np.asarray(dims, np.float64)
        A = len(self.cls)
        inner = model.config.agent_dim
        self.capacity = capacity
        self.t = 0
        self.poses = np.zeros((A, capacity, 3))
        self.valid = np.zeros((A, capacity), bool)
        self.kv = {k: (torch.zeros((A, capacity, inner), dtype=model.dtype),
                       torch.zeros((A, capacity, inner), dtype=model.dtype))
                   for k, blk in enumerate(model.blocks) if blk.temporal is not None}
        self.road = road
        self.road_state = road_state if road_state is not None else encode_road_state(model, road)

    @torch.no_grad()
    def step(self, tokens, poses, valid) -> torch.Tensor:
        """Commit token step ``t`` for all agents and return logits [A, V] for step ``t + 1``."""
        m, c = self.model, self.model.config
        t = self.t
        if t >= self.capacity:
            raise IndexError("decode cache is full")
        A = len(self.cls)
        tokens = np.asarray(tokens, np.int64).reshape(A, 1)
        poses = np.asarray(poses, np.float64).reshape(A, 1, 3)
        valid = np.asarray(valid, bool).reshape(A, 1)
        g_t = _T(temporal_gather(poses, np.array([t]), self.poses[:, :t], self.valid[:, :t], t), m.dtype)
        g_a = _T(agent_gather(poses, valid, c.agent_radius), m.dtype)
        g_m = _T(map_gather(poses, self.road.poses, c.map_radius, c.map_neighbors), m.dtype)
        x = m.motion_embed(tokens, self.cls, self.dims)
        for k, blk in enumerate(m.blocks):
            if blk.temporal is not None:
                kc, vc = self.kv[k]
                kn, vn = blk.temporal.project(x)
                x = blk.temporal(x, kc[:, :t].reshape(A * t, kc.shape[-1]), vc[:, :t].reshape(A * t, vc.shape[-1]), g_t)
                kc[:, t], vc[:, t] = kn, vn
            if blk.a2a is not None:
                ks, vs = blk.a2a.project(x)
                x = blk.a2a(x, ks, vs, g_a)
            if blk.m2a is not None:
                ks, vs = self.road_state["m2a"][k]
                x = blk.m2a(x, ks, vs, g_m)
        self.poses[:, t] = poses[:, 0]
        self.valid[:, t] = valid[:, 0]
        self.t = t + 1
        return m.motion_head_logits(x, self.cls, 1)[:, 0]


@torch.no_grad()
def encode_road_state(model: SMART, road: RoadInputs) -> dict:
    r = model.road_encode(road)
    return {"r": r, "m2a": {k: blk.m2a.project(r) for k, blk in enumerate(model.blocks) if blk.m2a is not None}}
