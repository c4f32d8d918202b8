"""Next-token-prediction training for motion and road tokens."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import autodiff as ad
from .exceptions import ConfigError, NonFiniteError, ValidationError
from .model import SMART, MotionInputs, RoadInputs, get_preset, motion_targets
from .motion_tokens import SUBSTEPS, NoiseConfig, tokenize_track
from .road_tokens import split_polylines, tokenize_map
from .scene import TokenizedScene, VocabSet, agent_seed

log = logging.getLogger(__name__)

ABLATIONS = {
    "M1": dict(rvt=False, nat=False, nrvt=False, rvntp=False),
    "M2": dict(rvt=True, nat=False, nrvt=False, rvntp=False),
    "M3": dict(rvt=True, nat=True, nrvt=False, rvntp=False),
    "M4": dict(rvt=True, nat=True, nrvt=True, rvntp=False),
    "M5": dict(rvt=True, nat=True, nrvt=False, rvntp=True),
    "M6": dict(rvt=True, nat=True, nrvt=True, rvntp=True),
}


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.1
    dropout: float = 0.1
    batch_size: int = 4
    max_steps: int = 20000
    eval_every: int = 1000
    seed: int = 0
    rvt: bool = True
    nat: bool = True
    nrvt: bool = True
    rvntp: bool = True
    road_loss_weight: float = 1.0
    motion_noise_k: int = 5
    motion_noise_p: float = 0.5
    road_noise_k: int = 5
    road_noise_p: float = 0.2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    model: str = "smart-1m"
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        for name in ("batch_size", "max_steps", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.nrvt and not self.rvt:
            raise ConfigError("nrvt", "noised road tokens require rvt")
        if self.rvntp and not self.rvt:
            raise ConfigError("rvntp", "road next-token prediction requires rvt")
        if self.road_loss_weight < 0:
            raise ConfigError("road_loss_weight", "must be >= 0")

    @property
    def motion_noise(self) -> NoiseConfig:
        return NoiseConfig(self.nat, self.motion_noise_k, self.motion_noise_p)

    @property
    def road_noise(self) -> NoiseConfig:
        return NoiseConfig(self.nrvt, self.road_noise_k, self.road_noise_p)

    def model_config(self):
        return get_preset(self.model, dropout=self.dropout, rvt=self.rvt, nat=self.nat, nrvt=self.nrvt,
                          rvntp=self.rvntp, **self.model_overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known and k not in ("schema", "ablation"):
                raise ConfigError(f"train.{k}", "unknown training config field")
        ablation = d.get("ablation")
        d = {k: v for k, v in d.items() if k in known}
        if ablation is not None:
            if ablation not in ABLATIONS:
                raise ConfigError("train.ablation", f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
            d.update(ABLATIONS[ablation])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError("config", str(e)) from None


def with_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError("ablation", f"unknown ablation {name!r}")
    return replace(cfg, **ABLATIONS[name])


@dataclass
class LossBreakdown:
    motion: float
    road: float
    total: float
    motion_tokens: int
    road_tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, cfg.max_steps) / cfg.max_steps))


def motion_ntp_loss(logits: torch.Tensor, target, mask) -> torch.Tensor:
    """Mean cross-entropy over the (agent, step) pairs selected by ``mask``."""
    target = torch.as_tensor(target)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if logits.shape[:-1] != target.shape or target.shape != mask.shape:
        raise ValidationError(f"logits {tuple(logits.shape)} / target {tuple(target.shape)} / mask mismatch")
    if not bool(mask.any()):
        raise ValidationError("no valid motion tokens to score")
    return ad.cross_entropy(logits[mask], target[mask], "motion_ce")


def road_ntp_loss(logits: torch.Tensor, target) -> torch.Tensor:
    target = torch.as_tensor(target)
    if target.numel() == 0:
        log.warning("no road sequences of length >= 2; road loss is 0")
        return logits.sum() * 0.0
    return ad.cross_entropy(logits, target, "road_ce")


def scene_loss(model: SMART, m: MotionInputs, road: RoadInputs, cfg: TrainConfig, train: bool, gen=None) -> tuple:
    """(total tensor, LossBreakdown) for one tokenized scene."""
    r = model.road_encode(road, train, gen)
    logits = model.motion_logits(m, road, r=r, train=train, gen=gen)
    mask, tgt = motion_targets(m)
    lm = motion_ntp_loss(logits, tgt, mask)
    n_road = 0
    if cfg.rvntp and model.road_head is not None:
        rl, rt = model.road_ntp(road, train, gen)
        lr_ = road_ntp_loss(rl, rt)
        n_road = int(rt.numel())
    else:
        lr_ = lm * 0.0
    total = lm + cfg.road_loss_weight * lr_
    if not torch.isfinite(total):
        raise NonFiniteError(f"loss (motion={float(lm)}, road={float(lr_)})")
    mv, rv = float(lm.detach()), float(lr_.detach())
    return total, LossBreakdown(mv, rv, mv + cfg.road_loss_weight * rv, int(mask.sum()), n_road)


class SceneSource:
    """Tokenizes scenarios on demand, with optional per-call noise.

    Road pieces are split once per scenario; noise is re-drawn every call
    from the given seed so each training step sees a fresh perturbation.
    """

    def __init__(self, scenarios, vocabs: VocabSet):
        self.scenarios = list(scenarios)
        self.vocabs = vocabs
        self._segments = {}

    def __len__(self):
        return len(self.scenarios)

    def segments(self, i):
        if i not in self._segments:
            self._segments[i] = split_polylines(self.scenarios[i].map)
        return self._segments[i]

    def scene(self, i, motion_noise: NoiseConfig | None = None, road_noise: NoiseConfig | None = None,
              seed: int = 0) -> TokenizedScene:
        s = self.scenarios[i]
        T = (s.n_steps - 1) // SUBSTEPS
        tracks = [tokenize_track(self.vocabs.for_class(tr.agent_class), tr, motion_noise,
                                 np.random.SeedSequence(agent_seed(seed, tr.id)), n_steps=T) for tr in s.tracks]
        road, seqs = tokenize_map(self.vocabs.road, self.segments(i), road_noise, seed)
        return TokenizedScene(s.scenario_id, tracks, road, seqs, (s.history_steps - 1) // SUBSTEPS, T)

    def inputs(self, i, motion_noise=None, road_noise=None, seed: int = 0) -> tuple:
        sc = self.scene(i, motion_noise, road_noise, seed)
        return MotionInputs.from_tracks(sc.tracks), RoadInputs.from_instances(sc.road, sc.road_sequences)


def _mix(*parts) -> int:
    return zlib.crc32(np.array(parts, dtype=np.int64).tobytes())


class Trainer:
    def __init__(self, cfg: TrainConfig, vocabs: VocabSet, train_scenarios, val_scenarios=(), model: SMART | None = None):
        self.cfg = cfg
        self.vocabs = vocabs
        self.train = SceneSource(train_scenarios, vocabs)
        self.val = SceneSource(val_scenarios, vocabs)
        if len(self.train) == 0:
            raise ValidationError("training set is empty")
        sizes = vocabs.sizes()
        if model is None:
            model = SMART(cfg.model_config(), vocabs.class_sizes(), sizes["road"]).init_params(cfg.seed)
        self.model = model
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                                     weight_decay=cfg.weight_decay)
        self.step_count = 0
        self.history = []
        self._order = np.array([], np.int64)
        self._epoch = 0
        self._val_cache = None

    def _next_batch(self) -> list:
        out = []
        while len(out) < self.cfg.batch_size:
            if len(self._order) == 0:
                self._order = np.random.default_rng([self.cfg.seed, self._epoch]).permutation(len(self.train))
                self._epoch += 1
            out.append(int(self._order[0]))
            self._order = self._order[1:]
        return out

    def train_step(self) -> LossBreakdown:
        cfg, step = self.cfg, self.step_count
        self.model.train()
        lr = lr_at(step, cfg)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        parts = []
        for j, i in enumerate(self._next_batch()):
            seed = _mix(cfg.seed, step, i)
            m, road = self.train.inputs(i, cfg.motion_noise, cfg.road_noise, seed)
            gen = torch.Generator().manual_seed(_mix(cfg.seed, step, j, 1))
            total, br = scene_loss(self.model, m, road, cfg, True, gen)
            (total / cfg.batch_size).backward()
            parts.append(br)
        self.opt.step()
        self.step_count += 1
        n = len(parts)
        mo = sum(p.motion for p in parts) / n
        ro = sum(p.road for p in parts) / n
        return LossBreakdown(mo, ro, mo + cfg.road_loss_weight * ro, sum(p.motion_tokens for p in parts),
                             sum(p.road_tokens for p in parts))

    @torch.no_grad()
    def evaluate(self, source: SceneSource | None = None) -> LossBreakdown:
        """Token-weighted losses with dropout off and no tokenization noise."""
        source = source or self.val
        self.model.eval()
        num_m = num_r = 0.0
        n_m = n_r = 0
        for i in range(len(source)):
            m, road = source.inputs(i)
            _, br = scene_loss(self.model, m, road, self.cfg, False)
            num_m += br.motion * br.motion_tokens
            num_r += br.road * br.road_tokens
            n_m += br.motion_tokens
            n_r += br.road_tokens
        mo = num_m / max(n_m, 1)
        ro = num_r / max(n_r, 1)
        return LossBreakdown(mo, ro, mo + self.cfg.road_loss_weight * ro, n_m, n_r)

    def fit(self, steps: int | None = None, callback=None) -> list:
        steps = self.cfg.max_steps if steps is None else steps
        for _ in range(steps):
            br = self.train_step()
            row = {"step": self.step_count, "train_total": br.total, "train_motion": br.motion, "train_road": br.road,
                   "lr": lr_at(self.step_count - 1, self.cfg)}
            if len(self.val) and (self.step_count % self.cfg.eval_every == 0 or self.step_count == steps):
                v = self.evaluate()
                row.update(val_total=v.total, val_motion=v.motion, val_road=v.road)
            self.history.append(row)
            if callback is not None:
                callback(row)
        return self.history


def write_curve_csv(path, history) -> None:
    import csv

    cols = ["step", "train_total", "train_motion", "train_road", "val_total", "val_motion", "val_road", "lr"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in cols})
