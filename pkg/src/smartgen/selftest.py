"""Quick invariant suite run by ``smartgen selftest``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

GRAD_TOL = 1e-4
CACHE_TOL = 1e-5
SE2_TOL = 1e-4


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _fixture(seed: int = 7):
    from .model import SMART, get_preset, scene_inputs
    from .scene import build_vocab_set, tokenize_scenario
    from .synth import generate_corpus

    corpus = generate_corpus(3, kinds=("straight", "intersection", "arc"), n_agents=(3, 4), seed=seed,
                             class_weights=(0.6, 0.2, 0.2), horizon_steps=41)
    vocabs = build_vocab_set(corpus, motion_size=64, road_size=64, seed=seed)
    model = SMART(get_preset("smart-1m-tiny", dropout=0.0), vocabs.class_sizes(), vocabs.sizes()["road"])
    scene = tokenize_scenario(vocabs, corpus[1])
    return corpus, vocabs, model, scene_inputs(scene)


def op_grad_checks(seed: int = 0) -> float:
    """Worst relative error over the primitive ops, float64 with step 1e-5."""
    from . import autodiff as ad

    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    w, b, x = r(5, 4), r(5), r(3, 4)
    q, k, v = r(3, 2, 4), r(3, 6, 2, 4), r(3, 6, 2, 4)
    mask = torch.rand(3, 6, generator=g) > 0.3
    mask[:, 0] = True
    lw, lb = 1 + 0.1 * r(4), 0.1 * r(4)
    tgt = torch.tensor([1, 0, 4])
    cases = [
        (lambda t: (ad.linear(t, w, b) ** 2).sum(), x),
        (lambda t: (ad.linear(x, t, b) ** 2).sum(), w),
        (lambda t: (ad.layer_norm(t, lw, lb) ** 3).sum(), x),
        (lambda t: (ad.layer_norm(x, t, lb) ** 3).sum(), lw),
        (lambda t: ad.gelu(t).sum() + (ad.gelu(t) ** 2).sum(), x),
        (lambda t: (ad.masked_softmax(t, mask) ** 2).sum(), r(3, 6)),
        (lambda t: (ad.attention(t, k, v, mask) ** 2).sum(), q),
        (lambda t: (ad.attention(q, t, v, mask) ** 2).sum(), k),
        (lambda t: (ad.attention(q, k, t, mask) ** 2).sum(), v),
        (lambda t: ad.cross_entropy(t, tgt), r(3, 5)),
    ]
    return max(ad.grad_check(fn, pt) for fn, pt in cases)


def loss_grad_check(model, m, road, steps: int = 4, seed: int = 0) -> float:
    """Worst relative error of the full training loss over every parameter tensor.

    The check runs in float64 at a randomized parameter point (weights
    std 0.3 and jittered gains), where every parameter has an O(1) effect.
    """
    from . import autodiff as ad
    from .training import TrainConfig, scene_loss

    model = model.__class__(model.config, model.class_vocab_sizes, model.road_vocab_actual)
    model.init_params(seed, std=0.3, jitter=0.1).double()
    sub = m.take_steps(min(steps, m.shape[1]))
    cfg = TrainConfig(model="smart-1m-tiny")
    rep = ad.parameter_grad_check(model, lambda: scene_loss(model, sub, road, cfg, False)[0], seed=seed)
    return max(rep.values())


def causality_probe(model, m, road, t: int) -> bool:
    from .model import MotionInputs

    base = model.motion_logits(m, road)
    tok = m.tokens.copy()
    poses = m.poses.copy()
    tok[:, t] = (tok[:, t] + 1) % 2
    poses[:, t, :2] += 1.0
    pert = model.motion_logits(MotionInputs(tok, m.labels, m.cls, m.dims, m.valid, poses), road)
    return bool(torch.equal(base[:, :t], pert[:, :t]))


def permutation_probe(model, m, road, seed: int = 0) -> bool:
    perm = np.random.default_rng(seed).permutation(m.shape[0])
    return bool(torch.equal(model.motion_logits(m.take_agents(perm), road), model.motion_logits(m, road)[perm]))


def se2_probe(model, vocabs, scenario, transform) -> float:
    from .model import scene_inputs
    from .scene import tokenize_scenario

    a = model.motion_logits(*scene_inputs(tokenize_scenario(vocabs, scenario)))
    b = model.motion_logits(*scene_inputs(tokenize_scenario(vocabs, scenario.transformed(transform))))
    return float((a - b).abs().max())


def run_selftest(emit=print) -> list:
    from .geometry import Pose2
    from .rollout import incremental_equivalence_check, sample_top_k

    torch.manual_seed(0)
    checks = []

    def add(name, passed, detail):
        c = Check(name, bool(passed), detail)
        checks.append(c)
        if emit is not None:
            emit(c.line())

    t0 = time.perf_counter()
    err = op_grad_checks()
    add("grad_ops", err < GRAD_TOL, f"max rel err {err:.2e} < {GRAD_TOL:g}")
    corpus, vocabs, model, (m, road) = _fixture()
    err = loss_grad_check(model, m, road)
    add("grad_loss", err < GRAD_TOL, f"max rel err {err:.2e} < {GRAD_TOL:g}")
    model.init_params(1).eval()
    with torch.no_grad():
        gap = incremental_equivalence_check(model, m, road)
        add("cache_equivalence", gap <= CACHE_TOL, f"max |cached - full| {gap:.2e} <= {CACHE_TOL:g}")
        t = m.shape[1] // 2
        add("causality", causality_probe(model, m, road, t), f"past logits bit-identical after step {t}")
        add("permutation", permutation_probe(model, m, road), "permuted agents permute logits exactly")
        d = se2_probe(model, vocabs, corpus[1], Pose2(37.0, -12.5, 2.2))
        add("se2_invariance", d < SE2_TOL, f"max logit change {d:.2e} < {SE2_TOL:g}")
    p = np.array([0.1, 0.4, 0.2, 0.3])
    add("topk_argmax", all(sample_top_k(p, 1, 1.0, np.random.default_rng(i)) == 1 for i in range(20)),
        "k=1 always returns the argmax")
    add("runtime", True, f"{time.perf_counter() - t0:.1f} s")
    return checks
