import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from smartgen.exceptions import ConfigError, ValidationError
from smartgen.model import SMART
from smartgen.motion_tokens import NoiseConfig
from smartgen.scene import tokenize_scenario
from smartgen.training import (ABLATIONS, TrainConfig, Trainer, lr_at, motion_ntp_loss, road_ntp_loss, scene_loss,
                               with_ablation, write_curve_csv)


def cfg(**kw):
    base = dict(model="smart-1m-tiny", lr=1e-3, batch_size=2, max_steps=100, eval_every=5, dropout=0.0)
    return TrainConfig(**(base | kw))


def test_uniform_and_confident_losses():
    A, T, V = 3, 4, 512
    mask = np.ones((A, T), bool)
    tgt = np.random.default_rng(0).integers(V, size=(A, T))
    assert float(motion_ntp_loss(torch.zeros(A, T, V), tgt, mask)) == pytest.approx(math.log(512), abs=1e-6)
    sure = torch.full((A, T, V), -30.0)
    sure.scatter_(2, torch.from_numpy(tgt)[..., None], 30.0)
    assert float(motion_ntp_loss(sure, tgt, mask)) < 1e-3
    assert float(road_ntp_loss(torch.zeros(7, 1024), torch.zeros(7, dtype=torch.long))) == pytest.approx(
        math.log(1024), abs=1e-6)
    assert float(road_ntp_loss(torch.zeros(0, 1024), torch.zeros(0, dtype=torch.long))) == 0.0
    with pytest.raises(ValidationError):
        motion_ntp_loss(torch.zeros(A, T, V), tgt, np.zeros((A, T), bool))


def test_mask_removes_exact_contribution():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 5, 11, generator=g, dtype=torch.float64)
    tgt = torch.randint(11, (3, 5), generator=g)
    mask = torch.ones(3, 5, dtype=torch.bool)
    mask[1] = False
    mask[2, 3] = False
    nll = -torch.log_softmax(logits, -1).gather(-1, tgt[..., None])[..., 0]
    manual = sum(float(nll[a, t]) for a in range(3) for t in range(5) if mask[a, t]) / int(mask.sum())
    assert float(motion_ntp_loss(logits, tgt, mask)) == pytest.approx(manual, abs=1e-12)


def test_lr_schedule_endpoints():
    c = TrainConfig(max_steps=1000)
    assert lr_at(0, c) == 2e-4
    assert abs(lr_at(1000, c)) < 1e-12
    assert lr_at(500, c) == pytest.approx(1e-4)


def test_decoupled_weight_decay():
    p = torch.nn.Parameter(torch.ones(4))
    opt = torch.optim.AdamW([p], lr=0.01, weight_decay=0.1)
    p.grad = torch.zeros(4)
    opt.step()
    assert torch.allclose(p.data, torch.full((4,), 1 - 0.01 * 0.1), atol=0, rtol=1e-7)


def test_config_validation():
    with pytest.raises(ConfigError, match="nrvt"):
        TrainConfig(rvt=False, rvntp=False)
    with pytest.raises(ConfigError, match="train.bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="train.ablation"):
        TrainConfig.from_dict({"ablation": "M9"})
    c = TrainConfig.from_dict({"ablation": "M3", "lr": 1e-3})
    assert c.nat and not c.nrvt and c.lr == 1e-3
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert with_ablation(c, "M1").rvt is False


def test_loss_breakdown_sum(tiny_model, inputs):
    m, road = inputs
    c = cfg(road_loss_weight=0.7)
    with torch.no_grad():
        total, br = scene_loss(tiny_model, m, road, c, False)
    assert br.total == br.motion + 0.7 * br.road
    assert float(total) == pytest.approx(br.total, rel=1e-6)
    assert br.motion >= 0 and br.road >= 0 and br.road_tokens > 0
    with torch.no_grad():
        _, off = scene_loss(tiny_model, m, road, cfg(rvntp=False), False)
    assert off.road == 0.0 and off.total == off.motion


def test_initial_loss_near_uniform(corpus, vocabs):
    tr = Trainer(cfg(), vocabs, corpus[:2], corpus[2:4])
    v = tr.evaluate()
    assert abs(v.motion - math.log(max(vocabs.class_sizes()))) < 0.1 * math.log(max(vocabs.class_sizes()))


def test_training_determinism_and_progress(corpus, vocabs):
    def run():
        tr = Trainer(cfg(), vocabs, corpus[:3], corpus[3:4])
        return tr.fit(10), tr
    h1, tr = run()
    h2, _ = run()
    assert h1 == h2
    assert h1[-1]["train_motion"] < h1[0]["train_motion"]
    assert "val_motion" in h1[4] and "val_motion" not in h1[3]
    # validation has no dropout or noise, so it is repeatable
    assert tr.evaluate() == tr.evaluate()


def test_ablation_parameter_counts(vocabs):
    m1 = SMART(cfg(**ABLATIONS["M1"]).model_config(), vocabs.class_sizes(), vocabs.sizes()["road"])
    m2 = SMART(cfg(**ABLATIONS["M2"]).model_config(), vocabs.class_sizes(), vocabs.sizes()["road"])
    assert m1.n_params() != m2.n_params()


def test_nat_noise_fraction(corpus, vocabs):
    noised = steps = 0
    for seed in range(40):
        for s in corpus:
            sc = tokenize_scenario(vocabs, s, NoiseConfig(True, 5, 0.5), seed=seed)
            for t in sc.tracks:
                noised += int(t.noised[t.valid].sum())
                steps += int(t.valid.sum())
    assert steps >= 10_000  # binomial sd <= 0.005, so the 0.02 band is a 4 sd margin
    assert abs(noised / steps - 0.5) <= 0.02


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [{"step": 1, "train_total": 2.0, "train_motion": 1.5, "train_road": 0.5,
                                          "lr": 1e-4}])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("step,train_total") and lines[1].startswith("1,2.0")
