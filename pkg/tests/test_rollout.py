import numpy as np
import pytest
import torch

from smartgen.exceptions import ConfigError, ValidationError
from smartgen.geometry import AgentClass, Scenario, Track
from smartgen.model import MotionInputs, RoadInputs, scene_inputs
from smartgen.road_tokens import tokenize_map
from smartgen.rollout import (RolloutConfig, RolloutSet, decode_cost, incremental_equivalence_check, log_log_slope,
                              rollout, sample_top_k)
from smartgen.scene import tokenize_scenario


def test_top1_is_argmax(rng):
    for _ in range(50):
        p = rng.dirichlet(np.ones(20))
        assert sample_top_k(p, 1, 1.0, rng) == int(np.argmax(p))


def test_topk_restricts_support_and_ratio(rng):
    p = np.array([0.5, 0.3, 0.2])
    draws = np.array([sample_top_k(p, 2, 1.0, rng) for _ in range(20_000)])
    assert set(np.unique(draws)) == {0, 1}
    frac = (draws == 0).mean()
    assert abs(frac - 0.625) < 4 * np.sqrt(0.625 * 0.375 / 20_000)


def test_temperature_sharpens(rng):
    p = np.array([0.6, 0.4])
    cold = np.mean([sample_top_k(p, 2, 0.25, rng) == 0 for _ in range(4000)])
    assert cold > 0.8  # 0.6^4 / (0.6^4 + 0.4^4) = 0.835


def test_sampler_validation():
    with pytest.raises(ValidationError):
        sample_top_k([0.5, 0.6], 1)
    with pytest.raises(ValidationError):
        sample_top_k([0.5, 0.5], 3)
    with pytest.raises(ConfigError):
        RolloutConfig(top_k=0)


def test_cache_equivalence(tiny_model, vocabs, corpus):
    for s in corpus[:3]:
        m, road = scene_inputs(tokenize_scenario(vocabs, s))
        assert incremental_equivalence_check(tiny_model, m, road) <= 1e-5
    m, road = scene_inputs(tokenize_scenario(vocabs, corpus[0]))
    assert incremental_equivalence_check(tiny_model, m, road, start=m.shape[1]) == 0.0


@pytest.fixture(scope="module")
def rolls(tiny_model, vocabs, corpus):
    return rollout(tiny_model, vocabs, corpus[1], RolloutConfig(n_rollouts=4, top_k=5, seed=3))


def test_rollout_shapes_and_encode_once(rolls, corpus):
    s = corpus[1]
    T = (s.n_steps - 1) // 5
    assert rolls.indices.shape == (4, len(rolls.agent_ids), T)
    assert rolls.trajectories.shape == (4, len(rolls.agent_ids), 5 * T + 1, 3)
    assert rolls.road_encodes == 1
    assert len(rolls.step_times) == 4 * (T - rolls.history_tokens)


def test_rollout_determinism(tiny_model, vocabs, corpus, rolls):
    again = rollout(tiny_model, vocabs, corpus[1], RolloutConfig(n_rollouts=4, top_k=5, seed=3))
    assert np.array_equal(again.indices, rolls.indices)
    a = rollout(tiny_model, vocabs, corpus[1], RolloutConfig(n_rollouts=2, top_k=1, seed=0))
    b = rollout(tiny_model, vocabs, corpus[1], RolloutConfig(n_rollouts=2, top_k=1, seed=9))
    assert np.array_equal(a.trajectories, b.trajectories)
    assert np.array_equal(a.indices[0], a.indices[1])


def test_samples_lie_in_full_decode_topk(tiny_model, vocabs, corpus, rolls):
    road = RoadInputs.from_instances(*tokenize_map(vocabs.road, corpus[1].map))
    cls = np.array([AgentClass(c).index for c in rolls.agent_classes])
    for r in range(rolls.n_rollouts):
        tok = rolls.indices[r]
        # pose after token t is the last waypoint of that token
        m = MotionInputs(tok, tok, cls, rolls.dims, np.ones(tok.shape, bool), rolls.trajectories[r][:, 5::5])
        with torch.no_grad():
            full = tiny_model.motion_logits(m, road)
        for t in range(rolls.history_tokens, tok.shape[1]):
            for a in range(len(rolls.agent_ids)):
                top = torch.argsort(full[a, t - 1], descending=True, stable=True)[:5].tolist()
                assert tok[a, t] in top


def test_trajectories_continuous(rolls, vocabs):
    for a, c in enumerate(rolls.agent_classes):
        toks = vocabs.for_class(c).tokens
        steps = np.linalg.norm(np.diff(np.concatenate([np.zeros((len(toks), 1, 3)), toks], 1)[..., :2], axis=1),
                               axis=-1)
        bound = steps.max() + 1e-9
        jumps = np.linalg.norm(np.diff(rolls.trajectories[:, a, :, :2], axis=1), axis=-1)
        assert jumps.max() <= bound


def test_rollout_json_roundtrip(rolls):
    back = RolloutSet.from_dict(rolls.to_dict())
    assert np.array_equal(back.indices, rolls.indices)
    assert np.allclose(back.trajectories, rolls.trajectories, atol=1e-6)
    assert "step_times" not in rolls.to_dict()


def test_agent_without_history_is_excluded(tiny_model, vocabs, corpus):
    s = corpus[1]
    tr = s.tracks[0]
    valid = tr.valid.copy()
    valid[:3] = False
    late = Track("late", tr.agent_class, tr.length, tr.width, tr.states, valid)
    sc = Scenario(s.map, list(s.tracks) + [late], s.history_steps, s.future_steps, s.dt, "x")
    out = rollout(tiny_model, vocabs, sc, RolloutConfig(n_rollouts=1))
    assert out.excluded == ["late"] and "late" not in out.agent_ids


def test_decode_cost_helpers(tiny_model, inputs):
    m, road = inputs
    assert len(decode_cost(tiny_model, m, road, [2, 4], cached=True, repeats=1)) == 2
    assert log_log_slope([1, 2, 4], [3, 6, 12]) == pytest.approx(1.0)
