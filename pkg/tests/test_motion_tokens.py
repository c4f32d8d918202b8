import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartgen.exceptions import ValidationError, VocabularyMismatchError
from smartgen.geometry import Pose2, Track, compose_arrays
from smartgen.motion_tokens import (MotionVocab, NoiseConfig, build_motion_vocab, detokenize,
                                    extract_motion_segments, match_residuals, nearest_token, replay_ref_poses,
                                    token_distance, tokenize_track)


def straight_track(speed=10.0, n=51, yaw=0.0, x0=0.0, y0=0.0, cls="vehicle"):
    s = np.arange(n) * 0.1 * speed
    st_ = np.stack([x0 + s * math.cos(yaw), y0 + s * math.sin(yaw), np.full(n, yaw)], 1)
    return Track("t", cls, 4.5, 2.0, st_, np.ones(n, bool))


def random_vocab(rng, n=40, cls="vehicle"):
    # tokens that look like motion: forward progress plus a gentle turn
    v = rng.uniform(0, 15, n)
    w = rng.uniform(-0.5, 0.5, n)
    t = np.arange(1, 6) * 0.1
    yaw = w[:, None] * t
    x = v[:, None] * t * np.cos(yaw / 2)
    y = v[:, None] * t * np.sin(yaw / 2)
    return MotionVocab(cls, np.stack([x, y, yaw], -1), 0.2)


def replay(vocab, indices, start=(3.0, -2.0, 0.7)):
    traj = detokenize(vocab, np.array(start), indices)
    return Track("r", vocab.agent_class, 4.5, 2.0, traj, np.ones(len(traj), bool))


def test_segments_stationary_and_straight():
    segs = extract_motion_segments(straight_track(speed=0.0))
    assert segs.shape == (10, 5, 3) and np.all(segs == 0)
    segs = extract_motion_segments(straight_track(speed=10.0))
    assert np.allclose(segs[0], [[1, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0]], atol=1e-12)


def test_segments_count_per_run():
    tr = straight_track(n=40)
    tr.valid[17] = False
    # runs of 17 and 22 states -> floor(16/5) + floor(21/5)
    assert len(extract_motion_segments(tr)) == 3 + 4
    tr.valid[:] = False
    assert len(extract_motion_segments(tr)) == 0


@settings(max_examples=25, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-100, 100), st.floats(-100, 100))
def test_segments_frame_invariant(theta, x, y):
    a = extract_motion_segments(straight_track(speed=7.0))
    b = extract_motion_segments(straight_track(speed=7.0, yaw=theta, x0=x, y0=y))
    assert np.allclose(a, b, atol=1e-9)


def test_token_distance_examples():
    s = extract_motion_segments(straight_track())[0]
    assert token_distance(s, s) == 0.0
    shifted = s.copy()
    shifted[:, 0] += 1.0
    assert token_distance(s, shifted) == pytest.approx(1.0, abs=1e-12)
    turned = s.copy()
    turned[:, 2] += 0.2
    assert token_distance(s, turned) == pytest.approx(0.2, abs=1e-12)
    assert token_distance(shifted, turned) == pytest.approx(token_distance(turned, shifted))


def test_vocab_identical_and_two_clusters():
    s = extract_motion_segments(straight_track())[0]
    assert build_motion_vocab(np.repeat(s[None], 20, 0), "vehicle").size == 1
    far = s.copy()
    far[:, 1] += 10
    segs = np.concatenate([np.repeat(s[None], 5, 0), np.repeat(far[None], 5, 0)])
    assert build_motion_vocab(segs, "vehicle", epsilon=0.2).size == 2
    with pytest.raises(ValidationError):
        build_motion_vocab(np.zeros((0, 5, 3)), "vehicle")


def test_vocab_cover_and_separation(rng):
    segs = random_vocab(rng, 300).tokens
    v = build_motion_vocab(segs, "vehicle", target_size=10_000, epsilon=0.5, seed=3)
    for a in range(v.size):
        for b in range(a + 1, v.size):
            assert token_distance(v.tokens[a], v.tokens[b]) > 0.5
    # brute-force check that every input lies within epsilon of a token
    for s in segs:
        assert min(token_distance(t, s) for t in v.tokens) <= 0.5
    assert build_motion_vocab(segs, "vehicle", target_size=7, epsilon=0.5).size == 7


def test_nearest_token_matches_linear_scan(rng):
    v = random_vocab(rng)
    i, d = nearest_token(v, v.tokens[7])
    assert (i, d) == (7, 0.0)
    for _ in range(50):
        q = random_vocab(rng, 1).tokens[0]
        dists = [token_distance(t, q) for t in v.tokens]
        i, d = nearest_token(v, q)
        assert i == int(np.argmin(dists)) and d == pytest.approx(min(dists), abs=1e-12)
        scaled = [3.7 * x for x in dists]
        assert int(np.argmin(scaled)) == i


def test_nearest_token_ties_pick_lowest():
    s = extract_motion_segments(straight_track())[0]
    v = MotionVocab("vehicle", np.stack([s, s, s]), 0.2)
    assert nearest_token(v, s)[0] == 0


def test_tokenize_recovers_replayed_tokens(rng):
    v = random_vocab(rng)
    idx = rng.integers(v.size, size=12)
    tr = replay(v, idx)
    tt = tokenize_track(v, tr)
    assert np.array_equal(tt.indices, idx) and np.array_equal(tt.labels, idx)
    assert np.allclose(detokenize(v, tt.start_pose, tt.indices), tr.states, atol=1e-9)
    assert np.array_equal(replay_ref_poses(v, tt), tt.ref_poses)


def test_tokenize_rolling_consistency_with_noise(rng):
    v = random_vocab(rng)
    tr = replay(v, rng.integers(v.size, size=12))
    tt = tokenize_track(v, tr, NoiseConfig(True, 5, 0.5), seed=4)
    assert tt.noised.any()
    for t in range(len(tt)):
        assert np.array_equal(tt.ref_poses[t + 1], compose_arrays(tt.ref_poses[t], v.endpoints[tt.indices[t]]))


def test_tokenize_noise_semantics(rng):
    v = random_vocab(rng)
    tr = replay(v, rng.integers(v.size, size=10))
    a = tokenize_track(v, tr, seed=0)
    b = tokenize_track(v, tr, seed=99)
    assert np.array_equal(a.indices, b.indices)
    c = tokenize_track(v, tr, NoiseConfig(True, 1, 1.0), seed=5)
    assert np.array_equal(a.indices, c.indices)


def test_tokenize_class_mismatch(rng):
    with pytest.raises(VocabularyMismatchError):
        tokenize_track(random_vocab(rng), straight_track(cls="pedestrian"))


def test_straight_track_residuals():
    tr = straight_track(speed=9.33)
    segs = np.concatenate([extract_motion_segments(straight_track(speed=v)) for v in np.arange(7.0, 12.0, 0.05)])
    v = build_motion_vocab(segs, "vehicle", epsilon=0.2)
    tt = tokenize_track(v, tr)
    assert len(tt) == 10
    res = match_residuals(v, tr, tt)
    assert np.all(res <= 0.2 + 1e-12)
    for t in range(len(tt)):
        # residual equals the brute-force nearest distance in the step's reference frame
        from smartgen.geometry import to_local_arrays
        target = to_local_arrays(tt.ref_poses[t], tr.states[5 * t + 1:5 * t + 6])
        assert res[t] == pytest.approx(min(token_distance(tok, target) for tok in v.tokens), abs=1e-12)


def test_tokenize_se2_invariant(rng):
    v = random_vocab(rng)
    tr = replay(v, rng.integers(v.size, size=10))
    T = Pose2(40.0, -3.0, 1.1)
    moved = Track("r", "vehicle", 4.5, 2.0, compose_arrays(T.as_array(), tr.states), tr.valid)
    assert np.array_equal(tokenize_track(v, tr).indices, tokenize_track(v, moved).indices)


def test_detokenize_stationary_and_range(rng):
    v = MotionVocab("vehicle", np.zeros((1, 5, 3)), 0.2)
    out = detokenize(v, np.array([1.0, 2.0, 0.3]), [0, 0, 0])
    assert out.shape == (16, 3) and np.allclose(out, [1.0, 2.0, 0.3])
    with pytest.raises(ValidationError):
        detokenize(v, np.zeros(3), [1])


def test_vocab_json_roundtrip(rng):
    v = random_vocab(rng)
    w = MotionVocab.from_dict(v.to_dict())
    assert np.array_equal(v.tokens, w.tokens) and w.digest() == v.digest()
    bad = v.to_dict() | {"schema": 99}
    with pytest.raises(Exception, match="schema"):
        MotionVocab.from_dict(bad)
