import numpy as np

from smartgen.features import (agent_gather, hop_neighbors, map_gather, road_gather, rpe_features, sequence_gather,
                               temporal_gather)
from smartgen.geometry import compose_arrays


def test_rpe_invariance(rng):
    q, k = rng.normal(size=(10, 3)) * 20, rng.normal(size=(10, 3)) * 20
    T = np.array([13.0, -4.0, 2.1])
    a = rpe_features(q, k, 2.0)
    b = rpe_features(compose_arrays(T, q), compose_arrays(T, k), 2.0)
    assert np.abs(a - b).max() < 1e-9


def test_rpe_coincident_pinned():
    f = rpe_features(np.array([1.0, 1.0, 0.3]), np.array([1.0, 1.0, 0.3]))
    assert np.allclose(f, [0, 0, 1, 0, 1, 0])


def test_temporal_gather_is_strictly_causal(rng):
    poses = rng.normal(size=(2, 4, 3))
    valid = np.ones((2, 4), bool)
    g = temporal_gather(poses, np.arange(4), poses, valid, 4)
    m = g.mask.reshape(2, 4, 4)
    assert np.array_equal(m[0], np.tril(np.ones((4, 4), bool), -1))
    assert np.all(g.nbr.reshape(2, 4, 4)[1] >= 4)


def test_agent_gather_radius_and_self():
    poses = np.array([[[0, 0, 0]], [[10, 0, 0]], [[100, 0, 0]]], float)
    g = agent_gather(poses, np.ones((3, 1), bool), 50.0)
    assert g.width == 2
    assert g.mask[0].tolist() == [True, False] and g.nbr[0, 0] == 1
    assert not g.mask[2].any()


def test_map_gather_nearest_first():
    road = np.array([[30, 0, 0], [5, 0, 0], [60, 0, 0]], float)
    g = map_gather(np.zeros((1, 1, 3)), road, 50.0, 2)
    assert g.nbr[0].tolist() == [1, 0] and g.mask[0].all()


def test_hops_and_road_gather():
    succ = [[1], [2], [3], []]
    h = hop_neighbors(succ, 2)
    assert h[0] == {0: 0, 1: 1, 2: 2} and set(h[3]) == {1, 2, 3}
    g = road_gather(np.zeros((4, 3)) + np.arange(4)[:, None] * [5, 0, 0], succ, 1)
    assert g.nbr[0, 0] == 0 and g.mask.sum(1).tolist() == [2, 3, 3, 2]


def test_sequence_gather_never_sees_later_positions():
    poses = np.arange(5)[:, None] * np.array([5.0, 0, 0])
    inst, g, nxt = sequence_gather([[0, 1, 2], [0, 3, 4]], poses, 10)
    assert inst.tolist() == [0, 1, 2, 0, 3, 4]
    assert nxt.tolist() == [1, 2, -1, 3, 4, -1]
    for p in range(6):
        seen = set(g.nbr[p][g.mask[p]].tolist())
        start = 0 if p < 3 else 3
        assert seen == set(range(start, p + 1))
