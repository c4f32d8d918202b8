"""Relative-pose features and neighbour gathering for the attention layers.

Everything here is float64 numpy and runs before the network. The full
(training) forward pass and the cached single-step decoder call the same
functions on different slices, which is what makes the two paths agree.

Neighbour lists have a width that depends only on array shapes, never on
the data, and are ordered canonically by (rounded distance, index), with
masked slots last.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import relative_arrays

RPE_DIM = 6
DIST_SCALE = 10.0
TIME_SCALE = 10.0
ORDER_DECIMALS = 5


@dataclass
class Gathered:
    """Neighbour table for N queries: indices into a source array, a mask and RPE inputs."""

    nbr: np.ndarray
    mask: np.ndarray
    feat: np.ndarray

    @property
    def width(self) -> int:
        return self.nbr.shape[1]


COINCIDENT = 1e-6


def rpe_features(query: np.ndarray, key: np.ndarray, dt=0.0) -> np.ndarray:
    """[dist, sin/cos bearing, sin/cos relative yaw, time gap], broadcasting query against key."""
    rel = relative_arrays(query, key)
    # bearing is undefined for coincident poses; pin it so rounding cannot pick one
    rel[..., 1] = np.where(rel[..., 0] < COINCIDENT, 0.0, rel[..., 1])
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), rel.shape[:-1])
    return np.stack([rel[..., 0] / DIST_SCALE, np.sin(rel[..., 1]), np.cos(rel[..., 1]),
                     np.sin(rel[..., 2]), np.cos(rel[..., 2]), dt / TIME_SCALE], axis=-1)


def _canonical_order(dist: np.ndarray, ok: np.ndarray) -> np.ndarray:
    key = np.where(ok, np.round(dist, ORDER_DECIMALS), np.inf)
    return np.argsort(key, axis=-1, kind="stable")


def temporal_gather(query_poses: np.ndarray, query_steps: np.ndarray, key_poses: np.ndarray,
                    key_valid: np.ndarray, stride: int) -> Gathered:
    """Each agent's own strictly earlier steps.

    query_poses [A, Q, 3] at absolute steps ``query_steps`` [Q]; keys are
    steps 0..S-1 of the same agent, flat index ``a * stride + s``.
    """
    A, Q, _ = query_poses.shape
    S = key_poses.shape[1]
    s = np.arange(S)
    qs = np.asarray(query_steps)
    feat = rpe_features(query_poses[:, :, None, :], key_poses[:, None, :, :], (qs[:, None] - s[None, :])[None])
    mask = (s[None, None, :] < qs[None, :, None]) & key_valid[:, None, :]
    nbr = np.broadcast_to(np.arange(A)[:, None, None] * stride + s[None, None, :], (A, Q, S))
    return Gathered(nbr.reshape(A * Q, S).copy(), mask.reshape(A * Q, S), feat.reshape(A * Q, S, RPE_DIM))


def agent_gather(poses: np.ndarray, valid: np.ndarray, radius: float) -> Gathered:
    """Other agents at the same step within ``radius``.

    poses [A, Q, 3]; the source is flattened agent-major, index ``b * Q + q``.
    Width is A - 1.
    """
    A, Q, _ = poses.shape
    W = max(A - 1, 0)
    pq = np.transpose(poses, (1, 0, 2))  # [Q, A, 3]
    vq = np.transpose(valid, (1, 0))
    rel = relative_arrays(pq[:, :, None, :], pq[:, None, :, :])  # [Q, A(query), A(key), 3]
    ok = vq[:, None, :] & ~np.eye(A, dtype=bool)[None] & (rel[..., 0] <= radius)
    order = _canonical_order(rel[..., 0], ok)[..., :W]  # [Q, A, W]
    mask = np.take_along_axis(ok, order, axis=-1)
    feat = rpe_features(pq[:, :, None, :], np.take_along_axis(pq[:, None, :, :].repeat(A, 1), order[..., None], 2))
    nbr = order * Q + np.arange(Q)[:, None, None]
    tr = lambda x: np.transpose(x, (1, 0) + tuple(range(2, x.ndim))).reshape((A * Q,) + x.shape[2:])
    return Gathered(tr(nbr), tr(mask), tr(feat))


def map_gather(poses: np.ndarray, road_poses: np.ndarray, radius: float, k: int) -> Gathered:
    """Nearest road tokens within ``radius``; poses [A, Q, 3], width min(k, R)."""
    A, Q, _ = poses.shape
    R = len(road_poses)
    W = min(k, R)
    if W == 0:
        return Gathered(np.zeros((A * Q, 0), np.int64), np.zeros((A * Q, 0), bool), np.zeros((A * Q, 0, RPE_DIM)))
    rel = relative_arrays(poses[:, :, None, :], road_poses[None, None, :, :])  # [A, Q, R, 3]
    ok = rel[..., 0] <= radius
    order = _canonical_order(rel[..., 0], ok)[..., :W]
    mask = np.take_along_axis(ok, order, axis=-1)
    feat = rpe_features(poses[:, :, None, :], road_poses[order])
    return Gathered(order.reshape(A * Q, W), mask.reshape(A * Q, W), feat.reshape(A * Q, W, RPE_DIM))


def hop_neighbors(successors, radius: int) -> list:
    """Per node, ``(node, hops)`` pairs within ``radius`` undirected hops, self included."""
    n = len(successors)
    adj = [set() for _ in range(n)]
    for i, nxt in enumerate(successors):
        for j in nxt:
            adj[i].add(j)
            adj[j].add(i)
    out = []
    for i in range(n):
        hops = {i: 0}
        dq = deque([i])
        while dq:
            u = dq.popleft()
            if hops[u] == radius:
                continue
            for v in adj[u]:
                if v not in hops:
                    hops[v] = hops[u] + 1
                    dq.append(v)
        out.append(hops)
    return out


def road_gather(road_poses: np.ndarray, successors, radius: int) -> Gathered:
    """Graph-hop neighbourhoods for road self-attention, ordered by (hops, distance, index)."""
    hops = hop_neighbors(successors, radius)
    R = len(road_poses)
    W = max((len(h) for h in hops), default=0)
    nbr = np.zeros((R, W), np.int64)
    mask = np.zeros((R, W), bool)
    for i, h in enumerate(hops):
        js = np.fromiter(h.keys(), np.int64, len(h))
        hs = np.fromiter(h.values(), np.int64, len(h))
        d = np.round(np.hypot(*(road_poses[js, :2] - road_poses[i, :2]).T), ORDER_DECIMALS)
        order = np.lexsort((js, d, hs))
        nbr[i, :len(js)] = js[order]
        mask[i, :len(js)] = True
    feat = rpe_features(road_poses[:, None, :], road_poses[nbr])
    return Gathered(nbr, mask, feat)


def sequence_gather(sequences, road_poses: np.ndarray, radius: int) -> tuple:
    """Causal neighbourhoods over flattened sequence positions.

    Position j of a sequence sees positions j-radius..j of the same sequence
    and nothing later. Returns ``(instance_of_position, Gathered, targets)``
    where ``targets[p]`` is the instance that follows position p, or -1.
    """
    inst, starts = [], []
    for seq in sequences:
        starts.append(len(inst))
        inst.extend(seq)
    inst = np.array(inst, np.int64)
    P = len(inst)
    W = radius + 1
    nbr = np.zeros((P, W), np.int64)
    mask = np.zeros((P, W), bool)
    nxt = np.full(P, -1, np.int64)
    for seq, st in zip(sequences, starts):
        for j in range(len(seq)):
            p = st + j
            lo = max(0, j - radius)
            cols = np.arange(j, lo - 1, -1) + st  # self first, then increasingly older
            nbr[p, :len(cols)] = cols
            mask[p, :len(cols)] = True
            if j + 1 < len(seq):
                nxt[p] = seq[j + 1]
    if P:
        feat = rpe_features(road_poses[inst][:, None, :], road_poses[inst[nbr]])
    else:
        feat = np.zeros((0, W, RPE_DIM))
    return inst, Gathered(nbr, mask, feat), nxt
