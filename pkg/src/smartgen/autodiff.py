"""Differentiable primitives used by the model, plus a finite-difference checker.

Reverse-mode differentiation itself is torch autograd. What lives here is
the small op set the model is written against: every op checks its input
shapes explicitly (no implicit broadcasting) and refuses to return
non-finite values, so a NaN is reported at the op that produced it.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import NonFiniteError, ShapeError

DROPOUT_RATE = 0.1
NEG_INF = float("-inf")


def checked(op: str, t: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(op)
    return t


def expect_last(op: str, x: torch.Tensor, dim: int) -> None:
    if x.shape[-1] != dim:
        raise ShapeError(op, f"expected trailing dimension {dim}, got shape {tuple(x.shape)}")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, op: str = "linear"):
    expect_last(op, x, weight.shape[1])
    return checked(op, F.linear(x, weight, bias))


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5,
               op: str = "layer_norm"):
    expect_last(op, x, weight.shape[0])
    return checked(op, F.layer_norm(x, (weight.shape[0],), weight, bias, eps))


def gelu(x: torch.Tensor, op: str = "gelu"):
    return checked(op, F.gelu(x))


def embedding(idx: torch.Tensor, table: torch.Tensor, op: str = "embedding"):
    if idx.dtype not in (torch.int32, torch.int64):
        raise ShapeError(op, "indices must be integer")
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= table.shape[0]):
        raise ShapeError(op, f"index out of range for table of {table.shape[0]} rows")
    return table[idx]


def dropout(x: torch.Tensor, rate: float, train: bool, generator: torch.Generator | None, op: str = "dropout"):
    """Inverted dropout driven by an explicit generator; identity when not training."""
    if not train or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=torch.float64) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, op: str = "softmax"):
    """Softmax over the last axis restricted to ``mask``; fully masked rows give zeros."""
    if scores.shape != mask.shape:
        raise ShapeError(op, f"scores {tuple(scores.shape)} vs mask {tuple(mask.shape)}")
    s = scores.masked_fill(~mask, NEG_INF)
    m = s.amax(dim=-1, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m)).detach()
    e = torch.exp(s - m) * mask.to(scores.dtype)
    den = e.sum(dim=-1, keepdim=True)
    return checked(op, e / torch.where(den > 0, den, torch.ones_like(den)))


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor, op: str = "attention"):
    """Multi-head attention over gathered neighbours.

    q: [N, H, Dh]; k, v: [N, K, H, Dh]; mask: [N, K]. Returns [N, H, Dh].
    """
    N, H, Dh = q.shape
    if k.shape[0] != N or k.shape[2:] != (H, Dh) or v.shape != k.shape or mask.shape != k.shape[:2]:
        raise ShapeError(op, f"q {tuple(q.shape)} k {tuple(k.shape)} v {tuple(v.shape)} mask {tuple(mask.shape)}")
    scores = torch.einsum("nhd,nkhd->nhk", q, k) / math.sqrt(Dh)
    w = masked_softmax(scores, mask[:, None, :].expand(N, H, mask.shape[1]), op + ".softmax")
    return checked(op, torch.einsum("nhk,nkhd->nhd", w, v))


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, op: str = "cross_entropy"):
    """Mean negative log-likelihood; ``logits`` [N, C], ``target`` [N]."""
    if logits.ndim != 2 or target.shape != logits.shape[:1]:
        raise ShapeError(op, f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if target.numel() == 0:
        return logits.sum() * 0.0
    return checked(op, F.cross_entropy(logits, target))


def grad_check(fn: Callable, point, step: float = 1e-5, coords=None, floor: float = 1e-7) -> float:
    """Worst relative error between autograd and central differences.

    ``fn`` maps a float64 tensor to a scalar tensor. ``coords`` optionally
    restricts the comparison to a subset of flat indices.
    """
    x = torch.as_tensor(np.asarray(point, dtype=np.float64) if not torch.is_tensor(point) else point,
                        dtype=torch.float64).detach().clone()
    xg = x.clone().requires_grad_(True)
    out = fn(xg)
    if out.numel() != 1:
        raise ShapeError("grad_check", "function must be scalar-valued")
    (g,) = torch.autograd.grad(out, xg, allow_unused=True)
    g = torch.zeros_like(x) if g is None else g
    flat = x.reshape(-1)
    coords = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            orig = float(flat[i])
            flat[i] = orig + step
            fp = float(fn(x))
            flat[i] = orig - step
            fm = float(fn(x))
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            ana = float(g.reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


def numerical_gradient(fn: Callable, point, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(x))
        flat[i] = orig - step
        fm = float(fn(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g.reshape(x.shape)


def parameter_grad_check(module: torch.nn.Module, loss_fn: Callable, step: float = 1e-5, per_param: int = 2,
                         seed: int = 0, floor: float = 1e-6) -> dict:
    """Check d(loss)/d(param) for every named parameter of a float64 module.

    Per parameter, the derivative along one random unit direction is compared
    with a central difference, as are the ``per_param`` coordinates with the
    largest analytic gradient. Directional derivatives aggregate the whole
    tensor, so the check is not swamped by finite-difference rounding on
    near-zero entries. Returns ``{name: max rel error}``.
    """
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    gen = torch.Generator().manual_seed(seed)
    report = {}

    def rel(ana, num):
        return abs(ana - num) / max(abs(ana), abs(num), floor)

    for name, p in module.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        worst = 0.0
        with torch.no_grad():
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            v /= v.norm()
            orig = p.data.clone()
            p.data.add_(step * v)
            fp = float(loss_fn())
            p.data.copy_(orig - step * v)
            fm = float(loss_fn())
            p.data.copy_(orig)
            worst = rel(float((g * v).sum()), (fp - fm) / (2 * step))
            data, flat_g = p.data.reshape(-1), g.reshape(-1)
            for i in torch.argsort(flat_g.abs(), descending=True)[:per_param].tolist():
                o = float(data[i])
                data[i] = o + step
                fp = float(loss_fn())
                data[i] = o - step
                fm = float(loss_fn())
                data[i] = o
                worst = max(worst, rel(float(flat_g[i]), (fp - fm) / (2 * step)))
        report[name] = worst
    module.zero_grad(set_to_none=True)
    return report
