"""Power-law fits of test loss against model size or token count.

The relation is ``log L = beta * log X + alpha``; ``beta`` is the exponent.
Losses are raw test nats, not reducible loss, so fitted constants are only
comparable within one corpus.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class ScalingPoint:
    x: float
    loss: float

    def __post_init__(self):
        if not (self.x > 0 and math.isfinite(self.x)):
            raise ValidationError(f"scaling point x must be positive, got {self.x}")
        if not (self.loss > 0 and math.isfinite(self.loss)):
            raise ValidationError(f"scaling point loss must be positive, got {self.loss}")


@dataclass(frozen=True)
class PowerLawFit:
    beta: float
    alpha: float
    r2: float
    n_points: int = 0

    def predict(self, x):
        return predict_loss(self, x)

    def to_dict(self) -> dict:
        return {"schema": 1, "artifact": "power_law_fit"} | asdict(self)


def _as_points(points) -> tuple:
    xs, ys = [], []
    for p in points:
        if not isinstance(p, ScalingPoint):
            p = ScalingPoint(float(p[0]), float(p[1]))
        xs.append(p.x)
        ys.append(p.loss)
    return np.array(xs, float), np.array(ys, float)


def fit_power_law(points) -> PowerLawFit:
    """Ordinary least squares on (log x, log loss)."""
    x, y = _as_points(points)
    if len(np.unique(x)) < 2:
        raise ValidationError("need at least 2 distinct x values to fit a power law")
    lx, ly = np.log(x), np.log(y)
    mx, my = lx.mean(), ly.mean()
    sxx = np.sum((lx - mx) ** 2)
    beta = float(np.sum((lx - mx) * (ly - my)) / sxx)
    alpha = float(my - beta * mx)
    ss_tot = float(np.sum((ly - my) ** 2))
    ss_res = float(np.sum((ly - (alpha + beta * lx)) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 else float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))
    return PowerLawFit(beta, alpha, r2, len(x))


def predict_loss(fit: PowerLawFit, x):
    x = np.asarray(x, float)
    if np.any(x <= 0):
        raise ValidationError("x must be positive")
    out = np.exp(fit.alpha + fit.beta * np.log(x))
    return float(out) if out.ndim == 0 else out


def read_points_csv(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or not {"x", "loss"} <= set(rows[0]):
        raise ValidationError(f"{path}: expected a CSV with columns x, loss")
    return [ScalingPoint(float(r["x"]), float(r["loss"])) for r in rows]


def write_fit_line_csv(path, fit: PowerLawFit, x_min: float, x_max: float, n: int = 50) -> None:
    xs = np.geomspace(x_min, x_max, n)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "loss"])
        for x in xs:
            w.writerow([repr(float(x)), repr(float(predict_loss(fit, x)))])


def size_sweep(vocabs, train, test, widths=(8, 16, 32), steps: int = 300, train_config=None, callback=None) -> list:
    """Train one model per width on the same corpus; returns ScalingPoints (params, test motion loss)."""
    from .model import SMART, width_config
    from .training import TrainConfig, Trainer

    cfg = train_config or TrainConfig(max_steps=steps)
    cfg = replace(cfg, max_steps=steps)
    points = []
    for w in widths:
        mc = width_config(w, cfg.model_config())
        model = SMART(mc, vocabs.class_sizes(), vocabs.sizes()["road"]).init_params(cfg.seed)
        tr = Trainer(cfg, vocabs, train, test, model)
        tr.fit(steps)
        loss = tr.history[-1]["val_motion"]
        points.append(ScalingPoint(float(model.n_params()), loss))
        if callback is not None:
            callback(w, points[-1])
    return points
