import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartgen.exceptions import ValidationError
from smartgen.scaling import (PowerLawFit, ScalingPoint, fit_power_law, predict_loss, read_points_csv,
                              write_fit_line_csv)

BETA, ALPHA = -0.157, 1.52


def generated(xs):
    return [(x, math.exp(BETA * math.log(x) + ALPHA)) for x in xs]


def test_recovers_generator():
    f = fit_power_law(generated(np.geomspace(1e5, 1e8, 6)))
    assert abs(f.beta - BETA) < 1e-9 and abs(f.alpha - ALPHA) < 1e-9 and f.r2 == pytest.approx(1.0, abs=1e-12)
    assert predict_loss(f, 1.0) == pytest.approx(math.exp(1.52), rel=1e-9)
    assert predict_loss(f, 1.0) == pytest.approx(4.572, abs=5e-4)


def test_constant_loss_and_errors():
    f = fit_power_law([(10, 2.0), (100, 2.0), (1000, 2.0)])
    assert abs(f.beta) < 1e-15 and f.r2 == 1.0
    with pytest.raises(ValidationError):
        fit_power_law([(10, 2.0), (10, 3.0)])
    with pytest.raises(ValidationError):
        ScalingPoint(0.0, 1.0)
    with pytest.raises(ValidationError):
        predict_loss(f, -1.0)


def test_prediction_laws():
    f = PowerLawFit(BETA, ALPHA, 1.0)
    assert predict_loss(f, 2e6) / predict_loss(f, 1e6) == pytest.approx(2 ** BETA, rel=1e-12)
    pts = generated([1e3, 1e4])
    g = fit_power_law(pts)
    assert predict_loss(g, 1e3) == pytest.approx(pts[0][1], rel=1e-12)


def test_noisy_fits_stay_close():
    xs = np.geomspace(1e4, 1e8, 9)
    betas = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        pts = [(x, y * math.exp(r.normal(0, 0.01))) for x, y in generated(xs)]
        betas.append(fit_power_law(pts).beta)
    assert np.all(np.abs(np.array(betas) - BETA) <= 0.02)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1.0, 1e6), min_size=3, max_size=8, unique=True), st.floats(1e-3, 1e3),
       st.integers(0, 10_000))
def test_scale_equivariance(xs, c, seed):
    if np.ptp(np.log(xs)) < 1e-3:
        return
    ys = np.random.default_rng(seed).uniform(0.5, 5, len(xs))
    a = fit_power_law(list(zip(xs, ys)))
    b = fit_power_law(list(zip(np.array(xs) * c, ys)))
    assert b.beta == pytest.approx(a.beta, abs=1e-7)
    assert b.alpha == pytest.approx(a.alpha - a.beta * math.log(c), abs=1e-6)
    assert 0.0 <= a.r2 <= 1.0


def test_csv_io(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("x,loss\n" + "\n".join(f"{x},{y}" for x, y in generated([10, 100, 1000])))
    pts = read_points_csv(p)
    f = fit_power_law(pts)
    write_fit_line_csv(tmp_path / "line.csv", f, 10, 1000, n=5)
    rows = (tmp_path / "line.csv").read_text().splitlines()
    assert rows[0] == "x,loss" and len(rows) == 6
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValidationError):
        read_points_csv(tmp_path / "bad.csv")
    assert f.to_dict()["artifact"] == "power_law_fit"
