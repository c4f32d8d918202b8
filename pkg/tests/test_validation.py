import numpy as np
import pytest

from smartgen.exceptions import ConfigError, ValidationError
from smartgen.validation import (check_array, check_int, check_path, check_positive_points, check_rng,
                                 check_scenarios, check_segments, check_tracks)


def test_check_array():
    assert check_array([[1, 2, 3]], last=3).dtype == np.float64
    with pytest.raises(ValidationError, match="dimensions"):
        check_array([1, 2], ndim=2)
    with pytest.raises(ValidationError, match="NaN"):
        check_array([1.0, np.nan])
    with pytest.raises(ValidationError, match="empty"):
        check_array([])
    with pytest.raises(ValidationError, match="convert"):
        check_array([[1], [1, 2]])


def test_check_segments():
    assert check_segments(np.zeros((5, 3))).shape == (1, 5, 3)
    with pytest.raises(ValidationError):
        check_segments(np.zeros((2, 4, 3)))


def test_check_scenarios_and_tracks(corpus, tmp_path):
    assert len(check_scenarios(corpus[0])) == 1
    assert len(check_tracks(corpus[:2])) == sum(len(s.tracks) for s in corpus[:2])
    with pytest.raises(ValidationError):
        check_scenarios([])
    with pytest.raises(ValidationError):
        check_scenarios([1, 2])
    with pytest.raises(ValidationError):
        check_tracks(["x"])
    with pytest.raises(ConfigError, match="no such directory"):
        check_scenarios(tmp_path / "missing")


def test_points_paths_ints(tmp_path):
    x, y = check_positive_points([[1.0], [2.0]], [3.0, 4.0])
    assert x.tolist() == [1.0, 2.0]
    with pytest.raises(ValidationError):
        check_positive_points([1, 2], [1])
    with pytest.raises(ValidationError):
        check_positive_points([0, 2], [1, 1])
    with pytest.raises(ConfigError, match="no such file"):
        check_path(tmp_path / "nope.json", "vocab")
    assert check_int("7", "n", lo=1) == 7
    with pytest.raises(ConfigError):
        check_int(2.5, "n")
    with pytest.raises(ConfigError, match=">= 1"):
        check_int(0, "n", lo=1)
    g = np.random.default_rng(0)
    assert check_rng(g) is g
