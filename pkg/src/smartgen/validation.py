"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ValidationError
from .geometry import Scenario, Track


def check_array(x, name: str = "X", ndim: int | None = None, last: int | None = None, dtype=np.float64,
                allow_empty: bool = False) -> np.ndarray:
    """Convert to a finite array and check its rank and trailing dimension."""
    try:
        a = np.asarray(x, dtype=dtype)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{name}: cannot convert to array ({e})") from None
    if ndim is not None and a.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim} dimensions, got shape {a.shape}")
    if last is not None and (a.ndim == 0 or a.shape[-1] != last):
        raise ValidationError(f"{name}: expected trailing dimension {last}, got shape {a.shape}")
    if not allow_empty and a.size == 0:
        raise ValidationError(f"{name}: empty input")
    if np.issubdtype(a.dtype, np.floating) and not np.isfinite(a).all():
        raise ValidationError(f"{name}: contains NaN or infinite values")
    return a


def check_poses(x, name: str = "poses") -> np.ndarray:
    """Any array of (x, y, yaw) poses."""
    return check_array(x, name, last=3)


def check_segments(x, name: str = "segments") -> np.ndarray:
    """Motion segments shaped [N, 5, 3]; a single [5, 3] segment is promoted."""
    a = check_array(x, name, last=3)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[1] != 5:
        raise ValidationError(f"{name}: expected [N, 5, 3] motion segments, got {a.shape}")
    return a


def check_scenarios(x, name: str = "scenarios") -> list:
    """A scenario, a list of scenarios, or a directory of scenario JSON files."""
    if isinstance(x, Scenario):
        return [x]
    if isinstance(x, (str, os.PathLike)):
        from .io import load_scenarios

        return load_scenarios(check_path(x, name, directory=True))
    try:
        out = list(x)
    except TypeError:
        raise ValidationError(f"{name}: expected scenarios, got {type(x).__name__}") from None
    if not out:
        raise ValidationError(f"{name}: no scenarios given")
    bad = [type(s).__name__ for s in out if not isinstance(s, Scenario)]
    if bad:
        raise ValidationError(f"{name}: expected Scenario objects, got {bad[0]}")
    return out


def check_tracks(x, name: str = "tracks") -> list:
    """Tracks, or the tracks of the given scenarios."""
    items = [x] if isinstance(x, (Track, Scenario)) else list(x)
    out = []
    for it in items:
        if isinstance(it, Scenario):
            out.extend(it.tracks)
        elif isinstance(it, Track):
            out.append(it)
        else:
            raise ValidationError(f"{name}: expected Track or Scenario, got {type(it).__name__}")
    if not out:
        raise ValidationError(f"{name}: no tracks given")
    return out


def check_positive_points(x, y) -> tuple:
    xs = check_array(x, "x").reshape(-1) if np.ndim(x) < 2 else check_array(x, "x", ndim=2)[:, 0]
    ys = check_array(y, "y").reshape(-1)
    if len(xs) != len(ys):
        raise ValidationError(f"x has {len(xs)} entries but y has {len(ys)}")
    if (xs <= 0).any() or (ys <= 0).any():
        raise ValidationError("power-law fits need positive x and y")
    return xs, ys


def check_path(path, field: str = "path", directory: bool = False) -> Path:
    """Existing file (or directory); a missing one is a configuration error naming the path."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(field, f"no such {'directory' if directory else 'file'}: {p}")
    if directory and not p.is_dir():
        raise ConfigError(field, f"not a directory: {p}")
    if not directory and not p.is_file():
        raise ConfigError(field, f"not a file: {p}")
    return p


def check_int(value, field: str, lo: int | None = None, hi: int | None = None) -> int:
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise ConfigError(field, f"expected an integer, got {value!r}") from None
    if isinstance(value, float) and value != v:
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if lo is not None and v < lo:
        raise ConfigError(field, f"must be >= {lo}")
    if hi is not None and v > hi:
        raise ConfigError(field, f"must be <= {hi}")
    return v


def check_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
