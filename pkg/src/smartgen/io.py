"""JSON artifacts: scenarios, vocabularies, tokenized scenes, rollouts, reports.

Every file carries ``"schema": 1``; readers refuse anything else.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import SchemaError
from .geometry import Polyline, Scenario, Track

SCHEMA_VERSION = 1


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path, expect: str | None = None) -> dict:
    obj = json.loads(Path(path).read_text())
    check_schema(obj, str(path), expect)
    return obj


def check_schema(obj, where: str = "<object>", expect: str | None = None) -> None:
    if not isinstance(obj, dict) or "schema" not in obj:
        raise SchemaError(f"{where}: missing schema version")
    if obj["schema"] != SCHEMA_VERSION:
        raise SchemaError(f"{where}: unsupported schema version {obj['schema']!r} (expected {SCHEMA_VERSION})")
    if expect is not None and obj.get("artifact", expect) != expect:
        raise SchemaError(f"{where}: expected a {expect} artifact, found {obj.get('artifact')!r}")


def sha256_of(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- scenario ---------------------------------------------------------------

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "artifact": "scenario",
        "id": s.scenario_id,
        "dt": s.dt,
        "history_steps": s.history_steps,
        "future_steps": s.future_steps,
        "map": [{"id": p.id, "kind": p.kind.value, "lane_width": p.lane_width,
                 "points": p.points.tolist(), "successors": list(p.successor_ids)} for p in s.map],
        "agents": [{"id": t.id, "class": t.agent_class.value, "length": t.length, "width": t.width,
                    "states": [{"x": float(x), "y": float(y), "yaw": float(yaw), "valid": bool(v), "speed": float(sp)}
                               for (x, y, yaw), v, sp in zip(t.states, t.valid, t.speed)]}
                   for t in s.tracks],
    }


def scenario_from_dict(d: dict, where: str = "<scenario>") -> Scenario:
    check_schema(d, where, "scenario")
    polylines = [Polyline(p["id"], p["points"], p.get("kind", "lane"), p.get("lane_width", 4.0),
                          tuple(p.get("successors", ()))) for p in d["map"]]
    tracks = []
    for a in d["agents"]:
        st = a["states"]
        states = np.array([[s["x"], s["y"], s["yaw"]] for s in st], dtype=np.float64)
        valid = np.array([bool(s.get("valid", True)) for s in st])
        speed = np.array([s["speed"] for s in st]) if st and all("speed" in s for s in st) else None
        tracks.append(Track(a["id"], a["class"], a["length"], a["width"], states, valid, speed))
    return Scenario(polylines, tracks, int(d["history_steps"]), int(d["future_steps"]),
                    float(d.get("dt", 0.1)), str(d.get("id", "")))


def save_scenario(path, s: Scenario) -> None:
    write_json(path, scenario_to_dict(s))


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()), str(path))


def load_scenarios(directory) -> list:
    """Every scenario file in ``directory`` (sorted by name); other JSON artifacts are skipped."""
    out = []
    for f in sorted(Path(directory).glob("*.json")):
        d = json.loads(f.read_text())
        if isinstance(d, dict) and d.get("artifact", "scenario") != "scenario":
            continue
        out.append(scenario_from_dict(d, str(f)))
    return out
