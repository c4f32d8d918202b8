"""Command-line entry point: ``smartgen <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (a JSON object of option values;
flags given on the command line win), ``--seed`` and ``--out DIR``, and
writes ``manifest.json`` next to its outputs. Failures print one line
``ERROR <category>: <message>`` on stderr; exit codes are 2 for usage
errors, 3 for invalid configuration or artifacts, 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigError, SchemaError, SmartgenError
from .io import SCHEMA_VERSION, file_sha256, read_json, write_json
from .validation import check_int, check_path

log = logging.getLogger("smartgen")

DEFAULTS = {
    "synth-gen": {"n": 200, "kinds": ["straight", "arc", "intersection"], "agents_min": 4, "agents_max": 8,
                  "class_weights": [1.0, 0.0, 0.0], "horizon_steps": 91, "history_steps": 11,
                  "lane_change_prob": 0.2, "n_lanes": None},
    "build-vocab": {"scenarios": None, "motion_size": 512, "road_size": 1024, "road_epsilon": 0.1,
                    "epsilon": {}, "class": None, "jitter_copies": 4},
    "tokenize": {"scenarios": None, "vocab": None, "noise": False, "noise_k": 5, "noise_p": 0.5},
    "train": {"scenarios": None, "val": None, "vocab": None, "steps": None, "train": {}},
    "rollout": {"checkpoint": None, "scenarios": None, "n_rollouts": 32, "top_k": 5, "temperature": 1.0,
                "limit": None},
    "eval": {"rollouts": None, "scenarios": None},
    "scaling-fit": {"input": None},
    "selftest": {},
}
REQUIRED = {"build-vocab": ["scenarios"], "tokenize": ["scenarios", "vocab"], "train": ["scenarios", "vocab"],
            "rollout": ["checkpoint", "scenarios"], "eval": ["rollouts", "scenarios"], "scaling-fit": ["input"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smartgen", description="Tokenized multi-agent motion generation on synthetic scenarios.")
    p.add_argument("--version", action="version", version=f"smartgen {__version__}")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option values")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", "--out-dir", dest="out", default=None,
                        help="output directory (default: current directory)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    s = add("synth-gen", "generate synthetic scenarios as JSON")
    s.add_argument("--n", "--count", dest="n", type=int, help="number of scenarios (default 200)")
    s.add_argument("--kinds", "--kind", dest="kinds", type=lambda v: v.split(","),
                   help="comma list of straight,arc,intersection")
    s.add_argument("--n-lanes", type=int, help="lanes per direction (default: 1 to 3 at random)")
    s.add_argument("--n-agents", type=_int_range, help="agent count N or range LO,HI")
    s.add_argument("--agents-min", type=int)
    s.add_argument("--agents-max", type=int)
    s.add_argument("--class-weights", type=lambda v: [float(x) for x in v.split(",")],
                   help="vehicle,pedestrian,cyclist weights")
    s.add_argument("--horizon-steps", "--horizon", dest="horizon_steps", type=int, help="states per track")
    s.add_argument("--history-steps", type=int)
    s.add_argument("--lane-change-prob", type=float)

    s = add("build-vocab", "build motion and road vocabularies")
    s.add_argument("--scenarios", "--in", dest="scenarios", help="scenario JSON file or directory")
    s.add_argument("--motion-size", "--size", dest="motion_size", type=int, help="motion vocabulary size per class")
    s.add_argument("--road-size", type=int)
    s.add_argument("--class", dest="class", choices=["vehicle", "pedestrian", "cyclist"],
                   help="class that --epsilon applies to (default: every class)")
    s.add_argument("--epsilon", type=float, help="motion cover radius in metres")
    s.add_argument("--road-epsilon", type=float)
    s.add_argument("--jitter-copies", type=int)

    s = add("tokenize", "tokenize scenarios with a vocabulary")
    s.add_argument("--scenarios", "--in", dest="scenarios", help="scenario JSON file or directory")
    s.add_argument("--vocab", help="vocab.json from build-vocab")
    s.add_argument("--noise", action="store_const", const=True, default=None, help="noised rolling matching")
    s.add_argument("--noise-k", type=int)
    s.add_argument("--noise-p", type=float)

    s = add("train", "train a model by next-token prediction")
    s.add_argument("--scenarios", "--data-dir", dest="scenarios", help="directory of training scenarios")
    s.add_argument("--val", help="directory of validation scenarios")
    s.add_argument("--vocab")
    s.add_argument("--steps", type=int, help="optimizer steps (default: train.max_steps)")

    s = add("rollout", "closed-loop rollouts from a checkpoint")
    s.add_argument("--checkpoint", "--ckpt", dest="checkpoint")
    s.add_argument("--scenarios", "--scenario", dest="scenarios", help="scenario JSON file or directory")
    s.add_argument("--n-rollouts", "--n", dest="n_rollouts", type=int)
    s.add_argument("--top-k", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--limit", type=int, help="roll out at most this many scenarios")

    s = add("eval", "score rollouts against ground truth")
    s.add_argument("--rollouts", help="directory of rollout JSON files")
    s.add_argument("--scenarios", "--gt", dest="scenarios", help="ground-truth scenario JSON file or directory")

    s = add("scaling-fit", "fit log L = beta log X + alpha to a CSV of (x, loss)")
    s.add_argument("--in", dest="input")

    add("selftest", "run the invariant suite")
    return p


def _int_range(v: str) -> tuple:
    parts = [int(x) for x in v.split(",")]
    if len(parts) not in (1, 2):
        raise argparse.ArgumentTypeError("expected N or LO,HI")
    return parts[0], parts[-1]


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS[cmd]))
    cfg["seed"] = 0
    if args.config:
        path = check_path(args.config, "--config")
        try:
            given = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON ({e.msg} at line {e.lineno})") from None
        if not isinstance(given, dict):
            raise ConfigError(str(path), "config must be a JSON object")
        given.pop("schema", None)
        for k, v in given.items():
            key = k.replace("-", "_")
            if key in cfg:
                cfg[key] = v
            elif cmd == "train" and key in _train_fields():
                cfg["train"][key] = v
            else:
                raise ConfigError(key, f"unknown option for {cmd}")
    for k, v in vars(args).items():
        if k in cfg and v is not None:
            cfg[k] = v
    if getattr(args, "n_agents", None) is not None:
        cfg["agents_min"], cfg["agents_max"] = args.n_agents
    for k in REQUIRED.get(cmd, []):
        if cfg.get(k) in (None, ""):
            raise ConfigError(k, f"required (pass --{k.replace('_', '-')} or set it in --config)")
    return cfg


def _train_fields() -> set:
    from .training import TrainConfig

    return {f.name for f in fields(TrainConfig)} | {"ablation"}


def _threads() -> int:
    raw = os.environ.get("SMART_THREADS")
    n = os.cpu_count() or 1
    if raw is not None:
        n = check_int(raw, "SMART_THREADS", lo=1)
    import torch

    torch.set_num_threads(n)
    return n


def _load_vocab(path):
    from .scene import VocabSet

    p = check_path(path, "vocab")
    return VocabSet.from_dict(read_json(p, "vocab_set"), str(p)), p


def _scenarios(path, field="scenarios"):
    """Scenarios from one JSON file or every scenario file in a directory."""
    from .io import load_scenario, load_scenarios

    p = check_path(path, field, directory=Path(path).is_dir())
    if p.is_file():
        return [load_scenario(p)], [p]
    out = load_scenarios(p)
    if not out:
        raise ConfigError(field, f"no scenario files in {p}")
    return out, sorted(f for f in p.glob("*.json"))


# -- subcommands -------------------------------------------------------------

def cmd_synth_gen(cfg, out: Path, ctx: dict) -> None:
    from .io import save_scenario
    from .synth import generate_corpus

    n = check_int(cfg["n"], "n", lo=1)
    lo, hi = check_int(cfg["agents_min"], "agents_min", lo=1), check_int(cfg["agents_max"], "agents_max", lo=1)
    if hi < lo:
        raise ConfigError("agents_max", "must be >= agents_min")
    for k in cfg["kinds"]:
        if k not in ("straight", "arc", "intersection"):
            raise ConfigError("kinds", f"unknown map kind {k!r}")
    if len(cfg["class_weights"]) != 3 or sum(cfg["class_weights"]) <= 0 or min(cfg["class_weights"]) < 0:
        raise ConfigError("class_weights", "need three non-negative weights with a positive sum")
    corpus = generate_corpus(n, tuple(cfg["kinds"]), (lo, hi), int(cfg["seed"]), tuple(cfg["class_weights"]),
                             check_int(cfg["horizon_steps"], "horizon_steps", lo=2),
                             check_int(cfg["history_steps"], "history_steps", lo=1), float(cfg["lane_change_prob"]),
                             None if cfg["n_lanes"] is None else check_int(cfg["n_lanes"], "n_lanes", lo=1))
    for s in corpus:
        path = out / "scenarios" / f"{s.scenario_id}.json"
        save_scenario(path, s)
        ctx["outputs"].append(path)
    print(f"wrote {len(corpus)} scenarios to {out / 'scenarios'}")


def _epsilons(cfg) -> dict | None:
    """Per-class cover radii from ``epsilon`` (a number or a class -> radius map) and ``class``."""
    from .geometry import AgentClass

    eps, cls = cfg["epsilon"], cfg["class"]
    classes = [c.value for c in AgentClass]
    if cls is not None and cls not in classes:
        raise ConfigError("class", f"unknown agent class {cls!r}")
    if isinstance(eps, (int, float)) and not isinstance(eps, bool):
        if not eps > 0:
            raise ConfigError("epsilon", "must be positive")
        return {c: float(eps) for c in ([cls] if cls else classes)}
    if not isinstance(eps, dict):
        raise ConfigError("epsilon", "expected a number or a map of class to radius")
    for k, v in eps.items():
        if k not in classes or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"epsilon.{k}", "expected a known class with a positive radius")
    return {k: float(v) for k, v in eps.items()} or None


def cmd_build_vocab(cfg, out: Path, ctx: dict) -> None:
    from .scene import build_vocab_set

    scen, files = _scenarios(cfg["scenarios"])
    ctx["inputs"] += files
    vocabs = build_vocab_set(scen, check_int(cfg["motion_size"], "motion_size", lo=1),
                             check_int(cfg["road_size"], "road_size", lo=1), _epsilons(cfg),
                             float(cfg["road_epsilon"]), int(cfg["seed"]),
                             check_int(cfg["jitter_copies"], "jitter_copies", lo=0))
    path = out / "vocab.json"
    write_json(path, vocabs.to_dict())
    ctx["outputs"].append(path)
    print("vocabulary sizes: " + ", ".join(f"{k}={v}" for k, v in vocabs.sizes().items()))


def cmd_tokenize(cfg, out: Path, ctx: dict) -> None:
    from .motion_tokens import NoiseConfig
    from .scene import tokenize_scenario

    vocabs, vpath = _load_vocab(cfg["vocab"])
    scen, files = _scenarios(cfg["scenarios"])
    ctx["inputs"] += [vpath] + files
    noise = NoiseConfig(bool(cfg["noise"]), check_int(cfg["noise_k"], "noise_k", lo=1), float(cfg["noise_p"]))
    for s in scen:
        path = out / "tokens" / f"{s.scenario_id}.json"
        write_json(path, tokenize_scenario(vocabs, s, noise, None, int(cfg["seed"])).to_dict())
        ctx["outputs"].append(path)
    print(f"tokenized {len(scen)} scenarios into {out / 'tokens'}")


def cmd_train(cfg, out: Path, ctx: dict) -> None:
    from .checkpoint import save_checkpoint
    from .training import TrainConfig, Trainer, write_curve_csv

    vocabs, vpath = _load_vocab(cfg["vocab"])
    train, files = _scenarios(cfg["scenarios"])
    val, vfiles = _scenarios(cfg["val"], "val") if cfg["val"] else ([], [])
    ctx["inputs"] += [vpath] + files + vfiles
    tc = dict(cfg["train"])
    tc.setdefault("seed", cfg["seed"])
    try:
        tcfg = TrainConfig.from_dict(tc)
    except ConfigError as e:
        field = e.field if str(e.field).startswith("train.") else f"train.{e.field}"
        raise ConfigError(field, e.message) from None
    steps = tcfg.max_steps if cfg["steps"] is None else check_int(cfg["steps"], "steps", lo=1)
    trainer = Trainer(tcfg, vocabs, train, val)
    t0 = time.perf_counter()

    def report(row):
        if row["step"] % max(1, steps // 10) == 0 or row["step"] == steps:
            log.info("step %d loss %.4f lr %.2e", row["step"], row["train_total"], row["lr"])

    hist = trainer.fit(steps, report)
    ctx["timing"]["train_seconds"] = time.perf_counter() - t0
    ckpt, curve = out / "model.ckpt", out / "curve.csv"
    save_checkpoint(ckpt, trainer.model, vocabs, trainer.step_count, {"train_config": tcfg.to_dict()})
    write_curve_csv(curve, hist)
    summary = {"schema": SCHEMA_VERSION, "artifact": "train_summary", "steps": trainer.step_count,
               "n_params": trainer.model.n_params(), "final": hist[-1], "train_config": tcfg.to_dict()}
    write_json(out / "train_summary.json", summary)
    ctx["outputs"] += [ckpt, curve, out / "train_summary.json"]
    print(f"trained {trainer.step_count} steps; final train loss {hist[-1]['train_total']:.4f}")


def cmd_rollout(cfg, out: Path, ctx: dict) -> None:
    from .checkpoint import load_checkpoint
    from .rollout import RolloutConfig, rollout

    ck = check_path(cfg["checkpoint"], "checkpoint")
    model, vocabs, _ = load_checkpoint(ck)
    scen, files = _scenarios(cfg["scenarios"])
    if cfg["limit"] is not None:
        scen = scen[:check_int(cfg["limit"], "limit", lo=1)]
    ctx["inputs"] += [ck] + files
    rc = RolloutConfig(n_rollouts=check_int(cfg["n_rollouts"], "n_rollouts", lo=1),
                       top_k=check_int(cfg["top_k"], "top_k", lo=1), temperature=float(cfg["temperature"]),
                       seed=int(cfg["seed"]))
    times = []
    for s in scen:
        rs = rollout(model, vocabs, s, rc)
        times += rs.step_times
        path = out / "rollouts" / f"{s.scenario_id}.json"
        write_json(path, rs.to_dict())
        ctx["outputs"].append(path)
    if times:
        ctx["timing"]["step_ms_mean"] = 1e3 * float(np.mean(times))
        ctx["timing"]["step_ms_p95"] = 1e3 * float(np.percentile(times, 95))
    print(f"rolled out {len(scen)} scenarios x {rc.n_rollouts}")


def cmd_eval(cfg, out: Path, ctx: dict) -> None:
    import csv

    from .metrics import evaluate
    from .rollout import RolloutSet

    scen, files = _scenarios(cfg["scenarios"])
    by_id = {s.scenario_id: s for s in scen}
    rdir = check_path(cfg["rollouts"], "rollouts", directory=True)
    rfiles = sorted(rdir.glob("*.json"))
    reports = []
    for f in rfiles:
        d = json.loads(f.read_text())
        if isinstance(d, dict) and d.get("artifact") not in (None, "rollouts"):
            continue
        rs = RolloutSet.from_dict(d, str(f))
        if rs.scenario_id not in by_id:
            raise ConfigError("rollouts", f"{f}: scenario {rs.scenario_id!r} not found in {cfg['scenarios']}")
        reports.append(evaluate(rs, by_id[rs.scenario_id]))
        ctx["inputs"].append(f)
    if not reports:
        raise ConfigError("rollouts", f"no rollout files in {rdir}")
    ctx["inputs"] += files
    rows = [r.csv_row() for r in reports]
    keys = [k for k in rows[0] if k != "scenario_id"]
    mean = {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}
    doc = {"schema": SCHEMA_VERSION, "artifact": "report", "n_scenarios": len(reports), "mean": mean,
           "scenarios": [r.to_dict() for r in reports]}
    write_json(out / "report.json", doc)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["scenario_id"] + keys, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    ctx["outputs"] += [out / "report.json", out / "report.csv"]
    print(f"meta {mean['meta']:.4f}  minADE {mean['min_ade']:.3f}  collision {mean['collision_rate']:.3f}  "
          f"offroad {mean['offroad_rate']:.3f}  ({len(reports)} scenarios)")


def cmd_scaling_fit(cfg, out: Path, ctx: dict) -> None:
    from .scaling import fit_power_law, read_points_csv, write_fit_line_csv

    src = check_path(cfg["input"], "input")
    pts = read_points_csv(src)
    ctx["inputs"].append(src)
    fit = fit_power_law(pts)
    write_json(out / "fit.json", fit.to_dict())
    xs = [p.x for p in pts]
    write_fit_line_csv(out / "fit_line.csv", fit, min(xs), max(xs))
    ctx["outputs"] += [out / "fit.json", out / "fit_line.csv"]
    print(f"beta {fit.beta:.6f}  alpha {fit.alpha:.6f}  r2 {fit.r2:.6f}")


def cmd_selftest(cfg, out: Path, ctx: dict) -> None:
    from .selftest import run_selftest

    checks = run_selftest(print)
    ctx["selftest"] = {c.name: c.passed for c in checks}
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise SmartgenError(f"selftest failed: {', '.join(failed)}")


COMMANDS = {"synth-gen": cmd_synth_gen, "build-vocab": cmd_build_vocab, "tokenize": cmd_tokenize,
            "train": cmd_train, "rollout": cmd_rollout, "eval": cmd_eval, "scaling-fit": cmd_scaling_fit,
            "selftest": cmd_selftest}


def _write_manifest(out: Path, cmd: str, cfg: dict, ctx: dict) -> None:
    rel = lambda p: os.path.relpath(p, out)
    manifest = {"schema": SCHEMA_VERSION, "artifact": "manifest", "tool": "smartgen", "version": __version__,
                "subcommand": cmd, "config": cfg, "threads": ctx["threads"],
                "inputs": {str(p): file_sha256(p) for p in ctx["inputs"]},
                "outputs": {rel(p): file_sha256(p) for p in ctx["outputs"]},
                "timing": ctx["timing"], "created_unix": time.time()}
    if "selftest" in ctx:
        manifest["selftest"] = ctx["selftest"]
    write_json(out / "manifest.json", manifest)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"ERROR usage: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("ERROR usage: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve(args.command, args)
        ctx = {"inputs": [], "outputs": [], "timing": {}, "threads": _threads()}
        out = Path(args.out or ".")
        COMMANDS[args.command](cfg, out, ctx)
        if args.out is not None or args.command != "selftest":
            out.mkdir(parents=True, exist_ok=True)
            _write_manifest(out, args.command, cfg, ctx)
        return 0
    except (ConfigError, SchemaError) as e:
        print(f"ERROR {e.category}: {e}", file=sys.stderr)
        return 3
    except SmartgenError as e:
        print(f"ERROR {e.category}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - last-resort report for the CLI
        log.debug("unhandled error", exc_info=True)
        print(f"ERROR internal: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
