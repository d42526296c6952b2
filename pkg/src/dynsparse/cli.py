"""Command-line entry point.

Every subcommand reads one JSON config, computes all outputs in memory and
only then writes them (plus ``manifest.json``) into the ``--out`` directory,
so a failed run leaves no partial files behind.

Exit status: 0 success, 1 invalid usage or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from ._validation import InvalidArgumentError
from .allocator import (JointConfig, JointProblem, LatencyTable, PromptInstance,
                        make_prompt_instance, optimize_joint, sequential_baseline)
from .controller import ControllerConfig, stability_gain
from .dictionary import (FeasibleFamily, StructuredDictionary, SupportSet,
                         build_synthetic_dictionary)
from .experiments import ExperimentConfig, run_experiment
from .recovery import RecoveryConfig, fit_error_curve, omp_structured, prox_group_lasso
from .sensing import draw_operator, measure
from .simulator import (EntropyChannel, GroundTruthProcess, PromptFamily, run_closed_loop,
                        trace_metrics)

SUBCOMMANDS = ("gen-dict", "sense", "recover", "simulate", "sweep", "pareto", "joint", "stability")


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit status 1."""


def _dumps(doc):
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    return cfg[key]


def _seed(cfg, args, key="seed"):
    return int(args.seed) if args.seed is not None else int(cfg.get(key, 0))


def _dictionary(cfg, seed):
    if "dictionary" in cfg:
        return StructuredDictionary.from_dict(cfg["dictionary"])
    return build_synthetic_dictionary(int(_require(cfg, "D")), int(_require(cfg, "G")),
                                      int(cfg.get("group_size", 1)),
                                      cfg.get("ensemble", "gaussian_normalized"), seed)


def cmd_gen_dict(cfg, args):
    Psi = _dictionary(cfg, _seed(cfg, args))
    return {"dictionary.json": _dumps(Psi.to_dict())}


def cmd_sense(cfg, args):
    seed = _seed(cfg, args)
    A = draw_operator(cfg.get("ensemble", "gaussian"), int(_require(cfg, "m")),
                      int(_require(cfg, "D")), seed)
    out = {"operator.json": _dumps(A.to_dict())}
    if "u" in cfg:
        z = measure(A, np.asarray(cfg["u"], dtype=float), float(cfg.get("noise_sigma", 0.0)), seed)
        out["sketch.json"] = _dumps({"schema": 1, "values": [float(v) for v in z.values],
                                     "noise_sigma": z.noise_sigma})
    return out


def recover_from_config(cfg):
    """Run the recovery described by a recover config; returns a RecoveryResult."""
    z = np.asarray(_require(cfg, "z"), dtype=float)
    M = np.asarray(_require(cfg, "M"), dtype=float)
    rcfg = RecoveryConfig.from_dict(cfg.get("recovery", {}))
    solver = cfg.get("solver", "omp")
    if solver == "omp":
        return omp_structured(z, M, int(_require(cfg, "k_max")), rcfg.family)
    if solver == "prox":
        return prox_group_lasso(z, M, rcfg)
    raise ConfigError(f"unknown solver {solver!r}")


def cmd_recover(cfg, args):
    result = recover_from_config(cfg)
    return {"result.json": _dumps(result.to_dict()), "trace.csv": result.trace_csv()}


def _closed_loop_parts(cfg, seed):
    pcfg = dict(_require(cfg, "process"))
    family = FeasibleFamily.from_dict(_require(pcfg, "family"))
    weights = pcfg.pop("weights", None)
    pf = PromptFamily(int(pcfg.pop("family_id", 0)), family,
                      None if weights is None else tuple(weights),
                      int(pcfg.pop("measurement_bank_seed", seed)))
    pcfg.pop("family")
    pcfg.setdefault("seed", seed)
    process = GroundTruthProcess(family=pf, **pcfg)
    controller = ControllerConfig.from_dict(_require(cfg, "controller"))
    channel = EntropyChannel(**cfg.get("channel", {}))
    rdoc = dict(cfg.get("recovery", {}))
    rdoc.setdefault("family", family.to_dict())
    return process, controller, channel, RecoveryConfig.from_dict(rdoc)


def cmd_simulate(cfg, args):
    seed = _seed(cfg, args)
    process, controller, channel, rcfg = _closed_loop_parts(cfg, seed)
    trace = run_closed_loop(process, controller, channel, rcfg,
                            ensemble=cfg.get("ensemble", "gaussian"),
                            incremental=bool(cfg.get("incremental", False)), seed=seed,
                            solver=cfg.get("solver", "prox"),
                            delta_max=int(cfg.get("delta_max", 1)))
    metrics = trace_metrics(trace, float(cfg.get("execution_cost", 0.0)))
    return {"trace.csv": trace.to_csv(), "metrics.json": _dumps({"schema": 1, **metrics})}


def _experiment(cfg, args, forced=None):
    doc = dict(cfg)
    if forced is not None:
        doc["experiment"] = forced
    if args.seed is not None:
        doc["master_seed"] = int(args.seed)
    config = ExperimentConfig.from_dict(doc)
    csv_text, sidecar, _ = run_experiment(config)
    name = config.experiment
    # the sidecar carries wall time, so it is metadata rather than digest-bearing data
    return {f"{name}.csv": csv_text}, {f"{name}.summary.json": _dumps(sidecar)}


def cmd_sweep(cfg, args):
    return _experiment(cfg, args)


def cmd_pareto(cfg, args):
    return _experiment(cfg, args, forced="pareto")


def cmd_joint(cfg, args):
    seed = _seed(cfg, args)
    G = int(cfg.get("G", 10))
    Psi = _dictionary(cfg if "dictionary" in cfg else
                      {"D": G, "G": G, "ensemble": "identity_padded"}, seed)
    family = FeasibleFamily.from_dict(_require(cfg, "family"))
    if "instance" in cfg:
        instance = PromptInstance.from_dict(cfg["instance"])
    else:
        rng = np.random.default_rng(seed)
        k = family.max_support_size(Psi.G)
        truth = SupportSet(rng.choice(Psi.G, size=k, replace=False))
        instance = make_prompt_instance(int(cfg.get("n", 8)), Psi, truth, seed=seed)
    table = LatencyTable.from_dict(cfg["latency"]) if "latency" in cfg else \
        LatencyTable.from_dictionary(Psi, 0.05, 0.1)
    problem = JointProblem(Psi, int(_require(cfg, "m")), int(cfg.get("T", 1)), family,
                           cfg.get("ensemble", "gaussian"), float(cfg.get("beta_m", 0.0)),
                           float(cfg.get("rho", 1.0)))
    jcfg = JointConfig.from_dict(cfg.get("weights", {}))
    sol = optimize_joint(instance, table, jcfg, problem, int(cfg.get("budget_iters", 100)), seed)
    seq = sequential_baseline(instance, table, jcfg, problem, int(sol.r.sum()), seed=seed)
    return {"solution.json": _dumps(sol.to_dict()),
            "baseline.json": _dumps(seq.to_dict()),
            "instance.json": _dumps(instance.to_dict())}


def cmd_stability(cfg, args):
    if "error_trials" in cfg:
        curve = fit_error_curve([tuple(p) for p in cfg["error_trials"]])
        slope = curve.slope(int(_require(cfg, "m_base")))
    else:
        slope = float(_require(cfg, "dG_dm"))
    rep = stability_gain(float(_require(cfg, "gamma")), float(_require(cfg, "L_H")),
                         int(_require(cfg, "m_base")), slope)
    return {"stability.json": _dumps({"schema": 1, "gain": rep.gain, "stable": rep.stable,
                                      "gamma": rep.gamma, "L_H": rep.L_H,
                                      "m_base": rep.m_base, "dG_dm": rep.dG_dm})}


COMMANDS = {"gen-dict": cmd_gen_dict, "sense": cmd_sense, "recover": cmd_recover,
            "simulate": cmd_simulate, "sweep": cmd_sweep, "pareto": cmd_pareto,
            "joint": cmd_joint, "stability": cmd_stability}


def build_parser():
    parser = argparse.ArgumentParser(prog="dynsparse",
                                     description="Compressed-sensing dynamic sparsity toolkit")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=".", help="output directory")
    return parser


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return doc


def _sha256(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write(out_dir, data, metadata, manifest):
    os.makedirs(out_dir, exist_ok=True)
    for name, text in {**data, **metadata, "manifest.json": manifest}.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        cfg = load_config(args.config)
        outputs = COMMANDS[args.command](cfg, args)
    except (ConfigError, InvalidArgumentError, KeyError, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    data, metadata = outputs if isinstance(outputs, tuple) else (outputs, {})
    manifest = {"schema": 1, "tool_version": __version__, "command": args.command,
                "config": cfg, "master_seed": args.seed if args.seed is not None
                else cfg.get("seed", cfg.get("master_seed", 0)),
                "started": started,
                "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                "outputs": {name: _sha256(text) for name, text in sorted(data.items())},
                "metadata_files": sorted(metadata)}
    try:
        _write(args.out, data, metadata, _dumps(manifest))
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return 2
    for name in sorted(data):
        print(os.path.join(args.out, name))
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
