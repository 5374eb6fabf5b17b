"""Command line harness: configuration, presets, Monte Carlo runs and file I/O.

Verbs
-----
run              simulate and filter ``runs`` Monte Carlo replications
replay           filter recorded scans from a JSON file
validate-config  parse a configuration file and report problems
export-scenario  write a simulated scan log, the truth and the model

Exit codes: 0 success, 2 bad configuration or input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .gaussian import ConfigurationError
from .glmb import JmsGlmbFilter, TruncationPolicy, density_to_dict
from .jms import JmsModel, default_params, model_from_params, to_plain
from .metrics import OspaParams, mode_identification, mode_probability_trace, ospa
from .simulator import (default_linear_script, default_nonlinear_script, random_birth_script,
                        simulate_scans, simulate_truth)

log = logging.getLogger("jmsglmb")

OUTPUT_ENV = "JMSGLMB_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
PRESETS = ("linear", "nonlinear")
EMIT_KEYS = ("estimates", "ospa", "modes", "density_snapshots")


class ConfigError(Exception):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message

    def __reduce__(self):
        return ConfigError, (self.key, self.message)


class RunFailure(Exception):
    """Numerical failure inside one Monte Carlo run."""

    def __init__(self, run: int, step: int, cause: BaseException):
        super().__init__(f"run {run} step {step}: {type(cause).__name__}: {cause}")
        self.run = run
        self.step = step
        self.cause = cause

    def __reduce__(self):
        return RunFailure, (self.run, self.step, self.cause)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    scenario: str = "linear"
    runs: int = 1
    seed: int = 0
    steps: int = 100
    script: str = "default"
    workers: int = 1
    output_dir: Optional[str] = None
    model: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    ospa: dict = field(default_factory=dict)
    emit: dict = field(default_factory=dict)

    def emits(self, what: str) -> bool:
        return bool(self.emit.get(what, what != "density_snapshots"))


_POLICY_KEYS = ("max_hypotheses", "min_log_weight", "prune_threshold", "merge_threshold",
                "max_components", "gate_sigma")


def _merge(base: dict, overrides: dict, path: str) -> dict:
    """Recursive override of ``base``; unknown keys are configuration errors."""
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        where = f"{path}.{key}"
        if key not in base:
            raise ConfigError(where, "unknown parameter")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _int(raw: dict, key: str, default: int, minimum: int) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(key, f"must be at least {minimum}")
    return value


def parse_config(raw: Optional[dict], base_dir: Path = Path(".")) -> RunConfig:
    """Validate a plain configuration mapping and return a :class:`RunConfig`."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    known = set(RunConfig.__dataclass_fields__)
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown key")
    scenario = raw.get("scenario", "linear")
    if not isinstance(scenario, str):
        raise ConfigError("scenario", "expected a preset name or a path")
    if scenario not in PRESETS:
        path = Path(scenario)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError("scenario", f"no preset or file named {scenario!r}")
        scenario = str(path)
    script = raw.get("script", "default")
    if script not in ("default", "random"):
        raise ConfigError("script", "must be 'default' or 'random'")
    for key in ("model", "policy", "ospa", "emit"):
        if not isinstance(raw.get(key, {}), dict):
            raise ConfigError(key, "expected a mapping")
    for key in raw.get("policy", {}):
        if key not in _POLICY_KEYS:
            raise ConfigError(f"policy.{key}", "unknown parameter")
    for key in raw.get("ospa", {}):
        if key not in ("cutoff", "order"):
            raise ConfigError(f"ospa.{key}", "unknown parameter")
    for key in raw.get("emit", {}):
        if key not in EMIT_KEYS:
            raise ConfigError(f"emit.{key}", "unknown output")
    out = raw.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir", "expected a path")
    cfg = RunConfig(
        scenario=scenario,
        runs=_int(raw, "runs", 1, 1),
        seed=_int(raw, "seed", 0, 0),
        steps=_int(raw, "steps", 100, 1),
        script=script,
        workers=_int(raw, "workers", 1, 1),
        output_dir=out,
        model=dict(raw.get("model", {})),
        policy=dict(raw.get("policy", {})),
        ospa=dict(raw.get("ospa", {})),
        emit=dict(raw.get("emit", {})),
    )
    # build everything once so errors surface before any run starts
    build_model(cfg)
    build_policy(cfg)
    build_ospa(cfg)
    return cfg


def load_yaml(path: str):
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist")
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"{path} is not valid YAML: {exc}")


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return parse_config({})
    return parse_config(load_yaml(path), Path(path).resolve().parent)


def scenario_params(cfg: RunConfig) -> dict:
    if cfg.scenario in PRESETS:
        base = default_params(cfg.scenario)
    else:
        base = load_yaml(cfg.scenario)
        if not isinstance(base, dict) or base.get("kind") not in PRESETS:
            raise ConfigError("scenario", "scenario file needs kind: linear | nonlinear")
        ref = default_params(base["kind"])
        for key in ref:
            if key not in base:
                raise ConfigError(f"scenario.{key}", "missing from scenario file")
        base = _merge(ref, base, "scenario")
    return _merge(base, cfg.model, "model")


def build_model(cfg: RunConfig) -> JmsModel:
    params = scenario_params(cfg)
    try:
        return model_from_params(params)
    except (ConfigurationError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError("model", str(exc))


def build_policy(cfg: RunConfig) -> TruncationPolicy:
    try:
        return TruncationPolicy(**cfg.policy)
    except (ConfigurationError, TypeError) as exc:
        raise ConfigError("policy", str(exc))


def build_ospa(cfg: RunConfig) -> OspaParams:
    try:
        return OspaParams(**{k: float(v) for k, v in cfg.ospa.items()})
    except (ValueError, TypeError) as exc:
        raise ConfigError("ospa", str(exc))


def script_for(model: JmsModel, cfg: RunConfig, seed: int):
    if cfg.script == "random":
        return random_birth_script(model, cfg.steps, seed)
    if model.params["kind"] == "linear":
        return default_linear_script(seed, cfg.steps)
    return default_nonlinear_script(seed, cfg.steps)


# ---------------------------------------------------------------------------
# CSV output


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return "%.17g" % value


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def state_columns(dim: int) -> list:
    return ["x", "vx", "y", "vy", "omega"][:dim]


def estimate_rows(run: int, estimates: list):
    rows, mode_rows = [], []
    for k, est in enumerate(estimates, start=1):
        for t in est.targets:
            key = [run, k, t.label.birth_time, t.label.index]
            rows.append(key + [t.mode + 1] + [float(v) for v in t.mean])
            mode_rows.append(key + [float(p) for p in t.mode_probs])
    return rows, mode_rows


def write_estimates(out: Path, run: int, estimates: list, model: JmsModel, cfg: RunConfig) -> None:
    rows, mode_rows = estimate_rows(run, estimates)
    if cfg.emits("estimates"):
        write_csv(out / "estimates.csv",
                  ["run", "step", "label_birth", "label_idx", "mode"] + state_columns(model.state_dim), rows)
    if cfg.emits("modes"):
        write_csv(out / "modes.csv", ["run", "step", "label_birth", "label_idx"]
                  + [f"p_mode_{r + 1}" for r in range(model.n_modes)], mode_rows)


def _snapshot(out: Path, k: int, density) -> None:
    snap = out / "density"
    snap.mkdir(exist_ok=True)
    with open(snap / f"step_{k:04d}.json", "w") as fh:
        json.dump(density_to_dict(density), fh)


# ---------------------------------------------------------------------------
# Monte Carlo runs


def run_filter(model: JmsModel, policy: TruncationPolicy, scans, run: int = 0, snapshot_dir: Optional[Path] = None):
    """Filter a scan sequence; returns (estimates, diagnostics)."""
    filt = JmsGlmbFilter(model, policy)
    estimates, diags = [], []
    for k, Z in enumerate(scans, start=1):
        try:
            est, diag = filt.step(Z, k)
        except (np.linalg.LinAlgError, FloatingPointError, ConfigurationError, ValueError) as exc:
            raise RunFailure(run, k, exc) from exc
        log.info("run %d step %d: %d hypotheses, %d tracks, %d estimated",
                 run, k, diag.n_hypotheses, diag.n_tracks, est.cardinality)
        estimates.append(est)
        diags.append(diag)
        if snapshot_dir is not None:
            _snapshot(snapshot_dir, k, filt.density)
    return estimates, diags


def _one_run(job):
    """Simulate and filter run ``r``; writes run_r/ and returns summary arrays."""
    cfg, r, out_root = job
    started = time.perf_counter()
    model, policy, ospa_params = build_model(cfg), build_policy(cfg), build_ospa(cfg)
    seed = cfg.seed + r
    script = script_for(model, cfg, seed)
    truths = simulate_truth(model, script)
    scans = simulate_scans(truths, model, cfg.steps, seed)
    out = Path(out_root) / f"run_{r}"
    out.mkdir(parents=True, exist_ok=True)
    estimates, diags = run_filter(model, policy, [s.measurements for s in scans], r,
                                  out if cfg.emits("density_snapshots") else None)
    write_estimates(out, r, estimates, model, cfg)

    ospa_rows = []
    for k, est in enumerate(estimates, start=1):
        X = np.array([t.mean[[0, 2]] for t in est.targets]).reshape(-1, 2)
        Y = np.array([t.state_at(k)[[0, 2]] for t in truths if t.alive(k)]).reshape(-1, 2)
        o = ospa(X, Y, ospa_params)
        ospa_rows.append([k, o.total, o.localization, o.cardinality, len(Y), len(X)])
    if cfg.emits("ospa"):
        write_csv(out / "ospa.csv", ["step", "ospa_total", "ospa_loc", "ospa_card", "card_truth", "card_est"],
                  ospa_rows)
    first = min(truths, key=lambda t: (t.birth_step, t.label)) if truths else None
    if first is not None:
        _, trace = mode_probability_trace(estimates, first)
    else:
        trace = np.full((len(estimates), model.n_modes), np.nan)
    eligible, hits = mode_identification(estimates, truths)
    return {
        "run": r,
        "ospa": np.array([row[1:] for row in ospa_rows], dtype=float).reshape(-1, 5),
        "trace": trace,
        "eligible": eligible,
        "hits": hits,
        "ignored": np.array([d.n_ignored for d in diags]),
        "seconds": time.perf_counter() - started,
    }


def _pool_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def summarize(results: list, steps: int, n_modes: int):
    """Per-step aggregate rows; independent of the order of ``results``."""
    results = sorted(results, key=lambda r: r["run"])
    ospa_all = np.stack([r["ospa"] for r in results])          # runs x steps x 5
    traces = np.stack([r["trace"] for r in results])           # runs x steps x modes
    eligible = np.sum([r["eligible"] for r in results], axis=0)
    hits = np.sum([r["hits"] for r in results], axis=0)
    ignored = np.sum([r["ignored"] for r in results], axis=0)
    mean = np.mean(ospa_all, axis=0)
    present = np.sum(~np.isnan(traces[:, :, 0]), axis=0)
    rows = []
    for k in range(steps):
        if present[k]:
            t1 = np.nanmean(traces[:, k, :], axis=0)
        else:
            t1 = np.full(n_modes, np.nan)
        rows.append([k + 1, len(results), *mean[k], *t1, int(present[k]),
                     int(eligible[k]), int(hits[k]), int(ignored[k])])
    header = (["step", "runs", "ospa_total", "ospa_loc", "ospa_card", "card_truth", "card_est"]
              + [f"t1_p_mode_{r + 1}" for r in range(n_modes)]
              + ["t1_present", "mode_eligible", "mode_hits", "n_ignored"])
    return header, rows


def output_root(cli_value: Optional[str], cfg: RunConfig) -> Path:
    value = cli_value or os.environ.get(OUTPUT_ENV) or cfg.output_dir or "jmsglmb_out"
    return Path(value)


def run(cfg: RunConfig, out_root: Path) -> int:
    model = build_model(cfg)
    out_root.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    jobs = [(cfg, r, str(out_root)) for r in range(cfg.runs)]
    results = _pool_map(_one_run, jobs, cfg.workers)
    header, rows = summarize(results, cfg.steps, model.n_modes)
    write_csv(out_root / "summary.csv", header, rows)
    seconds = [r["seconds"] for r in results]
    with open(out_root / "timing.json", "w") as fh:
        json.dump({"runs": cfg.runs, "workers": cfg.workers,
                   "wall_seconds": time.perf_counter() - started,
                   "run_seconds_mean": float(np.mean(seconds)),
                   "run_seconds_min": float(np.min(seconds)),
                   "run_seconds_max": float(np.max(seconds))}, fh, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# scan logs


def scans_to_json(scans) -> list:
    return [{"k": int(s.k), "measurements": [[float(v) for v in z] for z in s.measurements]} for s in scans]


def parse_scans(data, meas_dim: int) -> list:
    """Validate a scan log; returns measurement arrays ordered by step.

    Steps must be 1, 2, 3, ... in order.  Raises ConfigError naming the first
    offending record.
    """
    if not isinstance(data, list):
        raise ConfigError("scans", "expected a JSON array of scan records")
    out = []
    for i, rec in enumerate(data):
        where = f"scans[{i}]"
        if not isinstance(rec, dict) or set(rec) != {"k", "measurements"}:
            raise ConfigError(where, "record must have exactly the keys k and measurements")
        k = rec["k"]
        if isinstance(k, bool) or not isinstance(k, int) or k != i + 1:
            raise ConfigError(where, f"k must be {i + 1}, got {k!r}")
        meas = rec["measurements"]
        if not isinstance(meas, list):
            raise ConfigError(where, "measurements must be a list")
        for z in meas:
            if (not isinstance(z, list) or len(z) != meas_dim
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
                               for v in z)):
                raise ConfigError(where, f"each measurement must be a list of {meas_dim} finite numbers")
        out.append(np.array(meas, dtype=float).reshape(-1, meas_dim))
    return out


def replay(cfg: RunConfig, scan_file: str, out_root: Path, run_index: int = 0) -> int:
    model = build_model(cfg)
    policy = build_policy(cfg)
    try:
        with open(scan_file) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("scans", f"{scan_file} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError("scans", f"not valid JSON: {exc}")
    scans = parse_scans(data, model.sensor.measurement_dim)
    out_root.mkdir(parents=True, exist_ok=True)
    estimates, diags = run_filter(model, policy, scans, run_index,
                                  out_root if cfg.emits("density_snapshots") else None)
    write_estimates(out_root, run_index, estimates, model, cfg)
    rows = [[k, est.cardinality, d.n_hypotheses, d.n_ignored]
            for k, (est, d) in enumerate(zip(estimates, diags), start=1)]
    write_csv(out_root / "summary.csv", ["step", "card_est", "n_hypotheses", "n_ignored"], rows)
    total = sum(d.n_ignored for d in diags)
    if total:
        print(f"warning: ignored {total} measurement(s) outside the observation region", file=sys.stderr)
    return EXIT_OK


def export_scenario(cfg: RunConfig, out_root: Path, run_index: int = 0) -> int:
    """Scan log, truth table and full model parameters of run ``run_index``."""
    model = build_model(cfg)
    seed = cfg.seed + run_index
    truths = simulate_truth(model, script_for(model, cfg, seed))
    scans = simulate_scans(truths, model, cfg.steps, seed)
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "scans.json", "w") as fh:
        json.dump(scans_to_json(scans), fh)
    rows = [[t.label.birth_time, t.label.index, k, t.mode_at(k) + 1] + [float(v) for v in t.state_at(k)]
            for t in truths for k in range(t.birth_step, t.death_step)]
    write_csv(out_root / "truth.csv", ["label_birth", "label_idx", "step", "mode"] + state_columns(model.state_dim),
              rows)
    with open(out_root / "model.yaml", "w") as fh:
        yaml.safe_dump(to_plain(model.params), fh, sort_keys=False)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jmsglmb", description="Jump-Markov GLMB multi-target tracking harness")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v progress, -vv per-step counts")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, scenario=True):
        sp.add_argument("--config", help="YAML configuration file")
        if scenario:
            sp.add_argument("--scenario", help="preset (linear, nonlinear) or scenario YAML file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV} or config)")

    sp = sub.add_parser("run", help="Monte Carlo simulation and filtering")
    common(sp)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--snapshots", action="store_true", help="write per-step density snapshots")

    sp = sub.add_parser("replay", help="filter a recorded scan log")
    sp.add_argument("scans", help="scan log JSON: [{k, measurements}, ...]")
    sp.add_argument("--model", help="scenario YAML (e.g. written by export-scenario)")
    sp.add_argument("--run-index", type=int, default=0, help="value of the run column")
    sp.add_argument("--snapshots", action="store_true")
    common(sp, scenario=False)

    sp = sub.add_parser("validate-config", help="check a configuration file")
    sp.add_argument("config")

    sp = sub.add_parser("export-scenario", help="write scans.json, truth.csv and model.yaml")
    common(sp)
    sp.add_argument("--run-index", type=int, default=0)
    return p


def _config_from_args(args) -> RunConfig:
    raw = {}
    config_path = getattr(args, "config", None)
    base = Path(".")
    if config_path:
        raw = load_yaml(config_path) or {}
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "configuration must be a mapping")
        base = Path(config_path).resolve().parent
        # relative scenario paths in a config file are relative to that file
        if isinstance(raw.get("scenario"), str) and raw["scenario"] not in PRESETS:
            raw["scenario"] = str(base / raw["scenario"])
    for key in ("scenario", "seed", "steps", "runs", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if getattr(args, "model", None):
        raw["scenario"] = args.model
    if getattr(args, "snapshots", False):
        raw.setdefault("emit", {})["density_snapshots"] = True
    return parse_config(raw, Path("."))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = {0: logging.ERROR, 1: logging.WARNING, 2: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "validate-config":
            load_config(args.config)
            print("ok")
            return EXIT_OK
        cfg = _config_from_args(args)
        out = output_root(args.output_dir, cfg)
        if args.verb == "run":
            return run(cfg, out)
        if args.verb == "replay":
            return replay(cfg, args.scans, out, args.run_index)
        return export_scenario(cfg, out, args.run_index)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
