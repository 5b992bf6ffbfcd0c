"""Batch command-line front end.

Usage::

    meanfield SUBCOMMAND [--config PATH] [--seed U64] [--threads K] [--out DIR]

Subcommands: ``simulate stability rates contract chaos concentrate couple
moments cltbound``. Each writes ``<out>/<subcommand>.csv`` and
``<out>/<subcommand>.json`` atomically. Exit codes: 0 pass or complete,
10 inconclusive, 20 theorem-check failure, 1 usage or runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import experiments as ex
from .dynamics import DriftSpec, ModelParams, NoiseSpec
from .kernels import Family, KernelSpec
from .stability import compute_constants

__all__ = ["RunConfig", "ConfigError", "parse_config", "parse_config_text", "canonical_json",
           "dispatch", "main", "EXIT_PASS", "EXIT_INCONCLUSIVE", "EXIT_FAIL", "EXIT_ERROR"]

EXIT_PASS, EXIT_INCONCLUSIVE, EXIT_FAIL, EXIT_ERROR = 0, 10, 20, 1
SUBCOMMANDS = ("simulate", "stability", "rates", "contract", "chaos", "concentrate", "couple",
               "moments", "cltbound")
_EXIT = {ex.PASS: EXIT_PASS, ex.INCONCLUSIVE: EXIT_INCONCLUSIVE, ex.FAIL: EXIT_FAIL}


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


# ---------------------------------------------------------------------------
# schema: key -> default; validation below collects every violation

_DRIFT = {"a1": 1.0, "a2": 0.0, "a3": 0.0, "variant": "linear", "kappa": 0.0}
_NOISE = {"b": 1.0, "L_mean": 1.0, "L_sd": 0.0, "c_mean": 0.0, "c_sd": 0.0}
_KERNEL = {"family": "gaussian", "bandwidth": 1.0}
_MODEL = {"dim": 1, "A": 0.5, "delta": 0.05, "alpha": 0.3, "drift": _DRIFT, "noise": _NOISE,
          "P": _KERNEL, "P_dep": _KERNEL}
_INIT = {"kind": "gaussian", "loc": 0.0, "scale": 1.0}
_EXPERIMENT = {
    "grid": [64, 128, 256, 512, 1024], "n_steps": 200, "replications": 32, "tau": 1.0,
    "window": [20, 200], "stride": 1, "system": "ips2", "reference": "quantile", "ref_nodes": 2048,
    "ref_factor": 50, "ref_tol": 1e-4, "field_budget": 4096, "init": _INIT,
    "init_alt": {"kind": "gaussian", "loc": 3.0, "scale": 1.0},
    "eps_grid": [0.1, 0.2], "monitor_steps": [5, 10],
    "functions": ["clamp", "tanh", "sin", "cos2x", "arctan"], "slope_tol": 0.15,
    "rate_slack": 0.05, "burn_in": 50, "coupling_variant": "printed",
}
_OUTPUT = {"dir": "results"}
_TOP = {"model": _MODEL, "experiment": _EXPERIMENT, "seed": 0, "output": _OUTPUT}


def _merge(schema: dict, given, path: str, errors: list) -> dict:
    """Fill defaults and flag unknown keys (recursively for nested sections)."""
    if not isinstance(given, dict):
        errors.append(f"{path or 'config'}: expected an object")
        return json.loads(json.dumps(schema))
    out = {}
    for k in given:
        if k not in schema:
            errors.append(f"{path + '.' if path else ''}{k}: unknown key")
    for k, default in schema.items():
        p = f"{path}.{k}" if path else k
        if isinstance(default, dict):
            out[k] = _merge(default, given.get(k, {}), p, errors)
        else:
            out[k] = json.loads(json.dumps(given.get(k, default)))
    return out


def _num(errors, path, v, lo=None, hi=None, lo_open=False, hi_open=False, integer=False, msg=None):
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok_type or (not integer and not np.isfinite(v)):
        errors.append(f"{path}: expected {'an integer' if integer else 'a finite number'}, got {v!r}")
        return False
    bad = ((lo is not None and (v <= lo if lo_open else v < lo))
           or (hi is not None and (v >= hi if hi_open else v > hi)))
    if bad:
        errors.append(f"{path}: {msg}, got {v!r}")
        return False
    return True


def _choice(errors, path, v, options):
    if v not in options:
        errors.append(f"{path}: must be one of {list(options)}, got {v!r}")
        return False
    return True


def _int_list(errors, path, v, lo=1):
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        errors.append(f"{path}: expected a list of integers, got {v!r}")
        return False
    if any(x < lo for x in v):
        errors.append(f"{path}: entries must be >= {lo}")
        return False
    return True


def _validate(raw: dict, errors: list):
    m, e = raw["model"], raw["experiment"]
    _num(errors, "model.dim", m["dim"], lo=1, integer=True, msg="dim >= 1")
    _num(errors, "model.delta", m["delta"], lo=0.0, lo_open=True, msg="delta > 0")
    _num(errors, "model.alpha", m["alpha"], lo=0.0, hi=1.0, lo_open=True, hi_open=True,
         msg="alpha ∈ (0,1)")
    A = m["A"]
    if isinstance(A, list):
        try:
            arr = np.asarray(A, dtype=float)
            if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or not np.all(np.isfinite(arr)):
                raise ValueError
            if isinstance(m["dim"], int) and arr.shape[0] != m["dim"]:
                errors.append(f"model.A: shape {arr.shape} does not match dim {m['dim']}")
        except (TypeError, ValueError):
            errors.append("model.A: expected a number or a square matrix of finite numbers")
    else:
        _num(errors, "model.A", A, msg="finite scalar")
    d = m["drift"]
    for k in ("a1", "a2", "a3", "kappa"):
        _num(errors, f"model.drift.{k}", d[k], msg="finite")
    if _choice(errors, "model.drift.variant", d["variant"], ("linear", "interaction")):
        if d["variant"] == "linear" and d["kappa"] != 0:
            errors.append("model.drift.kappa: only used by the interaction variant")
    n = m["noise"]
    for k in ("b", "L_sd", "c_sd"):
        _num(errors, f"model.noise.{k}", n[k], lo=0.0, msg=f"{k} >= 0")
    for k in ("L_mean", "c_mean"):
        _num(errors, f"model.noise.{k}", n[k], msg="finite")
    for kk in ("P", "P_dep"):
        k = m[kk]
        _choice(errors, f"model.{kk}.family", k["family"], [f.value for f in Family])
        _num(errors, f"model.{kk}.bandwidth", k["bandwidth"], lo=0.0, lo_open=True, msg="λ > 0")
        if k["family"] == "biexponential" and m["dim"] != 1:
            errors.append(f"model.{kk}.family: biexponential requires dim = 1")
    if _int_list(errors, "experiment.grid", e["grid"], lo=1):
        if len(e["grid"]) == 0:
            errors.append("experiment.grid: must not be empty")
        if any(b <= a for a, b in zip(e["grid"], e["grid"][1:])):
            errors.append("experiment.grid: must be strictly increasing")
    _num(errors, "experiment.n_steps", e["n_steps"], lo=1, integer=True, msg="n_steps >= 1")
    _num(errors, "experiment.replications", e["replications"], lo=8, integer=True,
         msg="replications >= 8")
    _num(errors, "experiment.tau", e["tau"], lo=0.0, lo_open=True, msg="tau > 0")
    if _int_list(errors, "experiment.window", e["window"], lo=0):
        if len(e["window"]) != 2 or e["window"][0] > e["window"][1]:
            errors.append("experiment.window: expected [lo, hi] with lo <= hi")
    _num(errors, "experiment.stride", e["stride"], lo=1, integer=True, msg="stride >= 1")
    _choice(errors, "experiment.system", e["system"], ("ips1", "ips2"))
    _choice(errors, "experiment.reference", e["reference"], ("quantile", "ensemble"))
    _num(errors, "experiment.ref_nodes", e["ref_nodes"], lo=2, integer=True, msg="ref_nodes >= 2")
    _num(errors, "experiment.ref_factor", e["ref_factor"], lo=1, integer=True, msg="ref_factor >= 1")
    _num(errors, "experiment.ref_tol", e["ref_tol"], lo=0.0, lo_open=True, msg="ref_tol > 0")
    _num(errors, "experiment.field_budget", e["field_budget"], lo=1, integer=True,
         msg="field_budget >= 1")
    for kk in ("init", "init_alt"):
        i = e[kk]
        _choice(errors, f"experiment.{kk}.kind", i["kind"], ("gaussian", "point"))
        _num(errors, f"experiment.{kk}.loc", i["loc"], msg="finite")
        _num(errors, f"experiment.{kk}.scale", i["scale"], lo=0.0, msg="scale >= 0")
    if not isinstance(e["eps_grid"], list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in e["eps_grid"]):
        errors.append("experiment.eps_grid: expected a list of positive numbers")
    _int_list(errors, "experiment.monitor_steps", e["monitor_steps"], lo=1)
    if not isinstance(e["functions"], list) or any(f not in ex.TEST_FUNCTIONS for f in e["functions"]):
        errors.append(f"experiment.functions: entries must be among {sorted(ex.TEST_FUNCTIONS)}")
    _num(errors, "experiment.slope_tol", e["slope_tol"], lo=0.0, msg="slope_tol >= 0")
    _num(errors, "experiment.rate_slack", e["rate_slack"], lo=0.0, msg="rate_slack >= 0")
    _num(errors, "experiment.burn_in", e["burn_in"], lo=0, integer=True, msg="burn_in >= 0")
    _choice(errors, "experiment.coupling_variant", e["coupling_variant"], ("printed", "proof"))
    _num(errors, "seed", raw["seed"], lo=0, hi=2**64 - 1, integer=True, msg="seed must be a u64")
    if not isinstance(raw["output"]["dir"], str) or not raw["output"]["dir"]:
        errors.append("output.dir: expected a non-empty string")


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated model, experiment settings and output controls."""

    params: ModelParams
    experiment: ex.ExperimentConfig
    seed: int
    output_dir: str
    raw: dict

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw))

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    def with_overrides(self, seed=None, output_dir=None, threads=None) -> "RunConfig":
        raw = self.to_dict()
        if seed is not None:
            raw["seed"] = int(seed)
        if output_dir is not None:
            raw["output"]["dir"] = str(output_dir)
        cfg = _build(raw)
        if threads is not None:
            cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, threads=threads))
        return cfg


def _build(raw: dict) -> RunConfig:
    m, e = raw["model"], raw["experiment"]
    dim = m["dim"]
    A = np.asarray(m["A"], dtype=float) if isinstance(m["A"], list) else m["A"] * np.eye(dim)
    kern = lambda k: KernelSpec(k["family"], k["bandwidth"], dim)
    params = ModelParams(A, float(m["delta"]), float(m["alpha"]), DriftSpec(**m["drift"]),
                         NoiseSpec(**m["noise"]), kern(m["P"]), kern(m["P_dep"]))
    exp_kw = {k: v for k, v in e.items() if k not in ("init", "init_alt")}
    for k in ("grid", "window", "eps_grid", "monitor_steps", "functions"):
        exp_kw[k] = tuple(exp_kw[k])
    cfg = ex.ExperimentConfig(params, seed=raw["seed"], init=ex.InitSpec(**e["init"]),
                              init_alt=ex.InitSpec(**e["init_alt"]), **exp_kw)
    return RunConfig(params, cfg, raw["seed"], raw["output"]["dir"], raw)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate JSON text; every violated constraint is reported together."""
    try:
        given = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as err:
        lines = text.splitlines()
        line = lines[err.lineno - 1] if 0 < err.lineno <= len(lines) else ""
        raise ConfigError([f"{source}:{err.lineno}:{err.colno}: {err.msg}\n    {line}\n"
                           f"    {' ' * (err.colno - 1)}^"]) from None
    errors: list = []
    raw = _merge(_TOP, given, "", errors)
    if not errors:
        _validate(raw, errors)
    if errors:
        raise ConfigError(errors)
    try:
        return _build(raw)
    except ValueError as err:
        raise ConfigError([str(err)]) from None


def parse_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError([f"{path}: cannot read ({err.strerror})"]) from None
    return parse_config_text(text, str(path))


def canonical_json(cfg: RunConfig) -> str:
    """Fully expanded, key-sorted configuration text; re-parses to an equal RunConfig."""
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# dispatch


_RUNNERS = {
    "simulate": ex.run_simulation,
    "rates": ex.run_convergence_rate,
    "contract": ex.run_contraction,
    "chaos": ex.run_chaos,
    "concentrate": ex.run_concentration,
    "couple": ex.run_coupling_check,
    "moments": ex.run_moment_monitor,
    "cltbound": ex.check_kernel_clt_bound,
}


def _atomic_write_all(files: dict):
    """Write every file to a temporary sibling, then rename them all into place."""
    tmps = []
    try:
        for path, text in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            tmps.append((tmp, path))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for tmp, path in tmps:
            os.replace(tmp, path)
    finally:
        for tmp, _ in tmps:
            if os.path.exists(tmp):
                os.unlink(tmp)


def _dump(obj) -> str:
    return json.dumps(ex._jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _stability_outputs(cfg: RunConfig):
    rep = compute_constants(cfg.params, cfg.experiment.tau)
    d = rep.to_dict()
    lines = ["name,value"] + [f"{k},{ex._fmt(v)}" for k, v in sorted(d.items())]
    manifest = {"experiment": "stability", "verdict": "complete", "report": d,
                "provenance": ex._provenance(cfg.experiment)}
    return "\n".join(lines) + "\n", _dump(manifest), rep.pretty(), EXIT_PASS


def dispatch(command: str, cfg: RunConfig, stream=None) -> int:
    """Run ``command`` and write its outputs; returns the exit status."""
    stream = sys.stdout if stream is None else stream
    if command not in SUBCOMMANDS:
        raise ConfigError([f"unknown subcommand {command!r}"])
    if command == "rates" and len(cfg.experiment.grid) < 3:
        raise ConfigError(["experiment.grid: the rates slope needs at least 3 grid points"])
    out = Path(cfg.output_dir)
    if command == "stability":
        csv_text, json_text, summary, code = _stability_outputs(cfg)
    else:
        res = _RUNNERS[command](cfg.experiment)
        csv_text = res.to_csv()
        man = res.manifest()
        if command == "simulate":
            man["verdict"] = "complete"
            code = EXIT_PASS
        else:
            code = _EXIT[res.verdict]
        json_text = _dump(man)
        summary = f"{command}: {man['verdict']} " + json.dumps(res.verdicts, sort_keys=True)
    _atomic_write_all({out / f"{command}.csv": csv_text, out / f"{command}.json": json_text})
    print(summary, file=stream)
    return code


def _threads(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("MEANFIELD_THREADS")
    if env:
        try:
            v = int(env)
        except ValueError:
            raise ConfigError([f"MEANFIELD_THREADS: expected a positive integer, got {env!r}"]) from None
        if v < 1:
            raise ConfigError([f"MEANFIELD_THREADS: expected a positive integer, got {env!r}"])
        return v
    return os.cpu_count() or 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return v


_HELP = {
    "simulate": "run one particle system and dump trajectories",
    "stability": "compute every constant and hypothesis flag",
    "rates": "W1 convergence rate in N against the limit",
    "contract": "contraction of the limit map from two initial states",
    "chaos": "propagation of chaos across particle counts",
    "concentrate": "tail probabilities of the W1 error",
    "couple": "pathwise check of the i.i.d. coupling inequality",
    "moments": "moment monitor along the particle system",
    "cltbound": "kernel sampling error against the 1/sqrt(N) bound",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file (defaults if omitted)")
    common.add_argument("--seed", type=_u64, metavar="U64", help="override the configured seed")
    common.add_argument("--threads", type=_positive_int, metavar="K",
                        help="worker threads (default: $MEANFIELD_THREADS or all cores)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    p = _Parser(prog="meanfield", description="Mean-field particle system experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=_HELP.get(name))
    sub.add_parser("config", parents=[common], help="print the canonical configuration")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else parse_config_text("{}")
        cfg = cfg.with_overrides(seed=args.seed, output_dir=args.out, threads=_threads(args.threads))
        if args.command == "config":
            sys.stdout.write(canonical_json(cfg))
            return EXIT_PASS
        return dispatch(args.command, cfg)
    except ConfigError as err:
        for line in err.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as err:  # runtime failures map to the error exit code
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
