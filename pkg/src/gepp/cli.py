"""Command-line front end: solve, policy, sweep, simulate, export-lp, verify.

Every command writes its artifacts into ``--out`` plus a ``manifest.json``
that echoes the resolved configuration.  Passing that manifest back through
``--config`` reruns the command and reproduces the CSV files byte for byte.

Exit codes: 0 success, 1 LP verification failed, 2 config error,
3 convergence failure, 4 structural anomaly.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from ._io import atomic_write_text, dumps, fmt, open_sink
from .lp import build_lp, export_lp, verify_solution
from .model import Action, Belief, ModelParams, PAPER_PARAMS, ParamError
from .pipeline import LP_TOL, analyze
from .sim import SimConfig, compare_policies, default_workers, horizon_for, myopic_rule, rollout_policy, \
    truncation_bound, write_comparison_csv
from .solver import (DEFAULT_N, DEFAULT_TOL, ConvergenceError, SingularSystemError, build_grid, query_value,
                     read_values_csv, solve_policy_iteration)
from .structure import ANOMALOUS, DEFAULT_TIE_TOL, extract_policy, square_layout, square_policy

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_ANOMALY = 0, 1, 2, 3, 4

SWEEP_PARAMETERS = ("lambda0", "lambda1", "r_high", "r_low", "beta", "rh_over_rl")
POLICY_NAMES = ("optimal", "balanced", "myopic", "bet1", "bet2")
DEFAULT_SQUARE_M = 101


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMETERS)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")

    def member_params(self, base: ModelParams, value: float) -> ModelParams:
        if self.parameter == "rh_over_rl":
            return base.replace(r_high=value * base.r_low)
        return base.replace(**{self.parameter: value})


@dataclass(frozen=True)
class SimSettings:
    episodes: int = 10_000
    initial_belief: tuple[float, float] = (0.5, 0.5)
    initial_state_sampling: str = "from-belief"
    initial_states: tuple[int, int] | None = None
    horizon: int | None = None
    truncation_error: float | None = None
    chunk_size: int = 8192
    trace_episodes: int = 0
    policies: tuple[str, ...] = ("optimal", "balanced", "myopic")

    def sim_config(self, seed: int, workers: int = 1) -> SimConfig:
        return SimConfig(episodes=self.episodes, seed=seed, initial_belief=Belief(*self.initial_belief),
                         initial_state_sampling=self.initial_state_sampling,
                         initial_states=self.initial_states, horizon=self.horizon,
                         truncation_error=self.truncation_error, chunk_size=self.chunk_size,
                         trace_episodes=self.trace_episodes, workers=workers)


@dataclass(frozen=True)
class RunConfig:
    params: ModelParams = PAPER_PARAMS
    grid_n: int = DEFAULT_N
    tol: float = DEFAULT_TOL
    sweep: SweepSpec | None = None
    output_dir: str = "gepp-out"
    seed: int = 0
    sim: SimSettings | None = None
    square_m: int = DEFAULT_SQUARE_M
    lp_tol: float = LP_TOL
    tie_tol: float = DEFAULT_TIE_TOL

    def as_dict(self) -> dict:
        d = {"params": self.params.as_dict(), "grid_n": self.grid_n, "tol": self.tol,
             "output_dir": self.output_dir, "seed": self.seed, "square_m": self.square_m,
             "lp_tol": self.lp_tol, "tie_tol": self.tie_tol, "sweep": None, "sim": None}
        if self.sweep is not None:
            d["sweep"] = {"parameter": self.sweep.parameter, "values": list(self.sweep.values)}
        if self.sim is not None:
            s = self.sim
            d["sim"] = {"episodes": s.episodes, "initial_belief": list(s.initial_belief),
                        "initial_state_sampling": s.initial_state_sampling,
                        "initial_states": None if s.initial_states is None else list(s.initial_states),
                        "horizon": s.horizon, "truncation_error": s.truncation_error,
                        "chunk_size": s.chunk_size, "trace_episodes": s.trace_episodes,
                        "policies": list(s.policies)}
        return d


_TOP_KEYS = {"params", "grid_n", "tol", "sweep", "output_dir", "seed", "sim", "square_m", "lp_tol", "tie_tol"}
_SIM_KEYS = {"episodes", "initial_belief", "initial_state_sampling", "initial_states", "horizon",
             "truncation_error", "chunk_size", "trace_episodes", "policies"}


def _pos_int(raw, name: str, minimum: int = 1) -> int:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw or raw < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}")
    return int(raw)


def _pos_real(raw, name: str) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not (raw > 0 and math.isfinite(raw)):
        raise ConfigError(f"{name} must be a positive real")
    return float(raw)


def _parse_sim(raw: dict) -> SimSettings:
    if not isinstance(raw, dict):
        raise ConfigError("sim must be an object")
    unknown = set(raw) - _SIM_KEYS
    if unknown:
        raise ConfigError(f"unknown sim key(s): {', '.join(sorted(unknown))}")
    s = SimSettings()
    kw = {}
    if "episodes" in raw:
        kw["episodes"] = _pos_int(raw["episodes"], "sim.episodes")
    if "initial_belief" in raw:
        b = raw["initial_belief"]
        if not (isinstance(b, (list, tuple)) and len(b) == 2):
            raise ConfigError("sim.initial_belief must be [p1, p2]")
        try:
            Belief(float(b[0]), float(b[1]))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"sim.initial_belief: {e}") from e
        kw["initial_belief"] = (float(b[0]), float(b[1]))
    if raw.get("initial_state_sampling") is not None:
        kw["initial_state_sampling"] = str(raw["initial_state_sampling"])
    if raw.get("initial_states") is not None:
        st = raw["initial_states"]
        if not (isinstance(st, (list, tuple)) and len(st) == 2 and all(x in (0, 1) for x in st)):
            raise ConfigError("sim.initial_states must be a pair of 0/1")
        kw["initial_states"] = (int(st[0]), int(st[1]))
    if raw.get("horizon") is not None:
        kw["horizon"] = _pos_int(raw["horizon"], "sim.horizon")
    if raw.get("truncation_error") is not None:
        kw["truncation_error"] = _pos_real(raw["truncation_error"], "sim.truncation_error")
    if "chunk_size" in raw:
        kw["chunk_size"] = _pos_int(raw["chunk_size"], "sim.chunk_size")
    if "trace_episodes" in raw:
        kw["trace_episodes"] = _pos_int(raw["trace_episodes"], "sim.trace_episodes", 0)
    if "policies" in raw:
        pol = tuple(raw["policies"])
        bad = [p for p in pol if p not in POLICY_NAMES]
        if bad or len(pol) < 2 or len(set(pol)) != len(pol):
            raise ConfigError(f"sim.policies must be >= 2 distinct names from {', '.join(POLICY_NAMES)}")
        kw["policies"] = pol
    s = replace(s, **kw)
    try:
        s.sim_config(0)
    except ValueError as e:
        raise ConfigError(f"sim: {e}") from e
    return s


def parse_config(raw: dict) -> RunConfig:
    """Build a RunConfig from a config dict or from a manifest written by a previous run."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "config" in raw and "command" in raw:  # a manifest
        raw = raw["config"]
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kw = {}
    if "params" in raw:
        p = raw["params"]
        if not isinstance(p, dict):
            raise ConfigError("params must be an object")
        merged = PAPER_PARAMS.as_dict()
        merged.update(p)
        try:
            kw["params"] = ModelParams.from_dict(merged)
        except (ParamError, TypeError) as e:
            raise ConfigError(f"params: {e}") from e
    if "grid_n" in raw:
        kw["grid_n"] = _pos_int(raw["grid_n"], "grid_n", 2)
    for key in ("tol", "lp_tol", "tie_tol"):
        if key in raw:
            kw[key] = _pos_real(raw[key], key)
    if "square_m" in raw:
        kw["square_m"] = _pos_int(raw["square_m"], "square_m", 2)
    if "seed" in raw:
        kw["seed"] = _pos_int(raw["seed"], "seed", 0)
    if raw.get("output_dir") is not None:
        kw["output_dir"] = str(raw["output_dir"])
    if raw.get("sweep") is not None:
        sw = raw["sweep"]
        if not isinstance(sw, dict) or "parameter" not in sw or "values" not in sw:
            raise ConfigError("sweep must be {parameter, values}")
        try:
            vals = tuple(float(v) for v in sw["values"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"sweep values: {e}") from e
        kw["sweep"] = SweepSpec(str(sw["parameter"]), vals)
    if raw.get("sim") is not None:
        kw["sim"] = _parse_sim(raw["sim"])
    return RunConfig(**kw)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    return parse_config(raw)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    raw = cfg.as_dict()
    if args.grid_n is not None:
        raw["grid_n"] = args.grid_n
    if args.tol is not None:
        raw["tol"] = args.tol
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    for item in args.param or []:
        name, sep, value = item.partition("=")
        if not sep or name not in ("lambda0", "lambda1", "r_low", "r_high", "beta"):
            raise ConfigError(f"bad --param {item!r}; expected NAME=VALUE")
        try:
            raw["params"][name] = float(value)
        except ValueError as e:
            raise ConfigError(f"bad --param {item!r}") from e
    return parse_config(raw)


# -- manifest ---------------------------------------------------------------

def _versions() -> dict:
    try:
        own = metadata.version("gepp")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"gepp": own, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs: list[str], extra: dict | None = None) -> Path:
    man = {
        "command": command,
        "config": cfg.as_dict(),
        "versions": _versions(),
        "seeds": {"seed": cfg.seed},
        "tolerances": {"tol": cfg.tol, "lp_tol": cfg.lp_tol, "tie_tol": cfg.tie_tol},
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
    }
    if extra:
        man.update(extra)
    path = out / "manifest.json"
    atomic_write_text(path, dumps(man))
    return path


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, dumps(obj))


# -- commands ----------------------------------------------------------------

def cmd_solve(cfg: RunConfig, out: Path) -> int:
    a = analyze(cfg.params, cfg.grid_n, cfg.tol, cfg.lp_tol, cfg.tie_tol)
    a.pi.write_csv(out / "values.csv")
    sq = square_policy(a.pi, cfg.square_m, cfg.tie_tol)
    sq.write_value_csv(out / "surface.csv")
    summary = {
        "params": cfg.params.as_dict(),
        "grid_n": cfg.grid_n,
        "n_states": a.grid.n_states,
        "residual": {"value_iteration": a.vi.residual, "policy_iteration": a.pi.residual},
        "iterations": {"value_iteration": a.vi.iterations, "policy_iteration": a.pi.iterations},
        "solver_agreement": a.solver_gap,
        "solver_agreement_ok": a.solver_gap <= 2 * cfg.tol,
        "lp_verdict": a.lp_report.verdict,
        "lp": a.lp_report.as_dict(),
        "cell_bound": a.pi.cell_bound(),
    }
    _write_json(out / "summary.json", summary)
    write_manifest(out, "solve", cfg, ["values.csv", "surface.csv", "summary.json"])
    return EXIT_OK


def _policy_exit(a) -> int:
    if a.thresholds.structure == ANOMALOUS or not a.structure.passed:
        return EXIT_ANOMALY
    return EXIT_OK


def cmd_policy(cfg: RunConfig, out: Path) -> int:
    a = analyze(cfg.params, cfg.grid_n, cfg.tol, cfg.lp_tol, cfg.tie_tol)
    a.policy.write_csv(out / "policy.csv")
    sq = square_policy(a.pi, cfg.square_m, cfg.tie_tol)
    sq.write_csv(out / "policy_square.csv")
    report = a.summary()
    report["square_layout"] = square_layout(sq)
    _write_json(out / "thresholds.json", report)
    write_manifest(out, "policy", cfg, ["policy.csv", "policy_square.csv", "thresholds.json"])
    return _policy_exit(a)


SWEEP_COLUMNS = ["member", "parameter", "value", "lambda0", "lambda1", "r_low", "r_high", "beta", "structure",
                 "threshold", "scan", "refined", "normalized", "closed_form", "cf_case", "status"]


def _sweep_member(job) -> dict:
    """Solve one sweep member, write its JSON atomically and return its rows."""
    idx, value, cfg, member_path = job
    sw = cfg.sweep
    base = {"member": idx, "parameter": sw.parameter, "value": value}
    try:
        params = sw.member_params(cfg.params, value)
    except ParamError as e:
        rec = {**base, "status": "failed:config", "error": str(e)}
        _write_json(member_path, rec)
        return rec
    try:
        a = analyze(params, cfg.grid_n, cfg.tol, cfg.lp_tol, cfg.tie_tol)
    except (ConvergenceError, SingularSystemError) as e:
        rec = {**base, "params": params.as_dict(), "status": "failed:convergence", "error": str(e)}
        _write_json(member_path, rec)
        return rec
    status = "ok"
    if a.thresholds.structure == ANOMALOUS:
        status = "anomalous"
    elif not a.structure.passed:
        status = "structure-check-failed"
    rec = {**base, "params": params.as_dict(), "status": status, "summary": a.summary()}
    _write_json(member_path, rec)
    return rec


def _sweep_rows(rec: dict) -> list[list[str]]:
    p = rec.get("params") or {}
    head = [str(rec["member"]), rec["parameter"], fmt(rec["value"])]
    head += [fmt(p[k]) if k in p else "nan" for k in ("lambda0", "lambda1", "r_low", "r_high", "beta")]
    rows = []
    s = rec.get("summary")
    for name, key in (("rho1", "rho1"), ("rho2", "rho2")):
        if s is None:
            rows.append(head + ["none", name, "nan", "nan", "nan", "nan", "0", rec["status"]])
            continue
        thr, cf = s["thresholds"], s["closed_form"]
        rows.append(head + [thr["structure"], name, fmt(thr[f"{key}_scan"]), fmt(thr[f"{key}_refined"]),
                            fmt(s["normalized"][key]), fmt(cf[f"{key}_cf"]), str(cf[f"{key}_case"]),
                            rec["status"]])
    return rows


def run_sweep(cfg: RunConfig, out: Path, workers: int = 1) -> list[dict]:
    if cfg.sweep is None:
        raise ConfigError("sweep command needs a 'sweep' section in the config")
    mdir = out / "members"
    jobs = [(i, v, cfg, mdir / f"member_{i:03d}.json") for i, v in enumerate(cfg.sweep.values)]
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        return [_sweep_member(j) for j in jobs]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(_sweep_member, jobs))


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    recs = run_sweep(cfg, out, default_workers())
    with open_sink(out / "sweep.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for rec in recs:
            w.writerows(_sweep_rows(rec))
    names = ["sweep.csv"] + [f"members/member_{r['member']:03d}.json" for r in recs]
    statuses = {str(r["member"]): r["status"] for r in recs}
    write_manifest(out, "sweep", cfg, names, {"member_status": statuses})
    if any(r["status"].startswith("failed:convergence") for r in recs):
        return EXIT_CONVERGENCE
    if any(r["status"] in ("anomalous", "structure-check-failed") for r in recs):
        return EXIT_ANOMALY
    if any(r["status"].startswith("failed") for r in recs):
        return EXIT_CONFIG
    return EXIT_OK


def _policy_sources(names, params: ModelParams, optimal_policy):
    table = {"optimal": lambda: optimal_policy, "balanced": lambda: Action.BALANCED,
             "myopic": lambda: myopic_rule(params), "bet1": lambda: Action.BET1, "bet2": lambda: Action.BET2}
    return {n: table[n]() for n in names}


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    settings = cfg.sim or SimSettings()
    sc = settings.sim_config(cfg.seed, default_workers())
    grid = build_grid(cfg.params, cfg.grid_n)
    values = solve_policy_iteration(grid, cfg.tol)
    policy = extract_policy(values, cfg.tie_tol)
    sources = _policy_sources(settings.policies, cfg.params, policy)
    rows = compare_policies(sources, sc, cfg.params)
    horizon = sc.horizon if sc.horizon is not None else horizon_for(cfg.params, sc.truncation_error)
    v0, av = query_value(sc.initial_belief, values)
    write_comparison_csv(rows, out / "comparison.csv")
    outputs = ["comparison.csv", "simulate.json"]
    if settings.trace_episodes > 0:
        first = settings.policies[0]
        rollout_policy(sources[first], sc, cfg.params).write_trace_csv(out / "trace.csv")
        outputs.append("trace.csv")
    result = {
        "seed": cfg.seed,
        "episodes": sc.episodes,
        "horizon": horizon,
        "truncation_bound": truncation_bound(cfg.params, horizon),
        "initial_belief": [sc.initial_belief.p1, sc.initial_belief.p2],
        "reference_policy": settings.policies[0],
        "solver_value_at_initial_belief": v0,
        "solver_action_values": {a.short: av[a] for a in Action},
        "cell_bound": values.cell_bound(),
        "rows": [r.as_dict() for r in rows],
    }
    _write_json(out / "simulate.json", result)
    write_manifest(out, "simulate", cfg, outputs)
    return EXIT_OK


def cmd_export_lp(cfg: RunConfig, out: Path) -> int:
    inst = build_lp(build_grid(cfg.params, cfg.grid_n))
    export_lp(inst, out / "model.lp")
    write_manifest(out, "export-lp", cfg, ["model.lp"],
                   {"lp": {"n_variables": inst.n_variables, "n_constraints": inst.n_constraints}})
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path, values_path: str | None = None) -> int:
    grid = build_grid(cfg.params, cfg.grid_n)
    if values_path is not None:
        try:
            values = read_values_csv(grid, values_path, cfg.tol)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot use values file: {e}") from e
    else:
        values = solve_policy_iteration(grid, cfg.tol)
    rep = verify_solution(build_lp(grid), values, cfg.lp_tol)
    _write_json(out / "verify.json", {**rep.as_dict(), "tol": cfg.lp_tol, "source": values.solver,
                                      "residual": values.residual})
    write_manifest(out, "verify", cfg, ["verify.json"])
    return EXIT_OK if rep.passed else EXIT_VERIFY


COMMANDS = {"solve": cmd_solve, "policy": cmd_policy, "sweep": cmd_sweep, "simulate": cmd_simulate,
            "export-lp": cmd_export_lp, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gepp", description="Two-channel Gilbert-Elliott power allocation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config (or a manifest from a previous run)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--grid-n", type=int, help="cells per border edge")
        p.add_argument("--tol", type=float, help="solver tolerance")
        p.add_argument("--seed", type=int, help="simulation seed")
        p.add_argument("--param", action="append", metavar="NAME=VALUE",
                       help="override a model parameter (repeatable)")
        if name == "verify":
            p.add_argument("--values", help="value CSV written by 'gepp solve'")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "verify":
            code = cmd_verify(cfg, out, args.values)
        else:
            code = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"gepp: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, SingularSystemError) as e:
        print(f"gepp: convergence failure: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    if code == EXIT_ANOMALY:
        print("gepp: structural anomaly detected", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
