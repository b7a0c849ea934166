"""Command-line front end.

Usage::

    mvdlmc solve-control --config configs/rare_event_k2.ini --out results/
    mvdlmc estimate --config configs/rare_event_k2.ini --seed 7
    mvdlmc adaptive --config configs/rare_event_k2.ini --workers 2
    mvdlmc verify-assumptions --config configs/assumptions_cos.ini
    mvdlmc table1 --config configs/table1.ini

Configuration is an INI file with one section per concern (``run``,
``model``, ``observable``, ``grid``, ``control``, ``estimate``, ``adaptive``,
``study``, ``table1``); every key has a default.  A result JSON written by
this tool can be passed back as ``--config`` to repeat the run.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 tolerance not met within the level cap.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from mvdlmc.control import (
    ControlField,
    ControlRefused,
    Grid1D,
    KBESolverError,
    load_control,
    model_hash,
    save_control,
    solve_offline_control,
)
from mvdlmc.dlmc import (
    OuterLoopError,
    PilotSizes,
    ToleranceBudget,
    ToleranceNotMet,
    adaptive_dlmc,
    dlmc_estimate,
    difference_study,
    fit_slope,
    variance_study,
)
from mvdlmc.model import ModelError, build_model, build_observable
from mvdlmc.particles import NonFiniteStateError
from mvdlmc.rng import RandomStreams

log = logging.getLogger("mvdlmc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 2, 3, 4

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "12345", "workers": "1", "out": "results", "use_is": "true"},
    "model": {"name": "kuramoto"},
    "observable": {"name": "indicator", "K": "2.0"},
    "grid": {"x_bound": "4.0", "dx": "0.01", "ratio": "0.2", "scheme_weight": "0.5", "damping_steps": "2",
             "cap": "20.0"},
    "control": {"P_bar": "1000", "N_bar": "100", "artifact": "control.npz"},
    "estimate": {"P": "200", "N1": "32", "N2": "32", "M1": "100", "M2": "100", "M2_values": ""},
    "adaptive": {"p0": "5", "n0": "4", "tau": "2", "tol_r": "0.2", "theta": "0.5", "c_alpha": "1.96",
                 "max_level": "12", "rough_m1": "1000", "rough_m2": "100", "var_m1": "50", "var_m2": "1000",
                 "bias_m1_min": "100", "bias_m2_min": "50", "repetitions": "1"},
    "study": {"kinds": "P,N1,N2,N", "P_values": "5,10,20,40,80", "N_values": "4,8,16,32", "P": "80", "N1": "64",
              "N2": "64", "M1": "100", "M2": "1000", "variance_P_values": "16,32,64,128", "variance_N": "32",
              "variance_M1": "100", "variance_M2": "1000"},
    "table1": {"K_values": "1,1.5,2", "tol_values": "0.2,0.1,0.05", "with_is": "true,false"},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


class RunConfig:
    """Parsed configuration: ``sections[section][key]`` holds raw strings."""

    def __init__(self, sections: dict[str, dict[str, str]]):
        self.sections = {name: dict(values) for name, values in DEFAULTS.items()}
        for name, values in sections.items():
            if name not in self.sections:
                raise ConfigError(f"unknown config section [{name}]")
            # the model and observable sections take free-form registry parameters
            if name in ("model", "observable") and values.get("name", self.sections[name]["name"]) != \
                    self.sections[name]["name"]:
                self.sections[name] = {"name": values["name"]}
            for key, val in values.items():
                if name not in ("model", "observable") and key not in DEFAULTS[name]:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                self.sections[name][key] = str(val)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        if path.suffix == ".json":
            try:
                return cls(json.loads(path.read_text())["config"])
            except (KeyError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path} has no embedded config: {exc}") from None
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        return cls({s: dict(parser[s]) for s in parser.sections()})

    def to_dict(self) -> dict:
        return {name: dict(values) for name, values in self.sections.items()}

    def get(self, section: str, key: str, kind=str):
        raw = self.sections[section][key]
        try:
            if kind is bool:
                low = raw.strip().lower()
                if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                    raise ValueError(raw)
                return low in ("true", "yes", "1", "on")
            return kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None

    def get_list(self, section: str, key: str, kind=float) -> list:
        raw = self.sections[section][key].strip()
        if not raw:
            return []
        try:
            return [kind(tok.strip()) for tok in raw.split(",")]
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a list of {kind.__name__}") from None

    def set(self, section: str, key: str, value) -> None:
        self.sections[section][key] = str(value)

    def _registry_params(self, section: str) -> dict:
        return {k: v for k, v in self.sections[section].items() if k != "name"}

    def build_model(self):
        try:
            return build_model(self.sections["model"]["name"], **self._registry_params("model"))
        except (ModelError, TypeError, ValueError) as exc:
            raise ConfigError(f"[model]: {exc}") from None

    def build_observable(self):
        try:
            return build_observable(self.sections["observable"]["name"], **self._registry_params("observable"))
        except (ModelError, TypeError, ValueError) as exc:
            raise ConfigError(f"[observable]: {exc}") from None

    def model_hash(self) -> str:
        return model_hash({"model": self.sections["model"], "observable": self.sections["observable"]})

    def build_grid(self, T: float) -> Grid1D:
        try:
            return Grid1D.from_spacing(self.get("grid", "x_bound", float), self.get("grid", "dx", float), T,
                                       self.get("grid", "ratio", float), self.get("grid", "scheme_weight", float))
        except ValueError as exc:
            raise ConfigError(f"[grid]: {exc}") from None

    def budget(self) -> ToleranceBudget:
        try:
            return ToleranceBudget(self.get("adaptive", "tol_r", float), self.get("adaptive", "theta", float),
                                   self.get("adaptive", "c_alpha", float))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[adaptive]: {exc}") from None

    def pilots(self) -> PilotSizes:
        return PilotSizes(*(self.get("adaptive", k, int) for k in
                            ("rough_m1", "rough_m2", "var_m1", "var_m2", "bias_m1_min", "bias_m2_min")))

    @property
    def seed(self) -> int:
        seed = self.get("run", "seed", int)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit value, got {seed}")
        return seed

    @property
    def workers(self) -> int:
        return max(1, self.get("run", "workers", int))

    @property
    def out_dir(self) -> Path:
        return Path(self.sections["run"]["out"])


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def _solve_control(cfg: RunConfig, model, observable):
    grid = cfg.build_grid(model.terminal_time)
    streams = RandomStreams(cfg.seed).child("offline-control")
    return solve_offline_control(model, observable, grid, cfg.get("control", "P_bar", int),
                                 cfg.get("control", "N_bar", int), streams, cap=cfg.get("grid", "cap", float),
                                 damping_steps=cfg.get("grid", "damping_steps", int))


def _artifact_path(cfg: RunConfig) -> Path:
    p = Path(cfg.sections["control"]["artifact"])
    return p if p.is_absolute() else cfg.out_dir / p


def cmd_solve_control(cfg: RunConfig) -> int:
    model, observable = cfg.build_model(), cfg.build_observable()
    control, value, law = _solve_control(cfg, model, observable)
    path = _artifact_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_control(path, control, value, {"model_hash": cfg.model_hash(), "config": cfg.to_dict()})
    zmax = float(np.max(np.abs(control.values)))
    print(f"control written to {path}: grid {control.grid.n_time + 1} x {control.grid.n_space + 1}, "
          f"max |zeta| = {zmax:.4g}, v(0, 0) ~ {float(np.interp(0.0, control.grid.x, value.values[0])):.4g}")
    return EXIT_OK


def _control_for(cfg: RunConfig, model, observable, use_is: bool | None = None) -> ControlField | None:
    """Load the configured artifact, or solve and store it if it is missing."""
    if use_is is None:
        use_is = cfg.get("run", "use_is", bool)
    if not use_is:
        return None
    path = _artifact_path(cfg)
    if path.exists():
        try:
            return load_control(path, cfg.model_hash())
        except ValueError as exc:
            raise ConfigError(f"control artifact {path}: {exc}") from None
    control, value, _ = _solve_control(cfg, model, observable)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_control(path, control, value, {"model_hash": cfg.model_hash(), "config": cfg.to_dict()})
    log.info("solved and stored control at %s", path)
    return control


def cmd_estimate(cfg: RunConfig) -> int:
    model, observable = cfg.build_model(), cfg.build_observable()
    control = _control_for(cfg, model, observable)
    g = lambda k: cfg.get("estimate", k, int)  # noqa: E731
    streams = RandomStreams(cfg.seed).child("estimate")
    sweep = cfg.get_list("estimate", "M2_values", int)
    if sweep:
        rows = []
        for i, m2 in enumerate(sweep):
            r = dlmc_estimate(model, observable, control, g("P"), g("N1"), g("N2"), g("M1"), m2,
                              streams.child("sweep", i), cfg.workers)
            sq_cv = r.v2 / r.estimate ** 2 if r.estimate else float("nan")
            rows.append([m2, repr(r.estimate), repr(r.std_error), repr(r.v1), repr(r.v2), repr(sq_cv),
                         repr(r.work_units)])
            print(f"M2={m2}: estimate {r.estimate:.6g} +- {r.std_error:.3g}, squared CV {sq_cv:.4g}")
        write_csv(cfg.out_dir / "estimate_sweep.csv",
                  ["M2", "estimate", "std_error", "v1", "v2", "squared_cv", "work_units"], rows)
        return EXIT_OK
    r = dlmc_estimate(model, observable, control, g("P"), g("N1"), g("N2"), g("M1"), g("M2"), streams, cfg.workers)
    write_json(cfg.out_dir / "estimate.json", {"result": r.to_dict(), "config": cfg.to_dict()})
    print(f"estimate {r.estimate:.6g} +- {r.std_error:.3g} (M1={r.m1}, M2={r.m2}, work {r.work_units:.4g})")
    return EXIT_OK


def _adaptive_once(cfg, model, observable, control, streams, trace_fh):
    a = lambda k: cfg.get("adaptive", k, int)  # noqa: E731

    def trace(record):
        trace_fh.write(json.dumps(_clean(record)) + "\n")
        trace_fh.flush()

    return adaptive_dlmc(model, observable, control, a("p0"), a("n0"), cfg.budget(), cfg.pilots(), streams,
                         tau=a("tau"), max_level=a("max_level"), trace=trace, workers=cfg.workers)


def cmd_adaptive(cfg: RunConfig) -> int:
    model, observable = cfg.build_model(), cfg.build_observable()
    control = _control_for(cfg, model, observable)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    reps = max(1, cfg.get("adaptive", "repetitions", int))
    results = []
    with open(cfg.out_dir / "adaptive_trace.jsonl", "w") as fh:
        for rep in range(reps):
            try:
                r = _adaptive_once(cfg, model, observable, control, RandomStreams(cfg.seed).child("adaptive", rep),
                                   fh)
            except ToleranceNotMet as exc:
                write_json(cfg.out_dir / "adaptive.json", {"error": str(exc), "trace": exc.trace,
                                                           "results": [x.to_dict() for x in results],
                                                           "config": cfg.to_dict()})
                print(f"tolerance not met: {exc}", file=sys.stderr)
                return EXIT_TOLERANCE
            results.append(r)
            print(f"repetition {rep}: estimate {r.estimate:.6g} at level {r.level} (P={r.P}, N={r.N1}, "
                  f"M1={r.m1}, M2={r.m2}, bias {r.bias_estimate:.3g}, work {r.work_units:.4g})")
    payload = {"result": results[0].to_dict(), "config": cfg.to_dict()}
    if reps > 1:
        payload["results"] = [r.to_dict() for r in results]
    write_json(cfg.out_dir / "adaptive.json", payload)
    return EXIT_OK


def cmd_verify_assumptions(cfg: RunConfig) -> int:
    model, observable = cfg.build_model(), cfg.build_observable()
    control = _control_for(cfg, model, observable) if cfg.get("run", "use_is", bool) and \
        observable.sign_constant else None
    s = lambda k: cfg.get("study", k, int)  # noqa: E731
    streams = RandomStreams(cfg.seed).child("verify")
    rows, slopes = [], []
    for i, kind in enumerate(k.strip() for k in cfg.sections["study"]["kinds"].split(",") if k.strip()):
        if kind not in ("P", "N1", "N2", "N"):
            raise ConfigError(f"[study] unknown kind {kind!r}")
        values = cfg.get_list("study", "P_values" if kind == "P" else "N_values", int)
        study = difference_study(model, observable, control, kind, values, s("M1"), s("M2"), s("P"), s("N1"),
                                 s("N2"), streams.child("difference", i), cfg.workers)
        rows += [[r.study, r.parameter, repr(r.estimate), repr(r.std_error)] for r in study]
        slope = fit_slope([r.parameter for r in study], [r.estimate for r in study])
        slopes.append([f"bias_vs_{kind}", repr(slope)])
        print(f"bias vs {kind}: slope {slope:.3f}")
    pv = cfg.get_list("study", "variance_P_values", int)
    if pv:
        vs = variance_study(model, observable, control, pv, s("variance_N"), s("variance_M1"), s("variance_M2"),
                            streams.child("variance"), cfg.workers)
        rows += [["V1", p, repr(v.v1), ""] for p, v in vs] + [["V2", p, repr(v.v2), ""] for p, v in vs]
        for name, vals in (("V1", [v.v1 for _, v in vs]), ("V2", [v.v2 for _, v in vs])):
            slope = fit_slope(pv, vals)
            slopes.append([f"{name}_vs_P", repr(slope)])
            print(f"{name} vs P: slope {slope:.3f}")
    write_csv(cfg.out_dir / "assumptions.csv", ["study", "parameter", "estimate", "std_error"], rows)
    write_csv(cfg.out_dir / "assumptions_slopes.csv", ["quantity", "slope"], slopes)
    return EXIT_OK


def cmd_table1(cfg: RunConfig) -> int:
    ks = cfg.get_list("table1", "K_values", float)
    tols = cfg.get_list("table1", "tol_values", float)
    modes = [tok.strip().lower() in ("true", "1", "yes") for tok in cfg.sections["table1"]["with_is"].split(",")]
    rows = []
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    with open(cfg.out_dir / "table1_trace.jsonl", "w") as fh:
        for ik, K in enumerate(ks):
            sub = RunConfig(cfg.to_dict())
            sub.set("observable", "K", K)
            sub.set("control", "artifact", f"control_K{K:g}.npz")
            model, observable = sub.build_model(), sub.build_observable()
            for use_is in modes:
                control = _control_for(sub, model, observable, use_is)
                for it, tol in enumerate(tols):
                    sub.set("adaptive", "tol_r", tol)
                    streams = RandomStreams(cfg.seed).child("table1", ik, it, int(use_is))
                    try:
                        r = _adaptive_once(sub, model, observable, control, streams, fh)
                    except ToleranceNotMet as exc:
                        print(f"K={K:g} tol={tol:g} IS={use_is}: {exc}", file=sys.stderr)
                        status = EXIT_TOLERANCE
                        continue
                    rows.append([K, tol, use_is, repr(r.estimate), r.level, r.P, r.N1, r.m1, r.m2,
                                 repr(r.bias_estimate), repr(r.work_units), repr(r.wall_time)])
                    print(f"K={K:g} tol={tol:g} IS={use_is}: estimate {r.estimate:.4g}, M1={r.m1}, M2={r.m2}, "
                          f"level {r.level}, work {r.work_units:.4g}")
    write_csv(cfg.out_dir / "table1.csv", ["K", "tol_r", "importance_sampling", "estimate", "level", "P", "N",
                                           "M1", "M2", "bias_estimate", "work_units", "wall_time"], rows)
    return status


COMMANDS = {
    "solve-control": cmd_solve_control,
    "estimate": cmd_estimate,
    "adaptive": cmd_adaptive,
    "verify-assumptions": cmd_verify_assumptions,
    "table1": cmd_table1,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvdlmc", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI file, or a result JSON with an embedded config")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--workers", type=int, help="worker threads for the outer loop")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--no-is", action="store_true", help="disable importance sampling (zero control)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig({})
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.workers is not None:
            cfg.set("run", "workers", args.workers)
        if args.out is not None:
            cfg.set("run", "out", args.out)
        if args.no_is:
            cfg.set("run", "use_is", "false")
        cfg.seed  # validate early
        return COMMANDS[args.command](cfg)
    except (ConfigError, ControlRefused) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteStateError, OuterLoopError, KBESolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
