"""Command-line front end.

Subcommands ``simulate``, ``fit``, ``profile`` and ``mc`` read a JSON model
file and CSV observations and write CSV or JSON. Exit codes: 0 success,
2 invalid input (schema, model or role diagnostics), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import traceback
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from .errors import ExprSyntaxError, ModelError, OdesepError, RoleError
from .fitpipe import (ESTIMATE, SEPARATE, FitConfig, FitFailure, FitResult, ObservationSet, fit,
                      fit_sets, mc_summary)
from .hooks import gaussian_nll
from .model import OdeModel, validate_roles
from .nlopt import OptimConfig
from .odesolve import ExternalInput, solve_ode
from .profileci import confint, profile
from .rng import Xoshiro256

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
_ROLE_ALIASES = {"nonlinear": "non-linear"}
_PKG_DIR = os.path.dirname(os.path.abspath(__file__))


class UsageError(Exception):
    """Invalid input files or arguments (exit code 2)."""


def load_schema(name: str) -> dict:
    return json.loads(resources.files("odesep").joinpath("schemas", f"{name}.schema.json").read_text())


def _validate(doc, name):
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(root)"
        raise UsageError(f"{name} file invalid at {where}: {exc.message}") from None


# ---------------------------------------------------------------- model files


@dataclass
class ModelSpec:
    """A parsed model file."""

    model: OdeModel
    doc: dict
    inputs: tuple
    obs_inputs: dict

    @property
    def options(self) -> dict:
        return self.doc.get("options", {})

    @property
    def params(self) -> dict:
        return self.doc.get("parameters", {})

    def x0(self) -> dict:
        return dict(self.doc.get("x0", {}))

    def values(self) -> dict:
        """Parameter values for simulation: ``value``, then ``fixed_value``, then ``start``."""
        out = {}
        for name, p in self.params.items():
            for key in ("value", "fixed_value", "start"):
                if key in p:
                    out[name] = float(p[key])
                    break
        return out

    def optimizer(self) -> OptimConfig:
        opt = self.options.get("optimizer", "bfgs")
        if isinstance(opt, str):
            return OptimConfig(method=opt)
        return OptimConfig(**opt)

    def fit_config(self) -> FitConfig:
        o = self.options
        start = {n: float(p["start"]) for n, p in self.params.items() if "start" in p}
        lower = {n: float(p["lower"]) for n, p in self.params.items() if "lower" in p}
        upper = {n: float(p["upper"]) for n, p in self.params.items() if "upper" in p}
        calc_nll = None
        lik = o.get("likelihood")
        if lik is not None:
            s = lik["sigma"]
            calc_nll = gaussian_nll(sigma_name=s) if isinstance(s, str) else gaussian_nll(float(s))
        kw = {}
        if "im_method" in o:
            kw["im_method"] = o["im_method"]
        return FitConfig(
            x0=self.x0(), start=start, lower=lower, upper=upper,
            decouple=bool(o.get("decouple", False)), smoothing=o.get("smoothing", "gcv-spline"),
            nls_optim=self.optimizer(), run_nls=bool(o.get("run_nls", True)),
            calc_nll=calc_nll, inputs=self.inputs, **kw,
        )


def load_model(path: str) -> ModelSpec:
    """Read, schema-check and build a model; role diagnostics raise :class:`RoleError`."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read model file {path}: {exc}") from None
    _validate(doc, "model")
    eqs = doc["equations"]
    variables = doc.get("variables", list(eqs))
    if sorted(variables) != sorted(eqs):
        raise UsageError("'variables' must list exactly the keys of 'equations'")
    eqs = {v: eqs[v] for v in variables}
    params = doc.get("parameters", {})
    roles = {n: _ROLE_ALIASES.get(p.get("role"), p.get("role")) for n, p in params.items()}
    fixed = {}
    for n, p in params.items():
        if roles[n] == "fixed" or (roles[n] is None and "fixed_value" in p):
            if "fixed_value" not in p:
                raise UsageError(f"fixed parameter {n} needs 'fixed_value'")
            fixed[n] = float(p["fixed_value"])
    nonlinear = [n for n, r in roles.items() if r == "non-linear"]
    likelihood = [n for n, r in roles.items() if r == "likelihood"]
    ext = doc.get("external_inputs", {})
    inputs, obs_inputs = [], {}
    for name, spec in ext.items():
        if "expr" in spec:
            inputs.append(ExternalInput.closed_form(name, spec["expr"]))
        elif "times" in spec or "values" in spec:
            inputs.append(ExternalInput.tabulated(name, spec.get("times", []), spec.get("values", []),
                                                  spec.get("mode", "linear")))
        else:
            obs_inputs[name] = spec.get("mode", "linear")
    auto = OdeModel.build(eqs, nonlinear=nonlinear, likelihood=likelihood, fixed=fixed, inputs=list(ext))
    stray = [n for n in params if n not in auto.parameters]
    if stray:
        raise UsageError(f"parameters not used by any equation: {stray}")
    order = [n for n in params] + [n for n in auto.parameters if n not in params]
    model = OdeModel.build(eqs, parameters=order, nonlinear=nonlinear, likelihood=likelihood,
                           fixed=fixed, inputs=list(ext))
    bad_x0 = [v for v in doc.get("x0", {}) if v not in model.variables]
    if bad_x0:
        raise UsageError(f"x0 given for unknown variables: {bad_x0}")
    diags = validate_roles(model)
    if diags:
        raise RoleError(diags)
    return ModelSpec(model, doc, tuple(inputs), obs_inputs)


# ---------------------------------------------------------------- observation files


def read_obs(path: str, spec: ModelSpec) -> list:
    """Parse an observation CSV into one :class:`ObservationSet` per set.

    Empty cells are missing observations; columns named after external
    inputs become tabulated inputs of their set.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read observation file {path}: {exc}") from None
    rows = [r for r in rows if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise UsageError(f"observation file {path} has no data rows")
    header = [h.strip() for h in rows[0]]
    has_set = header[0] == "set"
    cols = header[1:] if has_set else header
    if not cols or cols[0] != "time":
        raise UsageError("observation header must be [set,] time, <columns...>")
    names = cols[1:]
    known = set(spec.model.variables) | set(spec.obs_inputs)
    unknown = [n for n in names if n not in known]
    if unknown or not names or len(set(names)) != len(names):
        raise UsageError(f"observation columns must be distinct variables or inputs; bad: {unknown or names}")
    by_set: dict = {}
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise UsageError(f"line {k}: expected {len(header)} cells, found {len(r)}")
        try:
            s = int(r[0]) if has_set else 1
            cells = r[1:] if has_set else r
            t = float(cells[0])
            vals = [float(c) if c.strip() else math.nan for c in cells[1:]]
        except ValueError:
            raise UsageError(f"line {k}: non-numeric cell") from None
        by_set.setdefault(s, []).append((t, vals))
    sets = []
    for i, s in enumerate(sorted(by_set)):
        data = by_set[s]
        t = np.array([d[0] for d in data])
        if np.any(np.diff(t) <= 0):
            raise UsageError(f"set {s}: times must be strictly increasing")
        V = np.array([d[1] for d in data])
        series, inputs = {}, []
        for j, n in enumerate(names):
            ok = np.isfinite(V[:, j])
            if n in spec.obs_inputs:
                if not ok.all():
                    raise UsageError(f"set {s}: input column {n} has missing cells")
                inputs.append(ExternalInput.tabulated(n, t, V[:, j], spec.obs_inputs[n]))
            elif ok.any():
                series[n] = (t[ok], V[ok, j])
        if not series:
            raise UsageError(f"set {s}: no observed values")
        missing = [u for u in spec.obs_inputs if u not in names]
        if missing:
            raise UsageError(f"inputs {missing} need values in the model or observation file")
        sets.append(ObservationSet(series, tuple(inputs), i))
    return sets


def _fmt(x) -> str:
    return repr(float(x))


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _pairs(items, what) -> dict:
    out = {}
    for it in items or ():
        for part in it.split(","):
            if not part.strip():
                continue
            k, sep, v = part.partition("=")
            if not sep:
                raise UsageError(f"{what} expects name=value, got {part!r}")
            try:
                out[k.strip()] = float(v)
            except ValueError:
                raise UsageError(f"{what}: {v!r} is not a number") from None
    return out


def _times(text) -> np.ndarray:
    try:
        if ":" in text:
            a, b, n = text.split(":")
            t = np.linspace(float(a), float(b), int(n))
        else:
            t = np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise UsageError(f"--times: cannot parse {text!r} (use start:stop:n or a comma list)") from None
    if t.size < 2 or np.any(np.diff(t) <= 0):
        raise UsageError("--times needs at least two increasing values")
    return t


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    spec = load_model(args.model)
    model = spec.model
    theta = spec.values()
    theta.update(_pairs(args.theta, "--theta"))
    x0 = {v: float(x) for v, x in spec.x0().items() if x != ESTIMATE}
    x0.update(_pairs(args.x0, "--x0"))
    needed = [p for p in model.parameters if p not in model.fixed and p not in model.likelihood]
    unbound = [p for p in needed if p not in theta] + [v for v in model.variables if v not in x0]
    if unbound:
        raise UsageError(f"unbound parameters or initial values: {', '.join(unbound)}")
    if spec.obs_inputs:
        raise UsageError(f"inputs {list(spec.obs_inputs)} need values in the model file to simulate")
    times = _times(args.times)
    observed = model.variables if not args.observe else tuple(args.observe.split(","))
    bad = [v for v in observed if v not in model.variables]
    if bad:
        raise UsageError(f"--observe names unknown variables {bad}")
    traj = solve_ode(model, theta, x0, times, spec.inputs)
    seed = args.seed if args.seed is not None else spec.options.get("seed", 0)
    rng = Xoshiro256(seed)
    rows = []
    for s in range(1, args.sets + 1):
        noisy = [traj[v] + (rng.normals(times.size, args.sigma) if args.sigma > 0 else 0.0) for v in observed]
        for k, t in enumerate(times):
            row = [_fmt(t)] + [_fmt(y[k]) for y in noisy]
            rows.append(([str(s)] if args.sets > 1 else []) + row)
    header = (["set"] if args.sets > 1 else []) + ["time"] + list(observed)
    _write(args.out, _csv(rows, header))
    if args.truth_out:
        truth = [[_fmt(t)] + [_fmt(traj[v][k]) for v in model.variables] for k, t in enumerate(times)]
        _write(args.truth_out, _csv(truth, ["time"] + list(model.variables)))
    return EXIT_OK


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def fit_to_json(r: FitResult, s: int) -> dict:
    """Summary of one set's fit; non-finite numbers become ``null``."""
    out_params = []
    for p in r.params:
        out_params.append({
            "par": p, "type": r.types[p],
            "lower": _num(r.lower.get(p)), "upper": _num(r.upper.get(p)), "start": _num(r.start.get(p)),
            "im_est": _num(r.im_theta.get(p)),
            "nls_est": _num(r.nls_theta[p]) if r.nls_theta is not None else None,
        })
    x0 = []
    for v in r.model.variables:
        x0.append({
            "var": v, "estimated": v in r.x0_estimated,
            "im_est": _num(r.im_x0[0][v]),
            "nls_est": _num(r.nls_x0[0][v]) if r.nls_x0 is not None else None,
        })
    doc = {"set": s + 1, "im_method": r.im.method, "parameters": out_params, "x0": x0,
           "im_loss": _num(r.im_loss), "nls_loss": _num(r.nls_loss)}
    if r.matrix is not None:
        doc["im_pars_est_mat"] = {eq: {p: _num(v) for p, v in row.items()} for eq, row in r.matrix.items()}
    return doc


def _fit_all(spec, sets, parallel):
    cfg = spec.fit_config()
    if len(sets) == 1:
        return [fit(spec.model, sets[0], cfg)]
    mode = spec.options.get("obs_sets_fit", SEPARATE)
    return fit_sets(spec.model, sets, mode, cfg, parallel)


def cmd_fit(args) -> int:
    spec = load_model(args.model)
    sets = read_obs(args.obs, spec)
    results = _fit_all(spec, sets, args.parallel)
    doc = {"fits": [], "failures": []}
    for s, r in enumerate(results):
        if isinstance(r, FitFailure):
            doc["failures"].append({"set": s + 1, "error": str(r.error)})
        else:
            doc["fits"].append(fit_to_json(r, s))
    jsonschema.validate(doc, load_schema("fit"))
    _write(args.out, json.dumps(doc, indent=2) + "\n")
    return EXIT_NUMERIC if doc["failures"] else EXIT_OK


def cmd_profile(args) -> int:
    if not args.step_pct > 0:
        raise UsageError("--step-pct must be positive")
    levels = args.level or [0.95]
    if any(not 0 < a < 1 for a in levels):
        raise UsageError("--level must lie in (0, 1)")
    spec = load_model(args.model)
    sets = read_obs(args.obs, spec)
    if not 1 <= args.set <= len(sets):
        raise UsageError(f"--set must lie in 1..{len(sets)}")
    r = fit(spec.model, sets[args.set - 1], spec.fit_config())
    if r.objective is None:
        raise UsageError("profiling needs the trajectory stage (options.run_nls)")
    v = r.final_vector()
    steps = {n: args.step_pct / 100 * abs(x) or args.step_pct / 100 for n, x in zip(r.objective.names, v)}
    names = args.params.split(",") if args.params else None
    prof = profile(r, names, steps, args.max_steps, parallel=args.parallel)
    rows = [[n, _fmt(x), _fmt(y)] for n, c in prof.curves.items() for x, y in zip(c.values, c.nll)]
    _write(args.out, _csv(rows, ["parameter", "value", "nll"]))
    ci_rows = []
    for a in levels:
        for c in confint(prof, a):
            ci_rows.append([c.parameter, _fmt(c.level), _fmt(c.estimate), _fmt(c.lower), _fmt(c.upper),
                            str(c.lower_open).lower(), str(c.upper_open).lower()])
    _write(args.intervals, _csv(ci_rows, ["parameter", "level", "estimate", "lower", "upper",
                                          "lower_open", "upper_open"]))
    return EXIT_OK


def _truth(arg):
    if arg is None:
        return None
    if os.path.isfile(arg):
        with open(arg) as fh:
            doc = json.load(fh)
        return {k: float(v) for k, v in doc.items()}
    return _pairs([arg], "--truth")


def cmd_mc(args) -> int:
    spec = load_model(args.model)
    sets = read_obs(args.obs, spec)
    if len(sets) < 2:
        raise UsageError("mc needs an observation file with at least two sets")
    results = _fit_all(spec, sets, args.parallel)
    failures = [r for r in results if isinstance(r, FitFailure)]
    for f in failures:
        print(f"warning: {f}", file=sys.stderr)
    summary = mc_summary(results, _truth(args.truth))
    cols = list(summary.columns)
    rows = [[n] + [_fmt(summary.columns[c][i]) for c in cols] for i, n in enumerate(summary.names)]
    _write(args.out, _csv(rows, ["par"] + cols))
    return EXIT_NUMERIC if failures else EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="odesep", description="Two-stage ODE parameter estimation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="solve a model and add Gaussian noise")
    p.add_argument("model")
    p.add_argument("--times", required=True, help="start:stop:n or comma-separated values")
    p.add_argument("--theta", action="append", help="name=value overrides (repeatable)")
    p.add_argument("--x0", action="append", help="var=value overrides (repeatable)")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--sets", type=int, default=1)
    p.add_argument("--observe", help="comma-separated observed variables (default all)")
    p.add_argument("--out")
    p.add_argument("--truth-out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="two-stage fit")
    p.add_argument("model")
    p.add_argument("obs")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("profile", help="profile likelihood and confidence intervals")
    p.add_argument("model")
    p.add_argument("obs")
    p.add_argument("--level", type=float, action="append", help="interval level (repeatable; default 0.95)")
    p.add_argument("--step-pct", type=float, default=1.0, help="grid step in percent of each estimate")
    p.add_argument("--max-steps", type=int, default=100)
    p.add_argument("--params", help="comma-separated names to profile (default all)")
    p.add_argument("--set", type=int, default=1)
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--out")
    p.add_argument("--intervals")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("mc", help="fit every set and summarise")
    p.add_argument("model")
    p.add_argument("obs")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--truth", help="JSON file or name=value list of true values")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mc)
    return ap


def _provenance(exc) -> str:
    """Package module in which ``exc`` was raised."""
    mod = "odesep"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        f = os.path.abspath(frame.f_code.co_filename)
        if f.startswith(_PKG_DIR) and not f.endswith("cli.py"):
            mod = "odesep." + os.path.splitext(os.path.basename(f))[0]
    return mod


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except RoleError as exc:
        for line in exc.diagnostics:
            print(line, file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ModelError, ExprSyntaxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OdesepError, ArithmeticError) as exc:
        print(f"error [{_provenance(exc)}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
