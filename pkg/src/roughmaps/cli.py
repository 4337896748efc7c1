"""Command-line experiment driver.

Subcommands ``extend``, ``solve``, ``perturb``, ``norms``, ``verify``,
``sweep`` and ``export``.  Exit codes: 0 success, 2 non-convergence,
3 constraint violation, 4 invalid configuration.
"""

import argparse
import dataclasses
import glob
import inspect
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import _accel, box, data, io
from .halfspace import HalfSpaceGrid, poisson_extend
from .norms import bmo_norm, x_norm
from .solver import (
    MaxIterations,
    NonContraction,
    SolverOptions,
    estimate_contraction,
    gradient_flow_oracle,
    random_ball_field,
    solve,
    verify_constraint,
)

EXIT_OK, EXIT_NONCONVERGENCE, EXIT_CONSTRAINT, EXIT_CONFIG = 0, 2, 3, 4

MODES = ("halfspace-small-data", "box-perturbation", "norms-only")
BASES = ("constant", "geodesic")


class InvalidConfig(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"invalid config key {key!r}: {msg}")
        self.key = key


class MissingArtifacts(FileNotFoundError):
    pass


def _positive(x):
    return x > 0


def _unit_open(x):
    return 0 < x < 1


# name -> (type, check, description)
SCHEMA = {
    "mode": (str, lambda x: x in MODES, "one of " + ", ".join(MODES)),
    "d": (int, lambda x: x >= 3, "half-space dimension >= 3"),
    "n": (int, lambda x: 5 <= x <= 513, "horizontal nodes per axis in [5, 513]"),
    "L": (float, _positive, "window half-width > 0"),
    "H": (float, _positive, "top height > 0"),
    "sigma": (float, _unit_open, "level ratio in (0, 1)"),
    "m": (int, lambda x: x >= 2, "ambient dimension >= 2"),
    "generator": (str, lambda x: x in data.GENERATORS, "one of " + ", ".join(data.GENERATORS)),
    "max_iterations": (int, lambda x: 1 <= x <= 10000, "in [1, 10000]"),
    "residual_tolerance": (float, _positive, "> 0"),
    "damping": (float, lambda x: 0 < x <= 1, "in (0, 1]"),
    "solver_mode": (str, lambda x: x in ("linf", "bmo"), "linf or bmo"),
    "backend": (str, lambda x: x in ("fast", "sparse", "green"), "fast, sparse or green"),
    "boundary": (str, lambda x: x in ("green", "dipole", "zero"), "green, dipole or zero"),
    "box_d": (int, lambda x: x in (2, 3), "2 or 3"),
    "box_n": (int, lambda x: 5 <= x <= 129, "in [5, 129]"),
    "base": (str, lambda x: x in BASES, "one of " + ", ".join(BASES)),
    "base_k": (float, lambda x: x >= 0, ">= 0"),
    "flip_curvature": (bool, lambda x: True, "true or false"),
    "require": (str, lambda x: x in ("stable", "invertible", "none"), "stable, invertible or none"),
    "seed": (int, lambda x: x >= 0, ">= 0"),
    "threads": (int, lambda x: x >= 1, ">= 1"),
    "out": (str, lambda x: bool(x), "non-empty path"),
    "sweep_key": (str, lambda x: x.startswith("data."), "a data.* key"),
    "sweep_values": (str, lambda x: bool(x), "comma-separated numbers"),
}


def _parse_value(key, typ, text):
    try:
        if typ is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise InvalidConfig(key, f"cannot parse {text!r} as {typ.__name__}") from None


@dataclass
class ExperimentConfig:
    mode: str = "halfspace-small-data"
    d: int = 3
    n: int = 65
    L: float = 4.0
    H: float = 8.0
    sigma: float = 0.75
    m: int = 3
    generator: str = "geodesic_cap"
    data_params: dict = field(default_factory=dict)
    max_iterations: int = 50
    residual_tolerance: float = 1e-8
    damping: float = 1.0
    solver_mode: str = "linf"
    backend: str = "fast"
    boundary: str = "green"
    box_d: int = 3
    box_n: int = 17
    base: str = "constant"
    base_k: float = 2.0
    flip_curvature: bool = False
    require: str = "stable"
    seed: int = 0
    threads: int = 1
    out: str = "runs"
    sweep_key: str = "data.amplitude"
    sweep_values: str = "0.05,0.1,0.2,0.4"

    # -- (de)serialisation ---------------------------------------------------

    @classmethod
    def from_kv(cls, kv):
        cfg = cls()
        params = {}
        for key, text in kv.items():
            if key.startswith("data."):
                name = key[5:]
                if not name:
                    raise InvalidConfig(key, "empty data parameter name")
                params[name] = _parse_value(key, bool if text.lower() in ("true", "false") else float, text)
                continue
            if key not in SCHEMA:
                raise InvalidConfig(key, "unknown key")
            typ, check, desc = SCHEMA[key]
            val = _parse_value(key, typ, text)
            if not check(val):
                raise InvalidConfig(key, f"value {text!r} out of range ({desc})")
            setattr(cfg, key, val)
        if any(k.startswith("data.") for k in kv):
            cfg.data_params = params
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text):
        try:
            kv = io.parse_kv(text)
        except io.ConfigSyntaxError as exc:
            raise InvalidConfig(exc.key, str(exc)) from None
        return cls.from_kv(kv)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_kv(self):
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "data_params":
                continue
            out[f.name] = getattr(self, f.name)
        for k in sorted(self.data_params):
            out[f"data.{k}"] = self.data_params[k]
        return out

    def to_text(self):
        return io.format_kv(self.to_kv())

    def validate(self):
        sig = inspect.signature(data.GENERATORS[self.generator])
        allowed = {p for p in sig.parameters if p not in ("grid", "p", "q", "center")}
        for k in self.data_params:
            if k not in allowed:
                raise InvalidConfig(f"data.{k}", f"not a parameter of generator {self.generator!r}")
        if self.sweep_values:
            try:
                [float(x) for x in self.sweep_values.split(",")]
            except ValueError:
                raise InvalidConfig("sweep_values", "expected comma-separated numbers") from None

    def halfspace_grid(self):
        return HalfSpaceGrid(d=self.d, m=self.m, L=self.L, n=self.n, H=self.H, sigma=self.sigma)

    def solver_options(self):
        return SolverOptions(
            max_iterations=self.max_iterations,
            residual_tolerance=self.residual_tolerance,
            damping=self.damping,
            mode=self.solver_mode,
            backend=self.backend,
            boundary=self.boundary,
        )


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ["iteration", "residual", "ratio", "distance_to_v", "sup_dist"]
PARAM_COLUMNS = ["amplitude", "radius", "angle", "lam"]
SUMMARY_COLUMNS = (
    ["run", "mode", "generator"]
    + PARAM_COLUMNS
    + ["bmo_norm", "x_norm", "x_seminorm", "theta", "max_theta", "iterations", "sup_dist", "subharmonic_defect", "stability_M", "status", "exit_code"]
)


def _write_trace(out, trace):
    rows = []
    for i, res in enumerate(trace.residuals):
        ratio = trace.ratios[i - 1] if i >= 1 and i - 1 < len(trace.ratios) else ""
        dv = trace.distance_to_v[i] if i < len(trace.distance_to_v) else ""
        sd = trace.sup_dist[i] if i < len(trace.sup_dist) else ""
        rows.append([i + 1, res, ratio, dv, sd])
    io.write_csv(os.path.join(out, "trace.csv"), TRACE_COLUMNS, rows, kind="trace")


def _write_summary(out, summary):
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        for k in SUMMARY_COLUMNS:
            fh.write(f"{k} = {io.fmt(summary.get(k, ''))}\n")


def _base_summary(cfg, run_name):
    s = {"run": run_name, "mode": cfg.mode, "generator": cfg.generator}
    for k in PARAM_COLUMNS:
        s[k] = cfg.data_params.get(k, "")
    return s


def _halfspace_data(cfg):
    grid = cfg.halfspace_grid()
    return grid, data.generate_boundary_data(cfg.generator, cfg.data_params, grid)


def _save_halfspace_field(out, u):
    io.write_field(os.path.join(out, "field.txt"), u.grid.node_coords(), u.values, {"kind": "halfspace"})


def run_extend(cfg, out):
    grid, f = _halfspace_data(cfg)
    v = poisson_extend(grid, f)
    rep = x_norm(v)
    io.write_report(os.path.join(out, "norms.txt"), rep)
    _save_halfspace_field(out, v)
    s = _base_summary(cfg, os.path.basename(out))
    s.update(x_norm=rep.total, x_seminorm=rep.seminorm, status="extended", exit_code=EXIT_OK)
    return EXIT_OK, s


def run_norms(cfg, out):
    grid, f = _halfspace_data(cfg)
    v = poisson_extend(grid, f)
    rep = x_norm(v)
    b = bmo_norm(f)
    norms = {"bmo_norm": b, "x_norm": rep.as_dict(), "carleson_over_bmo": (rep.carleson_energy / b) if b > 0 else float("nan")}
    io.write_report(os.path.join(out, "norms.txt"), norms)
    s = _base_summary(cfg, os.path.basename(out))
    s.update(bmo_norm=b, x_norm=rep.total, x_seminorm=rep.seminorm, status="norms", exit_code=EXIT_OK)
    return EXIT_OK, s


def _constraint_code(rep, tol=1e-6):
    if not rep.tube_ok or rep.subharmonic_defect < -tol or rep.boundary_dist > 1e-8:
        return EXIT_CONSTRAINT
    return EXIT_OK


def run_solve(cfg, out, verify=False):
    grid, f = _halfspace_data(cfg)
    opts = cfg.solver_options()
    s = _base_summary(cfg, os.path.basename(out))
    s["bmo_norm"] = bmo_norm(f)
    code = EXIT_OK
    try:
        u, trace = solve(f, opts)
    except (NonContraction, MaxIterations) as exc:
        u, trace = exc.u, exc.trace
        code = EXIT_NONCONVERGENCE
    _write_trace(out, trace)
    _save_halfspace_field(out, u)
    rep = verify_constraint(u, None, opts)
    io.write_report(os.path.join(out, "constraint.txt"), dataclasses.asdict(rep))
    nrep = x_norm(u)
    io.write_report(os.path.join(out, "norms.txt"), nrep)
    if code == EXIT_OK:
        code = _constraint_code(rep, opts.tol_sub)
    s.update(
        x_norm=nrep.total,
        x_seminorm=nrep.seminorm,
        theta=trace.limiting_ratio(opts.burn_in),
        max_theta=trace.max_ratio(0),
        iterations=trace.iterations,
        sup_dist=rep.sup_dist,
        subharmonic_defect=rep.subharmonic_defect,
        status=trace.status if code != EXIT_CONSTRAINT else "constraint_violation",
        exit_code=code,
    )
    if verify and code == EXIT_OK:
        oracle, steps = gradient_flow_oracle(f)
        v = poisson_extend(grid, f)
        rng = np.random.default_rng(cfg.seed)
        u1 = random_ball_field(v, opts.ball_radius, rng)
        u2 = random_ball_field(v, opts.ball_radius, rng)
        checks = {
            "oracle_sup_difference": float(np.max(np.abs(u.values - oracle.values))),
            "oracle_steps": steps,
            "contraction_estimate": estimate_contraction(v, u1, u2, None, opts),
        }
        io.write_report(os.path.join(out, "verify.txt"), checks)
    return code, s


def _box_base(cfg):
    grid = box.BoxGrid(cfg.box_d, cfg.box_n)
    if cfg.base == "geodesic":
        return box.StableBase.geodesic(grid, cfg.base_k, flip_curvature=cfg.flip_curvature)
    return box.StableBase.constant(grid, flip_curvature=cfg.flip_curvature)


def run_perturb(cfg, out):
    try:
        base = _box_base(cfg)
    except ValueError as exc:
        raise InvalidConfig("box_d", str(exc)) from None
    amp = float(cfg.data_params.get("amplitude", 0.05))
    s = _base_summary(cfg, os.path.basename(out))
    s["generator"] = "rotated_bump"
    opts = box.PerturbationOptions(max_iterations=cfg.max_iterations, residual_tolerance=cfg.residual_tolerance, require=cfg.require)
    try:
        M = box.estimate_stability_constant(base, raise_on_indefinite=False)
        prob = box.PerturbationProblem(base, box.rotated_data(base, amp), opts)
        u, trace = box.solve_perturbation(prob)
        code = EXIT_OK
    except (NonContraction, MaxIterations) as exc:
        u, trace, code = exc.u, exc.trace, EXIT_NONCONVERGENCE
    except (box.IndefiniteForm, box.SingularOperator) as exc:
        io.write_report(os.path.join(out, "constraint.txt"), {"error": str(exc)})
        s.update(stability_M=base.M, status="unstable_base", exit_code=EXIT_CONSTRAINT)
        return EXIT_CONSTRAINT, s
    _write_trace(out, trace)
    io.write_field(os.path.join(out, "field.txt"), u.grid.node_coords(), u.values, {"kind": "box"})
    rep = box.verify_constraint_box(u, base.manifold)
    io.write_report(os.path.join(out, "constraint.txt"), dataclasses.asdict(rep))
    nrep = box.w_norm(u)
    io.write_report(os.path.join(out, "norms.txt"), nrep)
    if code == EXIT_OK and (not rep.tube_ok or rep.boundary_dist > 1e-8):
        code = EXIT_CONSTRAINT
    s.update(
        x_norm=nrep.total,
        x_seminorm=nrep.seminorm,
        theta=trace.limiting_ratio(opts.burn_in),
        max_theta=trace.max_ratio(0),
        iterations=trace.iterations,
        sup_dist=rep.sup_dist,
        subharmonic_defect=rep.subharmonic_defect,
        stability_M=M,
        status=trace.status if code != EXIT_CONSTRAINT else "constraint_violation",
        exit_code=code,
    )
    return code, s


PIPELINES = {
    "extend": run_extend,
    "solve": run_solve,
    "perturb": run_perturb,
    "norms": run_norms,
    "verify": lambda cfg, out: run_solve(cfg, out, verify=True),
}

MODE_PIPELINE = {"halfspace-small-data": "solve", "box-perturbation": "perturb", "norms-only": "norms"}


def run(config, command=None, out=None):
    """Run one pipeline into ``out`` (default ``config.out``); returns the exit code."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_file(config)
    out = io.ensure_dir(out or cfg.out)
    _accel.set_threads(cfg.threads)
    command = command or MODE_PIPELINE[cfg.mode]
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    code, summary = PIPELINES[command](cfg, out)
    summary.setdefault("exit_code", code)
    _write_summary(out, summary)
    return code


def run_sweep(cfg, out):
    """One run per value of ``sweep_key``; writes ``sweep.csv`` and a trend summary."""
    io.ensure_dir(out)
    values = [float(x) for x in cfg.sweep_values.split(",")]
    key = cfg.sweep_key[5:]
    codes = []
    for i, val in enumerate(values):
        sub = dataclasses.replace(cfg, data_params={**cfg.data_params, key: val})
        sub.validate()
        codes.append(run(sub, out=os.path.join(out, f"run_{i:03d}")))
    path = export_results(out, os.path.join(out, "sweep.csv"))
    _, cols, rows = io.read_csv(path)
    ti = cols.index("theta")
    thetas = [float(r[ti]) for r in rows if r[ti] not in ("", "nan")]
    trend = {
        "sweep_key": cfg.sweep_key,
        "values": values,
        "exit_codes": codes,
        "theta": thetas,
        "monotone_theta": bool(np.all(np.diff(thetas) > 0)) if len(thetas) > 1 else True,
    }
    io.write_report(os.path.join(out, "sweep_summary.txt"), trend)
    return EXIT_OK


def _sort_key(row):
    amp = row.get("amplitude", "")
    try:
        a = float(amp)
    except ValueError:
        a = float("inf")
    return (a, row.get("run", ""))


def export_results(run_dir, dest=None):
    """Collect every ``summary.txt`` below ``run_dir`` into one CSV sorted by amplitude."""
    paths = sorted(glob.glob(os.path.join(run_dir, "**", "summary.txt"), recursive=True))
    if not paths:
        raise MissingArtifacts(f"no run summaries under {run_dir}")
    rows = []
    for p in paths:
        kv = io.read_kv(p)
        missing = [c for c in SUMMARY_COLUMNS if c not in kv]
        if missing:
            raise MissingArtifacts(f"{p} lacks {', '.join(missing)}")
        rows.append(kv)
    rows.sort(key=_sort_key)
    dest = dest or os.path.join(run_dir, "results.csv")
    io.write_csv(dest, SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in rows], kind="results")
    return dest


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="roughmaps", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("extend", "solve", "perturb", "norms", "verify", "sweep", "export"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "export":
        if not args.out:
            print("export needs --out DIR", file=sys.stderr)
            return EXIT_CONFIG
        try:
            print(export_results(args.out))
        except MissingArtifacts as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return EXIT_OK
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = _checked("seed", args.seed)
        if args.threads is not None:
            cfg.threads = _checked("threads", args.threads)
        if args.out:
            cfg.out = args.out
        if args.command == "perturb":
            cfg.mode = "box-perturbation"
        elif args.command == "norms":
            cfg.mode = "norms-only"
        if args.command == "sweep":
            _accel.set_threads(cfg.threads)
            return run_sweep(cfg, cfg.out)
        return run(cfg, command=args.command)
    except InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.UnknownGenerator, data.AmplitudeOutOfRange, ValueError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _checked(key, val):
    if not SCHEMA[key][1](val):
        raise InvalidConfig(key, f"value {val!r} out of range ({SCHEMA[key][2]})")
    return val


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
