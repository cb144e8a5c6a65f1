"""Command-line driver: read a TOML experiment config, run it, write CSV/JSON.

Every output file starts with ``#`` header lines holding the package
version and the full configuration as JSON, so a file documents the
experiment that produced it. Output depends only on the config and seed.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure (a
``diagnostic.json`` is written), 4 run cap reached.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, analytics, moments, simulate
from .analytics import NonConvergence
from .model import ModulatedNetworkSpec, NetworkSpec, SpecError, validate
from .segments import DomainExceeded

MODES = ("is", "mc", "sweep", "twist-info", "moments", "decay")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Parsed experiment description.

    ``spec`` is a :class:`NetworkSpec` or a :class:`ModulatedNetworkSpec`.
    """

    spec: object
    mode: str
    seed: int
    a: tuple[float, ...] = ()
    n: tuple[int, ...] = ()
    eps: float = 0.1
    T: float = 1.96
    max_runs: int = simulate.MAX_RUNS
    runs: int | None = None
    x0: tuple[float, ...] | None = None
    grid: tuple[float, ...] = ()
    density_points: int = 101
    out: str = "out"

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        """Canonical form; the output directory is left out on purpose."""
        d = {"mode": self.mode, "seed": self.seed}
        if isinstance(self.spec, NetworkSpec):
            d["network"] = self.spec.to_dict()
        else:
            d["modulated"] = self.spec.to_dict()
        d["target"] = {"a": list(self.a), "n": list(self.n)}
        d["estimation"] = {"eps": self.eps, "T": self.T, "max_runs": self.max_runs}
        if self.runs is not None:
            d["estimation"]["runs"] = self.runs
        mom = {"t": list(self.grid)}
        if self.x0 is not None:
            mom["x0"] = list(self.x0)
        d["moments"] = mom
        d["output"] = {"density_points": self.density_points}
        return d

    @classmethod
    def from_dict(cls, d: dict, mode: str | None = None, seed: int | None = None,
                  out: str | None = None) -> "ExperimentConfig":
        try:
            if "network" in d:
                spec = NetworkSpec.from_dict(d["network"])
            elif "modulated" in d:
                spec = ModulatedNetworkSpec.from_dict(d["modulated"])
            else:
                raise ConfigError("config needs a [network] or [modulated] section")
            mode = mode or d.get("mode")
            if mode not in MODES:
                raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
            seed = d.get("seed") if seed is None else seed
            if seed is None:
                raise ConfigError("a seed is required (--seed or 'seed' in the config)")
            if int(seed) < 0 or int(seed) >= 2**64:
                raise ConfigError("seed must fit in an unsigned 64-bit integer")
            tgt = d.get("target", {})
            est = d.get("estimation", {})
            mom = d.get("moments", {})
            outp = d.get("output", {})
            grid = mom.get("t", ())
            if isinstance(grid, dict):
                grid = np.linspace(float(grid["start"]), float(grid["stop"]), int(grid["points"]))
            cfg = cls(
                spec=spec,
                mode=mode,
                seed=int(seed),
                a=tuple(float(x) for x in np.atleast_1d(tgt.get("a", ()))),
                n=tuple(int(x) for x in np.atleast_1d(tgt.get("n", ()))),
                eps=float(est.get("eps", 0.1)),
                T=float(est.get("T", 1.96)),
                max_runs=int(est.get("max_runs", simulate.MAX_RUNS)),
                runs=None if est.get("runs") is None else int(est["runs"]),
                x0=None if mom.get("x0") is None else tuple(float(x) for x in mom["x0"]),
                grid=tuple(float(x) for x in grid),
                density_points=int(outp.get("density_points", 101)),
                out=out or d.get("out", "out"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config: {exc!r}") from exc
        cfg.check()
        return cfg

    def check(self):
        problems = validate(self.spec)
        if problems:
            raise ConfigError("; ".join(problems))
        L = self.spec.L
        needs_target = self.mode in ("is", "mc", "sweep", "twist-info", "decay")
        if needs_target and len(self.a) != L:
            raise ConfigError(f"target.a needs {L} entries")
        if self.mode in ("is", "mc", "sweep", "decay") and not self.n:
            raise ConfigError("target.n must list at least one value")
        if any(k < 1 for k in self.n):
            raise ConfigError("target.n values must be positive")
        if not (self.eps > 0 and self.T > 0):
            raise ConfigError("eps and T must be positive")
        if self.mode == "moments":
            if not self.grid:
                raise ConfigError("moments.t must give the time grid")
            if self.x0 is not None and len(self.x0) != L:
                raise ConfigError(f"moments.x0 needs {L} entries")
        if self.mode == "twist-info" and not isinstance(self.spec, NetworkSpec):
            raise ConfigError("twist-info needs a [network] config")


def load_config(path, mode=None, seed=None, out=None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(d, mode=mode, seed=seed, out=out)


# --- output -------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def header_lines(cfg: ExperimentConfig) -> list[str]:
    return [
        f"# fluidnet {__version__}",
        "# config: " + json.dumps(cfg.to_dict(), sort_keys=True),
    ]


def parse_header(text: str) -> ExperimentConfig:
    """Rebuild the configuration echoed in an output file."""
    for line in text.splitlines():
        if line.startswith("# config: "):
            return ExperimentConfig.from_dict(json.loads(line[len("# config: "):]))
    raise ConfigError("no config header found")


def write_csv(path: Path, cfg: ExperimentConfig, columns, rows):
    buf = io.StringIO()
    for line in header_lines(cfg):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    path.write_text(buf.getvalue())


def write_json(path: Path, cfg: ExperimentConfig, payload: dict):
    doc = {"version": __version__, "config": cfg.to_dict(), "result": payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x).__name__)


# --- modes --------------------------------------------------------------------


def twist_info(cfg: ExperimentConfig) -> dict:
    sol = analytics.solve_twist(cfg.spec, cfg.a)
    from .twist import build_plan

    plan = build_plan(cfg.spec, sol)
    return {
        "theta_star": sol.theta_star,
        "b_star": sol.b_star,
        "I": sol.I,
        "tau": sol.tau,
        "active": list(sol.active),
        "poisson_mean_Q": plan.poisson_mean_Q,
        "alpha": analytics.alpha(sol, cfg.eps, cfg.T),
        "log_M": plan.log_M_at_theta_star,
    }, plan


def emit_density_curves(plan, points: int) -> list[dict]:
    """Twisted epoch density and job rates on a uniform grid of ``u``."""
    from .twist import density_curves

    grid = np.linspace(0.0, plan.horizon, points)
    cur = density_curves(plan, grid)
    rows = []
    L = plan.spec.L
    for i in range(points):
        row = {"u": cur["u"][i], "real_time": cur["real_time"][i], "density": cur["density"][i]}
        for ell in range(L):
            row[f"job_rate_{ell + 1}"] = cur["job_rate"][i, ell]
        rows.append(row)
    return rows


def _estimate_rows(cfg, kind, workers):
    rows = []
    capped = False
    fn = simulate.estimate_is if kind == "is" else simulate.estimate_mc
    for n in cfg.n:
        est = fn(cfg.spec, cfg.a, n, cfg.eps, cfg.T, cfg.seed, cfg.max_runs, workers=workers)
        capped |= est.capped
        rows.append({
            "n": n,
            "p_hat": est.p_hat,
            "half_width": est.half_width,
            "runs": est.runs,
            "variance_hat": est.variance_hat,
            "capped": est.capped,
            "seed": cfg.seed,
        })
    return rows, capped


def _moment_rows(cfg):
    spec = cfg.spec
    L = spec.L
    x0 = cfg.x0 or (0.0,) * L
    ms = moments.transient_second_moment(spec, x0, cfg.grid)
    corr = moments.transient_correlation(spec, x0, cfg.grid)
    rows = []
    for i, t in enumerate(ms.grid):
        row = {"t": t}
        for ell in range(L):
            row[f"mean_{ell + 1}"] = ms.mean[i, ell]
        for ell in range(L):
            row[f"var_{ell + 1}"] = ms.variance[i, ell]
        for l in range(L):
            for k in range(l + 1, L):
                row[f"corr_{l + 1}{k + 1}"] = corr[i, l, k]
        rows.append(row)
    cols = list(rows[0]) if rows else ["t"]
    return cols, rows


def run(cfg: ExperimentConfig, out_dir, workers: int = 1) -> int:
    """Run one experiment and write its artifacts; returns the exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _run(cfg, out, workers)
    except (NonConvergence, DomainExceeded, simulate.BoundViolation, moments.StepTooSmall,
            OverflowError, FloatingPointError, np.linalg.LinAlgError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        last = getattr(exc, "last", None)
        if last is not None:
            diag["last_iterate"] = last
        path = getattr(exc, "path", None)
        if path is not None:
            diag["path"] = path.signature()
        write_json(out / "diagnostic.json", cfg, diag)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _run(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    mode = cfg.mode
    if mode == "twist-info":
        info, plan = twist_info(cfg)
        write_json(out / "twist_info.json", cfg, info)
        rows = emit_density_curves(plan, cfg.density_points)
        write_csv(out / "density.csv", cfg, list(rows[0]), rows)
        th = ", ".join(f"{x:.4f}" for x in info["theta_star"])
        print(f"theta* = ({th})  tau = {info['tau']:.4f}  "
              f"Q-rate = {info['poisson_mean_Q']:.4f}  alpha = {info['alpha']:.1f}  I = {info['I']:.6g}")
        return EXIT_OK
    if mode == "moments":
        cols, rows = _moment_rows(cfg)
        write_csv(out / "moments.csv", cfg, cols, rows)
        return EXIT_OK
    if mode in ("is", "mc"):
        rows, capped = _estimate_rows(cfg, mode, workers)
        cols = ["n", "p_hat", "half_width", "runs", "variance_hat", "capped", "seed"]
        write_csv(out / f"{mode}.csv", cfg, cols, rows)
        return EXIT_CAP if capped else EXIT_OK
    if mode == "sweep":
        rows = simulate.sweep(cfg.spec, cfg.a, cfg.n, cfg.eps, cfg.T, cfg.seed, cfg.max_runs, workers)
        write_csv(out / "sweep.csv", cfg, list(simulate.SWEEP_COLUMNS), rows)
        return EXIT_CAP if any(r["capped"] for r in rows) else EXIT_OK
    if mode == "decay":
        return _decay(cfg, out, workers)
    raise ConfigError(f"unknown mode {mode!r}")


def _decay(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    """Decay-rate experiment: estimates, per-run path diagnostics, best path."""
    summary = []
    capped = False
    modulated = isinstance(cfg.spec, ModulatedNetworkSpec)
    diag_rows = []
    for n in cfg.n:
        est = simulate.estimate_is(cfg.spec, cfg.a, n, cfg.eps, cfg.T, cfg.seed, cfg.max_runs,
                                   workers=workers, collect=modulated, fixed_runs=cfg.runs)
        capped |= est.capped
        row = {"n": n, "p_hat": est.p_hat, "half_width": est.half_width, "runs": est.runs,
               "log_p_over_n": math.log(est.p_hat) / n if est.p_hat > 0 else -math.inf}
        if modulated:
            recs = [(dg["path"], dg["I_f"]) for dg in est.diagnostics]
            from .modulation import empirical_optimal_path

            best = empirical_optimal_path(recs)
            best_I = min(r[1] for r in recs)
            row.update({"best_I_f": best_I, "best_path": best.signature()})
            for k, dg in enumerate(est.diagnostics):
                diag_rows.append({
                    "n": n, "run": k, "path": dg["path"].signature(), "I_f": dg["I_f"],
                    "theta": ";".join(_fmt(x) for x in dg["theta"]),
                    "counts": ";".join(str(int(x)) for x in dg["counts"]),
                    "hit": dg["hit"],
                })
        else:
            row.update({"best_I_f": analytics.solve_twist(cfg.spec, cfg.a).I, "best_path": ""})
        summary.append(row)
    cols = ["n", "p_hat", "half_width", "runs", "log_p_over_n", "best_I_f", "best_path"]
    write_csv(out / "decay.csv", cfg, cols, summary)
    if diag_rows:
        write_csv(out / "paths.csv", cfg, list(diag_rows[0]), diag_rows)
    return EXIT_CAP if capped else EXIT_OK


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluidnet", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="TOML experiment file")
    p.add_argument("--mode", choices=MODES, help="overrides the config's mode")
    p.add_argument("--seed", type=int, help="master seed (overrides the config's seed)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, mode=args.mode, seed=args.seed, out=args.out)
    except (ConfigError, SpecError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print("config error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg, cfg.out, args.workers)


if __name__ == "__main__":
    sys.exit(main())
