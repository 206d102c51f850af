"""Command-line entry point: ``nse-transfer {solve,kernels,bogovskii,sweep-r,sweep-t,verify}``.

Exit codes: 0 success, 2 configuration error, 3 solver error, 4 report
written but a sweep cell failed or an acceptance row did not pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bogovskii import (
    BogovskiiDomain,
    CompatibilityError,
    DomainError,
    bogovskii_estimate_ratio,
    bogovskii_solve,
    divergence_residual,
)
from .data import BumpSpec, divergence_datum
from .harness import (
    SweepConfig,
    solve_reference,
    sweep_radius,
    sweep_time,
    verify_suite,
    write_report,
    write_summary,
)
from .kernels import kernel_exterior_lq
from .solver import IterSpec, SolverError, load_trajectory, save_trajectory
from .spectral import Grid, get_threads, set_threads

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PARTIAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --- configuration ---------------------------------------------------------

_TOP_KEYS = {
    "n", "grid", "v0", "T", "steps", "radii", "times", "t_fixed", "R_fixed", "k_max", "q", "eps",
    "slack", "tolerances", "mode", "time_sweep", "kernels", "bogovskii", "trajectory", "output", "seed",
    "annulus_rows",
}


@dataclass
class RunConfig:
    n: int = 3
    L: float = 16.0
    N: int = 128
    v0: BumpSpec = field(default_factory=BumpSpec)
    T: float = 1.0
    steps: int = 4
    radii: tuple = (3.0, 4.0, 5.0, 6.0)
    times: tuple = (0.5, 1.0, 2.0, 4.0)
    t_fixed: float = 1.0
    R_fixed: float = 4.0
    k_max: int = 1
    q: tuple = (2.0,)
    eps: float = 0.05
    slack: float = 0.3
    picard: IterSpec = field(default_factory=IterSpec)
    corrector: IterSpec = field(default_factory=lambda: IterSpec(1e-8, 30))
    mode: str = "annulus"
    time_sweep: dict | None = None
    kernels: dict = field(default_factory=lambda: {"times": [1.0], "q": [2.0]})
    bogovskii: dict = field(default_factory=lambda: {"mode": "ball", "R": 2.0, "L": 4.5, "N": [32, 48, 64]})
    trajectory: str | None = None
    output: str = "out"
    seed: int = 0x5EED
    annulus_rows: bool = True
    source: str = ""

    @property
    def grid(self) -> Grid:
        return Grid(self.n, self.L, self.N)

    def sweep(self, T=None, steps=None, ks=None) -> SweepConfig:
        return SweepConfig(
            grid=self.grid, v0=self.v0, radii=self.radii, times=self.times,
            ks=tuple(range(self.k_max + 1)) if ks is None else ks, qs=self.q,
            t_fixed=self.t_fixed, R_fixed=self.R_fixed, T=self.T if T is None else T,
            steps=self.steps if steps is None else steps, eps=self.eps, slack=self.slack, mode=self.mode,
            picard=self.picard, corrector=self.corrector, seed=self.seed,
        )

    def time_sweep_config(self) -> SweepConfig:
        ts = self.time_sweep or {}
        T = float(ts.get("T", max(self.times)))
        steps = int(ts.get("steps", max(1, round(T / (self.T / self.steps)))))
        ks = tuple(int(k) for k in ts.get("ks", range(self.k_max + 1)))
        cfg = self.sweep(T=T, steps=steps, ks=ks)
        # the time sweep only visits R_fixed, so the radius list does not constrain its grid
        grid = Grid(self.n, float(ts.get("L", self.L)), int(ts.get("N", self.N)))
        return SweepConfig(**{**cfg.__dict__, "grid": grid, "radii": (self.R_fixed,)})


def _num(d, key, kind, default, lo=None, hi=None, strict_lo=False):
    if key not in d:
        return default
    val = d[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{key!r} must be a number, got {val!r}")
    if kind is int:
        if int(val) != val:
            raise ConfigError(f"{key!r} must be an integer, got {val!r}")
        val = int(val)
    else:
        val = float(val)
    if lo is not None and (val <= lo if strict_lo else val < lo):
        raise ConfigError(f"{key!r} must be {'>' if strict_lo else '>='} {lo}, got {val}")
    if hi is not None and val > hi:
        raise ConfigError(f"{key!r} must be <= {hi}, got {val}")
    return val


def _numlist(d, key, default, lo=None):
    if key not in d:
        return tuple(default)
    val = d[key]
    if not isinstance(val, list) or not val or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in val):
        raise ConfigError(f"{key!r} must be a nonempty list of numbers")
    if lo is not None and any(x < lo for x in val):
        raise ConfigError(f"{key!r} entries must be >= {lo}")
    return tuple(float(x) for x in val)


def _seed(val) -> int:
    if isinstance(val, bool):
        raise ConfigError("seed must be an integer or a hex string")
    if isinstance(val, int):
        return val
    if isinstance(val, str):
        try:
            return int(val, 16)
        except ValueError:
            pass
    raise ConfigError(f"seed must be an integer or a hex string, got {val!r}")


def parse_config(doc: dict, source: str = "") -> RunConfig:
    """Validate a config document; every cross-field constraint is checked here."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = RunConfig(source=source)
    cfg.n = _num(doc, "n", int, 3, lo=1)
    if cfg.n != 3:
        raise ConfigError("only n = 3 is supported")
    grid = doc.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("'grid' must be an object with L and N")
    cfg.L = _num(grid, "L", float, cfg.L, lo=0, strict_lo=True)
    cfg.N = _num(grid, "N", int, cfg.N, lo=8)
    if cfg.N % 2:
        raise ConfigError(f"grid N must be even, got {cfg.N}")
    v0 = doc.get("v0", {})
    if not isinstance(v0, dict):
        raise ConfigError("'v0' must be an object")
    try:
        cfg.v0 = BumpSpec(center=tuple(float(c) for c in v0.get("center", (0.0, 0.0, 0.0))),
                          radius=_num(v0, "radius", float, 1.0), amplitude=_num(v0, "amplitude", float, 1e-2),
                          pattern=str(v0.get("pattern", "mixed")), smoothing=_num(v0, "smoothing", float, 0.05))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid v0: {exc}") from None
    cfg.T = _num(doc, "T", float, cfg.T, lo=0, strict_lo=True)
    cfg.steps = _num(doc, "steps", int, cfg.steps, lo=1)
    cfg.radii = _numlist(doc, "radii", cfg.radii, lo=2)
    cfg.times = _numlist(doc, "times", cfg.times)
    cfg.t_fixed = _num(doc, "t_fixed", float, cfg.t_fixed, lo=0, strict_lo=True)
    cfg.R_fixed = _num(doc, "R_fixed", float, cfg.R_fixed, lo=2)
    cfg.k_max = _num(doc, "k_max", int, cfg.k_max, lo=0, hi=3)
    cfg.q = _numlist(doc, "q", cfg.q, lo=1)
    cfg.eps = _num(doc, "eps", float, cfg.eps, lo=0, strict_lo=True, hi=1)
    cfg.slack = _num(doc, "slack", float, cfg.slack, lo=0)
    tol = doc.get("tolerances", {})
    if not isinstance(tol, dict):
        raise ConfigError("'tolerances' must be an object")
    cfg.picard = IterSpec(_num(tol, "picard", float, 1e-10, lo=0, strict_lo=True), _num(tol, "picard_max", int, 50, lo=1))
    cfg.corrector = IterSpec(_num(tol, "corrector", float, 1e-8, lo=0, strict_lo=True),
                             _num(tol, "corrector_max", int, 30, lo=1))
    cfg.mode = doc.get("mode", cfg.mode)
    if cfg.mode not in ("annulus", "ball"):
        raise ConfigError(f"mode must be 'annulus' or 'ball', got {cfg.mode!r}")
    for key in ("time_sweep", "kernels", "bogovskii"):
        if key in doc and not isinstance(doc[key], dict):
            raise ConfigError(f"{key!r} must be an object")
    cfg.time_sweep = doc.get("time_sweep")
    if "kernels" in doc:
        cfg.kernels = {"times": list(_numlist(doc["kernels"], "times", [1.0])),
                       "q": list(_numlist(doc["kernels"], "q", [2.0], lo=1)),
                       "names": list(doc["kernels"].get("names", ["K1", "K2"]))}
        if any(k not in ("K1", "K2") for k in cfg.kernels["names"]):
            raise ConfigError("kernel names must be 'K1' or 'K2'")
        if any(t <= 0 for t in cfg.kernels["times"]):
            raise ConfigError("kernel times must be positive")
    if "bogovskii" in doc:
        b = doc["bogovskii"]
        cfg.bogovskii = {"mode": b.get("mode", "ball"), "R": _num(b, "R", float, 2.0, lo=2),
                         "L": _num(b, "L", float, 4.5, lo=0, strict_lo=True),
                         "N": [int(x) for x in _numlist(b, "N", [32, 48, 64], lo=8)]}
        if cfg.bogovskii["mode"] not in ("ball", "annulus"):
            raise ConfigError("bogovskii mode must be 'ball' or 'annulus'")
    cfg.trajectory = doc.get("trajectory")
    cfg.output = str(doc.get("output", cfg.output))
    cfg.seed = _seed(doc.get("seed", cfg.seed))
    cfg.annulus_rows = bool(doc.get("annulus_rows", True))
    try:
        cfg.grid
        cfg.sweep()
        if cfg.time_sweep is not None:
            cfg.time_sweep_config()
        for key in ("T", "steps", "L", "N"):
            if cfg.time_sweep is not None and key in cfg.time_sweep:
                _num(cfg.time_sweep, key, int if key in ("steps", "N") else float, None, lo=0, strict_lo=True)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(doc, str(path))


# --- commands --------------------------------------------------------------


def _meta(cfg: RunConfig, command: str, started: float) -> dict:
    return {"command": command, "version": __version__, "config": cfg.source, "grid": cfg.grid.describe(),
            "seed": hex(cfg.seed), "threads": get_threads(), "seconds": time.perf_counter() - started}


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    v = solve_reference(cfg.sweep())
    manifest = save_trajectory(v, out, "velocity")
    divs = [float(s.check_solenoidal(rtol=math.inf)) for s in v.slices]
    log = {"times": [float(t) for t in v.times], "energy": [float(e) for e in v.log["energy"]],
           "divergence": divs, "picard_iterations": [int(i) for i in v.log["picard_iterations"]]}
    (out / "energy_log.json").write_text(json.dumps(log, indent=2))
    write_summary(out / "solve.json", {**_meta(cfg, "solve", started), "manifest": manifest.name})
    return EXIT_OK


def cmd_kernels(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    names = cfg.kernels.get("names", ["K1", "K2"])
    path = out / "kernels.csv"
    out.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "q"] + [f"{k}_exterior_lq" for k in names])
        for t in cfg.kernels["times"]:
            for q in cfg.kernels["q"]:
                w.writerow([repr(float(t)), repr(float(q))] + [repr(kernel_exterior_lq(k, t, q, cfg.n)) for k in names])
    write_summary(out / "kernels.json", _meta(cfg, "kernels", started))
    return EXIT_OK


def cmd_bogovskii(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    b = cfg.bogovskii
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bogovskii.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "mode", "R", "residual_l2", "estimate_ratio", "outside_sup", "seconds"])
        for N in b["N"]:
            grid = Grid(cfg.n, b["L"], N)
            domain = BogovskiiDomain.ball(b["R"]) if b["mode"] == "ball" else BogovskiiDomain.annulus(b["R"])
            f = divergence_datum(grid, b["R"])
            t0 = time.perf_counter()
            v = bogovskii_solve(f, domain)
            res = divergence_residual(v, f)
            outside = float(np.abs(v.values)[:, ~domain.contains(grid.radius)].max(initial=0.0))
            ratio = bogovskii_estimate_ratio(f, domain)
            w.writerow([N, b["mode"], repr(b["R"]), repr(res), repr(ratio), repr(outside),
                        f"{time.perf_counter() - t0:.2f}"])
    write_summary(out / "bogovskii.json", _meta(cfg, "bogovskii", started))
    return EXIT_OK


def _velocity(cfg: RunConfig, sweep_cfg: SweepConfig):
    if cfg.trajectory:
        path = Path(cfg.trajectory)
        if not path.is_absolute() and cfg.source:
            path = Path(cfg.source).parent / path
        if not path.is_file():
            raise ConfigError(f"trajectory manifest not found: {path}")
        return load_trajectory(path)
    return solve_reference(sweep_cfg)


def _sweep_command(cfg: RunConfig, out: Path, name: str, sweep_cfg: SweepConfig, run) -> int:
    started = time.perf_counter()
    v = _velocity(cfg, sweep_cfg)
    res = run(sweep_cfg, v)
    write_report(out / f"{name}.csv", res)
    write_summary(out / f"{name}.json", {**_meta(cfg, name, started), "cells": res.cells, "failures": res.failures,
                                         "sweep": sweep_cfg.to_dict()})
    return EXIT_PARTIAL if res.partial else EXIT_OK


def cmd_sweep_r(cfg: RunConfig, out: Path) -> int:
    return _sweep_command(cfg, out, "sweep_r", cfg.sweep(), sweep_radius)


def cmd_sweep_t(cfg: RunConfig, out: Path) -> int:
    return _sweep_command(cfg, out, "sweep_t", cfg.time_sweep_config(), sweep_time)


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    cfg_r = cfg.sweep()
    # one solve serves both sweeps when it already reaches the sample times
    same = cfg.time_sweep is None and max(cfg.times) <= cfg.T * (1 + 1e-12)
    cfg_t = cfg_r if same else cfg.time_sweep_config()
    res = verify_suite(cfg_r, cfg_t, annulus=cfg.annulus_rows)
    write_report(out / "report.csv", res.rows)
    write_report(out / "annulus.csv", res.annulus)
    summary = {**_meta(cfg, "verify", started), "passed": res.passed, "timings": res.timings,
               "cells": res.cells, "failures": res.failures,
               "rows": {"total": len(res.rows), "failed": sum(r.passed is False for r in res.rows),
                        "not_applicable": sum(r.passed is None for r in res.rows)}}
    write_summary(out / "summary.json", summary)
    return EXIT_OK if res.passed else EXIT_PARTIAL


COMMANDS = {
    "solve": cmd_solve,
    "kernels": cmd_kernels,
    "bogovskii": cmd_bogovskii,
    "sweep-r": cmd_sweep_r,
    "sweep-t": cmd_sweep_t,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nse-transfer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (default: the config's 'output')")
    p.add_argument("--threads", type=int, help="FFT worker cap (env NSE_TRANSFER_THREADS)")
    p.add_argument("--seed", help="hex seed overriding the config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config code
        return EXIT_CONFIG if exc.code else EXIT_OK
    threads = args.threads
    if threads is None and os.environ.get("NSE_TRANSFER_THREADS"):
        try:
            threads = int(os.environ["NSE_TRANSFER_THREADS"])
        except ValueError:
            print("error: NSE_TRANSFER_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    if threads is not None and threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    set_threads(threads or 1)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = _seed(args.seed)
        out = Path(args.out or cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CompatibilityError, DomainError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=str), file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, MemoryError, ArithmeticError, RuntimeError, LookupError) as exc:
        # anything else a run can hit is reported as a solver failure so the exit contract holds
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
