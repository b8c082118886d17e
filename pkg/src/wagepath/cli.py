"""Command-line front end.

Subcommands: weights | policy | simulate | profile | validate.
Global flags: --config PATH, --seed U64, --out DIR, --threads N.
Exit codes: 0 ok, 1 config error, 2 solver failure, 3 admissibility breach,
4 oracle failure.

Every output file starts with '#'-prefixed manifest lines carrying the config
hash, the subcommand, the seed and the grid resolutions, so any run can be
reproduced from its own header.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (AdmissibilityBreach, ConfigError, GridMismatch,
                     HypothesisViolated, InadmissibleState, NoConvergence)
from .params import ModelConfig, validate_hypotheses
from .policy import FeedbackPolicy, StateSnapshot
from .simulate import HistoryBuffer, PathConfig, simulate_lifecycle, theta_series
from .validate import SUITES, run_suite
from .weights import (LagGrid, TimeGrid, residual_check, solve_weights,
                      write_weights_csv)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_ADMISSIBILITY = 3
EXIT_ORACLE = 4


@dataclass
class RunManifest:
    """Reproducibility record embedded in every output file."""

    config_path: str
    config_hash: str
    subcommand: str
    seed: int
    grid: dict
    out_dir: str
    tool_version: str

    @property
    def manifest_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header_lines(self):
        return (
            f"manifest: {json.dumps(asdict(self), sort_keys=True)}",
            f"manifest_hash: {self.manifest_hash}",
            f"generated: {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
        )


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_kv(path: Path, lines, header):
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        for line in lines:
            fh.write(line + "\n")


def _load_history(args, lg: LagGrid) -> HistoryBuffer:
    if getattr(args, "hist_csv", None):
        pts, vals = [], []
        with open(args.hist_csv, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    pts.append(float(row[0]))
                    vals.append(float(row[1]))
                except ValueError:
                    continue
        return HistoryBuffer.from_array(np.interp(lg.points(), pts, vals), lg)
    level = getattr(args, "hist", None)
    if level is None:
        level = getattr(args, "y0", 1.0)
    return HistoryBuffer.flat(float(level), lg)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_weights(cfg: ModelConfig, args, manifest: RunManifest, out: Path) -> int:
    tg = TimeGrid(n_t=args.nt, dt=cfg.income.tau_R / args.nt)
    lg = LagGrid(n_z=args.nz, dz=cfg.income.d / args.nz)
    tbl = solve_weights(cfg, tg, lg, tol=args.tol, max_iter=args.max_iter)
    header = manifest.header_lines()
    write_weights_csv(tbl, out / "weights_g.csv", out / "weights_h.csv", header)
    rep = residual_check(tbl)
    _write_kv(out / "weights_residuals.txt", str(rep).splitlines(), header)
    print(f"solved in {tbl.iterations} iterations "
          f"(mode {tbl.solver_mode}, final defect {tbl.final_defect:.3e})")
    print(f"wrote {out / 'weights_g.csv'} and {out / 'weights_h.csv'}")
    return EXIT_OK


def cmd_policy(cfg: ModelConfig, args, manifest: RunManifest, out: Path) -> int:
    tg, lg = _grids_from_spy(cfg, args.steps_per_year)
    tbl = solve_weights(cfg, tg, lg)
    hist = _load_history(args, lg)
    state = StateSnapshot(t=args.t, w=args.w, y_now=args.y, hist=hist)
    policy = FeedbackPolicy(cfg, tbl)
    ctrl = policy.feedback_controls(state)
    value = policy.value_function(state)
    gamma_tw = policy.total_wealth(state)
    lines = [
        f"t = {args.t}",
        f"w = {args.w}",
        f"y = {args.y}",
        f"total_wealth = {gamma_tw:.10g}",
        f"consumption = {ctrl.c:.10g}",
        f"bequest = {ctrl.B:.10g}",
        *(f"theta_{j + 1} = {v:.10g}" for j, v in enumerate(ctrl.theta)),
        f"value = {value:.10g}",
    ]
    for line in lines:
        print(line)
    _write_kv(out / "policy.txt", lines, manifest.header_lines())
    return EXIT_OK


def _grids_from_spy(cfg: ModelConfig, spy: int):
    from .weights import aligned_grids

    return aligned_grids(cfg.income.tau_R, cfg.income.d, spy)


def _run_lifecycle(cfg, args, seed, record_paths=0, phi_zero=False, horizon=None):
    work_cfg = cfg
    if phi_zero:
        d = cfg.to_dict()
        d["income"]["phi"] = {"kind": "zero"}
        work_cfg = ModelConfig.from_dict(d)
    tg, lg = _grids_from_spy(work_cfg, args.steps_per_year)
    tbl = solve_weights(work_cfg, tg, lg)
    hist = _load_history(args, lg)
    state = StateSnapshot(t=0.0, w=args.w0, y_now=args.y0, hist=hist)
    policy = FeedbackPolicy(work_cfg, tbl)
    pc = PathConfig(dt=tg.dt, horizon=horizon or work_cfg.income.tau_R,
                    n_paths=args.paths, seed=seed,
                    antithetic=not getattr(args, "no_antithetic", False))
    sim = simulate_lifecycle(work_cfg, tbl, policy, pc, state, record=record_paths > 0)
    return work_cfg, tbl, pc, sim


def cmd_simulate(cfg: ModelConfig, args, manifest: RunManifest, out: Path) -> int:
    seed = args.seed
    _, tbl, pc, sim = _run_lifecycle(cfg, args, seed)
    header = manifest.header_lines()
    _write_kv(out / "simulate_summary.txt", sim.summary_lines(), header)

    n_rec = min(args.record_paths, args.paths)
    if n_rec > 0:
        # recorded paths are a prefix of the full run: chunked seeding makes
        # path p's noise independent of the total path count
        from copy import copy

        rec_args = copy(args)
        rec_args.paths = max(2, n_rec + (n_rec % 2))
        wcfg, tbl, pc_rec, rec = _run_lifecycle(cfg, rec_args, seed, record_paths=n_rec)
        th = theta_series(wcfg, rec)
        t_obs = rec.series["t"]
        with open(out / "simulate_paths.csv", "w") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            thcols = ",".join(f"theta_{j + 1}" for j in range(wcfg.n))
            fh.write(f"path_id,t,W,y,Gamma,c,B,{thcols}\n")
            for p in range(n_rec):
                for o, t in enumerate(t_obs):
                    row = [str(p), f"{t:.10g}",
                           f"{rec.series['W'][p, o]:.10g}",
                           f"{rec.series['y'][p, o]:.10g}",
                           f"{rec.series['gamma'][p, o]:.10g}",
                           f"{rec.series['c'][p, o]:.10g}",
                           f"{rec.series['B'][p, o]:.10g}"]
                    row += [f"{th[p, o, j]:.10g}" for j in range(wcfg.n)]
                    fh.write(",".join(row) + "\n")
        print(f"wrote {out / 'simulate_paths.csv'}")
    print("\n".join(sim.summary_lines()))
    return EXIT_OK


def _profile_columns(cfg, sim):
    th = theta_series(cfg, sim)
    gam = sim.series["gamma"]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(gam[..., None] > 0, th / gam[..., None], np.nan)
    cols = {
        "theta_mean": np.nanmean(th, axis=0),             # (n_obs, n)
        "theta_over_gamma_mean": np.nanmean(ratio, axis=0),
        "c_mean": sim.series["c"].mean(axis=0),
        "B_mean": sim.series["B"].mean(axis=0),
        "gamma_mean": gam.mean(axis=0),
        "y_mean": sim.series["y"].mean(axis=0),
    }
    return cols


def cmd_profile(cfg: ModelConfig, args, manifest: RunManifest, out: Path) -> int:
    seed = args.seed
    wcfg, tbl, pc, sim = _run_lifecycle(cfg, args, seed, record_paths=args.paths)
    cols = _profile_columns(wcfg, sim)
    t_obs = sim.series["t"]
    base = {}
    n = wcfg.n
    for j in range(n):
        base[f"theta_mean_{j + 1}"] = cols["theta_mean"][:, j]
        base[f"theta_over_gamma_mean_{j + 1}"] = cols["theta_over_gamma_mean"][:, j]
    for k in ("c_mean", "B_mean", "gamma_mean", "y_mean"):
        base[k] = cols[k]

    if args.compare_phi0:
        _, _, _, sim0 = _run_lifecycle(cfg, args, seed, record_paths=args.paths,
                                       phi_zero=True)
        cols0 = _profile_columns(wcfg, sim0)
        for j in range(n):
            base[f"theta_mean_phi0_{j + 1}"] = cols0["theta_mean"][:, j]
        for k in ("c_mean", "B_mean", "gamma_mean", "y_mean"):
            base[f"{k}_phi0"] = cols0[k]

    path = out / "profile.csv"
    with open(path, "w") as fh:
        for line in manifest.header_lines():
            fh.write(f"# {line}\n")
        keys = list(base.keys())
        fh.write("t," + ",".join(keys) + "\n")
        for o, t in enumerate(t_obs):
            fh.write(f"{t:.10g}," + ",".join(f"{base[k][o]:.10g}" for k in keys) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(cfg: ModelConfig, args, manifest: RunManifest, out: Path) -> int:
    rep = validate_hypotheses(cfg)
    if not rep.ok:
        print(str(rep), file=sys.stderr)
        return EXIT_CONFIG
    suites = [s.strip() for s in args.suite.split(",") if s.strip()]
    tbl = None
    needs_table = bool(set(suites) & {"all", "fast", "substitution", "merton",
                                      "human-capital", "value", "bias"})
    if needs_table:
        tg, lg = _grids_from_spy(cfg, args.steps_per_year)
        tbl = solve_weights(cfg, tg, lg)
    reports = run_suite(cfg, tbl, suites, n_paths=args.paths, seed=args.seed)
    header = manifest.header_lines()
    with open(out / "validate_report.jsonl", "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    lines = [str(r) for r in reports]
    _write_kv(out / "validate_summary.txt", lines, header)
    for line in lines:
        print(line)
    failed = [r for r in reports if r.kind == "oracle" and not r.passed]
    undetected = [r for r in reports if r.kind == "probe" and not r.passed]
    for r in undetected:
        print(f"warning: probe {r.name} was not detected", file=sys.stderr)
    return EXIT_ORACLE if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wagepath",
                                description="Lifecycle policy engine with "
                                            "path-dependent labor income")
    p.add_argument("--config", required=True, help="JSON or TOML model configuration")
    p.add_argument("--seed", type=int, default=20240801)
    p.add_argument("--out", default="wagepath_out", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="numba thread count")
    sub = p.add_subparsers(dest="command", required=True)

    w = sub.add_parser("weights", help="solve the annuity-weight system, dump CSV")
    w.add_argument("--nt", type=int, required=True)
    w.add_argument("--nz", type=int, required=True)
    w.add_argument("--tol", type=float, default=1e-10)
    w.add_argument("--max-iter", type=int, default=10_000)

    pol = sub.add_parser("policy", help="print controls and value at a state")
    pol.add_argument("--t", type=float, required=True)
    pol.add_argument("--w", type=float, required=True)
    pol.add_argument("--y", type=float, required=True)
    pol.add_argument("--hist-csv", default=None, help="two-column (zeta, y) CSV")
    pol.add_argument("--hist", type=float, default=None, help="flat history level")
    pol.add_argument("--steps-per-year", type=int, default=250)

    sim = sub.add_parser("simulate", help="closed-loop lifecycle simulation")
    for sp in (sim,):
        sp.add_argument("--w0", type=float, default=1.0)
        sp.add_argument("--y0", type=float, default=1.0)
        sp.add_argument("--hist", type=float, default=None)
        sp.add_argument("--hist-csv", default=None)
        sp.add_argument("--paths", type=int, default=2000)
        sp.add_argument("--steps-per-year", type=int, default=250)
        sp.add_argument("--no-antithetic", action="store_true")
    sim.add_argument("--record-paths", type=int, default=16)

    prof = sub.add_parser("profile", help="mean allocation/consumption profiles")
    for sp in (prof,):
        sp.add_argument("--w0", type=float, default=0.0)
        sp.add_argument("--y0", type=float, default=1.0)
        sp.add_argument("--hist", type=float, default=None)
        sp.add_argument("--hist-csv", default=None)
        sp.add_argument("--paths", type=int, default=4000)
        sp.add_argument("--steps-per-year", type=int, default=250)
        sp.add_argument("--no-antithetic", action="store_true")
    prof.add_argument("--compare-phi0", action="store_true",
                      help="overlay the same run with the delay kernel zeroed")

    val = sub.add_parser("validate", help="run the oracle suite")
    val.add_argument("--suite", default="all",
                     help=f"comma list from {', '.join(SUITES)} or all/fast")
    val.add_argument("--paths", type=int, default=20_000)
    val.add_argument("--steps-per-year", type=int, default=250)

    return p


_DISPATCH = {
    "weights": cmd_weights,
    "policy": cmd_policy,
    "simulate": cmd_simulate,
    "profile": cmd_profile,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import numba

        numba.set_num_threads(args.threads)
    try:
        cfg = ModelConfig.from_file(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = {k: getattr(args, k) for k in ("nt", "nz", "steps_per_year")
            if hasattr(args, k)}
    manifest = RunManifest(config_path=str(args.config), config_hash=config_hash(cfg),
                           subcommand=args.command, seed=args.seed, grid=grid,
                           out_dir=str(out), tool_version=__version__)
    try:
        return _DISPATCH[args.command](cfg, args, manifest, out)
    except (ConfigError, HypothesisViolated, GridMismatch, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoConvergence as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (AdmissibilityBreach, InadmissibleState) as exc:
        print(f"admissibility failure: {exc}", file=sys.stderr)
        return EXIT_ADMISSIBILITY


if __name__ == "__main__":
    sys.exit(main())
