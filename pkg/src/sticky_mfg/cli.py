"""Command-line orchestration: config ingestion, pipelines, result emission.

One JSON config document drives every subcommand; unknown keys are rejected
so that a typo in a parameter name fails loudly instead of silently running
defaults.  Every run writes its delimited output, a rendered figure, and a
manifest carrying the config hash so results can be traced to their inputs.

Exit codes: 0 success, 1 validation failure, 2 config/parse failure,
3 numerical failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

import click
import numpy as np

from . import report
from .equilibrium import (
    GridTooCoarseError,
    NumericalInconsistencyError,
    characteristic,
    decentralized_control,
    picard_solve,
    representative_control,
    residual_diagnostics,
    solve_mfg,
)
from .exppoly import ExpPolyError
from .params import (
    FirmType,
    HeterogeneitySchedule,
    InitDist,
    MarketParams,
    make_population,
    validate_firm,
    validate_market,
)
from .reward import default_horizon, estimate_reward, limiting_reward_closed_form
from .simulate import Deterministic, PathGrid, SimConfig, simulate_market
from .nashgap import convergence_check, gap_curve, loglog_slope

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARSE = 2
EXIT_NUMERICAL = 3

SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


def _fmt(x: float) -> str:
    """17 significant digits: round-trips exactly through repr."""
    return format(float(x), ".17g")


def _take(doc: dict, context: str, allowed: dict):
    """Pull keys with defaults, rejecting anything unknown."""
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {context}: {sorted(unknown)}")
    return {k: doc.get(k, d) for k, d in allowed.items()}


@dataclass
class RunConfig:
    market: MarketParams
    limit_type: FirmType
    n: int
    n_list: list[int]
    heterogeneity: HeterogeneitySchedule
    init_dist: InitDist
    sim: SimConfig
    reward_horizon: float | None
    gap_family: str
    gap_segments: int
    gap_budget: int
    seed: int
    out_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()
        ).hexdigest()[:16]


def load_config(path: str, seed=None, out=None, paths=None, dt=None, horizon=None) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    top = _take(doc, "config", {
        "schema_version": None, "market": None, "limit_type": None,
        "population": {}, "sim": {}, "reward": {}, "nashgap": {},
        "seed": 0, "out_dir": "out",
    })
    if top["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    for req in ("market", "limit_type"):
        if not isinstance(top[req], dict):
            raise ConfigError(f"missing or invalid section {req!r}")

    mk = _take(top["market"], "market",
               {"alpha": None, "beta": None, "rho": None, "p0": None, "x0": None})
    for k, v in mk.items():
        if not isinstance(v, (int, float)):
            raise ConfigError(f"market.{k} missing or not a number")
    lt = _take(top["limit_type"], "limit_type",
               {"mu": None, "sigma": None, "gamma": None, "lambda": None, "r": None, "c": None})
    for k, v in lt.items():
        if not isinstance(v, (int, float)):
            raise ConfigError(f"limit_type.{k} missing or not a number")
    lt["lam"] = lt.pop("lambda")

    popdoc = _take(top["population"], "population",
                   {"n": 16, "n_list": None, "heterogeneity": {}, "init_dist": {}})
    het = HeterogeneitySchedule(delta=_take(
        popdoc["heterogeneity"], "population.heterogeneity",
        {k: 0.0 for k in ("mu", "sigma", "gamma", "lam", "r", "c")},
    ))
    het = HeterogeneitySchedule(delta={k: v for k, v in het.delta.items() if v})
    idoc = _take(popdoc["init_dist"], "population.init_dist",
                 {"family": "lognormal", "mean": mk["x0"], "variance": 0.25})
    init_dist = InitDist(**idoc)

    simdoc = _take(top["sim"], "sim", {
        "dt": 0.01, "n_steps": 4000, "n_paths": 2000,
        "jump_scheme": "per_step_poisson", "store_firms": None,
    })
    rdoc = _take(top["reward"], "reward", {"horizon": None})
    gdoc = _take(top["nashgap"], "nashgap",
                 {"family": "piecewise_constant", "segments": 16, "budget": 400})

    seed_val = int(seed if seed is not None else top["seed"])
    if paths is not None:
        simdoc["n_paths"] = int(paths)
    if dt is not None:
        simdoc["n_steps"] = max(1, int(round(simdoc["dt"] * simdoc["n_steps"] / float(dt))))
        simdoc["dt"] = float(dt)
    if horizon is not None:
        simdoc["n_steps"] = max(1, int(round(float(horizon) / simdoc["dt"])))

    try:
        market = MarketParams(**{k: float(v) for k, v in mk.items()})
        limit_type = FirmType(**{k: float(v) for k, v in lt.items()})
        grid = PathGrid(dt=float(simdoc["dt"]), n_steps=int(simdoc["n_steps"]))
        store = simdoc["store_firms"]
        sim = SimConfig(
            grid=grid, n_paths=int(simdoc["n_paths"]), seed=seed_val,
            jump_scheme=simdoc["jump_scheme"],
            store_firms=None if store is None else tuple(int(i) for i in store),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    raw = dict(doc)
    raw["_overrides"] = {"seed": seed_val, "paths": simdoc["n_paths"],
                         "dt": simdoc["dt"], "n_steps": simdoc["n_steps"]}
    return RunConfig(
        market=market, limit_type=limit_type,
        n=int(popdoc["n"]),
        n_list=[int(x) for x in (popdoc["n_list"] or [popdoc["n"]])],
        heterogeneity=het, init_dist=init_dist, sim=sim,
        reward_horizon=rdoc["horizon"],
        gap_family=gdoc["family"], gap_segments=int(gdoc["segments"]),
        gap_budget=int(gdoc["budget"]),
        seed=seed_val, out_dir=str(out if out is not None else top["out_dir"]),
        raw=raw,
    )


def _write_manifest(rc: RunConfig, command: str, files: list[str], t0: float):
    manifest = {
        "command": command,
        "config_hash": rc.config_hash(),
        "seed": rc.seed,
        "package": "sticky-mfg 0.1.0",
        "wall_clock_s": time.time() - t0,
        "files": files,
    }
    path = os.path.join(rc.out_dir, f"{command}_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="JSON config file")(fn)
    fn = click.option("--seed", type=int, default=None, help="override config seed")(fn)
    fn = click.option("--out", type=click.Path(), default=None, help="override output dir")(fn)
    fn = click.option("--paths", type=int, default=None, help="override path count")(fn)
    fn = click.option("--dt", type=float, default=None, help="override step size")(fn)
    fn = click.option("--horizon", type=float, default=None, help="override horizon T")(fn)
    return fn


def _load_or_exit(config_path, **overrides) -> RunConfig:
    try:
        rc = load_config(config_path, **overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_PARSE)
    os.makedirs(rc.out_dir, exist_ok=True)
    return rc


def _validate_or_exit(rc: RunConfig):
    rep_t = validate_firm(rc.limit_type)
    rep_m = validate_market(rc.market)
    if not (rep_t and rep_m):
        for v in rep_t.violations + rep_m.violations:
            click.echo(f"violation: {v}", err=True)
        sys.exit(EXIT_VALIDATION)


@click.group()
def main():
    """Sticky-price production game: closed-form equilibrium and Monte Carlo checks."""
    threads = os.environ.get("STICKY_MFG_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


@main.command()
@_common_options
def validate(config_path, seed, out, paths, dt, horizon):
    """Parse the config and run every parameter validation."""
    rc = _load_or_exit(config_path, seed=seed, out=out, paths=paths, dt=dt, horizon=horizon)
    rep_t = validate_firm(rc.limit_type)
    rep_m = validate_market(rc.market)
    if rep_t and rep_m:
        click.echo("OK")
        sys.exit(EXIT_OK)
    for v in rep_t.violations + rep_m.violations:
        click.echo(f"violation: {v}")
    sys.exit(EXIT_VALIDATION)


@main.command()
@_common_options
def equilibrium(config_path, seed, out, paths, dt, horizon):
    """Solve the limiting game and export closed-form paths and diagnostics."""
    t0 = time.time()
    rc = _load_or_exit(config_path, seed=seed, out=out, paths=paths, dt=dt, horizon=horizon)
    _validate_or_exit(rc)
    try:
        eq = solve_mfg(rc.market, rc.limit_type)
        diag = residual_diagnostics(eq)
    except (NumericalInconsistencyError, ExpPolyError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    times = rc.sim.grid.times()
    cols = {
        "t": times, "m_P": eq.m_P.eval(times), "m_X": eq.m_X.eval(times),
        "u_star": eq.u_star.eval(times), "g": eq.g.eval(times), "h": eq.h.eval(times),
    }
    csv_path = os.path.join(rc.out_dir, "equilibrium.csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in zip(*cols.values()):
            fh.write(",".join(_fmt(v) for v in row) + "\n")

    ch = eq.char
    summary = {
        "A": ch.A, "B": ch.B, "delta": ch.delta, "case": ch.case_tag,
        "roots": [[r.real, r.imag] for r in ch.roots],
        "p_star": eq.p_star,
        "residual_diagnostics": diag,
        "config_hash": rc.config_hash(),
    }
    sum_path = os.path.join(rc.out_dir, "characteristic.json")
    with open(sum_path, "w") as fh:
        json.dump(summary, fh, indent=2)

    terms_path = os.path.join(rc.out_dir, "equilibrium_terms.json")
    with open(terms_path, "w") as fh:
        json.dump({name: poly.to_dict() for name, poly in
                   [("m_P", eq.m_P), ("m_X", eq.m_X), ("u_star", eq.u_star),
                    ("g", eq.g), ("h", eq.h)]}, fh, indent=2)

    fig_path = os.path.join(rc.out_dir, "equilibrium.png")
    report.save_equilibrium_figure(fig_path, times, cols["m_P"], cols["m_X"],
                                   cols["u_star"], eq.p_star)
    _write_manifest(rc, "equilibrium", [csv_path, sum_path, terms_path, fig_path], t0)
    if max(diag.values()) > 1e-8:
        click.echo(f"residual diagnostics above threshold: {diag}", err=True)
        sys.exit(EXIT_NUMERICAL)
    click.echo(f"case={ch.case_tag} p*={_fmt(eq.p_star)} -> {csv_path}")


@main.command()
@_common_options
def simulate(config_path, seed, out, paths, dt, horizon):
    """Simulate the finite-n market under the decentralized strategies."""
    t0 = time.time()
    rc = _load_or_exit(config_path, seed=seed, out=out, paths=paths, dt=dt, horizon=horizon)
    _validate_or_exit(rc)
    try:
        eq = solve_mfg(rc.market, rc.limit_type)
        pop = make_population(rc.n, rc.limit_type, rc.heterogeneity,
                              seed=rc.seed, init_dist=rc.init_dist)
        laws = [Deterministic(decentralized_control(eq, th)) for th in pop.types]
        traj = simulate_market(pop, laws, rc.market, rc.sim)
    except (NumericalInconsistencyError, ExpPolyError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    npz_path = os.path.join(rc.out_dir, "trajectories.npz")
    np.savez_compressed(
        npz_path, version=1, config_hash=rc.config_hash(), times=traj.times,
        P=traj.P, X=traj.X, jumps=traj.jumps, X_sum=traj.X_sum,
        stored_firms=np.array(traj.stored_firms), flagged=traj.flagged,
        n_firms=traj.n_firms, seed=traj.seed,
    )
    csv_path = os.path.join(rc.out_dir, "trajectories.csv")
    export_paths = min(traj.P.shape[0], 20)  # long format stays reviewable
    with open(csv_path, "w") as fh:
        fh.write("path,firm,t,X,P,jumps\n")
        for p in range(export_paths):
            for s, i in enumerate(traj.stored_firms):
                for k, t in enumerate(traj.times):
                    j = traj.jumps[p, s, k - 1] if k > 0 else 0
                    fh.write(f"{p},{i},{_fmt(t)},{_fmt(traj.X[p, s, k])},"
                             f"{_fmt(traj.P[p, k])},{j}\n")
    fig_path = os.path.join(rc.out_dir, "trajectories.png")
    report.save_trajectory_figure(fig_path, traj.times, traj.P, traj.X_bar)
    _write_manifest(rc, "simulate", [npz_path, csv_path, fig_path], t0)
    click.echo(f"flagged={int(traj.flagged.sum())} -> {npz_path}")


@main.command()
@_common_options
def reward(config_path, seed, out, paths, dt, horizon):
    """Estimate decentralized-strategy rewards and compare with the oracle."""
    t0 = time.time()
    rc = _load_or_exit(config_path, seed=seed, out=out, paths=paths, dt=dt, horizon=horizon)
    _validate_or_exit(rc)
    try:
        eq = solve_mfg(rc.market, rc.limit_type)
        horizon_t = rc.reward_horizon or default_horizon(eq)
        n_steps = max(1, int(round(horizon_t / rc.sim.grid.dt)))
        grid = PathGrid(dt=rc.sim.grid.dt, n_steps=n_steps)
        pop = make_population(rc.n, rc.limit_type, rc.heterogeneity,
                              seed=rc.seed, init_dist=rc.init_dist)
        laws = [Deterministic(decentralized_control(eq, th)) for th in pop.types]
        cfg = SimConfig(grid=grid, n_paths=rc.sim.n_paths, seed=rc.seed,
                        jump_scheme=rc.sim.jump_scheme, store_firms=(0,))
        traj = simulate_market(pop, laws, rc.market, cfg)
        est = estimate_reward(traj, 0, pop.types[0], laws[0], rc.market.rho)
        oracle = limiting_reward_closed_form(
            decentralized_control(eq, pop.types[0]), eq, pop.types[0], rc.market.x0)
    except (NumericalInconsistencyError, ExpPolyError, GridTooCoarseError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    csv_path = os.path.join(rc.out_dir, "reward.csv")
    with open(csv_path, "w") as fh:
        fh.write("n,firm,law,mean,std_err,T,tail_bound,seed\n")
        fh.write(f"{rc.n},0,decentralized,{_fmt(est.mean)},{_fmt(est.std_err)},"
                 f"{_fmt(est.horizon)},{_fmt(est.tail_bound)},{rc.seed}\n")
        fh.write(f"{rc.n},0,limiting_oracle,{_fmt(oracle)},0,inf,0,{rc.seed}\n")
    fig_path = os.path.join(rc.out_dir, "reward.png")
    report.save_reward_figure(fig_path, ["finite-n MC", "limiting oracle"],
                              [est.mean, oracle], [est.std_err, 0.0])
    _write_manifest(rc, "reward", [csv_path, fig_path], t0)
    click.echo(f"reward {_fmt(est.mean)} +- {_fmt(est.std_err)} (oracle {_fmt(oracle)})")


@main.command()
@_common_options
def gap(config_path, seed, out, paths, dt, horizon):
    """Measure the best-response gap across market sizes."""
    t0 = time.time()
    rc = _load_or_exit(config_path, seed=seed, out=out, paths=paths, dt=dt, horizon=horizon)
    _validate_or_exit(rc)
    try:
        reports = gap_curve(rc.market, rc.limit_type, rc.n_list, rc.sim,
                            family_name=rc.gap_family, budget=rc.gap_budget,
                            segments=rc.gap_segments, init_dist=rc.init_dist)
    except (NumericalInconsistencyError, ExpPolyError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    csv_path = os.path.join(rc.out_dir, "gap.csv")
    with open(csv_path, "w") as fh:
        fh.write("n,firm,family,budget,baseline,best,gap,gap_stderr,seed\n")
        for r in reports:
            fh.write(f"{r.n},{r.firm},{r.family},{r.budget},"
                     f"{_fmt(r.baseline_reward.mean)},{_fmt(r.best_found_reward.mean)},"
                     f"{_fmt(r.gap)},{_fmt(r.gap_stderr)},{r.seed}\n")
    fig_path = os.path.join(rc.out_dir, "gap.png")
    report.save_gap_figure(fig_path, [r.n for r in reports], [r.gap for r in reports],
                           [r.gap_stderr for r in reports])
    _write_manifest(rc, "gap", [csv_path, fig_path], t0)
    for r in reports:
        click.echo(f"n={r.n} gap={_fmt(r.gap)} +- {_fmt(r.gap_stderr)}")


@main.command()
@_common_options
def fixedpoint(config_path, seed, out, paths, dt, horizon):
    """Solve the consistency fixed point by Picard iteration and cross-check."""
    t0 = time.time()
    rc = _load_or_exit(config_path, seed=seed, out=out, paths=paths, dt=dt, horizon=horizon)
    _validate_or_exit(rc)
    try:
        eq = solve_mfg(rc.market, rc.limit_type)
        times = rc.sim.grid.times()
        result = picard_solve(rc.market, rc.limit_type, times)
        closed = eq.m_X.eval(times)
        final_gap = float(np.max(np.abs(result.m_X - closed)))
    except (NumericalInconsistencyError, ExpPolyError, GridTooCoarseError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    csv_path = os.path.join(rc.out_dir, "fixedpoint.csv")
    with open(csv_path, "w") as fh:
        fh.write("iteration,sup_norm_change\n")
        for k, r in enumerate(result.residuals, start=1):
            fh.write(f"{k},{_fmt(r)}\n")
    fig_path = os.path.join(rc.out_dir, "fixedpoint.png")
    report.save_picard_figure(fig_path, result.residuals, final_gap)
    _write_manifest(rc, "fixedpoint", [csv_path, fig_path], t0)
    click.echo(f"converged={result.converged} iterations={result.n_iter} "
               f"sup-distance to closed form={_fmt(final_gap)} "
               f"quadrature bound={_fmt(result.err_bound)}")
    if not result.converged:
        sys.exit(EXIT_NUMERICAL)


if __name__ == "__main__":
    main()
