"""Empirical best-response gap over the decentralized strategies.

For each market size n, the decentralized profile is held fixed while one
firm searches a declared control family for a better response, every
candidate evaluated on identical noise (common random numbers).  The found
improvement is a lower bound on the true equilibrium gap, since the family
is a strict subset of all adapted controls; the claim verified downstream is
that the found gap is small and shrinks as n grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .equilibrium import decentralized_control, solve_mfg
from .params import FirmType, InitDist, MarketParams, Population, make_population
from .reward import RewardEstimate, estimate_reward, paired_gap
from .simulate import (
    Constant,
    ControlLaw,
    Deterministic,
    DeviationContext,
    LinearFeedback,
    PiecewiseConstant,
    SimConfig,
    simulate_market,
)


# ---------------------------------------------------------------------------
# Search families
# ---------------------------------------------------------------------------

class ControlFamily:
    """Finite-dimensional parametrization of candidate deviations."""

    dim: int

    def make(self, params: np.ndarray) -> ControlLaw:
        raise NotImplementedError

    def project(self, u_path: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Parameter vector whose law best mimics the given open-loop path."""
        raise NotImplementedError

    @property
    def name(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class PiecewiseConstantFamily(ControlFamily):
    """k segments on [0, T] with geometrically growing lengths.

    Short segments sit near t = 0 where the limiting-path transients live;
    the last segment extends to the horizon.
    """

    horizon: float
    segments: int = 16
    growth: float = 1.5

    def __post_init__(self):
        if self.segments < 1:
            raise ValueError("need at least one segment")

    @property
    def dim(self) -> int:
        return self.segments

    @property
    def name(self) -> str:
        return f"piecewise_constant(k={self.segments})"

    def breakpoints(self) -> np.ndarray:
        k, g = self.segments, self.growth
        if k == 1:
            return np.array([])
        w = g ** np.arange(k)
        edges = self.horizon * np.cumsum(w) / w.sum()
        return edges[:-1]

    def make(self, params: np.ndarray) -> ControlLaw:
        return PiecewiseConstant(tuple(self.breakpoints()), tuple(np.asarray(params, float)))

    def project(self, u_path: np.ndarray, times: np.ndarray) -> np.ndarray:
        edges = np.concatenate([[0.0], self.breakpoints(), [times[-1] + 1e-12]])
        idx = np.searchsorted(edges, times, side="right") - 1
        return np.array([
            u_path[idx == j].mean() if np.any(idx == j) else 0.0
            for j in range(self.segments)
        ])


@dataclass(frozen=True)
class LinearFeedbackFamily(ControlFamily):
    """u = a0 + b X + k P with three free scalars."""

    @property
    def dim(self) -> int:
        return 3

    @property
    def name(self) -> str:
        return "linear_feedback"

    def make(self, params: np.ndarray) -> ControlLaw:
        a0, b, k = (float(v) for v in params)
        return LinearFeedback(a=a0, b=b, k=k)

    def project(self, u_path: np.ndarray, times: np.ndarray) -> np.ndarray:
        rho_w = np.exp(-times / max(times[-1], 1.0))
        return np.array([float(np.average(u_path, weights=rho_w)), 0.0, 0.0])


def family_from_name(name: str, horizon: float, segments: int = 16) -> ControlFamily:
    if name == "piecewise_constant":
        return PiecewiseConstantFamily(horizon=horizon, segments=segments)
    if name == "linear_feedback":
        return LinearFeedbackFamily()
    raise ValueError(f"unknown control family {name!r}")


# ---------------------------------------------------------------------------
# Best-response search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchResult:
    law: ControlLaw
    reward: RewardEstimate
    n_evaluations: int
    budget_exhausted: bool


def best_response_search(pop: Population, market: MarketParams, i: int,
                         family: ControlFamily, budget: int, cfg: SimConfig,
                         base_laws=None, ctx: DeviationContext | None = None
                         ) -> SearchResult:
    """Derivative-free reward maximization for firm i over the family.

    Starts from the projection of the firm's decentralized strategy onto the
    family and runs Nelder-Mead under a fixed evaluation budget; every
    candidate is simulated with the same noise.  Candidates with negative
    estimated reward are never retained as incumbents (a firm would rather
    do nothing), mirroring the rational-choice restriction.
    """
    if budget < family.dim + 1:
        raise ValueError("budget must cover at least dim + 1 evaluations")
    if base_laws is None:
        eq = solve_mfg(market, pop.limit_type)
        base_laws = [Deterministic(decentralized_control(eq, th)) for th in pop.types]
    if ctx is None:
        ctx = DeviationContext(pop, base_laws, i, market, cfg)
    times = ctx.base.times
    rho = market.rho

    base_i = base_laws[i]
    if isinstance(base_i, Deterministic):
        u_star_path = base_i.sample_path(times)
    else:
        u_star_path = np.zeros_like(times)
    x0_params = family.project(u_star_path, times)

    incumbent: dict = {"params": None, "est": None}
    n_eval = 0

    def objective(params):
        nonlocal n_eval
        n_eval += 1
        traj = ctx.evaluate(family.make(params))
        est = estimate_reward(traj, i, pop.types[i], family.make(params), rho,
                              keep_samples=True)
        better = incumbent["est"] is None or est.mean > incumbent["est"].mean
        if est.mean >= 0 and better:
            incumbent["params"] = np.array(params, dtype=float)
            incumbent["est"] = est
        return -est.mean

    objective(x0_params)
    remaining = budget - n_eval
    if remaining > 0:
        minimize(
            objective, x0_params, method="Nelder-Mead",
            options={"maxfev": remaining, "xatol": 1e-10, "fatol": 1e-12},
        )
    if incumbent["est"] is None:
        # even the projection is irrational at this horizon; fall back to inaction
        objective(np.zeros(family.dim))
        if incumbent["est"] is None:
            zero = family.make(np.zeros(family.dim))
            traj = ctx.evaluate(zero)
            incumbent["params"] = np.zeros(family.dim)
            incumbent["est"] = estimate_reward(traj, i, pop.types[i], zero, rho,
                                               keep_samples=True)
    return SearchResult(
        law=family.make(incumbent["params"]),
        reward=incumbent["est"],
        n_evaluations=n_eval,
        budget_exhausted=n_eval >= budget,
    )


# ---------------------------------------------------------------------------
# Gap curve and mean-field convergence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GapReport:
    n: int
    firm: int
    baseline_reward: RewardEstimate
    best_found_reward: RewardEstimate
    gap: float
    gap_stderr: float
    family: str
    budget: int
    seed: int


def gap_curve(market: MarketParams, limit_type: FirmType, n_list, cfg: SimConfig,
              family_name: str = "piecewise_constant", budget: int = 400,
              segments: int = 16, init_dist: InitDist | None = None,
              firm: int = 0) -> list[GapReport]:
    """Best-response improvement of one firm for each market size in n_list.

    The same grid and path count are used throughout; only the firm count
    and the stream seed vary across n (fresh seeds across sizes, common
    random numbers within each search).
    """
    if list(n_list) != sorted(n_list):
        raise ValueError("n_list must be ascending")
    eq = solve_mfg(market, limit_type)
    times = cfg.grid.times()
    family = family_from_name(family_name, horizon=float(times[-1]), segments=segments)
    if init_dist is None:
        # the limiting mean initial output must match the market's x0
        init_dist = InitDist(family="lognormal", mean=market.x0, variance=0.25)
    reports = []
    for n in n_list:
        pop = make_population(n, limit_type, init_dist=init_dist)
        laws = [Deterministic(decentralized_control(eq, th)) for th in pop.types]
        cfg_n = SimConfig(
            grid=cfg.grid, n_paths=cfg.n_paths, seed=cfg.seed + n,
            scheme=cfg.scheme, jump_scheme=cfg.jump_scheme, store_firms=(firm,),
        )
        ctx = DeviationContext(pop, laws, firm, market, cfg_n)
        baseline = estimate_reward(ctx.base, firm, pop.types[firm], laws[firm],
                                   market.rho, keep_samples=True)
        result = best_response_search(pop, market, firm, family, budget, cfg_n,
                                      base_laws=laws, ctx=ctx)
        gap, gap_se = paired_gap(result.reward, baseline)
        reports.append(GapReport(
            n=n, firm=firm, baseline_reward=baseline, best_found_reward=result.reward,
            gap=gap, gap_stderr=gap_se, family=family.name, budget=budget, seed=cfg_n.seed,
        ))
    return reports


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    sup_gap_price: float      # max_t E[|P^(n)_t - limiting price|^2]
    sup_gap_output: float     # max_t E[|mean output - limiting output|^2]
    moment_bound: float       # max_t E[P^2 + Xbar^2]
    seed: int


def convergence_check(market: MarketParams, limit_type: FirmType, n_list,
                      cfg: SimConfig, init_dist: InitDist | None = None
                      ) -> list[ConvergenceRow]:
    """Squared deviation of the finite-n aggregates from the limiting paths.

    Also tabulates the uniform second-moment bound, which should show no
    growth trend in n.
    """
    eq = solve_mfg(market, limit_type)
    times = cfg.grid.times()
    m_p = eq.m_P.eval(times)
    m_x = eq.m_X.eval(times)
    if init_dist is None:
        init_dist = InitDist(family="lognormal", mean=market.x0, variance=0.25)
    rows = []
    for n in n_list:
        pop = make_population(n, limit_type, init_dist=init_dist)
        laws = [Deterministic(decentralized_control(eq, th)) for th in pop.types]
        cfg_n = SimConfig(grid=cfg.grid, n_paths=cfg.n_paths, seed=cfg.seed + n,
                          scheme=cfg.scheme, jump_scheme=cfg.jump_scheme, store_firms=())
        traj = simulate_market(pop, laws, market, cfg_n)
        keep = ~traj.flagged
        xbar = traj.X_bar[keep]
        P = traj.P[keep]
        gp = float(np.max(np.mean((P - m_p) ** 2, axis=0)))
        gx = float(np.max(np.mean((xbar - m_x) ** 2, axis=0)))
        mb = float(np.max(np.mean(P**2 + xbar**2, axis=0)))
        rows.append(ConvergenceRow(n=n, sup_gap_price=gp, sup_gap_output=gx,
                                   moment_bound=mb, seed=cfg_n.seed))
    return rows


def loglog_slope(ns, values) -> float:
    """Least-squares slope of log(value) against log(n)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)),
                            np.log(np.asarray(values, float)), 1)[0])
