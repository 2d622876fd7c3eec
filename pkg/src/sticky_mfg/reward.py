"""Discounted reward estimation and the exact closed-form reward oracles.

Monte Carlo estimates integrate e^{-rho t} [(1-c) P X - r u^2] path by path
with trapezoidal quadrature on the simulation grid and report an explicit
truncation bound.  In the representative setting the same functional has an
exact value: the optimum g(0) x0 + h(0) minus a quadratic penalty in the
distance of the control from g/(2r), computable in closed form for
exponential-polynomial controls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exppoly import DivergenceError, ExpPoly
from .equilibrium import MfgEquilibrium
from .params import FirmType
from .simulate import ControlLaw, Deterministic, LinearFeedback, TrajectorySet


@dataclass(frozen=True)
class RewardEstimate:
    mean: float
    std_err: float
    n_paths: int
    horizon: float
    tail_bound: float
    n_excluded: int = 0
    samples: np.ndarray | None = None  # per-path integrals, for paired comparisons

    def __post_init__(self):
        if self.std_err < 0 or self.tail_bound < 0:
            raise ValueError("std_err and tail_bound must be nonnegative")


def _control_values(law: ControlLaw, traj: TrajectorySet, X: np.ndarray) -> np.ndarray:
    """Realized control per path on the grid."""
    if isinstance(law, LinearFeedback):
        return law.intercept_path(traj.times)[None, :] + law.b * X + law.k * traj.P
    return np.broadcast_to(law.sample_path(traj.times), X.shape)


def estimate_reward(traj: TrajectorySet, i: int, theta_i: FirmType, law_i: ControlLaw,
                    rho: float, keep_samples: bool = False) -> RewardEstimate:
    """Monte Carlo estimate of firm i's discounted reward on the grid.

    Flagged (overflow-aborted) paths are excluded and counted.  The tail
    bound discounts the empirical envelope of the integrand at the horizon.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    X = traj.firm_output(i)
    u = _control_values(law_i, traj, X)
    times = traj.times
    payoff = (1 - theta_i.c) * traj.P * X - theta_i.r * u**2
    integrand = np.exp(-rho * times) * payoff
    keep = ~traj.flagged
    samples = np.trapezoid(integrand[keep], times, axis=1)
    n = samples.size
    if n == 0:
        raise RuntimeError("every path was flagged; nothing to estimate")
    envelope = float(np.mean(np.abs(payoff[keep, -1])))
    tail = np.exp(-rho * times[-1]) * envelope / rho
    return RewardEstimate(
        mean=float(samples.mean()),
        std_err=float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        n_paths=n, horizon=float(times[-1]), tail_bound=float(tail),
        n_excluded=int(traj.flagged.sum()),
        samples=samples if keep_samples else None,
    )


def paired_gap(a: RewardEstimate, b: RewardEstimate) -> tuple[float, float]:
    """Mean and standard error of a - b using per-path paired differences.

    Both estimates must come from common-random-numbers runs on the same
    paths; pairing removes the shared noise from the difference.
    """
    if a.samples is None or b.samples is None:
        raise ValueError("both estimates need keep_samples=True")
    if a.samples.size != b.samples.size:
        raise ValueError("path counts differ; not a paired comparison")
    d = a.samples - b.samples
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    return float(d.mean()), se


def _as_exppoly(u) -> ExpPoly | None:
    if isinstance(u, ExpPoly):
        return u
    if isinstance(u, Deterministic) and isinstance(u.path, ExpPoly):
        return u.path
    return None


def rho_norm_sq(u, rho: float, times: np.ndarray | None = None,
                traj: TrajectorySet | None = None, firm: int | None = None) -> float:
    """Squared discounted norm int_0^inf e^{-rho t} E[u_t^2] dt.

    Exact for exponential-polynomial controls; trapezoidal quadrature on a
    grid for sampled paths; Monte Carlo over a trajectory set for feedback
    laws (firm index required to reconstruct the realized control).
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    poly = _as_exppoly(u)
    if poly is not None:
        sq = poly * poly
        if sq.max_real_rate() >= rho - 1e-12:
            raise DivergenceError("discounted norm diverges: rate >= rho/2 in the control")
        return (sq).tail_transform(rho).eval(0.0)
    if isinstance(u, LinearFeedback):
        if traj is None or firm is None:
            raise ValueError("feedback law needs a trajectory set and firm index")
        X = traj.firm_output(firm)
        vals = _control_values(u, traj, X)
        keep = ~traj.flagged
        return float(np.mean(np.trapezoid(np.exp(-rho * traj.times) * vals[keep] ** 2,
                                      traj.times, axis=1)))
    if isinstance(u, ControlLaw):
        if times is None:
            if traj is None:
                raise ValueError("open-loop law needs a time grid")
            times = traj.times
        vals = u.sample_path(times)
        return float(np.trapezoid(np.exp(-rho * times) * vals**2, times))
    vals = np.asarray(u, dtype=float)
    if times is None:
        raise ValueError("sampled control needs a time grid")
    return float(np.trapezoid(np.exp(-rho * times) * vals**2, times))


def rho_norm(u, rho: float, **kw) -> float:
    return float(np.sqrt(rho_norm_sq(u, rho, **kw)))


def limiting_reward_closed_form(u, eq: MfgEquilibrium, theta: FirmType, x0: float,
                                times: np.ndarray | None = None) -> float:
    """Exact limiting reward g(0) x0 + h(0) - r * ||u - g/(2r)||_rho^2.

    For an exponential-polynomial control the penalty integral is evaluated
    in closed form; for a grid-sampled control it falls back to trapezoidal
    quadrature, treating the control beyond the grid as optimal (zero tail
    penalty).
    """
    rho = eq.market.rho
    optimum = eq.g.eval(0.0) * x0 + eq.h.eval(0.0)
    u_star = eq.g.scale(1 / (2 * theta.r))
    poly = _as_exppoly(u)
    if poly is not None:
        diff = poly - u_star
        return optimum - theta.r * rho_norm_sq(diff, rho)
    if isinstance(u, ControlLaw):
        if times is None:
            raise ValueError("grid-sampled control needs a time grid")
        vals = u.sample_path(times)
    else:
        vals = np.asarray(u, dtype=float)
        if times is None:
            raise ValueError("grid-sampled control needs a time grid")
    diff = vals - u_star.eval(times)
    penalty = float(np.trapezoid(np.exp(-rho * times) * diff**2, times))
    return optimum - theta.r * penalty


def default_horizon(eq: MfgEquilibrium, rel_tol: float = 1e-4) -> float:
    """Horizon T with the discounted stationary-flow tail below rel_tol
    of the optimal reward magnitude."""
    rho = eq.market.rho
    m_x_inf = (eq.market.beta - eq.p_star) / (1 - eq.theta.lam * eq.theta.gamma)
    flow = max(1.0, abs(eq.p_star) * abs(m_x_inf))
    target = rel_tol * max(abs(eq.g.eval(0.0) * eq.market.x0 + eq.h.eval(0.0)), 1e-12)
    return float(np.log(flow / (rho * target)) / rho)
