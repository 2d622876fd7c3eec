"""Limiting-game equilibrium: characteristic cubic, closed forms, fixed point.

The mean price path solves a third-order linear ODE whose characteristic
cubic K^3 + (alpha-rho) K^2 - A K - B has exactly one positive root; the
bounded solution lives on the span of the other two modes.  Coefficients are
always derived from the two initial conditions (price level and slope) on
that span, which reproduces the printed two-real-root and repeated-root
formulas and stays well defined when the remaining pair is complex.

An independent numerical route to the same object is provided by the
integral operator `apply_L` (mean output induced by the best response to an
assumed mean output) and its Picard iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .exppoly import ExpPoly
from .params import FirmType, MarketParams, validate_firm, validate_market

ROOT_RESIDUAL_TOL = 1e-9
COEFF_IDENTITY_TOL = 1e-9


class NumericalInconsistencyError(RuntimeError):
    """Root finding or branch agreement failed in a way valid parameters forbid."""


class GridTooCoarseError(RuntimeError):
    """Estimated quadrature error exceeds the requested tolerance."""


# ---------------------------------------------------------------------------
# Characteristic cubic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CharacteristicData:
    """Cubic coefficients, discriminant, classified roots and bounded modes."""

    A: float
    B: float
    delta: float
    case_tag: str  # 'three_real' | 'repeated_root' | 'complex_pair'
    roots: tuple[complex, complex, complex]  # with multiplicity, positive root last
    positive_root: float
    bounded_modes: tuple[tuple[complex, int], ...]  # (rate, power) basis of bounded span


def _cubic_AB(market: MarketParams, theta: FirmType) -> tuple[float, float]:
    mu, rho, alpha = theta.mu, market.rho, market.alpha
    A = mu**2 + rho * mu + alpha * rho
    B = alpha * (mu * (mu + rho) + (1 - theta.lam * theta.gamma) * (1 - theta.c) / (2 * theta.r))
    return A, B


def _discriminant(b: float, A: float, B: float) -> float:
    return -27 * B**2 + (18 * b * A + 4 * b**3) * B + (b**2 * A**2 + 4 * A**3)


def _newton_polish(b, A, B, k, iters=2):
    for _ in range(iters):
        f = k**3 + b * k**2 - A * k - B
        fp = 3 * k**2 + 2 * b * k - A
        if fp == 0:
            break
        k = k - f / fp
    return k


def _delta_tol(b: float, A: float, B: float) -> float:
    return 1e-8 * max(1.0, B**2, A**3, abs(b) ** 6)


def characteristic(market: MarketParams, theta: FirmType) -> CharacteristicData:
    """Solve and classify the characteristic cubic K^3 + b K^2 - A K - B.

    Roots come from the trigonometric / Cardano closed form on the depressed
    cubic, each followed by a Newton polish.  The discriminant decides the
    classification, with near-zero values (relative to the coefficient scale)
    treated as a repeated root.
    """
    if not validate_firm(theta) or not validate_market(market):
        raise ValueError("invalid parameters")
    b = market.alpha - market.rho
    A, B = _cubic_AB(market, theta)
    delta = _discriminant(b, A, B)
    tol = _delta_tol(b, A, B)

    # depressed cubic y^3 + p y + q, K = y - b/3
    p = -(b**2 / 3 + A)
    q = 2 * b**3 / 27 + A * b / 3 - B

    if abs(delta) <= tol:
        # double root at the negative critical point of the cubic
        k1 = (-b - np.sqrt(b**2 + 3 * A)) / 3
        k3 = -b - 2 * k1
        case = "repeated_root"
        roots = (complex(k1), complex(k1), complex(k3))
        modes = ((complex(k1), 0), (complex(k1), 1))
        kpos = k3
    elif delta > 0:
        m = 2 * np.sqrt(-p / 3)
        theta0 = np.arccos(np.clip(3 * q / (p * m), -1.0, 1.0))
        ys = [m * np.cos(theta0 / 3 - 2 * np.pi * k / 3) for k in range(3)]
        ks = sorted(_newton_polish(b, A, B, y - b / 3) for y in ys)
        k1, k2, k3 = ks
        if not (k1 < k2 < 0 < k3):
            raise NumericalInconsistencyError(f"unexpected real-root ordering {ks}")
        case = "three_real"
        roots = (complex(k1), complex(k2), complex(k3))
        modes = ((complex(k1), 0), (complex(k2), 0))
        kpos = k3
    else:
        # one real root (the positive one), complex pair from deflation
        s = np.sqrt(q**2 / 4 + p**3 / 27)
        u = np.cbrt(-q / 2 + s) if q <= 0 else np.cbrt(-q / 2 - s)
        y1 = u - p / (3 * u)
        k3 = _newton_polish(b, A, B, y1 - b / 3)
        kr = -(b + k3) / 2
        disc = 4 * B / k3 - (b + k3) ** 2
        if k3 <= 0 or disc <= 0:
            raise NumericalInconsistencyError("complex-pair deflation failed")
        ki = np.sqrt(disc) / 2
        if kr >= 0:
            raise NumericalInconsistencyError("complex pair has nonnegative real part")
        case = "complex_pair"
        roots = (complex(kr, ki), complex(kr, -ki), complex(k3))
        modes = ((complex(kr, ki), 0), (complex(kr, -ki), 0))
        kpos = k3

    if kpos <= 0:
        raise NumericalInconsistencyError("no positive real root found")
    scale = max(1.0, abs(B))
    for rt in roots:
        res = abs(rt**3 + b * rt**2 - A * rt - B)
        if case == "repeated_root" and rt == roots[0]:
            # a double root only zeroes the cubic to sqrt precision; check f'
            res = min(res, abs(3 * rt**2 + 2 * b * rt - A))
        if res > ROOT_RESIDUAL_TOL * scale:
            raise NumericalInconsistencyError(f"root residual {res:.3e} too large at {rt}")
    return CharacteristicData(
        A=A, B=B, delta=delta, case_tag=case, roots=roots,
        positive_root=float(kpos), bounded_modes=modes,
    )


def stationary_price(market: MarketParams, theta: FirmType) -> float:
    """Long-run price alpha*mu*beta*(mu+rho)/B."""
    _, B = _cubic_AB(market, theta)
    return market.alpha * theta.mu * market.beta * (theta.mu + market.rho) / B


# ---------------------------------------------------------------------------
# Closed-form equilibrium
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MfgEquilibrium:
    """Closed-form limiting paths and representative value-function pieces."""

    m_P: ExpPoly
    m_X: ExpPoly
    u_star: ExpPoly
    g: ExpPoly
    h: ExpPoly
    p_star: float
    char: CharacteristicData
    market: MarketParams
    theta: FirmType


def _mp_from_modes(modes, p_star, p0, slope) -> ExpPoly:
    """Bounded-span price path fixed by value and slope at t = 0."""
    d = p0 - p_star
    (ka, pa), (kb, pb) = modes
    if pa == 0 and pb == 0:
        if ka == kb:
            raise NumericalInconsistencyError("degenerate distinct-mode pair")
        a1 = (-slope + d * kb) / (kb - ka)
        a2 = (slope - d * ka) / (kb - ka)
        if abs(ka.imag) > 0:
            a2 = np.conj(a1)  # enforce exact conjugacy for real evaluation
        terms = ((a1, ka, 0), (a2, kb, 0))
    else:
        # repeated root: span of e^{Kt} and t e^{Kt}
        k1 = ka
        terms = ((complex(d), k1, 0), (complex(slope - k1 * d), k1, 1))
    return ExpPoly(terms) + ExpPoly.constant(p_star)


def solve_mfg(market: MarketParams, theta: FirmType) -> MfgEquilibrium:
    """Closed-form mean price / output / control paths and (g, h).

    m_P is the stationary price plus the bounded characteristic modes with
    coefficients set by m_P(0) = p0 and m_P'(0) = alpha[beta - (1-lam*gamma)x0
    - p0].  m_X and u* follow algebraically from the coupled first-order
    system; g and h are exact discounted tail integrals.
    """
    char = characteristic(market, theta)
    p_star = stationary_price(market, theta)
    one_m_lg = 1 - theta.lam * theta.gamma
    slope = market.alpha * (market.beta - one_m_lg * market.x0 - market.p0)
    m_P = _mp_from_modes(char.bounded_modes, p_star, market.p0, slope)

    # near the classification boundary both branches must agree on the path
    b = market.alpha - market.rho
    tol = _delta_tol(b, char.A, char.B)
    if 0 < abs(char.delta) <= 100 * tol and char.case_tag != "repeated_root":
        k1 = (-b - np.sqrt(b**2 + 3 * char.A)) / 3
        alt = _mp_from_modes(((complex(k1), 0), (complex(k1), 1)), p_star, market.p0, slope)
        ts = np.linspace(0.0, 50.0, 501)
        if np.max(np.abs(m_P.eval(ts) - alt.eval(ts))) > 1e-6:
            raise NumericalInconsistencyError("branch disagreement near repeated-root boundary")

    m_X = (ExpPoly.constant(market.beta) - m_P - m_P.derivative().scale(1 / market.alpha)).scale(
        1 / one_m_lg
    )
    u_star = m_X.derivative() + m_X.scale(theta.mu)
    g = m_P.tail_transform(theta.mu + market.rho).scale(1 - theta.c)
    h = (g * g).tail_transform(market.rho).scale(1 / (4 * theta.r))
    return MfgEquilibrium(
        m_P=m_P, m_X=m_X, u_star=u_star, g=g, h=h,
        p_star=p_star, char=char, market=market, theta=theta,
    )


def representative_control(eq: MfgEquilibrium, theta: FirmType) -> ExpPoly:
    """Optimal open-loop control of the representative firm: g / (2r)."""
    return eq.g.scale(1 / (2 * theta.r))


def decentralized_control(eq: MfgEquilibrium, theta_i: FirmType) -> ExpPoly:
    """Firm-specific strategy from the limiting price path only.

    Uses the firm's own (mu_i, rho)-discounted tail integral of the mean
    price, so heterogeneous firms get heterogeneous strategies.
    """
    gi = eq.m_P.tail_transform(theta_i.mu + eq.market.rho).scale(1 - theta_i.c)
    return gi.scale(1 / (2 * theta_i.r))


def residual_diagnostics(eq: MfgEquilibrium) -> dict[str, float]:
    """Max coefficient magnitude of each defining-identity residual.

    All residuals normalize to the zero function for an exact solution;
    values are relative to the natural coefficient scale of each identity.
    """
    market, theta = eq.market, eq.theta
    alpha, rho, mu = market.alpha, market.rho, theta.mu
    one_m_lg = 1 - theta.lam * theta.gamma
    b = alpha - rho
    A, B = eq.char.A, eq.char.B

    d1 = eq.m_P.derivative()
    d2 = d1.derivative()
    d3 = d2.derivative()
    third = d3 + d2.scale(b) - d1.scale(A) - eq.m_P.scale(B) + ExpPoly.constant(
        alpha * mu * market.beta * (mu + rho)
    )
    scale3 = max(1.0, B * eq.m_P.max_coeff())

    sys1 = d1 - (ExpPoly.constant(market.beta) - eq.m_X.scale(one_m_lg) - eq.m_P).scale(alpha)
    sys2 = eq.m_X.derivative() - (eq.u_star - eq.m_X.scale(mu))
    sys3 = eq.u_star.derivative() - (
        eq.u_star.scale(mu + rho) - eq.m_P.scale((1 - theta.c) / (2 * theta.r))
    )
    gode = eq.g.derivative() - (eq.g.scale(mu + rho) - eq.m_P.scale(1 - theta.c))
    hode = eq.h.derivative() - eq.h.scale(rho) + (eq.g * eq.g).scale(1 / (4 * theta.r))
    scale1 = max(1.0, alpha * eq.m_P.max_coeff())
    return {
        "third_order": third.max_coeff() / scale3,
        "system_price": sys1.max_coeff() / scale1,
        "system_output": sys2.max_coeff() / max(1.0, eq.m_X.max_coeff()),
        "system_control": sys3.max_coeff() / max(1.0, eq.u_star.max_coeff()),
        "g_ode": gode.max_coeff() / max(1.0, eq.g.max_coeff()),
        "h_ode": hode.max_coeff() / max(1.0, eq.h.max_coeff()),
    }


# ---------------------------------------------------------------------------
# Integral operator and Picard iteration (independent numerical route)
# ---------------------------------------------------------------------------

def _if_trapezoid_forward(forcing: np.ndarray, decay: float, dt: float, y0: float) -> np.ndarray:
    """y' = -decay*y + f by exact integrating factor with trapezoidal forcing."""
    E = np.exp(-decay * dt)
    b_coef = [dt / 2, dt / 2 * E]
    y, _ = lfilter(b_coef, [1.0, -E], forcing, zi=np.array([y0 - b_coef[0] * forcing[0]]))
    return y


def _if_trapezoid_backward(values: np.ndarray, kappa: float, dt: float, y_end: float) -> np.ndarray:
    """y_t = int_t^inf e^{-kappa(s-t)} v_s ds on a grid, given the terminal tail."""
    E = np.exp(-kappa * dt)
    rev = values[::-1]
    b_coef = [dt / 2, dt / 2 * E]
    y, _ = lfilter(b_coef, [1.0, -E], rev, zi=np.array([y_end - b_coef[0] * rev[0]]))
    return y[::-1]


@dataclass(frozen=True)
class LResult:
    values: np.ndarray
    err_bound: float


def _apply_L_once(m_x, market, theta, dt, tail_tol):
    """One evaluation of the operator on an (internally extended) grid."""
    alpha, beta, rho, mu = market.alpha, market.beta, market.rho, theta.mu
    one_m_lg = 1 - theta.lam * theta.gamma
    n = m_x.size

    # extend far enough that the neglected tail of the g-integral is < tail_tol
    m_bound = max(abs(market.p0), abs(beta) + abs(one_m_lg) * float(np.max(np.abs(m_x))))
    kappa = mu + rho
    extra_time = max(0.0, np.log(max(m_bound, 1.0) / (kappa * tail_tol)) / kappa)
    n_extra = int(np.ceil(extra_time / dt))
    m_x_ext = np.concatenate([m_x, np.full(n_extra, m_x[-1])])

    forcing = alpha * (beta - one_m_lg * m_x_ext)
    m_p = _if_trapezoid_forward(forcing, alpha, dt, market.p0)
    g_end = (1 - theta.c) * m_p[-1] / kappa
    g = _if_trapezoid_backward((1 - theta.c) * m_p, kappa, dt, g_end)
    out = _if_trapezoid_forward(g / (2 * theta.r), mu, dt, market.x0)
    return out[:n]


def apply_L(
    m_x_grid: np.ndarray,
    market: MarketParams,
    theta: FirmType,
    dt: float,
    tail_tol: float = 1e-10,
    quad_tol: float | None = None,
) -> LResult:
    """Mean output induced by the best response to an assumed mean output.

    Numerically chains three linear first-order problems on a uniform grid:
    the price relaxation driven by m_X, the discounted tail integral giving
    the control, and the controlled mean-output recursion.  Each uses an
    exact exponential integrating factor with trapezoidal forcing, so the
    scheme is second order; the reported error bound is a Richardson
    estimate against the double-step grid plus the tail truncation budget.
    """
    m_x_grid = np.asarray(m_x_grid, dtype=float)
    if m_x_grid.ndim != 1 or m_x_grid.size < 3:
        raise ValueError("m_x_grid must be a 1-D array with at least 3 points")
    fine = _apply_L_once(m_x_grid, market, theta, dt, tail_tol)
    n_even = m_x_grid.size - (1 - m_x_grid.size % 2)  # odd length -> even step count
    coarse = _apply_L_once(m_x_grid[: n_even : 2], market, theta, 2 * dt, tail_tol)
    err = float(np.max(np.abs(fine[: n_even : 2] - coarse))) / 3 + tail_tol
    if quad_tol is not None and err > quad_tol:
        raise GridTooCoarseError(f"estimated quadrature error {err:.3e} > {quad_tol:.3e}")
    return LResult(values=fine, err_bound=err)


@dataclass(frozen=True)
class PicardResult:
    m_X: np.ndarray
    residuals: tuple[float, ...]
    converged: bool
    n_iter: int
    err_bound: float


def picard_solve(
    market: MarketParams,
    theta: FirmType,
    times: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
    tail_tol: float = 1e-10,
) -> PicardResult:
    """Iterate the integral operator from the uncontrolled mean x0 e^{-mu t}.

    Stops when the sup-norm change drops below tol; non-convergence is a
    status on the result, not an exception.
    """
    times = np.asarray(times, dtype=float)
    dt = float(times[1] - times[0])
    m = market.x0 * np.exp(-theta.mu * times)
    residuals = []
    err_bound = tail_tol
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        res = apply_L(m, market, theta, dt, tail_tol=tail_tol)
        err_bound = res.err_bound
        change = float(np.max(np.abs(res.values - m)))
        residuals.append(change)
        m = res.values
        if change < tol:
            converged = True
            break
    return PicardResult(
        m_X=m, residuals=tuple(residuals), converged=converged,
        n_iter=it, err_bound=err_bound,
    )
