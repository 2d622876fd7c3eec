"""Shared fixtures: reference parameters, randomized samplers, reporting.

The randomized samplers only emit parameter sets satisfying the stability
conditions.  Sets destined for fixed-point iteration tests are additionally
screened on the contraction factor (1-c)(1-gamma lam)/(2 r mu (mu+rho)),
since Picard iteration is only guaranteed to converge when the consistency
map is a contraction.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq

from sticky_mfg.equilibrium import characteristic
from sticky_mfg.params import FirmType, MarketParams, validate_firm, validate_market

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def std_theta() -> FirmType:
    return FirmType(mu=1.0, sigma=1.0, gamma=0.5, lam=0.5, r=0.25, c=0.5)


@pytest.fixture
def std_market() -> MarketParams:
    return MarketParams(alpha=1.0, beta=2.0, rho=0.5, p0=1.0, x0=1.0)


def sample_valid(rng: np.random.Generator, contraction_max: float | None = None
                 ) -> tuple[MarketParams, FirmType]:
    """One random parameter set passing every validation check."""
    while True:
        mu = rng.uniform(0.5, 2.0)
        sigma = rng.uniform(0.2, 0.95 * np.sqrt(2 * mu))
        gl = rng.uniform(0.1, 0.7)
        gamma = rng.uniform(0.2, 1.0)
        lam = gl / gamma
        r = rng.uniform(0.2, 1.0)
        c = rng.uniform(0.3, 0.8)
        theta = FirmType(mu=mu, sigma=sigma, gamma=gamma, lam=lam, r=r, c=c)
        market = MarketParams(
            alpha=rng.uniform(0.5, 2.0), beta=rng.uniform(1.0, 3.0),
            rho=rng.uniform(0.3, 1.0), p0=rng.uniform(0.5, 2.0),
            x0=rng.uniform(0.5, 2.0),
        )
        if contraction_max is not None:
            factor = (1 - c) * (1 - gl) / (2 * r * mu * (mu + market.rho))
            if factor > contraction_max:
                continue
        if validate_firm(theta) and validate_market(market):
            return market, theta


def random_bounded_exppoly(rng: np.random.Generator, max_terms: int = 3):
    """Random decaying exponential polynomial, conjugate-closed by construction."""
    from sticky_mfg.exppoly import ExpPoly

    while True:
        terms = []
        for _ in range(int(rng.integers(1, max_terms + 1))):
            power = int(rng.integers(0, 4))
            k_re = -float(rng.uniform(0.05, 2.0))
            c = complex(rng.uniform(-2, 2), rng.uniform(-2, 2))
            if rng.random() < 0.5:
                k = complex(k_re, rng.uniform(0.3, 3.0))
                terms.append((c, k, power))
                terms.append((np.conj(c), np.conj(k), power))
            else:
                terms.append((complex(c.real), complex(k_re), power))
        ep = ExpPoly(tuple(terms))
        if not ep.is_zero:
            return ep


def sample_repeated_root(rng: np.random.Generator,
                         max_tries: int = 200) -> tuple[MarketParams, FirmType]:
    """A parameter set sitting on the discriminant-zero boundary.

    Random sampling essentially never lands on the boundary, so it is
    manufactured: starting from a random valid set, the control cost r is
    tuned by root finding until the cubic discriminant crosses zero.
    """
    for _ in range(max_tries):
        market, theta = sample_valid(rng)

        def delta_of_r(r):
            return characteristic(market, replace(theta, r=r)).delta

        lo, hi = 0.05, 20.0
        if delta_of_r(lo) * delta_of_r(hi) > 0:
            continue
        r_star = brentq(delta_of_r, lo, hi, xtol=1e-15, rtol=8.9e-16)
        theta_star = replace(theta, r=r_star)
        if validate_firm(theta_star):
            ch = characteristic(market, theta_star)
            if ch.case_tag == "repeated_root":
                return market, theta_star
    raise RuntimeError("could not manufacture a repeated-root parameter set")
