"""Unit tests for parameter validation and population generation."""

import numpy as np
import pytest
from dataclasses import replace

from sticky_mfg.params import (
    FirmType,
    HeterogeneitySchedule,
    InitDist,
    MarketParams,
    make_population,
    validate_firm,
    validate_market,
)


GOOD = FirmType(mu=1.0, sigma=1.0, gamma=0.5, lam=0.5, r=0.25, c=0.5)
GOOD_MARKET = MarketParams(alpha=1.0, beta=2.0, rho=0.5, p0=1.0, x0=1.0)


def test_valid_firm_passes():
    rep = validate_firm(GOOD)
    assert rep and not rep.violations


@pytest.mark.parametrize("field,value,violation", [
    ("sigma", 1.5, "sigma^2<2mu"),      # sigma^2 = 2.25 > 2 mu
    ("gamma", 2.5, "1-gamma*lambda>0"),
    ("mu", -1.0, "mu>0"),
    ("r", 0.0, "r>0"),
    ("c", 1.0, "c in (0,1)"),
    ("c", 0.0, "c in (0,1)"),
])
def test_invalid_firm_reports_violation(field, value, violation):
    rep = validate_firm(replace(GOOD, **{field: value}))
    assert not rep
    assert violation in rep.violations


def test_valid_market_passes():
    assert validate_market(GOOD_MARKET)


def test_market_violations():
    rep = validate_market(replace(GOOD_MARKET, alpha=0.0, rho=-1.0))
    assert set(rep.violations) == {"alpha>0", "rho>0"}


def test_nonpositive_initial_price_warns_but_passes():
    with pytest.warns(UserWarning):
        rep = validate_market(replace(GOOD_MARKET, p0=-0.5))
    assert rep.ok


def test_init_dist_moments_and_sampling():
    d = InitDist(family="lognormal", mean=1.5, variance=0.4)
    assert abs(d.second_moment - (1.5**2 + 0.4)) < 1e-14
    x = d.sample(np.random.default_rng(0), 200_000)
    assert np.all(x > 0)
    assert abs(x.mean() - 1.5) < 0.01
    assert abs(x.var() - 0.4) < 0.02


def test_init_dist_point_mass():
    d = InitDist(family="point", mean=0.7, variance=0.0)
    assert np.all(d.sample(np.random.default_rng(0), 10) == 0.7)
    assert d.second_moment == pytest.approx(0.49)


def test_init_dist_rejects_bad_input():
    with pytest.raises(ValueError):
        InitDist(family="gaussian")
    with pytest.raises(ValueError):
        InitDist(family="lognormal", mean=-1.0)
    with pytest.raises(ValueError):
        InitDist(variance=-0.1)


def test_heterogeneity_shrinks_like_one_over_i():
    sched = HeterogeneitySchedule(delta={"mu": 0.2, "c": 0.1})
    pop = make_population(50, GOOD, sched, seed=3)
    for i, th in enumerate(pop.types, start=1):
        assert abs(th.mu - GOOD.mu) <= 0.2 * GOOD.mu / i + 1e-15
        assert abs(th.c - GOOD.c) <= 0.1 * GOOD.c / i + 1e-15
        assert th.sigma == GOOD.sigma


def test_heterogeneity_worst_case_rejected():
    # gamma*lam = 0.72 at the limit, but up to 0.72 * 1.3^2 > 1 at i = 1
    tight = replace(GOOD, gamma=0.8, lam=0.9)
    sched = HeterogeneitySchedule(delta={"gamma": 0.3, "lam": 0.3})
    with pytest.raises(ValueError):
        make_population(4, tight, sched)


def test_heterogeneity_rejects_unknown_field():
    with pytest.raises(ValueError):
        HeterogeneitySchedule(delta={"alpha": 0.1})


def test_population_deterministic_in_seed():
    sched = HeterogeneitySchedule(delta={"mu": 0.3})
    a = make_population(8, GOOD, sched, seed=42)
    b = make_population(8, GOOD, sched, seed=42)
    c = make_population(8, GOOD, sched, seed=43)
    assert a.types == b.types
    assert a.types != c.types


def test_symmetric_population_is_limit_type_everywhere():
    pop = make_population(5, GOOD)
    assert all(th == GOOD for th in pop.types)
    assert pop.limit_type == GOOD
    assert pop.mean_initial_output == pytest.approx(1.0)


def test_population_shape_validation():
    with pytest.raises(ValueError):
        make_population(0, GOOD)
    with pytest.raises(ValueError):
        make_population(3, replace(GOOD, sigma=2.0))
