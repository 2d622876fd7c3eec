"""Parameter containers, stability-condition validation, and population generation.

Firm types carry (mu, sigma, gamma, lambda, r, c); the market carries the
price-adjustment and discounting constants.  Validation enforces the two
stability conditions sigma^2 < 2 mu and 1 - gamma*lambda > 0 under which the
uncontrolled output vanishes and expected cumulative output stays nonnegative.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class FirmType:
    """Per-firm parameter vector.

    mu: depreciation rate (>0); sigma: output volatility (>0); gamma: loss
    ratio per jump (>0); lam: jump intensity (>0); r: quadratic control cost
    (>0); c: production cost ratio in (0, 1).
    """

    mu: float
    sigma: float
    gamma: float
    lam: float
    r: float
    c: float


@dataclass(frozen=True)
class MarketParams:
    """Shared constants of the price dynamics and discounting.

    alpha: price adjustment speed (>0); beta: demand level (>0); rho:
    discount rate (>0); p0: initial price; x0: limiting mean initial output.
    """

    alpha: float
    beta: float
    rho: float
    p0: float
    x0: float


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def validate_firm(theta: FirmType) -> ValidationReport:
    """Check positivity, c in (0,1), sigma^2 < 2 mu and 1 - gamma*lambda > 0."""
    violations = []
    for name in ("mu", "sigma", "gamma", "lam", "r"):
        v = getattr(theta, name)
        if not (np.isfinite(v) and v > 0):
            violations.append(f"{name}>0")
    if not (np.isfinite(theta.c) and 0 < theta.c < 1):
        violations.append("c in (0,1)")
    if not theta.sigma**2 < 2 * theta.mu:
        violations.append("sigma^2<2mu")
    if not 1 - theta.gamma * theta.lam > 0:
        violations.append("1-gamma*lambda>0")
    return ValidationReport(ok=not violations, violations=tuple(violations))


def validate_market(market: MarketParams) -> ValidationReport:
    violations = []
    for name in ("alpha", "beta", "rho"):
        v = getattr(market, name)
        if not (np.isfinite(v) and v > 0):
            violations.append(f"{name}>0")
    for name in ("p0", "x0"):
        if not np.isfinite(getattr(market, name)):
            violations.append(f"{name} finite")
    if np.isfinite(market.p0) and market.p0 <= 0:
        # The model tolerates negative prices, so this is a warning only.
        warnings.warn("p0 <= 0: permitted, but outside the usual regime", stacklevel=2)
    return ValidationReport(ok=not violations, violations=tuple(violations))


@dataclass(frozen=True)
class InitDist:
    """Initial-output law for one firm.

    family 'lognormal' keeps outputs positive with the requested mean and
    variance; 'point' is a degenerate point mass used by exact-oracle tests.
    """

    family: str = "lognormal"
    mean: float = 1.0
    variance: float = 0.25

    def __post_init__(self):
        if self.family not in ("lognormal", "point"):
            raise ValueError(f"unknown init_dist family {self.family!r}")
        if self.family == "lognormal" and self.mean <= 0:
            raise ValueError("lognormal init_dist needs mean > 0")
        if self.variance < 0 or not np.isfinite(self.variance):
            raise ValueError("init_dist variance must be finite and >= 0")

    @property
    def second_moment(self) -> float:
        return self.mean**2 + (self.variance if self.family == "lognormal" else 0.0)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.family == "point" or self.variance == 0:
            return np.full(size, self.mean)
        s2 = np.log1p(self.variance / self.mean**2)
        mu_log = np.log(self.mean) - s2 / 2
        return rng.lognormal(mean=mu_log, sigma=np.sqrt(s2), size=size)


@dataclass(frozen=True)
class HeterogeneitySchedule:
    """Multiplicative perturbations (1 + delta * s_i / i) with Rademacher signs.

    delta maps field name -> magnitude; fields absent are left at the limit
    value.  Perturbations shrink like 1/i so the types converge to the limit
    type, and the schedule is rejected up front if its worst case could break
    the stability conditions for any firm.
    """

    delta: dict[str, float] = field(default_factory=dict)

    _FIELDS = ("mu", "sigma", "gamma", "lam", "r", "c")

    def __post_init__(self):
        for name, d in self.delta.items():
            if name not in self._FIELDS:
                raise ValueError(f"unknown firm-type field {name!r}")
            if not (0 <= d < 1):
                raise ValueError(f"delta for {name!r} must lie in [0, 1)")

    @property
    def is_zero(self) -> bool:
        return all(d == 0 for d in self.delta.values())

    def worst_case(self, limit_type: FirmType) -> FirmType:
        """The i=1 corner that stresses both stability conditions hardest."""

        def lo(name):
            return getattr(limit_type, name) * (1 - self.delta.get(name, 0.0))

        def hi(name):
            return getattr(limit_type, name) * (1 + self.delta.get(name, 0.0))

        return FirmType(
            mu=lo("mu"), sigma=hi("sigma"), gamma=hi("gamma"),
            lam=hi("lam"), r=lo("r"), c=min(hi("c"), 1 - 1e-12),
        )

    def perturb(self, limit_type: FirmType, i: int, signs: dict[str, int]) -> FirmType:
        """Type of firm i (1-based) given per-field signs in {-1, +1}."""
        values = {}
        for name in self._FIELDS:
            d = self.delta.get(name, 0.0)
            values[name] = getattr(limit_type, name) * (1 + d * signs.get(name, 1) / i)
        return FirmType(**values)


@dataclass(frozen=True)
class Population:
    """n firm types converging to a limit type, plus per-firm initial laws."""

    n: int
    types: tuple[FirmType, ...]
    init_dist: tuple[InitDist, ...]
    limit_type: FirmType

    def __post_init__(self):
        if self.n < 1 or len(self.types) != self.n or len(self.init_dist) != self.n:
            raise ValueError("population shape mismatch")
        for i, theta in enumerate(self.types):
            report = validate_firm(theta)
            if not report:
                raise ValueError(f"firm {i} invalid: {report.violations}")
        if not all(np.isfinite(d.second_moment) for d in self.init_dist):
            raise ValueError("initial second moments must be finite")

    @property
    def mean_initial_output(self) -> float:
        return float(np.mean([d.mean for d in self.init_dist]))


def make_population(
    n: int,
    limit_type: FirmType,
    heterogeneity: HeterogeneitySchedule | None = None,
    seed: int = 0,
    init_dist: InitDist | None = None,
) -> Population:
    """Build a population of n types shrinking toward limit_type like 1/i.

    Deterministic given the seed: per-firm perturbation signs come from a
    seeded generator.  Raises if the limit type is invalid or if the
    schedule's worst case violates the stability conditions.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    report = validate_firm(limit_type)
    if not report:
        raise ValueError(f"limit_type invalid: {report.violations}")
    heterogeneity = heterogeneity or HeterogeneitySchedule()
    if not heterogeneity.is_zero:
        worst = heterogeneity.worst_case(limit_type)
        if not validate_firm(worst):
            raise ValueError(
                "heterogeneity schedule can violate stability conditions "
                f"(worst case at i=1: {validate_firm(worst).violations})"
            )
    dist = init_dist or InitDist(family="lognormal", mean=1.0, variance=0.25)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x706F70)))
    types = []
    for i in range(1, n + 1):
        if heterogeneity.is_zero:
            types.append(limit_type)
        else:
            signs = {
                name: int(1 if rng.random() < 0.5 else -1)
                for name in heterogeneity._FIELDS
            }
            types.append(heterogeneity.perturb(limit_type, i, signs))
    return Population(n=n, types=tuple(types), init_dist=(dist,) * n, limit_type=limit_type)
