"""Exact calculus on exponential-polynomial functions.

An :class:`ExpPoly` represents f(t) = Re[ sum_j c_j * t^{m_j} * e^{K_j t} ]
with complex coefficients c_j and rates K_j and integer powers m_j >= 0.
The class is closed under addition, scaling, products, differentiation and
discounted tail integration t -> int_t^inf e^{-kappa (s-t)} f(s) ds, which is
everything the closed-form equilibrium objects need.

Oscillatory modes are kept as conjugate complex pairs rather than separate
cos/sin bases so that all three root configurations of the characteristic
cubic go through a single code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb, factorial

import numpy as np

# Two numerically-close rates are merged during normalization.
RATE_MERGE_TOL = 1e-12
# Nothing in the model exceeds degree 2 (a squared double root); the cap
# catches logic errors before they eat memory.
MAX_POWER = 4
# Allowed relative imaginary residual at evaluation time.
IMAG_TOL = 1e-10


class ExpPolyError(ValueError):
    """Base class for exponential-polynomial failures."""


class ImaginaryResidualError(ExpPolyError):
    """Evaluation produced a non-cancelling imaginary part (malformed terms)."""


class DivergenceError(ExpPolyError):
    """A tail integral or discounted norm does not converge."""


def _normalize(terms):
    """Merge terms sharing (rate, power), drop zero coefficients.

    Rates equal within RATE_MERGE_TOL (absolute) are treated as identical;
    the merged rate is the coefficient-magnitude-weighted mean so repeated
    cubic roots computed numerically collapse to a single mode.
    """
    groups: list[list] = []  # each: [rate, power, coeff, weight]
    for coeff, rate, power in terms:
        coeff = complex(coeff)
        rate = complex(rate)
        power = int(power)
        if power < 0:
            raise ExpPolyError(f"negative power {power}")
        if power > MAX_POWER:
            raise ExpPolyError(f"power {power} exceeds cap {MAX_POWER}")
        if coeff == 0:
            continue
        for g in groups:
            if g[1] == power and abs(g[0] - rate) <= RATE_MERGE_TOL:
                w = abs(coeff)
                tot = g[3] + w
                if tot > 0:
                    g[0] = (g[0] * g[3] + rate * w) / tot
                g[2] += coeff
                g[3] = tot
                break
        else:
            groups.append([rate, power, coeff, abs(coeff)])
    out = tuple(
        (g[2], g[0], g[1])
        for g in sorted(groups, key=lambda g: (g[0].real, g[0].imag, g[1]))
        if g[2] != 0
    )
    return out


@dataclass(frozen=True)
class ExpPoly:
    """Finite sum of c * t^m * e^{K t} terms; value is the real part."""

    terms: tuple[tuple[complex, complex, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", _normalize(self.terms))

    # -- constructors -------------------------------------------------------

    @staticmethod
    def constant(value: float) -> "ExpPoly":
        return ExpPoly(((complex(value), 0j, 0),))

    @staticmethod
    def zero() -> "ExpPoly":
        return ExpPoly(())

    @staticmethod
    def exponential(coeff, rate, power: int = 0) -> "ExpPoly":
        return ExpPoly(((complex(coeff), complex(rate), int(power)),))

    # -- evaluation ---------------------------------------------------------

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        """Evaluate at t >= 0 (scalar or array); checks the imaginary residual."""
        tarr = np.asarray(t, dtype=float)
        total = np.zeros(tarr.shape, dtype=complex)
        scale = np.zeros(tarr.shape, dtype=float)
        for coeff, rate, power in self.terms:
            term = coeff * tarr**power * np.exp(rate * tarr)
            total += term
            scale += np.abs(term)
        bad = np.abs(total.imag) > IMAG_TOL * np.maximum(1.0, scale)
        if np.any(bad):
            raise ImaginaryResidualError(
                "imaginary residual %.3e exceeds tolerance; terms are not "
                "conjugate-closed" % float(np.max(np.abs(total.imag)))
            )
        out = total.real
        return float(out) if np.isscalar(t) or tarr.ndim == 0 else out

    # -- calculus -----------------------------------------------------------

    def derivative(self) -> "ExpPoly":
        """Term-wise d/dt: c t^m e^{Kt} -> c m t^{m-1} e^{Kt} + c K t^m e^{Kt}."""
        out = []
        for coeff, rate, power in self.terms:
            if power > 0:
                out.append((coeff * power, rate, power - 1))
            out.append((coeff * rate, rate, power))
        return ExpPoly(tuple(out))

    def tail_transform(self, kappa: float) -> "ExpPoly":
        """Closed form of t -> int_t^inf e^{-kappa (s-t)} f(s) ds.

        Requires kappa > Re(K) for every rate K.  For a term c s^m e^{Ks},
        substituting s = t + v gives e^{Kt} * sum_j C(m,j) t^{m-j} j! /
        (kappa-K)^{j+1}, a degree-m polynomial times the same exponential.
        """
        out = []
        for coeff, rate, power in self.terms:
            gap = kappa - rate
            if gap.real <= RATE_MERGE_TOL:
                raise DivergenceError(
                    f"tail integral diverges: kappa={kappa} <= Re(rate)={rate.real}"
                )
            for j in range(power + 1):
                out.append(
                    (coeff * comb(power, j) * factorial(j) / gap ** (j + 1), rate, power - j)
                )
        return ExpPoly(tuple(out))

    # -- algebra ------------------------------------------------------------

    def __add__(self, other: "ExpPoly") -> "ExpPoly":
        return ExpPoly(self.terms + other.terms)

    def __sub__(self, other: "ExpPoly") -> "ExpPoly":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "ExpPoly":
        return ExpPoly(tuple((coeff * a, rate, power) for coeff, rate, power in self.terms))

    def __mul__(self, other: "ExpPoly") -> "ExpPoly":
        out = []
        for c1, k1, m1 in self.terms:
            for c2, k2, m2 in other.terms:
                out.append((c1 * c2, k1 + k2, m1 + m2))
        return ExpPoly(tuple(out))

    # -- structure ----------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def max_coeff(self) -> float:
        """Largest coefficient magnitude; a residual scale for identity checks."""
        return max((abs(c) for c, _, _ in self.terms), default=0.0)

    def max_real_rate(self) -> float:
        return max((k.real for _, k, _ in self.terms), default=-np.inf)

    @property
    def is_bounded(self) -> bool:
        """True when no term can grow: Re(K) <= 0 and power 0 on Re(K) = 0."""
        for _, rate, power in self.terms:
            if rate.real > RATE_MERGE_TOL:
                return False
            if abs(rate.real) <= RATE_MERGE_TOL and power > 0:
                return False
        return True

    def is_negligible(self, tol: float, scale: float = 1.0) -> bool:
        """True when every coefficient is below tol * max(1, scale)."""
        return self.max_coeff() <= tol * max(1.0, scale)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> list[dict]:
        return [
            {
                "coeff_re": c.real,
                "coeff_im": c.imag,
                "rate_re": k.real,
                "rate_im": k.imag,
                "power": m,
            }
            for c, k, m in self.terms
        ]

    @staticmethod
    def from_dict(rows: list[dict]) -> "ExpPoly":
        return ExpPoly(
            tuple(
                (
                    complex(r["coeff_re"], r["coeff_im"]),
                    complex(r["rate_re"], r["rate_im"]),
                    int(r["power"]),
                )
                for r in rows
            )
        )
