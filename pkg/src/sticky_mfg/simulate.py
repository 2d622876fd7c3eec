"""Monte Carlo engine for the finite-n market with Poisson loss jumps.

Firm outputs follow Euler-Maruyama on the controlled geometric dynamics;
the price relaxes toward demand-minus-average-output and picks up jump marks
gamma_i * X_{t-} at each firm's Poisson arrivals.

Randomness policy: one counter-based Philox stream per (seed, firm, process
tag).  A firm's Gaussian increments, jump increments, and initial draw never
depend on how many other firms exist, which is what makes common-random-
numbers deviation runs exact and results independent of execution order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from .exppoly import ExpPoly
from .params import MarketParams, Population

OVERFLOW_LIMIT = 1e12

_TAG_CODES = {"gauss": 1, "jump": 2, "init": 3}


def firm_stream(seed: int, firm: int, tag: str) -> np.random.Generator:
    """Philox generator keyed by (seed, firm, process tag)."""
    ss = np.random.SeedSequence(entropy=(int(seed), int(firm), _TAG_CODES[tag]))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Grids, controls, configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathGrid:
    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError("need dt > 0 and n_steps >= 1")

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


class ControlLaw:
    """Base class; open-loop laws expose a sampled path, feedback laws don't."""

    is_open_loop = True

    def sample_path(self, times: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Deterministic(ControlLaw):
    """Deterministic path given in closed form or pre-sampled on the grid."""

    path: object  # ExpPoly or ndarray

    def sample_path(self, times):
        if isinstance(self.path, ExpPoly):
            return self.path.eval(times)
        arr = np.asarray(self.path, dtype=float)
        if arr.shape != times.shape:
            raise ValueError("sampled control path does not match the grid")
        return arr


@dataclass(frozen=True)
class Constant(ControlLaw):
    value: float

    def sample_path(self, times):
        return np.full(times.shape, float(self.value))


@dataclass(frozen=True)
class PiecewiseConstant(ControlLaw):
    """Right-continuous step function: values[j] on [breakpoints[j-1], breakpoints[j])."""

    breakpoints: tuple[float, ...]  # interior breakpoints, sorted ascending
    values: tuple[float, ...]       # len(breakpoints) + 1 segment values

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        if list(bp) != sorted(bp):
            raise ValueError("breakpoints must be sorted")
        if len(self.values) != len(bp) + 1:
            raise ValueError("need one value per segment")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def sample_path(self, times):
        idx = np.searchsorted(self.breakpoints, times, side="right")
        return np.asarray(self.values, dtype=float)[idx]


@dataclass(frozen=True)
class LinearFeedback(ControlLaw):
    """u_t = a(t) + b * X_t + k * P_t with a deterministic intercept path."""

    a: object = 0.0  # float, ExpPoly, or ndarray
    b: float = 0.0
    k: float = 0.0

    is_open_loop = False

    def intercept_path(self, times):
        if isinstance(self.a, ExpPoly):
            return self.a.eval(times)
        arr = np.asarray(self.a, dtype=float)
        if arr.ndim == 0:
            return np.full(times.shape, float(arr))
        if arr.shape != times.shape:
            raise ValueError("intercept path does not match the grid")
        return arr


@dataclass(frozen=True)
class SimConfig:
    grid: PathGrid
    n_paths: int
    seed: int
    scheme: str = "euler_maruyama"
    jump_scheme: str = "per_step_poisson"  # or 'exact_jump_times'
    store_firms: tuple[int, ...] | None = None  # None -> store every firm

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.jump_scheme not in ("per_step_poisson", "exact_jump_times"):
            raise ValueError(f"unknown jump_scheme {self.jump_scheme!r}")

    def hash(self) -> str:
        doc = {
            "dt": self.grid.dt, "n_steps": self.grid.n_steps, "n_paths": self.n_paths,
            "seed": self.seed, "scheme": self.scheme, "jump_scheme": self.jump_scheme,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrajectorySet:
    """One market realization batch on a grid.

    Stored prices are the post-jump (right-continuous) values.  Per-firm
    outputs and jump counts are kept only for `stored_firms`; the cross-firm
    aggregates needed by the price equation and by common-random-numbers
    deviation runs are always kept in full.
    """

    times: np.ndarray
    P: np.ndarray                  # (n_paths, n_steps+1)
    X: np.ndarray                  # (n_paths, n_stored, n_steps+1)
    jumps: np.ndarray              # (n_paths, n_stored, n_steps) int16
    stored_firms: tuple[int, ...]
    X_sum: np.ndarray              # (n_paths, n_steps+1), sum over all firms
    mark_sum: np.ndarray           # (n_paths, n_steps), sum_i gamma_i X_i dN_i
    flagged: np.ndarray            # (n_paths,) bool, overflow-aborted paths
    n_firms: int
    seed: int
    config_hash: str

    def firm_output(self, i: int) -> np.ndarray:
        if i not in self.stored_firms:
            raise KeyError(f"firm {i} was not stored (stored: {self.stored_firms})")
        return self.X[:, self.stored_firms.index(i), :]

    def firm_jumps(self, i: int) -> np.ndarray:
        if i not in self.stored_firms:
            raise KeyError(f"firm {i} was not stored")
        return self.jumps[:, self.stored_firms.index(i), :]

    @property
    def X_bar(self) -> np.ndarray:
        return self.X_sum / self.n_firms


class PathOverflowError(RuntimeError):
    pass


def _jump_increments(rng: np.random.Generator, lam: float, grid: PathGrid,
                     n_paths: int, scheme: str) -> np.ndarray:
    """Per-step jump counts, (n_paths, n_steps) int16."""
    if scheme == "per_step_poisson":
        return rng.poisson(lam * grid.dt, size=(n_paths, grid.n_steps)).astype(np.int16)
    # exact arrival times binned onto the grid: draw the total count, then
    # place arrivals uniformly (order statistics of a Poisson process)
    out = np.zeros((n_paths, grid.n_steps), dtype=np.int16)
    totals = rng.poisson(lam * grid.horizon, size=n_paths)
    for p in range(n_paths):
        k = int(totals[p])
        if k == 0:
            continue
        bins = np.minimum(
            (rng.random(k) * grid.horizon / grid.dt).astype(np.int64), grid.n_steps - 1
        )
        np.add.at(out[p], bins, 1)
    return out


def _simulate_firm(x0, z, u_path, mu, sigma, dt, flagged):
    """Euler-Maruyama recursion for one firm, vectorized over paths.

    u_path is either (n_steps+1,) deterministic or a callable u(k, X_k) for
    state feedback without price coupling.  Overflowing paths are flagged and
    frozen so they cannot poison other estimators.
    """
    n_paths, n_steps = z.shape
    X = np.empty((n_paths, n_steps + 1))
    X[:, 0] = x0
    sqdt = np.sqrt(dt)
    if callable(u_path):
        for k in range(n_steps):
            xk = X[:, k]
            u = u_path(k, xk)
            xn = xk + xk * (-mu * dt + sigma * sqdt * z[:, k]) + u * dt
            bad = np.abs(xn) > OVERFLOW_LIMIT
            if bad.any():
                flagged |= bad
            if flagged.any():
                xn = np.where(flagged, xk, xn)  # freeze aborted paths
            X[:, k + 1] = xn
        return X
    # deterministic control: precompute growth factors, keep the loop lean
    growth = 1.0 - mu * dt + sigma * sqdt * z  # (n_paths, n_steps)
    du = np.asarray(u_path, dtype=float) * dt
    any_flagged = bool(flagged.any())
    for k in range(n_steps):
        xn = X[:, k] * growth[:, k] + du[k]
        if np.max(np.abs(xn)) > OVERFLOW_LIMIT or any_flagged:
            flagged |= np.abs(xn) > OVERFLOW_LIMIT
            any_flagged = True
            xn = np.where(flagged, X[:, k], xn)
        X[:, k + 1] = xn
    return X


def _price_from_sums(x_sum, mark_sum, market, n_firms, grid):
    """Euler price recursion driven by the output sum and jump-mark sum.

    P_{k+1} = P_k (1 - alpha dt) + alpha dt (beta - X_sum_k / n) +
    (alpha / n) mark_k, a constant-coefficient linear filter along time.
    """
    alpha, dt = market.alpha, grid.dt
    a1 = 1 - alpha * dt
    forcing = alpha * dt * (market.beta - x_sum[:, :-1] / n_firms) + (alpha / n_firms) * mark_sum
    zi = market.p0 * a1 * np.ones((forcing.shape[0], 1))
    tail, _ = lfilter([1.0], [1.0, -a1], forcing, axis=1, zi=zi)
    P = np.empty((forcing.shape[0], grid.n_steps + 1))
    P[:, 0] = market.p0
    P[:, 1:] = tail
    return P


def _check_laws(pop: Population, laws):
    if len(laws) != pop.n:
        raise ValueError(f"need {pop.n} control laws, got {len(laws)}")
    for law in laws:
        if not isinstance(law, ControlLaw):
            raise TypeError(f"not a ControlLaw: {law!r}")


def simulate_market(pop: Population, laws, market: MarketParams, cfg: SimConfig) -> TrajectorySet:
    """Simulate the n-firm market under the given strategy profile.

    Deterministic given (config, seed).  When no law couples to the price,
    firms are simulated one at a time (memory stays linear in paths) and the
    price is recovered from the accumulated sums; price-coupled feedback
    falls back to a joint per-step loop.
    """
    _check_laws(pop, laws)
    grid, n_paths = cfg.grid, cfg.n_paths
    times = grid.times()
    stored = tuple(range(pop.n)) if cfg.store_firms is None else tuple(sorted(cfg.store_firms))
    if any(i < 0 or i >= pop.n for i in stored):
        raise ValueError("store_firms out of range")
    price_coupled = any(isinstance(l, LinearFeedback) and l.k != 0.0 for l in laws)

    flagged = np.zeros(n_paths, dtype=bool)
    x_sum = np.zeros((n_paths, grid.n_steps + 1))
    mark_sum = np.zeros((n_paths, grid.n_steps))
    X_store = np.zeros((n_paths, len(stored), grid.n_steps + 1))
    J_store = np.zeros((n_paths, len(stored), grid.n_steps), dtype=np.int16)

    if not price_coupled:
        for i, (theta, law) in enumerate(zip(pop.types, laws)):
            x0 = pop.init_dist[i].sample(firm_stream(cfg.seed, i, "init"), n_paths)
            z = firm_stream(cfg.seed, i, "gauss").standard_normal((n_paths, grid.n_steps))
            jumps = _jump_increments(
                firm_stream(cfg.seed, i, "jump"), theta.lam, grid, n_paths, cfg.jump_scheme
            )
            if isinstance(law, LinearFeedback):
                a_path = law.intercept_path(times)
                b = law.b
                u = (lambda k, x, a_path=a_path, b=b: a_path[k] + b * x)
            else:
                u = law.sample_path(times)
            own_flag = np.zeros(n_paths, dtype=bool)  # flags must not leak across firms
            X = _simulate_firm(x0, z, u, theta.mu, theta.sigma, grid.dt, own_flag)
            flagged |= own_flag
            x_sum += X
            mark_sum += theta.gamma * X[:, :-1] * jumps
            if i in stored:
                s = stored.index(i)
                X_store[:, s, :] = X
                J_store[:, s, :] = jumps
        P = _price_from_sums(x_sum, mark_sum, market, pop.n, grid)
    else:
        # joint loop: every firm and the price advance together
        x0s = [pop.init_dist[i].sample(firm_stream(cfg.seed, i, "init"), n_paths)
               for i in range(pop.n)]
        zs = [firm_stream(cfg.seed, i, "gauss").standard_normal((n_paths, grid.n_steps))
              for i in range(pop.n)]
        jmp = [_jump_increments(firm_stream(cfg.seed, i, "jump"), pop.types[i].lam,
                                grid, n_paths, cfg.jump_scheme) for i in range(pop.n)]
        upaths = []
        for law in laws:
            if isinstance(law, LinearFeedback):
                upaths.append((law.intercept_path(times), law.b, law.k))
            else:
                upaths.append((law.sample_path(times), 0.0, 0.0))
        Xc = np.stack([np.asarray(x, dtype=float) * np.ones(n_paths) for x in x0s])  # (n, paths)
        P = np.empty((n_paths, grid.n_steps + 1))
        P[:, 0] = market.p0
        sqdt = np.sqrt(grid.dt)
        for i in stored:
            X_store[:, stored.index(i), 0] = Xc[i]
        for k in range(grid.n_steps):
            pk = P[:, k]
            xbar_k = Xc.mean(axis=0)
            mark_k = np.zeros(n_paths)
            x_sum[:, k] = Xc.sum(axis=0)
            for i, theta in enumerate(pop.types):
                a_path, b, kp = upaths[i]
                u = a_path[k] + b * Xc[i] + kp * pk
                xn = Xc[i] + Xc[i] * (-theta.mu * grid.dt + theta.sigma * sqdt * zs[i][:, k]) + u * grid.dt
                bad = np.abs(xn) > OVERFLOW_LIMIT
                if bad.any():
                    flagged |= bad
                xn = np.where(flagged, Xc[i], xn)
                mark_k += theta.gamma * Xc[i] * jmp[i][:, k]
                Xc[i] = xn
                if i in stored:
                    s = stored.index(i)
                    X_store[:, s, k + 1] = xn
                    J_store[:, s, k] = jmp[i][:, k]
            mark_sum[:, k] = mark_k
            P[:, k + 1] = pk + market.alpha * (market.beta - xbar_k - pk) * grid.dt \
                + (market.alpha / pop.n) * mark_k
        x_sum[:, grid.n_steps] = Xc.sum(axis=0)

    return TrajectorySet(
        times=times, P=P, X=X_store, jumps=J_store, stored_firms=stored,
        X_sum=x_sum, mark_sum=mark_sum, flagged=flagged, n_firms=pop.n,
        seed=cfg.seed, config_hash=cfg.hash(),
    )


class DeviationContext:
    """Caches base run and the deviating firm's noise for repeated evaluations.

    All candidate strategies for firm i are evaluated against the identical
    (W, N, X0) realizations of every firm (common random numbers); only firm
    i's output and the price are recomputed, so one evaluation costs the same
    regardless of n.
    """

    def __init__(self, pop: Population, base_laws, i: int, market: MarketParams,
                 cfg: SimConfig, base: TrajectorySet | None = None):
        _check_laws(pop, base_laws)
        if not (0 <= i < pop.n):
            raise ValueError("firm index out of range")
        if cfg.store_firms is not None and i not in cfg.store_firms:
            cfg = replace(cfg, store_firms=tuple(sorted(set(cfg.store_firms) | {i})))
        if base is None:
            base = simulate_market(pop, base_laws, market, cfg)
        if base.config_hash != cfg.hash() or i not in base.stored_firms:
            raise ValueError("precomputed base does not match the requested configuration")
        self.pop, self.base_laws, self.i = pop, list(base_laws), i
        self.market, self.cfg, self.base = market, cfg, base
        self.theta = pop.types[i]
        self._x0 = pop.init_dist[i].sample(firm_stream(cfg.seed, i, "init"), cfg.n_paths)
        self._z = firm_stream(cfg.seed, i, "gauss").standard_normal(
            (cfg.n_paths, cfg.grid.n_steps)
        )

    def evaluate(self, deviating_law: ControlLaw) -> TrajectorySet:
        """Trajectory set with firm i's law replaced, all noise shared."""
        if isinstance(deviating_law, LinearFeedback) and deviating_law.k != 0.0:
            dev_laws = list(self.base_laws)
            dev_laws[self.i] = deviating_law
            return simulate_market(self.pop, dev_laws, self.market, self.cfg)
        grid, market, theta, base = self.cfg.grid, self.market, self.theta, self.base
        times = base.times
        own_flag = np.zeros(self.cfg.n_paths, dtype=bool)
        if isinstance(deviating_law, LinearFeedback):
            a_path = deviating_law.intercept_path(times)
            b = deviating_law.b
            u = (lambda k, x, a_path=a_path, b=b: a_path[k] + b * x)
        else:
            u = deviating_law.sample_path(times)
        X_dev = _simulate_firm(self._x0, self._z, u, theta.mu, theta.sigma, grid.dt, own_flag)
        flagged = base.flagged | own_flag

        X_base_i = base.firm_output(self.i)
        if np.array_equal(X_dev, X_base_i) and np.array_equal(flagged, base.flagged):
            return base  # unchanged law: reproduce the base run exactly

        jumps = base.firm_jumps(self.i)
        x_sum = base.X_sum - X_base_i + X_dev
        mark_sum = base.mark_sum + theta.gamma * (X_dev[:, :-1] - X_base_i[:, :-1]) * jumps
        P = _price_from_sums(x_sum, mark_sum, market, self.pop.n, grid)
        s = base.stored_firms.index(self.i)
        X_store = base.X.copy()
        X_store[:, s, :] = X_dev
        return TrajectorySet(
            times=times, P=P, X=X_store, jumps=base.jumps, stored_firms=base.stored_firms,
            X_sum=x_sum, mark_sum=mark_sum, flagged=flagged, n_firms=self.pop.n,
            seed=self.cfg.seed, config_hash=base.config_hash,
        )


def simulate_deviation(pop: Population, base_laws, i: int, deviating_law: ControlLaw,
                       market: MarketParams, cfg: SimConfig,
                       base: TrajectorySet | None = None) -> tuple[TrajectorySet, TrajectorySet]:
    """Run the market under the base profile and with firm i's law replaced.

    Both runs share every noise realization (common random numbers); see
    :class:`DeviationContext`, which this wraps.
    """
    ctx = DeviationContext(pop, base_laws, i, market, cfg, base=base)
    return ctx.base, ctx.evaluate(deviating_law)


def with_price_path(traj: TrajectorySet, price) -> TrajectorySet:
    """Replace the simulated price with a deterministic path (ExpPoly or array).

    Used for the representative-firm setting, where each firm faces the
    limiting mean price instead of the finite-n market price.
    """
    p = price.eval(traj.times) if isinstance(price, ExpPoly) else np.asarray(price, dtype=float)
    if p.shape != traj.times.shape:
        raise ValueError("price path does not match the grid")
    return replace(traj, P=np.broadcast_to(p, traj.P.shape).copy())


@dataclass(frozen=True)
class MomentReport:
    times: np.ndarray
    second_moment: np.ndarray        # E[X_i(t)^2] estimate for each stored firm
    second_moment_se: np.ndarray
    uncontrolled_oracle: np.ndarray | None  # E[X0^2] e^{(sigma^2-2mu)t} when u == 0
    rho_norm_sq: np.ndarray          # discounted-norm estimate per stored firm
    stored_firms: tuple[int, ...]


def moment_check(pop: Population, laws, market: MarketParams, cfg: SimConfig,
                 rho: float | None = None) -> MomentReport:
    """Estimate second moments of stored firms and their discounted norms.

    When every law is identically zero the closed-form uncontrolled moment
    E[X0^2] e^{(sigma^2 - 2 mu) t} is attached for comparison.
    """
    traj = simulate_market(pop, laws, market, cfg)
    rho = market.rho if rho is None else rho
    keep = ~traj.flagged
    times = traj.times
    x2 = traj.X[keep] ** 2  # (paths, stored, T+1)
    m2 = x2.mean(axis=0)
    se = x2.std(axis=0, ddof=1) / np.sqrt(keep.sum())
    disc = np.exp(-rho * times)
    norms = np.trapezoid(disc * x2, times, axis=-1).mean(axis=0)
    uncontrolled = all(
        (isinstance(l, Constant) and l.value == 0)
        or (isinstance(l, Deterministic) and not np.any(l.sample_path(times)))
        for l in laws
    )
    oracle = None
    if uncontrolled:
        oracle = np.stack([
            pop.init_dist[i].second_moment
            * np.exp((pop.types[i].sigma**2 - 2 * pop.types[i].mu) * times)
            for i in traj.stored_firms
        ])
    return MomentReport(
        times=times, second_moment=m2, second_moment_se=se,
        uncontrolled_oracle=oracle, rho_norm_sq=norms, stored_firms=traj.stored_firms,
    )
