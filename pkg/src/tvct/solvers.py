"""Projected first-order solvers: GP, GPBB and UPN.

Every solver works on the duck-typed problem interface of
:mod:`tvct.problem` and produces one :class:`ConvergenceRecord` per outer
iteration ``k``. Record ``k`` describes iterate ``x^(k)``: its objective and
the scaled gradient-map norm at ``x^(k)`` evaluated with ``nu = 1 /
step_or_Linv``. A run stops at the first ``k`` whose gradient-map norm is at
most ``eps`` (returning ``x^(k)``) or after ``max_iters`` iterations
(returning the latest iterate, unchecked).
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

MAX_BACKTRACKS = 200
MIN_BETA = 1e-10
# relative rounding allowance in the descent test of the backtracking loop
_ROUNDING_SLACK = 1e-14


class SolverError(RuntimeError):
    """A run had to be aborted; ``state`` carries the diagnostic snapshot."""

    def __init__(self, message, **state):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class SolverOptions:
    eps: float = 1e-8
    max_iters: int = 10000
    K: int = 2
    sigma: float = 0.1
    rho_L: float = 1.3
    mu_init: float | None = None
    L_init: float = 1.0
    record_history: bool = True
    store_iterates: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")
        if int(self.K) != self.K or self.K < 0:
            raise ValueError("K must be a nonnegative integer")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if not self.rho_L > 1:
            raise ValueError("rho_L must exceed 1")
        if not self.L_init > 0:
            raise ValueError("L_init must be positive")
        if self.mu_init is not None and not self.mu_init > 0:
            raise ValueError("mu_init must be positive")

    @property
    def mu_start(self) -> float:
        return self.L_init if self.mu_init is None else self.mu_init


@dataclass(frozen=True)
class ConvergenceRecord:
    """Per-iteration log entry.

    ``step_or_Linv`` is ``1/nu`` of the gradient map in ``gradmap_norm_scaled``:
    the BB step for GPBB and ``1/L_k`` for GP and UPN. ``beta`` (GPBB) and
    ``theta`` (UPN, the freshly computed ``theta_{k+1}``) are kept in memory
    only and are not part of the history file.
    """

    iter: int
    objective: float
    gradmap_norm_scaled: float
    step_or_Linv: float
    mu_k: float | None = None
    L_k: float | None = None
    line_search_count: int = 0
    beta: float | None = None
    theta: float | None = None


@dataclass
class SolverResult:
    x: np.ndarray
    converged: bool
    iterations: int
    history: list = field(default_factory=list)
    iterates: list | None = None
    solver: str = ""

    @property
    def final_nu(self) -> float:
        return 1.0 / self.history[-1].step_or_Linv if self.history else float("nan")


class _Run:
    """Bookkeeping shared by the three solvers."""

    def __init__(self, name, p, x0, opts: SolverOptions):
        self.name = name
        self.opts = opts
        self.history = []
        self.last = None
        x = p.project(np.array(x0, dtype=np.float64).reshape(-1))
        if x.size != p.size:
            raise ValueError(f"x0 has {x.size} entries, problem has {p.size} unknowns")
        self.x0 = x
        self.iterates = [x.copy()] if opts.store_iterates else None

    def log(self, rec: ConvergenceRecord):
        if not math.isfinite(rec.objective):
            raise SolverError(f"{self.name}: non-finite objective at iteration {rec.iter}",
                              iteration=rec.iter, record=rec, history=self.history)
        self.last = rec
        if self.opts.record_history:
            self.history.append(rec)
        logger.debug("%s k=%d f=%.12g |G|/N=%.3e", self.name, rec.iter, rec.objective, rec.gradmap_norm_scaled)

    def keep(self, x):
        if self.iterates is not None:
            self.iterates.append(x.copy())

    def done(self, x, converged, k) -> SolverResult:
        history = self.history if self.opts.record_history else ([self.last] if self.last else [])
        if self.iterates is not None:
            # the unchecked last iterate is returned on non-convergence
            self.iterates = self.iterates[: k + 1]
        logger.info("%s %s after %d iterations", self.name, "converged" if converged else "stopped", k)
        return SolverResult(x, converged, k, history, self.iterates, self.name)


def _check_finite(name, value, **state):
    if not math.isfinite(value):
        raise SolverError(f"{name}: non-finite objective encountered", **state)


def _backtrack(p, y, fy, gy, L_bar, rho_L):
    """Core of :func:`backtrack`; returns ``(x, L, f(x), state(x), trials)``."""
    L = L_bar
    slack = _ROUNDING_SLACK * abs(fy)
    for m in range(MAX_BACKTRACKS + 1):
        x = p.project(y - gy / L)
        fx, state = p.evaluate(x)
        _check_finite("backtrack", fx, y=y, L=L, trials=m + 1)
        d = x - y
        if fx <= fy + float(gy @ d) + 0.5 * L * float(d @ d) + slack:
            return x, L, fx, state, m + 1
        L *= rho_L
    raise SolverError(f"backtrack: no acceptable L after {MAX_BACKTRACKS} increases (last L={L:.3e})",
                      y=y, L=L, L_bar=L_bar)


def backtrack(p, y, L_bar: float, rho_L: float = 1.3):
    """Increase ``L_bar`` by factors of ``rho_L`` until the projected step from ``y`` passes the descent test.

    Returns
    -------
    x : ndarray
        ``P(y - grad f(y) / L)`` for the accepted ``L``.
    L : float
        Accepted curvature estimate, ``L >= L_bar``.
    """
    if not L_bar > 0:
        raise ValueError("L_bar must be positive")
    if not rho_L > 1:
        raise ValueError("rho_L must exceed 1")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    fy, gy = p.value_and_gradient(y)
    x, L, *_ = _backtrack(p, y, fy, gy, L_bar, rho_L)
    return x, L


def _mu_ratio(fx, fy, gy, x, y):
    d = x - y
    dd = float(d @ d)
    if dd == 0.0:
        return None
    return (fx - fy - float(gy @ d)) / (0.5 * dd)


def _next_mu(mu_prev, ratio):
    if ratio is None or not math.isfinite(ratio) or ratio <= 0:
        return mu_prev
    return min(mu_prev, ratio)


def estimate_mu(p, x, y, mu_prev: float) -> float:
    """Largest strong-convexity constant consistent with the pair ``(x, y)``, clamped by ``mu_prev``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if np.array_equal(x, y):
        return mu_prev
    fy, gy = p.value_and_gradient(y)
    return _next_mu(mu_prev, _mu_ratio(p.value(x), fy, gy, x, y))


def theta_update(theta: float, q: float) -> float:
    """Positive root of ``t**2 = (1 - t) * theta**2 + q * t``."""
    a = theta * theta - q
    return 0.5 * (-a + math.sqrt(a * a + 4.0 * theta * theta))


def gp_solve(p, x0, opts: SolverOptions = SolverOptions()) -> SolverResult:
    """Gradient projection with step ``1/L_k`` from backtracking seeded by ``L_{k-1}``."""
    run = _Run("gp", p, x0, opts)
    x = run.x0
    fx, state = p.evaluate(x)
    _check_finite("gp", fx, iteration=0)
    L = opts.L_init
    for k in range(opts.max_iters):
        g = p.gradient(x, state)
        x_new, L, f_new, state_new, trials = _backtrack(p, x, fx, g, L, opts.rho_L)
        gnorm = L * float(np.linalg.norm(x - x_new)) / x.size
        run.log(ConvergenceRecord(k, fx, gnorm, 1.0 / L, L_k=L, line_search_count=trials))
        if gnorm <= opts.eps:
            return run.done(x, True, k)
        x, fx, state = x_new, f_new, state_new
        run.keep(x)
    return run.done(x, False, opts.max_iters)


def gpbb_solve(p, x0, opts: SolverOptions = SolverOptions()) -> SolverResult:
    """Projected Barzilai-Borwein steps with a nonmonotone Armijo search.

    The search starts at ``beta = 0.95`` and squares ``beta`` until the trial
    point beats the maximum of the last ``K + 1`` objective values by the
    sufficient-decrease margin. A nonpositive BB denominator keeps the
    previous step.
    """
    run = _Run("gpbb", p, x0, opts)
    x = run.x0
    fx, state = p.evaluate(x)
    _check_finite("gpbb", fx, iteration=0)
    g = p.gradient(x, state)
    recent = deque([fx], maxlen=opts.K + 1)
    theta = 1.0
    x_prev = g_prev = None
    for k in range(opts.max_iters):
        if k > 0:
            s = x - x_prev
            den = float(s @ (g - g_prev))
            if den > 0:
                cand = float(s @ s) / den
                if math.isfinite(cand) and cand > 0:
                    theta = cand
        gmap = (x - p.project(x - theta * g)) / theta
        gnorm = float(np.linalg.norm(gmap)) / x.size
        if gnorm <= opts.eps:
            run.log(ConvergenceRecord(k, fx, gnorm, theta))
            return run.done(x, True, k)

        f_hat = max(recent)
        beta = 0.95
        trials = 0
        while True:
            xb = p.project(x - beta * theta * g)
            fb, sb = p.evaluate(xb)
            trials += 1
            _check_finite("gpbb", fb, iteration=k, beta=beta, theta=theta)
            if fb < f_hat - opts.sigma * float(g @ (x - xb)):
                break
            beta *= beta
            if beta < MIN_BETA:
                raise SolverError(f"gpbb: line search step factor underflow at iteration {k}",
                                  iteration=k, x=x, theta=theta, f_hat=f_hat, history=run.history)
        run.log(ConvergenceRecord(k, fx, gnorm, theta, line_search_count=trials, beta=beta))
        x_prev, g_prev = x, g
        x, fx = xb, fb
        g = p.gradient(x, sb)
        recent.append(fx)
        run.keep(x)
    return run.done(x, False, opts.max_iters)


def upn_solve(p, x0, opts: SolverOptions = SolverOptions()) -> SolverResult:
    """Nesterov's method with online estimates of the strong-convexity and Lipschitz constants.

    ``L_k`` comes from backtracking at the auxiliary point and only grows;
    ``mu_k`` is the curvature lower bound observed between ``x^(k)`` and
    ``y^(k)``, clamped to be nonincreasing. No restart is attempted: an
    inconsistent ``theta`` aborts with :class:`SolverError`.
    """
    run = _Run("upn", p, x0, opts)
    mu = opts.mu_start
    x = run.x0
    fx, sx = p.evaluate(x)
    _check_finite("upn", fx, iteration=0)
    gx = p.gradient(x, sx)

    x_new, L, f_new, s_new, trials = _backtrack(p, x, fx, gx, opts.L_init, opts.rho_L)
    gnorm = L * float(np.linalg.norm(x - x_new)) / x.size
    theta = math.sqrt(mu / L)
    if not 0 < theta <= 1:
        raise SolverError(f"upn: theta={theta:.6g} outside (0, 1]; mu_init exceeds the Lipschitz estimate",
                          iteration=0, mu=mu, L=L)
    run.log(ConvergenceRecord(0, fx, gnorm, 1.0 / L, mu_k=mu, L_k=L, line_search_count=trials, theta=theta))
    if gnorm <= opts.eps:
        return run.done(x, True, 0)
    x, fx, sx = x_new, f_new, s_new
    run.keep(x)
    y, fy, gy = x, fx, None

    for k in range(1, opts.max_iters):
        gx = p.gradient(x, sx)
        if gy is None:
            gy = gx
        x_new, L, f_new, s_new, trials = _backtrack(p, y, fy, gy, L, opts.rho_L)

        gmap = L * (x - p.project(x - gx / L))
        gnorm = float(np.linalg.norm(gmap)) / x.size

        mu = _next_mu(mu, _mu_ratio(fx, fy, gy, x, y))
        theta_new = theta_update(theta, mu / L)
        if not (0 < theta_new <= 1 and math.isfinite(theta_new)):
            raise SolverError(f"upn: theta={theta_new:.6g} outside (0, 1] at iteration {k} (mu={mu:.3e}, L={L:.3e})",
                              iteration=k, mu=mu, L=L, theta=theta, x=x, history=run.history)
        run.log(ConvergenceRecord(k, fx, gnorm, 1.0 / L, mu_k=mu, L_k=L, line_search_count=trials, theta=theta_new))
        if gnorm <= opts.eps:
            return run.done(x, True, k)

        beta = theta * (1.0 - theta) / (theta * theta + theta_new)
        y = x_new + beta * (x_new - x)
        theta = theta_new
        x, fx, sx = x_new, f_new, s_new
        run.keep(x)
        if beta == 0.0:
            fy, gy = fx, None
            y = x
        else:
            fy, sy = p.evaluate(y)
            _check_finite("upn", fy, iteration=k)
            gy = p.gradient(y, sy)
    return run.done(x, False, opts.max_iters)


SOLVERS = {"gp": gp_solve, "gpbb": gpbb_solve, "upn": upn_solve}


def solve(name: str, p, x0, opts: SolverOptions = SolverOptions()) -> SolverResult:
    try:
        fn = SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}") from None
    return fn(p, x0, opts)
