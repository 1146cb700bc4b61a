"""Limited-memory BFGS: secant memory, two-loop recursion, line search.

The memory only ever stores pairs with positive curvature, so the implicit
inverse Hessian stays positive definite and two-loop directions are descent
directions. A dense compact-representation solve is provided as an
independent route to the same direction, for cross-checking.

Line-search trials evaluate the objective together with its directional
derivative in a single forward pass (tangent propagation), so one training
iteration costs exactly one reverse sweep plus ``trials`` forward passes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NotDescentError",
    "LineSearchError",
    "OracleError",
    "WolfeParams",
    "SecantMemory",
    "push_pair",
    "two_loop",
    "compact_direction",
    "wolfe_search",
    "LineSearchResult",
    "lbfgs_iterate",
    "lbfgs_loop",
    "StepReport",
]


class NotDescentError(ValueError):
    """The line search was started along a non-descent direction."""


class LineSearchError(RuntimeError):
    """No step satisfying the strong Wolfe conditions was found."""

    def __init__(self, message, best_alpha=0.0, best_value=None, trials=0):
        super().__init__(message)
        self.best_alpha = best_alpha
        self.best_value = best_value
        self.trials = trials


class OracleError(RuntimeError):
    """The dense compact-representation solve broke down."""


@dataclass(frozen=True)
class WolfeParams:
    """Strong Wolfe constants: 0 < c1 < c2 < 1."""

    c1: float = 1e-4
    c2: float = 0.9
    max_iters: int = 25
    alpha_init: float = 1.0
    alpha_max: float = 1e3

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_iters < 1 or self.alpha_init <= 0 or self.alpha_max <= 0:
            raise ValueError("invalid line-search limits")


class SecantMemory:
    """Ring buffer of at most ``capacity`` curvature-valid (s, y) pairs.

    ``gamma`` scales the initial inverse Hessian (gamma * identity); it is
    refreshed from the newest accepted pair and reset to one when cleared.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._pairs = deque(maxlen=self.capacity)
        self.gamma = 1.0
        self.offered = 0
        self.accepted = 0

    def __len__(self):
        return len(self._pairs)

    @property
    def pairs(self):
        """Stored (s, y, 1/(y.s)) triples, oldest first."""
        return list(self._pairs)

    def push_pair(self, s, y):
        """Store the pair iff y.s > 0 strictly; returns the accepted flag."""
        self.offered += 1
        s = np.asarray(s, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if s.shape != y.shape:
            raise ValueError("secant pair members must have equal length")
        ys = float(y @ s)
        if not ys > 0.0:
            return False
        assert ys > 0.0  # insertion-time curvature guard
        self._pairs.append((s, y, 1.0 / ys))
        self.gamma = ys / float(y @ y)
        self.accepted += 1
        return True

    def clear(self):
        self._pairs.clear()
        self.gamma = 1.0


def push_pair(memory, s, y):
    return memory.push_pair(s, y)


def two_loop(memory, g):
    """Inverse-LBFGS operator applied to -g via the two-loop recursion."""
    q = -np.asarray(g, dtype=np.float64)
    pairs = memory.pairs
    if not pairs:
        return memory.gamma * q
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q = q - a * y
    q = memory.gamma * q
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q = q + (a - b) * s
    return q


def compact_direction(memory, g):
    """Direction from the dense compact representation of the Hessian.

    Builds B = B0 - [B0 S, Y] M^-1 [S^T B0; Y^T] with B0 = I / gamma, where
    L and D are the strictly-lower and diagonal parts of S^T Y (pairs ordered
    oldest first), then solves B d = -g directly. Test oracle for the
    two-loop recursion; O(p^2) work.
    """
    pairs = memory.pairs
    if not pairs:
        raise OracleError("compact representation needs a nonempty memory")
    g = np.asarray(g, dtype=np.float64)
    p = g.shape[0]
    S = np.column_stack([s for s, _, _ in pairs])
    Y = np.column_stack([y for _, y, _ in pairs])
    q = S.shape[1]
    sigma = 1.0 / memory.gamma  # B0 = sigma * identity
    SY = S.T @ Y
    L = np.tril(SY, k=-1)
    D = np.diag(np.diag(SY))
    M = np.block([[sigma * (S.T @ S), L], [L.T, -D]])
    W = np.hstack([sigma * S, Y])
    try:
        Minv_Wt = np.linalg.solve(M, W.T)
    except np.linalg.LinAlgError as exc:
        raise OracleError("singular middle matrix") from exc
    B = sigma * np.eye(p) - W @ Minv_Wt
    try:
        return np.linalg.solve(B, -g)
    except np.linalg.LinAlgError as exc:
        raise OracleError("compact Hessian not invertible") from exc


@dataclass
class LineSearchResult:
    alpha: float
    value: float
    slope: float
    trials: int
    payload: object = None  # evaluation attachment for the accepted trial


def wolfe_search(phi, dphi, params, phi0=None, dphi0=None, annotate=None):
    """Strong Wolfe line search with bracketing and cubic-interpolated zoom.

    ``phi``/``dphi`` give the objective and its slope along the ray; callers
    that obtain both from one fused evaluation should memoize across the two
    callables. ``annotate(alpha)`` may return an attachment stored with the
    accepted trial (such as a kept tape). Raises NotDescentError when
    dphi(0) >= 0 and LineSearchError when the trial budget is exhausted.
    """
    if phi0 is None:
        phi0 = phi(0.0)
    if dphi0 is None:
        dphi0 = dphi(0.0)
    if not dphi0 < 0.0:
        raise NotDescentError(f"slope at zero is {dphi0:.3e}, not a descent direction")

    c1, c2 = params.c1, params.c2
    budget = params.max_iters
    trials = 0
    best_alpha, best_value = 0.0, phi0

    def evaluate(a):
        nonlocal trials, best_alpha, best_value
        trials += 1
        fa = phi(a)
        ga = dphi(a)
        if fa < best_value:
            best_alpha, best_value = a, fa
        return fa, ga

    def accept(a, fa, ga):
        payload = annotate(a) if annotate is not None else None
        return LineSearchResult(a, fa, ga, trials, payload)

    def zoom(lo, f_lo, g_lo, hi, f_hi, g_hi):
        while trials < budget:
            a = _cubic_step(lo, f_lo, g_lo, hi, f_hi, g_hi)
            fa, ga = evaluate(a)
            if fa > phi0 + c1 * a * dphi0 or fa >= f_lo:
                hi, f_hi, g_hi = a, fa, ga
            else:
                if abs(ga) <= c2 * abs(dphi0):
                    return accept(a, fa, ga)
                if ga * (hi - lo) >= 0.0:
                    hi, f_hi, g_hi = lo, f_lo, g_lo
                lo, f_lo, g_lo = a, fa, ga
        raise LineSearchError(
            "zoom budget exhausted", best_alpha, best_value, trials
        )

    a_prev, f_prev, g_prev = 0.0, phi0, dphi0
    a = min(params.alpha_init, params.alpha_max)
    first = True
    while trials < budget:
        fa, ga = evaluate(a)
        if fa > phi0 + c1 * a * dphi0 or (not first and fa >= f_prev):
            return zoom(a_prev, f_prev, g_prev, a, fa, ga)
        if abs(ga) <= c2 * abs(dphi0):
            return accept(a, fa, ga)
        if ga >= 0.0:
            return zoom(a, fa, ga, a_prev, f_prev, g_prev)
        if a >= params.alpha_max:
            break
        a_prev, f_prev, g_prev = a, fa, ga
        a = min(2.0 * a, params.alpha_max)
        first = False
    raise LineSearchError(
        "bracketing budget exhausted", best_alpha, best_value, trials
    )


def _cubic_step(lo, f_lo, g_lo, hi, f_hi, g_hi):
    """Cubic-interpolated minimizer inside the bracket, safeguarded."""
    span = hi - lo
    d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (lo - hi)
    radicand = d1 * d1 - g_lo * g_hi
    if radicand >= 0.0:
        d2 = np.sign(span) * np.sqrt(radicand)
        denom = g_hi - g_lo + 2.0 * d2
        if denom != 0.0:
            cand = hi - span * (g_hi + d2 - d1) / denom
            lo_guard = lo + 0.1 * span
            hi_guard = hi - 0.1 * span
            low, high = min(lo_guard, hi_guard), max(lo_guard, hi_guard)
            if np.isfinite(cand) and low <= cand <= high:
                return float(cand)
    return float(lo + 0.5 * span)


@dataclass
class StepReport:
    alpha: float = 0.0
    value: float = np.nan
    trials: int = 0
    converged: bool = False
    failed: bool = False
    pair_accepted: bool | None = None


def _fused_ray(objective, x, f0, g0, d):
    """phi/dphi callables sharing one tangent evaluation per trial point."""
    cache = {0.0: (f0, float(g0 @ d), None)}

    def lookup(a):
        if a not in cache:
            trial = objective.value_slope(x + a * d, d)
            cache[a] = (trial.value, trial.slope, trial)
        return cache[a]

    phi = lambda a: lookup(a)[0]
    dphi = lambda a: lookup(a)[1]
    annotate = lambda a: lookup(a)[2]
    return phi, dphi, annotate


def _descent_direction(memory, g):
    d = two_loop(memory, g)
    if float(g @ d) >= 0.0:
        # stale curvature; fall back to steepest descent
        memory.clear()
        d = -g
    return d


def lbfgs_step(objective, x, f0, g0, memory, wolfe):
    """One quasi-Newton step from a point whose value and gradient are known.

    Returns the new point, the line-search result (or None when the point is
    stationary or the search failed), and a report. On line-search failure
    the memory is cleared and the iterate is unchanged.
    """
    if float(np.max(np.abs(g0))) == 0.0:
        return x, None, StepReport(value=f0, converged=True)
    d = _descent_direction(memory, g0)
    phi, dphi, annotate = _fused_ray(objective, x, f0, g0, d)
    try:
        ls = wolfe_search(phi, dphi, wolfe, phi0=f0, dphi0=float(g0 @ d),
                          annotate=annotate)
    except LineSearchError as err:
        memory.clear()
        return x, None, StepReport(value=f0, trials=err.trials, failed=True)
    x_next = x + ls.alpha * d
    return x_next, ls, StepReport(alpha=ls.alpha, value=ls.value, trials=ls.trials)


def lbfgs_iterate(objective, theta, memory, wolfe):
    """Self-contained LBFGS iteration: evaluate, step, complete the pair.

    The candidate secant pair (theta_next - theta, grad_next - grad) is
    offered to the memory before returning; the gradient at the accepted
    point is swept from the kept trial tape, costing no extra forward pass.
    """
    theta = np.asarray(theta, dtype=np.float64)
    f0, g0 = objective.value_grad(theta)
    x_next, ls, report = lbfgs_step(objective, theta, f0, g0, memory, wolfe)
    if ls is None:
        return x_next, memory, report
    g_next = objective.grad_of_trial(ls.payload)
    report.pair_accepted = memory.push_pair(x_next - theta, g_next - g0)
    return x_next, memory, report


def lbfgs_loop(objective, theta0, iters, memory, wolfe, on_iteration=None):
    """Plain training loop with deferred secant completion.

    Each iteration evaluates loss and gradient at the current point (which
    finishes the previous iteration's secant pair), then line-searches along
    the two-loop direction. Per-iteration cost: 1 gradient evaluation and
    1 + trials loss evaluations.
    """
    x = np.asarray(theta0, dtype=np.float64)
    pending = None
    reports = []
    for k in range(iters):
        f, g = objective.value_grad(x)
        if pending is not None:
            memory.push_pair(x - pending[0], g - pending[1])
            pending = None
        x_next, ls, report = lbfgs_step(objective, x, f, g, memory, wolfe)
        reports.append(report)
        if report.converged:
            if on_iteration is not None:
                on_iteration(k, x, f, report)
            break
        if not report.failed:
            pending = (x, g)
        x = x_next
        if on_iteration is not None:
            on_iteration(k, x, report.value if not report.failed else f, report)
    return x, reports
