"""Approximate positive-SDP solver, implicit exponential operators and oracles.

The packing problem max sum(w) s.t. 0 <= w <= cap, rho S(w) <= I is attacked
through its smoothed penalty form

    F_mu(w) = sum(w) - sum_j mu * exp((lambda_j(rho S(w)) - 1) / mu),

maximized over the box with L-BFGS-B while mu is driven down. The gradient of
the penalty is rho a_i^T E a_i with E = exp((rho S(w) - I) / mu), the matrix
multiplicative-weights matrix. Normalized, E is the trace-1 direction of a
covering certificate; every evaluation therefore yields a feasible packing
point (w scaled into the spectral constraint) and a feasible covering point
(E with the best scaling), and the solver stops once their values are within
the requested tolerance or decide the caller's band.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import dsyrk
from scipy.optimize import minimize
from scipy.special import ive

from .model import RobustMeanError
from .sdp import (FEAS_TOL, CoveringSolution, DualCertificate, PackingInstance,
                  SdpContext, best_covering, capped_selection_value, dual_objective,
                  primal_objective, second_moment, weighted_lambda_max)

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 20000
# The exponential penalty continues quadratically beyond this exponent.
_EXP_CLIP = 30.0


class BudgetExhausted(RobustMeanError):
    """Raised with the best (verified) outcome found before the budget ran out."""

    def __init__(self, message: str, outcome: "SolveOutcome"):
        super().__init__(message)
        self.outcome = outcome


class VerificationFailed(RobustMeanError):
    pass


class NoConvergence(RobustMeanError):
    pass


class SizeLimitExceeded(RobustMeanError, ValueError):
    pass


@dataclass(frozen=True)
class SolveOutcome:
    w_prime: np.ndarray
    covering: CoveringSolution
    packing_value: float
    covering_value: float
    iterations_used: int
    verified: bool
    status: str = "converged"

    @property
    def gap(self) -> float:
        return self.covering_value / max(self.packing_value, 1e-300) - 1.0


def _penalty(lam: np.ndarray, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """mu * exp((lam - 1)/mu) and its derivative, with a quadratic tail."""
    x = (lam - 1.0) / mu
    over = np.maximum(x - _EXP_CLIP, 0.0)
    e = np.exp(np.minimum(x, _EXP_CLIP))
    return mu * e * (1.0 + over + 0.5 * over**2), e * (1.0 + over)


class _Stop(Exception):
    pass


_KEEP_EXP = 40.0


def _gram(rows: np.ndarray, w: np.ndarray) -> np.ndarray:
    """rows^T diag(w) rows for w >= 0 via a symmetric rank-k update."""
    upper = dsyrk(1.0, (rows * np.sqrt(w)[:, None]).T)
    return np.triu(upper) + np.triu(upper, 1).T


class _Tracker:
    """Objective oracle that also records the best certified bounds."""

    def __init__(self, inst: PackingInstance, tol: float, band, budget: int):
        self.rows = np.asarray(inst.rows)
        self.cap = inst.cap
        self.tol = tol
        self.band = band
        self.budget = budget
        self.mu = 1.0
        self.evals = 0
        self.best_lb = 0.0
        self.best_w = np.zeros(inst.n)
        self.best_ub = math.inf
        self.best_cov: tuple[np.ndarray, np.ndarray, float] | None = None
        self.status: str | None = None

    def decided(self) -> str | None:
        lb, ub = self.best_lb, self.best_ub
        if lb > 0 and ub - lb <= self.tol * lb:
            return "converged"
        if self.band is not None:
            lo, hi = self.band
            if lb >= lo and ub <= hi:
                return "band_inside"
            if ub < lo:
                return "band_below"
            if lb > hi:
                return "band_above"
        return None

    def __call__(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        if self.evals >= self.budget:
            self.status = "budget_exhausted"
            raise _Stop
        self.evals += 1
        w = self.cap * np.clip(u, 0.0, 1.0)
        lam, vecs = np.linalg.eigh(_gram(self.rows, w))
        val, der = _penalty(lam, self.mu)
        # directions more than e^40 below the top carry no weight worth projecting
        keep = (lam - lam[-1]) / self.mu > -_KEEP_EXP
        lam, vecs, der = lam[keep], vecs[:, keep], der[keep]
        sq = np.square(self.rows @ vecs)
        q = sq @ der

        mass = float(w.sum())
        # lambda_max is linear in the scale of w: rescale onto the constraint,
        # upward too when the caps allow
        top, peak = float(lam[-1]), float(w.max())
        scale = 1.0 / top if top > 0 else math.inf
        if peak > 0:
            scale = min(scale, self.cap / peak)
        lb = scale * mass if math.isfinite(scale) else 0.0
        if lb > self.best_lb:
            self.best_lb = lb
            self.best_w = scale * w
        total = float(der.sum())
        if total > 1e-300:
            weights = der / total
        else:
            # every exponent underflowed; the shifted softmax has the same direction
            weights = np.exp((lam - lam[-1]) / self.mu)
            weights /= weights.sum()
        _, _, ub = best_covering(sq @ weights, self.cap)
        if ub < self.best_ub:
            self.best_ub = ub
            self.best_cov = (vecs, weights, ub)

        self.status = self.decided()
        if self.status is not None:
            raise _Stop
        return -(mass - float(val.sum())), -self.cap * (1.0 - q)


def _closed_form_degenerate(inst: PackingInstance) -> SolveOutcome:
    """All samples at nu: only the caps bind, OPT = N * cap."""
    n, d, cap = inst.n, inst.dim, inst.cap
    w = np.full(n, cap)
    direction = DualCertificate.explicit(np.eye(d) / d)
    cov = CoveringSolution(direction, 0.0, np.full(n, cap))
    return SolveOutcome(w, cov, float(w.sum()), cov.value, 0, True, "degenerate")


def _covering_from(inst: PackingInstance, vecs: np.ndarray, weights: np.ndarray) -> CoveringSolution:
    p = (vecs * weights) @ vecs.T
    p /= np.trace(p)
    direction = DualCertificate.explicit(p)
    q = direction.quadratic_forms(inst.rows)
    t, y, _ = best_covering(q, inst.cap)
    return CoveringSolution(direction, t, y)


def verify_outcome(inst: PackingInstance, w_prime: np.ndarray, cov: CoveringSolution,
                   tol: float = FEAS_TOL) -> bool:
    """Independent feasibility re-check of both halves of a solution."""
    return inst.is_packing_feasible(w_prime, tol) and cov.is_feasible(inst, tol)


def solve_positive(inst: PackingInstance, tol: float, budget: int = DEFAULT_BUDGET, *,
                   band: tuple[float, float] | None = None, warm_start: np.ndarray | None = None,
                   seed: int = 0, mu0: float = 0.25, shrink: float = 2.0,
                   stage_iters: int = 300) -> SolveOutcome:
    """Approximately solve the packing/covering pair at relative accuracy ``tol``.

    ``budget`` caps the number of objective evaluations (each one dense
    eigensolve of the d x d top block). ``band=(lo, hi)`` enables early exits
    once the certified bounds decide the caller's question: both
    lb >= lo and ub <= hi, ub < lo, or lb > hi. ``warm_start`` is a vector
    rho * w from an earlier solve; it is rescaled to this rho and clipped.
    A nonzero ``seed`` perturbs the starting point.
    """
    if not 0.0 < tol < 0.5:
        raise ValueError(f"tol must lie in (0, 1/2), got {tol!r}")
    if budget < 1:
        raise ValueError("budget must be positive")
    if inst.degenerate:
        return _closed_form_degenerate(inst)

    n, cap = inst.n, inst.cap
    if warm_start is not None:
        u = np.clip(np.asarray(warm_start) / inst.rho / cap, 0.0, 1.0)
    else:
        u = np.zeros(n)
    if seed:
        rng = np.random.default_rng(seed)
        u = np.clip(u + 0.5 * rng.random(n), 0.0, 1.0)

    tracker = _Tracker(inst, tol, band, budget)
    mu = mu0
    mu_floor = tol * 1e-4
    while tracker.status is None:
        tracker.mu = mu
        # optimize over z = u/step so a unit first step moves u on the smoothing
        # scale; unscaled, small-mu stages overshoot and stall
        step = min(1.0, mu)

        def stage(z, step=step):
            val, grad = tracker(step * z)
            return val, step * grad

        try:
            res = minimize(stage, u / step, jac=True, method="L-BFGS-B",
                           bounds=[(0.0, 1.0 / step)] * n,
                           options=dict(maxiter=stage_iters, maxfun=stage_iters * 2,
                                        ftol=1e-16, gtol=1e-12))
            u = np.clip(step * res.x, 0.0, 1.0)
        except _Stop:
            break
        logger.debug("mu=%.3g evals=%d lb=%.6g ub=%.6g", mu, tracker.evals,
                     tracker.best_lb, tracker.best_ub)
        if mu <= mu_floor:
            tracker.status = "mu_floor"
            break
        mu /= shrink

    if tracker.best_cov is None:
        raise VerificationFailed("solver produced no covering candidate")
    vecs, weights, _ = tracker.best_cov
    cov = _covering_from(inst, vecs, weights)
    w_prime = tracker.best_w
    verified = verify_outcome(inst, w_prime, cov)
    if not verified:
        raise VerificationFailed("solver output failed the feasibility re-check")
    outcome = SolveOutcome(w_prime, cov, float(w_prime.sum()), cov.value, tracker.evals,
                           verified, tracker.status)
    if tracker.status in ("budget_exhausted", "mu_floor"):
        raise BudgetExhausted(f"no decision after {tracker.evals} evaluations "
                              f"(lb={outcome.packing_value:.6g}, ub={outcome.covering_value:.6g})",
                              outcome)
    return outcome


def retry_cap(d: int, eps: float) -> int:
    return math.ceil(math.log2(math.log2(max(d / eps, 4.0)))) + 2


def solve_with_retries(inst: PackingInstance, tol: float, budget: int = DEFAULT_BUDGET,
                       retries: int | None = None, **kwargs) -> SolveOutcome:
    """Run ``solve_positive``, retrying from fresh starting points on budget exhaustion.

    If every attempt exhausts its budget, the best packing point and the best
    covering point across attempts are combined (both remain feasible).
    """
    retries = retry_cap(inst.dim, inst.context.eps) if retries is None else retries
    best: SolveOutcome | None = None
    for attempt in range(retries):
        try:
            return solve_positive(inst, tol, budget, seed=attempt, **kwargs)
        except BudgetExhausted as exc:
            logger.info("solver attempt %d exhausted: %s", attempt, exc)
            best = _merge(best, exc.outcome)
    assert best is not None
    return best


def _merge(a: SolveOutcome | None, b: SolveOutcome) -> SolveOutcome:
    if a is None:
        return b
    pack = a if a.packing_value >= b.packing_value else b
    cover = a if a.covering_value <= b.covering_value else b
    return SolveOutcome(pack.w_prime, cover.covering, pack.packing_value, cover.covering_value,
                        a.iterations_used + b.iterations_used, True, "budget_exhausted")


# ---------------------------------------------------------------------------
# Implicit averaged matrix exponentials


def _chebyshev_exp_coeffs(half_width: float, tol: float) -> np.ndarray:
    """Chebyshev coefficients of exp(h (s + 1) - 2h) on s in [-1, 1].

    These are 2 e^{-h} I_k(h) (halved for k = 0); the series is cut once the
    remaining coefficients sum below ``tol``.
    """
    h = max(half_width, 1e-12)
    kmax = int(2 * h + 60)
    coeffs = ive(np.arange(kmax + 1), h) * 2.0
    coeffs[0] *= 0.5
    tail = np.cumsum(coeffs[::-1])[::-1]
    keep = int(np.argmax(tail < tol)) if np.any(tail < tol) else kmax + 1
    return coeffs[:max(keep, 1)]


@dataclass
class ImplicitPsdOperator:
    """M = (1/T) sum_t W_t / tr(W_t) with W_t = exp(Psi_t), never formed.

    Psi_t = rows^T diag(x^t) rows. Each exponential is applied through a
    Chebyshev expansion on [0, hi_t] where hi_t bounds lambda_max(Psi_t);
    W_t is internally shifted by exp(-hi_t), which cancels in the ratio.
    Traces are computed by the same polynomial, so tr(M) = 1 up to rounding.
    """

    rows: np.ndarray
    blocks: list[np.ndarray]
    tol: float = 1e-12
    margin: float = 0.01
    _coeffs: list[np.ndarray] = field(default_factory=list, init=False, repr=False)
    _hi: list[float] = field(default_factory=list, init=False, repr=False)
    _traces: list[float] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if not self.blocks:
            raise ValueError("need at least one block")
        self.blocks = [np.asarray(x, dtype=np.float64) for x in self.blocks]
        for x in self.blocks:
            if x.shape != (self.rows.shape[0],) or np.any(x < 0):
                raise ValueError("block weights must be nonnegative with one entry per row")
            top = weighted_lambda_max(self.rows, x) if np.any(x) else 0.0
            hi = top * (1.0 + self.margin) + 1e-9
            self._hi.append(hi)
            self._coeffs.append(_chebyshev_exp_coeffs(hi / 2.0, self.tol))
        d = self.dim
        for t in range(len(self.blocks)):
            tr = 0.0
            for s in range(0, d, 64):
                eye = np.eye(d)[:, s:s + 64]
                tr += float(np.einsum("ij,ij->", eye, self._apply(t, eye)))
            self._traces.append(tr)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def degree(self) -> int:
        return max(len(c) for c in self._coeffs) - 1

    def _psi(self, t: int, v: np.ndarray) -> np.ndarray:
        x = self.blocks[t]
        return self.rows.T @ (x[:, None] * (self.rows @ v))

    def _apply(self, t: int, v: np.ndarray) -> np.ndarray:
        """Shifted exponential exp(Psi_t - hi_t I) applied to columns of v."""
        coeffs, hi = self._coeffs[t], self._hi[t]

        def mapped(z):  # (2 Psi / hi - I) z
            return 2.0 / hi * self._psi(t, z) - z

        t_prev, t_cur = v, mapped(v)
        out = coeffs[0] * t_prev
        if len(coeffs) > 1:
            out = out + coeffs[1] * t_cur
        for c in coeffs[2:]:
            t_prev, t_cur = t_cur, 2.0 * mapped(t_cur) - t_prev
            out = out + c * t_cur
        return out

    def matmat(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        squeeze = v.ndim == 1
        v2 = v[:, None] if squeeze else v
        out = np.zeros_like(v2)
        for t in range(len(self.blocks)):
            out += self._apply(t, v2) / self._traces[t]
        out /= len(self.blocks)
        return out[:, 0] if squeeze else out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matmat(np.asarray(v, dtype=np.float64))

    def trace(self) -> float:
        return 1.0

    def dense(self) -> np.ndarray:
        return self.matmat(np.eye(self.dim))


def exact_exponential_average(rows: np.ndarray, blocks: list[np.ndarray]) -> np.ndarray:
    """Dense reference for ImplicitPsdOperator via eigendecompositions."""
    d = rows.shape[1]
    out = np.zeros((d, d))
    for x in blocks:
        lam, vecs = np.linalg.eigh(second_moment(rows, np.asarray(x)))
        e = np.exp(lam - lam[-1])
        out += (vecs * (e / e.sum())) @ vecs.T
    return out / len(blocks)


# ---------------------------------------------------------------------------
# Power method


def _as_matmat(op):
    if isinstance(op, np.ndarray):
        return lambda v: op @ v, op.shape[0]
    return op.matmat, op.dim


def top_eigenvector(op, relative_tol: float = 0.01, seed: int = 0,
                    max_iter: int | None = None) -> tuple[np.ndarray, float]:
    """Power method for the top eigenpair of a PSD operator.

    Stops when the residual |Mv - theta v| falls below relative_tol * theta.
    The default iteration cap 2 ln(4d)/relative_tol + 10 is the gap-free
    count after which theta >= (1 - relative_tol) lambda_1 with high
    probability from a random start. Returns (v, theta) with theta the
    Rayleigh quotient at v.
    """
    matmat, d = _as_matmat(op)
    if max_iter is None:
        max_iter = int(math.ceil(2.0 * math.log(4.0 * d) / relative_tol)) + 10
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    theta = 0.0
    for _ in range(max_iter):
        mv = matmat(v[:, None])[:, 0]
        theta = float(v @ mv)
        norm = float(np.linalg.norm(mv))
        if norm == 0.0:
            return v, 0.0
        resid = float(np.linalg.norm(mv - theta * v))
        if resid <= relative_tol * abs(theta) * 1e-3:
            break
        v = mv / norm
    else:
        theta = float(v @ matmat(v[:, None])[:, 0])
        resid = float(np.linalg.norm(matmat(v[:, None])[:, 0] - theta * v))
        if resid > relative_tol * abs(theta):
            raise NoConvergence(f"power method residual {resid:.3g} after {max_iter} steps")
    return v, theta


# ---------------------------------------------------------------------------
# Reference oracles (small instances only)

MAX_REF_N = 64
MAX_REF_D = 8


@dataclass(frozen=True)
class ReferencePrimal:
    opt: float
    w: np.ndarray
    certificate: DualCertificate
    dual_value: float


@dataclass(frozen=True)
class ReferencePacking:
    opt: float
    w_prime: np.ndarray
    covering: CoveringSolution


def _check_size(n: int, d: int) -> None:
    if n > MAX_REF_N or d > MAX_REF_D:
        raise SizeLimitExceeded(f"reference solver limited to N <= {MAX_REF_N}, d <= {MAX_REF_D}; "
                                f"got N={n}, d={d}")


def _cvx_solve(problem) -> None:
    problem.solve(solver="CLARABEL", tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9,
                  max_iter=500)


def _psd_part(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    lam, vecs = np.linalg.eigh(m)
    return (vecs * np.maximum(lam, 0.0)) @ vecs.T


def _primal_program(a: np.ndarray, cap: float) -> tuple[np.ndarray, np.ndarray]:
    """Interior-point solve of min lambda_max(S(w)) over {sum w = 1, 0 <= w <= cap}.

    Returns the weights and the (PSD-projected) dual matrix of the spectral constraint.
    """
    import cvxpy as cp

    n, d = a.shape
    w = cp.Variable(n)
    t = cp.Variable()
    lmi = a.T @ cp.diag(w) @ a
    spectral = (t * np.eye(d) - (lmi + lmi.T) / 2 >> 0)
    problem = cp.Problem(cp.Minimize(t), [spectral, w >= 0, w <= cap, cp.sum(w) == 1])
    _cvx_solve(problem)
    wv = np.clip(np.asarray(w.value).ravel(), 0.0, cap)
    m = _psd_part(np.asarray(spectral.dual_value))
    if not np.trace(m) > 0:
        m = np.eye(d)
    return wv / wv.sum(), m / np.trace(m)


def reference_primal(ctx: SdpContext) -> ReferencePrimal:
    """min over the eps-capped simplex of lambda_max(S(w)), by interior point.

    Returns the optimizer, the dual matrix of the spectral constraint and the
    dual objective it attains, both re-evaluated with this package's own
    objective functions.
    """
    _check_size(ctx.n, ctx.dim)
    w, m = _primal_program(np.asarray(ctx.centered), ctx.cap)
    cert = DualCertificate.explicit(m)
    return ReferencePrimal(primal_objective(ctx, w), w, cert, dual_objective(ctx, cert))


def reference_solve(inst: PackingInstance) -> ReferencePacking:
    """Packing optimum max sum(w), 0 <= w <= cap, rho S(w) <= I, by interior point.

    The covering half is rebuilt from the spectral dual direction with the
    optimal scaling, so both halves are exactly feasible.
    """
    import cvxpy as cp

    _check_size(inst.n, inst.dim)
    rows = np.asarray(inst.rows)
    n, d = rows.shape
    if inst.degenerate:
        out = _closed_form_degenerate(inst)
        return ReferencePacking(out.packing_value, out.w_prime, out.covering)
    w = cp.Variable(n)
    lmi = rows.T @ cp.diag(w) @ rows
    spectral = (np.eye(d) - (lmi + lmi.T) / 2 >> 0)
    problem = cp.Problem(cp.Maximize(cp.sum(w)), [spectral, w >= 0, w <= inst.cap])
    _cvx_solve(problem)
    wv = np.clip(np.asarray(w.value).ravel(), 0.0, inst.cap)
    top = inst.top_block_max(wv)
    wv = wv / max(1.0, top)
    m = _psd_part(np.asarray(spectral.dual_value))
    if np.trace(m) <= 0:
        m = np.eye(d)
    lam, vecs = np.linalg.eigh(m)
    cov = _covering_from(inst, vecs, np.maximum(lam, 0.0))
    return ReferencePacking(0.5 * (float(wv.sum()) + cov.value), wv, cov)


def project_capped_simplex(v: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto {w : sum w = 1, 0 <= w <= cap} by bisection on the shift."""
    lo, hi = float(v.min()) - cap, float(v.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0.0, cap).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    w = np.clip(v - 0.5 * (lo + hi), 0.0, cap)
    return w / w.sum()


def subgradient_primal(ctx: SdpContext, iters: int = 4000) -> tuple[float, float, np.ndarray]:
    """Projected subgradient descent with Polyak steps on the primal SDP.

    The unknown optimum in the Polyak step is replaced by the best dual value
    seen, obtained from the rank-one certificate of the current top
    eigenvector. Returns (best primal value, best dual value, best weights).
    """
    a = np.asarray(ctx.centered)
    n = a.shape[0]
    cap = ctx.cap
    w = np.full(n, 1.0 / n)
    best_p, best_d, best_w = math.inf, -math.inf, w
    for _ in range(iters):
        lam, vecs = np.linalg.eigh(second_moment(a, w))
        v = vecs[:, -1]
        proj = (a @ v) ** 2
        if lam[-1] < best_p:
            best_p, best_w = float(lam[-1]), w.copy()
        best_d = max(best_d, capped_selection_value(proj, ctx.eps))
        gnorm = float(proj @ proj)
        if gnorm == 0.0 or best_p - best_d <= 1e-12:
            break
        step = (lam[-1] - best_d) / gnorm
        w = project_capped_simplex(w - step * proj, cap)
    return best_p, best_d, best_w


def packing_opt_from_primal(ctx: SdpContext, rho: float, tol: float = 1e-7) -> float:
    """OPT_rho through the primal: the largest mass m with m * P(m) <= 1/rho.

    P(m) is the primal optimum over the simplex capped at cap/m; a packing
    point of mass m is m times such a simplex point. m * P(m) is
    nondecreasing in m, so bisection applies. Used to cross-check the
    direct packing oracle.
    """
    _check_size(ctx.n, ctx.dim)
    a = np.asarray(ctx.centered)
    n = ctx.n

    def value(m: float) -> float:
        cap = max(ctx.cap / m, 1.0 / n)
        w, _ = _primal_program(a, cap)
        return m * primal_objective(ctx, w)

    lo, hi = 0.0, n * ctx.cap
    if value(hi) <= 1.0 / rho:
        return hi
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if value(mid) <= 1.0 / rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
