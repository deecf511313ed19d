"""Primal/dual SDPs for a guess nu, the packing/covering pair and the rho search.

Notation: a_i = X_i - nu, S(w) = sum_i w_i a_i a_i^T, cap = 1/((1-eps)N).
The primal minimizes lambda_max(S(w)) over the capped simplex, the dual
maximizes the capped-selection value of q_i = a_i^T M a_i over trace-1 PSD M.
The packing form maximizes sum(w) subject to w <= cap and rho S(w) <= I.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from .model import (ConstantSchedule, DimensionMismatch, InvalidSpec, RobustMeanError,
                    SampleSet, WeightVector)

logger = logging.getLogger(__name__)

# Dimension up to which spectral quantities use a dense eigensolver.
EXACT_THRESHOLD = 64
FEAS_TOL = 1e-6


class RhoOutOfRange(RobustMeanError, ValueError):
    pass


class InsufficientMass(RobustMeanError, ValueError):
    pass


class InfeasibleInput(RobustMeanError, ValueError):
    pass


class TraceBudgetExceeded(RobustMeanError, ValueError):
    pass


class ZeroMatrix(RobustMeanError, ValueError):
    pass


class SearchExhausted(RobustMeanError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SdpContext:
    samples: SampleSet
    nu: np.ndarray
    eps: float
    rho: float | None = None
    centered: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        nu = _frozen(np.atleast_1d(self.nu))
        if nu.shape != (self.samples.dim,):
            raise DimensionMismatch(f"nu has shape {nu.shape}, samples have dim {self.samples.dim}")
        if not 0.0 < self.eps < 1.0 / 3.0:
            raise InvalidSpec(f"eps must lie in (0, 1/3), got {self.eps!r}")
        if self.rho is not None and not 0.0 < self.rho <= 1.0:
            raise RhoOutOfRange(f"rho must lie in (0, 1], got {self.rho!r}")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "centered", _frozen(self.samples.data - nu))

    @property
    def n(self) -> int:
        return self.samples.n

    @property
    def dim(self) -> int:
        return self.samples.dim

    @property
    def cap(self) -> float:
        return 1.0 / ((1.0 - self.eps) * self.n)

    def with_rho(self, rho: float) -> "SdpContext":
        return SdpContext(self.samples, self.nu, self.eps, rho)

    def with_nu(self, nu: np.ndarray) -> "SdpContext":
        return SdpContext(self.samples, nu, self.eps, self.rho)


# ---------------------------------------------------------------------------
# Spectral helpers


def second_moment(rows: np.ndarray, w: np.ndarray) -> np.ndarray:
    """rows^T diag(w) rows, symmetrized."""
    s = rows.T @ (rows * w[:, None])
    return 0.5 * (s + s.T)


def weighted_lambda_max(rows: np.ndarray, w: np.ndarray,
                        exact_threshold: int = EXACT_THRESHOLD) -> float:
    """Top eigenvalue of rows^T diag(w) rows.

    Dense eigensolve up to ``exact_threshold``; above it, Lanczos on the
    operator v -> rows^T (w * (rows v)), which never forms the d x d matrix.
    """
    d = rows.shape[1]
    if d <= exact_threshold or d < 3:
        return float(np.linalg.eigvalsh(second_moment(rows, w))[-1])
    op = LinearOperator((d, d), matvec=lambda v: rows.T @ (w * (rows @ v)), dtype=np.float64)
    v0 = np.ones(d) / math.sqrt(d)
    val = eigsh(op, k=1, which="LA", tol=1e-12, v0=v0, return_eigenvectors=False)
    return float(val[0])


def _weights(ctx: SdpContext, w: WeightVector | np.ndarray) -> np.ndarray:
    arr = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if arr.shape != (ctx.n,):
        raise DimensionMismatch(f"weights of shape {arr.shape} for {ctx.n} samples")
    return arr


def primal_objective(ctx: SdpContext, w: WeightVector | np.ndarray,
                     exact_threshold: int = EXACT_THRESHOLD) -> float:
    """lambda_max of the w-weighted second moment about nu."""
    return weighted_lambda_max(ctx.centered, _weights(ctx, w), exact_threshold)


# ---------------------------------------------------------------------------
# Dual certificates


class PsdOperator(Protocol):
    dim: int

    def matmat(self, v: np.ndarray) -> np.ndarray: ...

    def trace(self) -> float: ...


@dataclass(frozen=True)
class DualCertificate:
    """A PSD matrix M with trace at most one.

    Stored either explicitly as a d x d matrix or implicitly as an operator
    exposing ``matmat`` and ``trace`` (averaged matrix exponentials).
    """

    matrix: np.ndarray | None = None
    operator: PsdOperator | None = None
    trace_bound: float = 1.0

    def __post_init__(self) -> None:
        if (self.matrix is None) == (self.operator is None):
            raise InvalidSpec("give exactly one of matrix or operator")
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise InvalidSpec("certificate matrix must be square")
            object.__setattr__(self, "matrix", _frozen(0.5 * (m + m.T)))

    @classmethod
    def explicit(cls, m: np.ndarray) -> "DualCertificate":
        return cls(matrix=m, trace_bound=float(np.trace(m)))

    @classmethod
    def implicit(cls, op: PsdOperator) -> "DualCertificate":
        return cls(operator=op, trace_bound=float(op.trace()))

    @classmethod
    def rank_one(cls, y: np.ndarray) -> "DualCertificate":
        y = np.asarray(y, dtype=np.float64)
        y = y / np.linalg.norm(y)
        return cls.explicit(np.outer(y, y))

    @property
    def is_explicit(self) -> bool:
        return self.matrix is not None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0] if self.matrix is not None else self.operator.dim

    def matmat(self, v: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix @ v
        return self.operator.matmat(v)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matmat(np.asarray(v, dtype=np.float64)[:, None])[:, 0]

    def trace(self) -> float:
        if self.matrix is not None:
            return float(np.trace(self.matrix))
        return float(self.operator.trace())

    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return np.array(self.matrix)
        m = self.matmat(np.eye(self.dim))
        return 0.5 * (m + m.T)

    def quadratic_forms(self, rows: np.ndarray, block: int = 256) -> np.ndarray:
        """q_i = rows_i^T M rows_i for all rows."""
        if self.matrix is not None:
            return np.einsum("ij,ij->i", rows @ self.matrix, rows)
        out = np.empty(rows.shape[0])
        for s in range(0, rows.shape[0], block):
            chunk = rows[s:s + block]
            out[s:s + block] = np.einsum("ij,ji->i", chunk, self.matmat(chunk.T))
        return out

    def check(self, probes: int = 8, seed: int = 0, tol: float = 1e-8) -> bool:
        """PSD and trace hygiene: exact for explicit, random probes for implicit."""
        if self.trace() > 1.0 + tol:
            return False
        if self.matrix is not None:
            return bool(np.linalg.eigvalsh(self.matrix)[0] >= -tol)
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((self.dim, probes))
        mv = self.matmat(v)
        quad = np.einsum("ij,ij->j", v, mv)
        return bool(np.all(quad >= -tol * np.einsum("ij,ij->j", v, v)))


def capped_selection_value(q: np.ndarray, eps: float) -> float:
    """min over the capped simplex of sum_i w_i q_i.

    Equals the average of the smallest K = (1-eps)N values when K is an
    integer; otherwise the (floor(K)+1)-th smallest value enters with the
    fractional weight. Uses partial selection, not a full sort.
    """
    n = q.size
    k = (1.0 - eps) * n
    k_round = round(k)
    if abs(k - k_round) < 1e-9:
        k = float(k_round)
    whole = int(math.floor(k))
    frac = k - whole
    if whole >= n:
        return float(q.mean())
    part = np.partition(q, whole)
    total = part[:whole].sum() + frac * part[whole]
    return float(total / k)


def dual_objective(ctx: SdpContext, cert: DualCertificate) -> float:
    if cert.dim != ctx.dim:
        raise DimensionMismatch(f"certificate of dim {cert.dim} for samples of dim {ctx.dim}")
    return capped_selection_value(cert.quadratic_forms(ctx.centered), ctx.eps)


# ---------------------------------------------------------------------------
# Packing / covering


@dataclass(frozen=True)
class PackingInstance:
    """Packing SDP at (nu, eps, rho), stored through the factor rows only.

    Constraint i has top block rho a_i a_i^T and bottom block (1-eps)N e_i e_i^T,
    so feasibility splits into rho S(w) <= I and w_i <= cap.
    """

    context: SdpContext
    rows: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.context.rho is None:
            raise RhoOutOfRange("packing instance needs rho")
        object.__setattr__(self, "rows", _frozen(math.sqrt(self.context.rho) * self.context.centered))

    @property
    def rho(self) -> float:
        return float(self.context.rho)

    @property
    def cap(self) -> float:
        return self.context.cap

    @property
    def n(self) -> int:
        return self.context.n

    @property
    def dim(self) -> int:
        return self.context.dim

    @property
    def degenerate(self) -> bool:
        return not np.any(self.rows)

    def top_block_max(self, w: np.ndarray, exact_threshold: int = EXACT_THRESHOLD) -> float:
        return weighted_lambda_max(self.rows, w, exact_threshold)

    def packing_violation(self, w: np.ndarray) -> float:
        """Largest relative violation of the packing constraints (<= 0 when feasible)."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.n,):
            raise DimensionMismatch(f"weights of shape {w.shape} for {self.n} constraints")
        neg = float(-w.min()) if w.size else 0.0
        box = float(w.max() / self.cap - 1.0)
        top = self.top_block_max(np.maximum(w, 0.0)) - 1.0
        return max(neg, box, top)

    def is_packing_feasible(self, w: np.ndarray, tol: float = FEAS_TOL) -> bool:
        return self.packing_violation(w) <= tol


def build_packing(ctx: SdpContext) -> PackingInstance:
    if ctx.rho is None or not 0.0 < ctx.rho <= 1.0:
        raise RhoOutOfRange(f"rho must lie in (0, 1], got {ctx.rho!r}")
    return PackingInstance(ctx)


@dataclass(frozen=True)
class CoveringSolution:
    """Covering pair M' = scale * direction and y'.

    ``direction`` is a trace-1 certificate. Feasibility means
    rho a_i^T M' a_i + (1-eps)N y'_i >= 1 for every i.
    """

    direction: DualCertificate
    scale: float
    y_prime: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "y_prime", _frozen(self.y_prime))
        if self.scale < 0 or np.any(self.y_prime < 0):
            raise InvalidSpec("covering variables must be nonnegative")

    @property
    def trace(self) -> float:
        return self.scale * self.direction.trace()

    @property
    def value(self) -> float:
        return self.trace + float(self.y_prime.sum())

    @property
    def m_prime(self) -> np.ndarray:
        return self.scale * self.direction.dense()

    def slacks(self, inst: PackingInstance) -> np.ndarray:
        q = self.direction.quadratic_forms(inst.rows)
        return self.scale * q + self.y_prime / inst.cap - 1.0

    def is_feasible(self, inst: PackingInstance, tol: float = FEAS_TOL) -> bool:
        return bool(self.slacks(inst).min() >= -tol) and self.direction.check()


def best_covering(q: np.ndarray, cap: float) -> tuple[float, np.ndarray, float]:
    """Optimal (t, y', value) for the covering pair with M' = t P.

    ``q`` holds rho a_i^T P a_i for a trace-1 PSD P. For fixed t the best y'
    is cap * max(0, 1 - t q_i); the value is convex piecewise linear in t, so
    the optimum sits at t = 0 or at a breakpoint 1/q_i.
    """
    n = q.size
    best_t, best_val = 0.0, cap * n
    pos = np.sort(q[q > 0])
    if pos.size:
        prefix = np.concatenate(([0.0], np.cumsum(pos)[:-1]))
        idx = np.arange(pos.size)
        t = 1.0 / pos
        # Entries with q_i < 1/t (indices below j among positives) plus
        # all non-positive q entries contribute 1 - t q_i.
        n_nonpos = n - pos.size
        vals = t + cap * (n_nonpos + idx - t * prefix)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_t, best_val = float(t[j]), float(vals[j])
    y = cap * np.maximum(0.0, 1.0 - best_t * q)
    return best_t, y, best_t + float(y.sum())


def convert_primal(inst: PackingInstance, w_prime: np.ndarray) -> WeightVector:
    """Normalize a packing solution of mass >= 1 - eps/10 into the 2eps simplex."""
    eps = inst.context.eps
    w_prime = np.asarray(w_prime, dtype=np.float64)
    mass = float(w_prime.sum())
    # relative slack of 1e-12 absorbs summation rounding at the boundary
    if mass < (1.0 - eps / 10.0) * (1.0 - 1e-12):
        raise InsufficientMass(f"packing mass {mass:.6g} below 1 - eps/10 = {1 - eps / 10:.6g}")
    violation = inst.packing_violation(w_prime)
    if violation > FEAS_TOL:
        raise InfeasibleInput(f"packing constraint violated by {violation:.3g}")
    w = np.clip(w_prime, 0.0, inst.cap)
    return WeightVector(w / w.sum(), eps_cap=min(2.0 * eps, 0.999))


def convert_dual(inst: PackingInstance, cov: CoveringSolution) -> tuple[DualCertificate, float]:
    """Trace-normalize a covering solution; returns (M, dual objective of M)."""
    tr = cov.trace
    if tr < 1e-12:
        raise ZeroMatrix("covering matrix has zero trace")
    if cov.value > 1.0 + 1e-12:
        raise TraceBudgetExceeded(f"tr(M') + |y'| = {cov.value:.6g} exceeds 1")
    if not cov.is_feasible(inst):
        raise InfeasibleInput("covering constraints violated")
    direction = cov.direction
    if abs(direction.trace() - 1.0) > 1e-12:
        if direction.is_explicit:
            direction = DualCertificate.explicit(direction.dense() / direction.trace())
        else:
            raise InvalidSpec("implicit covering direction must have unit trace")
    return direction, dual_objective(inst.context, direction)


# ---------------------------------------------------------------------------
# Search over rho


@dataclass(frozen=True)
class GoodPrimal:
    weights: WeightVector
    objective: float
    rho: float


@dataclass(frozen=True)
class GoodDual:
    certificate: DualCertificate
    objective: float
    rho: float


SearchOutcome = Union[GoodPrimal, GoodDual]
Solver = Callable[..., "object"]


def search_budget(d: int, eps: float) -> int:
    return math.ceil(math.log2(max(d / eps, 2.0))) + 8


def rho_search(ctx: SdpContext, schedule: ConstantSchedule, solve: Solver | None = None,
               tol: float | None = None, trace: list[dict] | None = None,
               **solve_kwargs) -> SearchOutcome:
    """Find rho near 1/OPT and turn the packing/covering pair into a decision.

    ``solve`` has the signature of ``solver.solve_with_retries``. Bracket
    updates rely on OPT_rho being non-increasing and rho * OPT_rho being
    non-decreasing: a certified OPT_rho < 1 gives rho* <= rho * ub and a
    certified OPT_rho > 1 gives rho* >= rho * lb.
    """
    if solve is None:
        from .solver import solve_with_retries as solve
    eps = ctx.eps
    tol = eps / 30.0 if tol is None else tol
    trace = [] if trace is None else trace
    mass_target = 1.0 - eps / 10.0
    narrow = 1.0 / (1.0 - 2.0 * eps / 30.0)

    uniform = np.full(ctx.n, 1.0 / ctx.n)
    upper = primal_objective(ctx, uniform)
    if upper <= 0.0:
        # every sample sits at nu
        w = WeightVector(uniform, eps_cap=min(2 * eps, 0.999))
        trace.append(dict(rho=1.0, decision="degenerate"))
        return GoodPrimal(w, 0.0, 1.0)
    rho_lo, rho_hi = min(1.0, 1.0 / (2.0 * upper)), 1.0
    rho = 1.0
    warm = None
    last_fixed_point = False
    budget = search_budget(ctx.dim, eps)

    for step in range(budget + 1):
        inst = build_packing(ctx.with_rho(rho))
        out = solve(inst, tol, band=(mass_target, 1.0), warm_start=warm, **solve_kwargs)
        lb, ub = out.packing_value, out.covering_value
        # rho * w' stays top-block feasible after rescaling to the next rho
        warm = out.w_prime * rho
        record = dict(step=step, rho=rho, packing=lb, covering=ub, rho_lo=rho_lo, rho_hi=rho_hi)
        trace.append(record)

        primal = dual = None
        if lb >= mass_target:
            w = convert_primal(inst, out.w_prime)
            p_obj = primal_objective(ctx, w)
            record["primal_objective"] = p_obj
            # At rho = 1 a heavy packing point ends the search; later steps
            # wait until both halves convert so the weights are near optimal.
            if p_obj <= schedule.primal_threshold and (step == 0 or ub <= 1.0):
                record["decision"] = "primal"
                logger.debug("rho search %s", record)
                return GoodPrimal(w, p_obj, rho)
            primal = (w, p_obj)
        if ub <= 1.0 and out.covering.trace > 1e-12:
            cert, d_obj = convert_dual(inst, out.covering)
            record["dual_objective"] = d_obj
            dual = (cert, d_obj)
        if primal is not None and dual is not None:
            record["decision"] = "dual"
            logger.debug("rho search %s", record)
            return GoodDual(dual[0], dual[1], rho)

        # Larger rho shrinks the packing optimum.
        if lb < mass_target:
            rho_hi = min(rho_hi, rho * ub) if ub < 1.0 else min(rho_hi, rho)
            record["decision"] = "decrease_rho"
        else:
            rho_lo = max(rho_lo, rho * lb) if lb > 1.0 else max(rho_lo, rho)
            record["decision"] = "increase_rho"
        logger.debug("rho search %s", record)
        if rho_lo > rho_hi:
            # inconsistent certificates can only come from solver tolerance
            raise SearchExhausted(f"empty bracket [{rho_lo:.6g}, {rho_hi:.6g}]", trace)

        if rho_hi <= rho_lo * narrow:
            rho, last_fixed_point = rho_hi, False
        elif record["decision"] == "decrease_rho" and not last_fixed_point:
            rho, last_fixed_point = max(rho_lo, rho_hi * (1.0 - eps / 30.0)), True
        else:
            rho, last_fixed_point = math.sqrt(rho_lo * rho_hi), False
    raise SearchExhausted(f"no decision after {budget} bisection steps", trace)
