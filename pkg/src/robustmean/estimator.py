"""Guess-refinement estimators for identity-covariance and bounded-covariance data.

Each round solves the SDP pair around the current guess nu. A good primal
solution certifies that its weighted mean is accurate and ends the run; a
good dual certificate points along nu - mu*, and the guess moves by the
estimated distance along its top eigenvector, with the sign picked by
comparing the SDP values at both candidate points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .baseline import PruneResult, coordinatewise_median, prune
from .model import (ConstantSchedule, EstimationReport, GroundTruth, InvalidSpec, Regime,
                    RobustMeanError, SampleSet, TerminalCase, WeightVector, build_constants,
                    weighted_mean)
from .sdp import (DualCertificate, GoodPrimal, SdpContext, build_packing, primal_objective,
                  rho_search, second_moment)
from .solver import DEFAULT_BUDGET, solve_with_retries, top_eigenvector

logger = logging.getLogger(__name__)

# Ratio between the coordinate-wise median's error and eps * sqrt(d), used
# only to size the iteration budget.
MEDIAN_CONSTANT = 3.0


class Ambiguous(RobustMeanError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs shared by both estimators.

    ``solver_tol`` defaults to eps/30. ``max_iterations`` overrides the
    derived outer-loop budget. ``initial_guess`` replaces the coordinate-wise
    median as the starting point (in the units of the input samples).
    """

    solver_tol: float | None = None
    solver_budget: int = DEFAULT_BUDGET
    max_iterations: int | None = None
    initial_guess: tuple[float, ...] | None = None
    median_constant: float = MEDIAN_CONSTANT

    def __post_init__(self) -> None:
        if self.initial_guess is not None:
            object.__setattr__(self, "initial_guess", tuple(float(x) for x in self.initial_guess))
        if self.solver_tol is not None and not 0 < self.solver_tol < 0.5:
            raise InvalidSpec("solver_tol must lie in (0, 1/2)")


@dataclass(frozen=True)
class GuessState:
    nu: np.ndarray
    r_hat: float
    iteration: int

    def __post_init__(self) -> None:
        if self.r_hat < 0:
            raise InvalidSpec("r_hat must be nonnegative")


@dataclass(frozen=True)
class NuUpdate:
    v1: np.ndarray
    r_prime: float
    chosen_sign: int
    nu_next: np.ndarray
    candidate_values: tuple[float, float] = (math.nan, math.nan)


def iteration_budget(d: int, schedule: ConstantSchedule,
                     median_constant: float = MEDIAN_CONSTANT) -> int:
    """Rounds needed for a 3/4 contraction from the median's radius to c2 beta, plus 4."""
    ratio = median_constant * schedule.eps * math.sqrt(d) / (schedule.c2 * schedule.beta)
    rounds = math.ceil(math.log(ratio) / math.log(4.0 / 3.0)) if ratio > 1 else 0
    return rounds + 4


def estimate_distance(dual_value: float, schedule: ConstantSchedule) -> float:
    """Invert OPT ~ offset + r^2 at the dual value."""
    return math.sqrt(max(dual_value - schedule.offset, 0.0))


def _approximate_opt(samples: SampleSet, nu: np.ndarray, eps: float, rho: float, tol: float,
                     solve) -> float:
    """Estimate OPT at nu from one packing solve at a fixed rho.

    By the rho-scaling of the packing optimum, 1/(rho * OPT_rho) equals OPT
    at rho = 1/OPT and moves in the same direction as OPT for fixed rho.
    The certified covering value is used for OPT_rho.
    """
    inst = build_packing(SdpContext(samples, nu, eps, rho))
    out = solve(inst, tol)
    return 1.0 / (rho * out.covering_value)


def update_guess(state: GuessState, cert: DualCertificate, ctx: SdpContext,
                 schedule: ConstantSchedule, dual_value: float, rho: float,
                 tol: float | None = None, solve=solve_with_retries) -> NuUpdate:
    """Move nu by the estimated distance along the certificate's top eigenvector.

    Both nu + r' v1 and nu - r' v1 are scored by an approximate SDP value at
    the same rho; the smaller value wins. Near-ties are re-scored once with a
    tighter tolerance and then reported as Ambiguous.
    """
    tol = ctx.eps / 30.0 if tol is None else tol
    v1, _ = top_eigenvector(cert, relative_tol=0.01, seed=state.iteration)
    r_prime = estimate_distance(dual_value, schedule)
    plus = state.nu + r_prime * v1
    minus = state.nu - r_prime * v1
    for attempt in range(2):
        a = _approximate_opt(ctx.samples, plus, ctx.eps, rho, tol, solve)
        b = _approximate_opt(ctx.samples, minus, ctx.eps, rho, tol, solve)
        if abs(a - b) > 2.0 * tol * max(a, b):
            break
        tol /= 4.0
    else:
        raise Ambiguous(f"candidate values {a:.6g} and {b:.6g} are within tolerance")
    sign = 1 if a <= b else -1
    return NuUpdate(v1, r_prime, sign, plus if sign > 0 else minus, (a, b))


def verify_primal(ctx: SdpContext, w: WeightVector, reported: float,
                  schedule: ConstantSchedule) -> dict[str, bool]:
    """Independent re-checks of a returned primal point.

    ``weights_feasible``: w lies in the 2 eps capped simplex. ``objective_recheck``:
    a dense eigensolve reproduces the reported objective. ``below_threshold``:
    that objective is at most the primal acceptance threshold.
    """
    x = np.asarray(w.w)
    cap = 1.0 / ((1.0 - min(2.0 * ctx.eps, 0.999)) * x.size)
    feasible = bool(abs(x.sum() - 1.0) <= 1e-9 and x.min() >= 0 and x.max() <= cap * (1 + 1e-9))
    lam = float(np.linalg.eigvalsh(second_moment(np.asarray(ctx.centered), x))[-1])
    return dict(weights_feasible=feasible,
                objective_recheck=bool(abs(lam - reported) <= 1e-6 * max(1.0, abs(lam))),
                below_threshold=bool(lam <= schedule.primal_threshold))


@dataclass(frozen=True)
class _RunResult:
    mu_hat: np.ndarray
    iterations: int
    case: TerminalCase
    objective: float
    nu: np.ndarray
    weights: WeightVector
    verification: dict


@dataclass
class _Loop:
    samples: SampleSet
    eps: float
    schedule: ConstantSchedule
    config: EstimatorConfig
    sdp_calls: int = 0
    trace: list[dict] = field(default_factory=list)

    def solve(self, inst, tol, **kwargs):
        self.sdp_calls += 1
        return solve_with_retries(inst, tol, self.config.solver_budget, **kwargs)

    def run(self, nu: np.ndarray, budget: int, truth_mu: np.ndarray | None,
            scale: float = 1.0) -> _RunResult:
        tol = self.config.solver_tol or self.eps / 30.0
        for it in range(budget):
            ctx = SdpContext(self.samples, nu, self.eps)
            search_trace: list[dict] = []
            outcome = rho_search(ctx, self.schedule, solve=self.solve, tol=tol, trace=search_trace)
            record = dict(iteration=it, nu=(scale * nu).tolist(), rho=outcome.rho,
                          objective=outcome.objective, search_steps=len(search_trace),
                          primal_threshold=self.schedule.primal_threshold,
                          dual_threshold=self.schedule.dual_threshold)
            if truth_mu is not None:
                record["distance"] = float(np.linalg.norm(scale * nu - truth_mu))
            self.trace.append(record)
            if isinstance(outcome, GoodPrimal):
                record["branch"] = "primal"
                logger.info("round %d: primal accepted, objective %.6g", it, outcome.objective)
                return self._result(ctx, outcome.weights, outcome.objective, it + 1,
                                    TerminalCase.PRIMAL_ACCEPTED, scale)
            record["branch"] = "dual"
            state = GuessState(nu, estimate_distance(outcome.objective, self.schedule), it)
            update = update_guess(state, outcome.certificate, ctx, self.schedule,
                                  outcome.objective, outcome.rho, tol, self.solve)
            record.update(r_prime=scale * update.r_prime, sign=update.chosen_sign,
                          candidate_values=list(update.candidate_values))
            logger.info("round %d: dual objective %.6g, step %.4g", it, outcome.objective,
                        update.r_prime)
            nu = update.nu_next
        # Budget exhausted: fall back to the best primal point around the final guess.
        ctx = SdpContext(self.samples, nu, self.eps)
        w = _fallback_weights(ctx, tol, self.config.solver_budget)
        self.sdp_calls += 1
        return self._result(ctx, w, primal_objective(ctx, w), budget,
                            TerminalCase.BUDGET_EXHAUSTED, scale)

    def _result(self, ctx: SdpContext, w: WeightVector, objective: float, iterations: int,
                case: TerminalCase, scale: float) -> _RunResult:
        # w sums to one, so summing about a sample keeps identical rows exact
        anchor = self.samples.data[0]
        mu_hat = anchor + weighted_mean(SampleSet(self.samples.data - anchor), w)
        return _RunResult(mu_hat, iterations, case, objective,
                          scale * np.asarray(ctx.nu), w,
                          verify_primal(ctx, w, objective, self.schedule))


def _fallback_weights(ctx: SdpContext, tol: float, budget: int) -> WeightVector:
    """Normalized packing solution at rho = 1/U, U the uniform-weight objective."""
    upper = primal_objective(ctx, np.full(ctx.n, 1.0 / ctx.n))
    if upper <= 0:
        return WeightVector.uniform(ctx.n)
    inst = build_packing(ctx.with_rho(min(1.0, 1.0 / upper)))
    out = solve_with_retries(inst, tol, budget)
    w = np.clip(out.w_prime, 0.0, None)
    return WeightVector(w / w.sum(), eps_cap=0.0, strict=False).normalized(eps_cap=0.999)


def _check(samples: SampleSet, eps: float) -> None:
    if not 0.0 < eps < 1.0 / 3.0:
        raise InvalidSpec(f"eps must lie in (0, 1/3), got {eps!r}")
    if samples.n < 2:
        raise InvalidSpec("need at least two samples")


def _initial(samples: SampleSet, config: EstimatorConfig, scale: float) -> np.ndarray:
    if config.initial_guess is None:
        return coordinatewise_median(samples)
    guess = np.asarray(config.initial_guess) / scale
    if guess.shape != (samples.dim,):
        raise InvalidSpec("initial guess has the wrong dimension")
    return guess


def estimate_subgaussian(samples: SampleSet, eps: float, schedule: ConstantSchedule | None = None,
                         config: EstimatorConfig | None = None,
                         truth: GroundTruth | None = None) -> EstimationReport:
    """Robust mean for identity-covariance data with an eps fraction corrupted."""
    _check(samples, eps)
    schedule = schedule or build_constants(eps, Regime.SUB_GAUSSIAN)
    if schedule.regime is not Regime.SUB_GAUSSIAN:
        raise InvalidSpec("schedule regime must be sub-gaussian")
    config = config or EstimatorConfig()
    budget = config.max_iterations or iteration_budget(samples.dim, schedule, config.median_constant)
    loop = _Loop(samples, eps, schedule, config)
    truth_mu = None if truth is None else np.asarray(truth.mu_star)
    res = loop.run(_initial(samples, config, 1.0), budget, truth_mu)
    return _report(res, res.mu_hat, loop, truth)


def split_halves(samples: SampleSet) -> tuple[SampleSet, SampleSet]:
    half = samples.n // 2
    return SampleSet(samples.data[:half]), SampleSet(samples.data[half:])


def bounded_cov_working_set(samples_2n: SampleSet, eps: float, sigma: float = 1.0) -> PruneResult:
    """Divide by sigma, split in halves and prune the second half around the first's median."""
    scaled = SampleSet(samples_2n.data / sigma)
    split_a, split_b = split_halves(scaled)
    return prune(split_a, split_b, eps, sigma=1.0)


def estimate_bounded_cov(samples_2n: SampleSet, eps: float, sigma: float = 1.0,
                         schedule: ConstantSchedule | None = None,
                         config: EstimatorConfig | None = None,
                         truth: GroundTruth | None = None) -> EstimationReport:
    """Robust mean when the covariance is bounded by sigma^2 I.

    The 2N samples are divided by sigma, split in halves, and the second half
    is pruned around the coordinate-wise median of the first before the
    refinement loop; the estimate is scaled back by sigma.
    """
    _check(samples_2n, eps)
    if not sigma > 0:
        raise InvalidSpec("sigma must be positive")
    if samples_2n.n < 4:
        raise InvalidSpec("need at least four samples to split")
    schedule = schedule or build_constants(eps, Regime.BOUNDED_COVARIANCE)
    if schedule.regime is not Regime.BOUNDED_COVARIANCE:
        raise InvalidSpec("schedule regime must be bounded covariance")
    config = config or EstimatorConfig()
    pruned = bounded_cov_working_set(samples_2n, eps, sigma)
    budget = config.max_iterations or iteration_budget(samples_2n.dim, schedule,
                                                       config.median_constant)
    loop = _Loop(pruned.pruned, eps, schedule, config)
    loop.trace.append(dict(prune_replaced=pruned.replaced_count, prune_radius=pruned.radius * sigma))
    truth_mu = None if truth is None else np.asarray(truth.mu_star)
    start = _initial(pruned.pruned, config, sigma)
    res = loop.run(start, budget, truth_mu, scale=sigma)
    return _report(res, sigma * res.mu_hat, loop, truth)


def _report(res: _RunResult, mu_hat: np.ndarray, loop: _Loop,
            truth: GroundTruth | None) -> EstimationReport:
    err = None if truth is None else float(np.linalg.norm(mu_hat - truth.mu_star))
    return EstimationReport(mu_hat, res.iterations, res.case, loop.sdp_calls, err, res.objective,
                            tuple(loop.trace), nu=res.nu, weights=np.asarray(res.weights.w),
                            verification=res.verification)
