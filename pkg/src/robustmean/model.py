"""Core types, the constants schedule and shared error classes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

# Per-stage failure probability. It sets the good-sample norm radius.
TAU = 1.0 / 30.0

# Default for the concentration constant. Calibrated with the condition
# checker at eps=0.1, d=20, N=50d/delta^2 (see scripts/calibrate_c1.py).
DEFAULT_C1 = 4.5


class RobustMeanError(Exception):
    """Base class for all errors raised by the package."""


class EpsOutOfRange(RobustMeanError, ValueError):
    pass


class ConstraintViolated(RobustMeanError, ValueError):
    """A constant schedule breaks one of the ordering inequalities."""

    def __init__(self, inequality: str, failed: tuple[str, ...] = ()):
        super().__init__(inequality)
        self.inequality = inequality
        self.failed = failed or (inequality,)


class DimensionMismatch(RobustMeanError, ValueError):
    pass


class EmptyInput(RobustMeanError, ValueError):
    pass


class InvalidSpec(RobustMeanError, ValueError):
    pass


class Regime(str, enum.Enum):
    SUB_GAUSSIAN = "subgaussian"
    BOUNDED_COVARIANCE = "bounded_covariance"


class TerminalCase(str, enum.Enum):
    PRIMAL_ACCEPTED = "primal_accepted"
    BUDGET_EXHAUSTED = "iteration_budget_exhausted"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SampleSet:
    """N x d matrix of samples, one per row."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise EmptyInput(f"need a nonempty N x d matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidSpec("samples contain NaN or Inf")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class GroundTruth:
    mu_star: np.ndarray
    good_mask: np.ndarray
    sigma: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu_star", _readonly(np.atleast_1d(self.mu_star)))
        mask = np.array(self.good_mask, dtype=bool, copy=True)
        mask.setflags(write=False)
        object.__setattr__(self, "good_mask", mask)
        if self.sigma <= 0:
            raise InvalidSpec(f"sigma must be positive, got {self.sigma}")

    def check_budget(self, eps: float) -> bool:
        """True when at least (1-eps)N samples are good."""
        n = self.good_mask.size
        return int(self.good_mask.sum()) >= (1 - eps) * n - 1e-9


@dataclass(frozen=True)
class WeightVector:
    """Weights on the samples, strict members of the capped simplex or near-feasible.

    A near-feasible vector (``strict=False``) may sum to less than one, as
    produced by the packing solver. ``normalized`` rescales it explicitly.
    """

    w: np.ndarray
    eps_cap: float
    strict: bool = True

    def __post_init__(self) -> None:
        w = _readonly(np.atleast_1d(self.w))
        object.__setattr__(self, "w", w)
        if np.any(w < 0):
            raise InvalidSpec("weights must be nonnegative")
        total = float(w.sum())
        if self.strict:
            if abs(total - 1.0) > 1e-9:
                raise InvalidSpec(f"strict weights must sum to 1, got {total!r}")
            if np.any(w > self.cap * (1 + 1e-12)):
                raise InvalidSpec(f"weight above cap {self.cap!r}: max {w.max()!r}")
        elif not 0 < total <= 1 + 1e-9:
            raise InvalidSpec(f"near-feasible weights must sum into (0, 1], got {total!r}")

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def cap(self) -> float:
        return 1.0 / ((1.0 - self.eps_cap) * self.w.size)

    @property
    def total(self) -> float:
        return float(self.w.sum())

    def normalized(self, eps_cap: float | None = None) -> "WeightVector":
        """Rescale to unit mass; the result is checked as a strict member."""
        cap = self.eps_cap if eps_cap is None else eps_cap
        return WeightVector(self.w / self.w.sum(), cap, strict=True)

    @classmethod
    def uniform(cls, n: int, eps_cap: float = 0.0) -> "WeightVector":
        return cls(np.full(n, 1.0 / n), eps_cap)


@dataclass(frozen=True)
class EstimationReport:
    mu_hat: np.ndarray
    iterations: int
    terminal_case: TerminalCase
    sdp_calls: int
    error_vs_truth: float | None = None
    primal_objective: float | None = None
    trace: tuple[dict, ...] = field(default=(), repr=False)
    # Final guess (input units), output weights on the working samples and
    # the independent re-checks of the returned primal point.
    nu: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    verification: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu_hat", _readonly(self.mu_hat))
        if self.nu is not None:
            object.__setattr__(self, "nu", _readonly(self.nu))
        if self.weights is not None:
            object.__setattr__(self, "weights", _readonly(self.weights))
        object.__setattr__(self, "verification", dict(self.verification))
        if not np.all(np.isfinite(self.mu_hat)):
            raise InvalidSpec("estimate is not finite")


# ---------------------------------------------------------------------------
# Constants schedule


def _derived(c1: float, eps: float, regime: Regime) -> tuple[float, float, float]:
    """(delta, delta2, beta) for the given regime."""
    log_term = math.log(1.0 / eps)
    if regime is Regime.SUB_GAUSSIAN:
        return c1 * eps * math.sqrt(log_term), c1 * eps * log_term, math.sqrt(eps * log_term)
    return c1 * math.sqrt(eps), c1, 1.0


# Each inequality: (label, constant it constrains, predicate on the dict of
# constants plus eps/beta/delta/delta2). Within a constant, inequalities that
# depend on eps alone are listed before the ones relating it to other constants.
Inequality = tuple[str, str, Callable[[dict], bool]]

INEQUALITIES: tuple[Inequality, ...] = (
    ("δ₂ + 2δ(c₂β) ≤ 0.1(c₂β)²", "c2",
     lambda k: k["delta2"] + 2 * k["delta"] * k["c2"] * k["beta"] <= 0.1 * (k["c2"] * k["beta"]) ** 2),
    ("(c₄/20)β² ≥ ε/10", "c4",
     lambda k: k["c4"] / 20 * k["beta"] ** 2 >= k["eps"] / 10),
    ("0.9c₄² ≥ 1.1c₂²", "c4",
     lambda k: 0.9 * k["c4"] ** 2 >= 1.1 * k["c2"] ** 2),
    ("c₅ ≥ c₂", "c5", lambda k: k["c5"] >= k["c2"]),
    ("0.9c₅² ≥ c₄", "c5", lambda k: 0.9 * k["c5"] ** 2 >= k["c4"]),
    ("c₇ ≥ 1 + 2c₅β/sqrt(ln(1/ε))", "c7",
     lambda k: k["c7"] >= 1 + 2 * k["c5"] * k["beta"] / math.sqrt(math.log(1 / k["eps"]))),
    ("(c₁²c₆²)/2 ≥ c₄ + c₁c₇", "c6",
     lambda k: k["c1"] ** 2 * k["c6"] ** 2 / 2 >= k["c4"] + k["c1"] * k["c7"]),
    ("c₃ ≥ c₆ + 1 + 2c₅√ε/c₁", "c3",
     lambda k: k["c3"] >= k["c6"] + 1 + 2 * k["c5"] * math.sqrt(k["eps"]) / k["c1"]),
)

# Order in which constants are resolved: each depends only on earlier ones.
RESOLUTION_ORDER = ("c1", "c2", "c4", "c5", "c7", "c6", "c3")


def _lower_bound(name: str, k: dict) -> float:
    """Closed-form smallest value of ``name`` meeting its inequalities."""
    eps, beta = k["eps"], k["beta"]
    if name == "c2":
        # 0.1 b^2 x^2 - 2 delta b x - delta2 >= 0 with x = c2
        a, b, c = 0.1 * beta**2, -2 * k["delta"] * beta, -k["delta2"]
        return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
    if name == "c4":
        return max(math.sqrt(1.1 / 0.9) * k["c2"], 2 * eps / beta**2)
    if name == "c5":
        return max(k["c2"], math.sqrt(k["c4"] / 0.9))
    if name == "c7":
        return 1 + 2 * k["c5"] * beta / math.sqrt(math.log(1 / eps))
    if name == "c6":
        return math.sqrt(2 * (k["c4"] + k["c1"] * k["c7"])) / k["c1"]
    if name == "c3":
        return k["c6"] + 1 + 2 * k["c5"] * math.sqrt(eps) / k["c1"]
    raise KeyError(name)


def _failed(k: dict, names: tuple[str, ...] | None = None) -> list[str]:
    return [label for label, owner, pred in INEQUALITIES
            if (names is None or owner in names) and not pred(k)]


@dataclass(frozen=True)
class ConstantSchedule:
    """Resolved constants c1..c7 for a contamination level and regime.

    All ordering inequalities are re-checked at construction.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    c6: float
    c7: float
    eps: float
    regime: Regime = Regime.SUB_GAUSSIAN

    def __post_init__(self) -> None:
        _check_eps(self.eps)
        object.__setattr__(self, "regime", Regime(self.regime))
        for name in RESOLUTION_ORDER:
            if not getattr(self, name) > 0:
                raise ConstraintViolated(f"{name} > 0")
        failed = _failed(self._env())
        if failed:
            raise ConstraintViolated(failed[0], tuple(failed))

    def _env(self) -> dict:
        k = {name: getattr(self, name) for name in RESOLUTION_ORDER}
        k.update(eps=self.eps, delta=self.delta, delta2=self.delta2, beta=self.beta)
        return k

    @property
    def delta(self) -> float:
        return _derived(self.c1, self.eps, self.regime)[0]

    @property
    def delta2(self) -> float:
        return _derived(self.c1, self.eps, self.regime)[1]

    @property
    def beta(self) -> float:
        return _derived(self.c1, self.eps, self.regime)[2]

    @property
    def offset(self) -> float:
        """Baseline of the OPT sandwich: 1 for identity covariance, 0 otherwise."""
        return 1.0 if self.regime is Regime.SUB_GAUSSIAN else 0.0

    @property
    def primal_threshold(self) -> float:
        return self.offset + self.c4 * self.beta**2

    @property
    def dual_threshold(self) -> float:
        return self.offset + 0.9 * self.c4 * self.beta**2

    @property
    def error_bound(self) -> float:
        """c3 * delta, the guaranteed error scale (in units of sigma)."""
        return self.c3 * self.delta

    def good_radius(self, n: int, d: int) -> float:
        """Norm bound for good samples around the true mean (sigma = 1)."""
        if self.regime is Regime.SUB_GAUSSIAN:
            return 2.0 * math.sqrt(d * math.log(n / TAU))
        return 4.0 * math.sqrt(d / self.eps)

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in RESOLUTION_ORDER}
        out.update(eps=self.eps, regime=self.regime.value, delta=self.delta,
                   delta2=self.delta2, beta=self.beta)
        return out


def _check_eps(eps: float) -> None:
    if not (0.0 < eps < 1.0 / 3.0):
        raise EpsOutOfRange(f"eps must lie in (0, 1/3), got {eps!r}")


def _round_up(x: float) -> float:
    """Smallest multiple of 0.1 that is >= x (up to float noise)."""
    return math.ceil(round(x * 10, 9)) / 10


def build_constants(eps: float, regime: Regime | str = Regime.SUB_GAUSSIAN,
                    overrides: Mapping[str, float] | None = None) -> ConstantSchedule:
    """Resolve c1..c7 greedily in dependency order.

    Each constant not given in ``overrides`` becomes the smallest value with
    one decimal place that satisfies its inequalities given the constants
    resolved before it. Overrides are taken verbatim and validated.
    """
    _check_eps(eps)
    regime = Regime(regime)
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(RESOLUTION_ORDER)
    if unknown:
        raise InvalidSpec(f"unknown constants: {sorted(unknown)}")

    k: dict = {"eps": eps}
    for name in RESOLUTION_ORDER:
        if name in overrides:
            value = float(overrides[name])
            if not value > 0:
                raise ConstraintViolated(f"{name} > 0")
        elif name == "c1":
            value = DEFAULT_C1
        else:
            value = _round_up(_lower_bound(name, k))
            k[name] = value
            while _failed(k, (name,)):
                value = round(value + 0.1, 1)
                k[name] = value
        k[name] = value
        if name == "c1":
            delta, delta2, beta = _derived(value, eps, regime)
            k.update(delta=delta, delta2=delta2, beta=beta)
        failed = _failed(k, (name,))
        if failed:
            raise ConstraintViolated(failed[0], tuple(failed))

    return ConstantSchedule(eps=eps, regime=regime,
                            **{name: k[name] for name in RESOLUTION_ORDER})


def weighted_mean(samples: SampleSet, w: WeightVector | np.ndarray) -> np.ndarray:
    """Sum of w_i X_i."""
    weights = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if weights.shape != (samples.n,):
        raise DimensionMismatch(f"weights of shape {weights.shape} for {samples.n} samples")
    return weights @ samples.data
