"""Synthetic eps-corrupted data, adversary strategies and condition spot-checks."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (ConstantSchedule, GroundTruth, InvalidSpec, Regime, RobustMeanError,
                    SampleSet)

# Stage identifiers used to namespace random streams derived from one seed.
_STAGE_GOOD = 1
_STAGE_ADVERSARY = 2
_STAGE_CHECK = 3


def stage_rng(seed: int, stage: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), stage, *extra]))


class AdversaryKind(str, enum.Enum):
    NONE = "none"
    CLUSTER_SHIFT = "cluster_shift"
    FAR_POINTS = "far_points"
    SUBSPACE_NOISE = "subspace_noise"
    MEAN_MIMIC = "mean_mimic"


@dataclass(frozen=True)
class AdversarySpec:
    """Replacement strategy applied to exactly floor(eps * N) samples.

    ``direction`` and ``magnitude`` parametrize ClusterShift, ``radius`` is used by
    FarPoints, ``rank`` and ``scale`` by SubspaceNoise, ``offset`` by MeanMimic.
    A missing direction means e_1.
    """

    kind: AdversaryKind = AdversaryKind.NONE
    eps: float = 0.0
    direction: tuple[float, ...] | None = None
    magnitude: float = 0.0
    radius: float = 0.0
    rank: int = 1
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AdversaryKind(self.kind))
        if not 0.0 <= self.eps < 1.0 / 3.0:
            raise InvalidSpec(f"adversary eps must lie in [0, 1/3), got {self.eps!r}")
        if self.kind is AdversaryKind.NONE and self.eps != 0.0:
            raise InvalidSpec("NoCorruption requires eps = 0")
        if self.direction is not None:
            object.__setattr__(self, "direction", tuple(float(x) for x in self.direction))
        if self.rank < 1:
            raise InvalidSpec("rank must be >= 1")

    def count(self, n: int) -> int:
        return int(math.floor(self.eps * n + 1e-9))

    def unit_direction(self, d: int) -> np.ndarray:
        if self.direction is None:
            u = np.zeros(d)
            u[0] = 1.0
            return u
        u = np.asarray(self.direction, dtype=np.float64)
        if u.shape != (d,) or not np.linalg.norm(u) > 0:
            raise InvalidSpec(f"direction must be a nonzero {d}-vector")
        return u / np.linalg.norm(u)

    @classmethod
    def cluster_shift(cls, eps: float, magnitude: float, direction=None) -> "AdversarySpec":
        return cls(AdversaryKind.CLUSTER_SHIFT, eps, direction=direction, magnitude=magnitude)


class DistributionKind(str, enum.Enum):
    GAUSSIAN_IDENTITY = "gaussian_identity"
    BOUNDED_COVARIANCE = "bounded_covariance"


# Bounded-covariance draws are scale mixtures of Gaussians: with probability
# _HEAVY_P the per-sample variance multiplier is _HEAVY_VAR, otherwise
# _LIGHT_VAR, so the mixture has unit variance per unit of spectrum.
_HEAVY_P = 0.1
_HEAVY_VAR = 5.5
_LIGHT_VAR = (1.0 - _HEAVY_P * _HEAVY_VAR) / (1.0 - _HEAVY_P)


@dataclass(frozen=True)
class GeneratorSpec:
    """Clean distribution plus size and seed.

    For bounded covariance, ``spectrum`` lists the covariance eigenvalues
    (default all sigma^2) and must stay below sigma^2.
    """

    n: int
    dim: int
    seed: int = 0
    distribution: DistributionKind = DistributionKind.GAUSSIAN_IDENTITY
    mu: tuple[float, ...] | None = None
    sigma: float = 1.0
    spectrum: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "distribution", DistributionKind(self.distribution))
        if self.n < 1 or self.dim < 1:
            raise InvalidSpec("n and dim must be positive")
        if self.mu is not None:
            object.__setattr__(self, "mu", tuple(float(x) for x in self.mu))
            if len(self.mu) != self.dim:
                raise InvalidSpec(f"mu has length {len(self.mu)}, expected {self.dim}")
        if self.sigma <= 0:
            raise InvalidSpec("sigma must be positive")
        if self.spectrum is not None:
            spec = tuple(float(x) for x in self.spectrum)
            object.__setattr__(self, "spectrum", spec)
            if len(spec) != self.dim:
                raise InvalidSpec(f"spectrum has length {len(spec)}, expected {self.dim}")
            if min(spec) < 0 or max(spec) > self.sigma**2 * (1 + 1e-12):
                raise InvalidSpec("spectrum entries must lie in [0, sigma^2]")

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(self.dim) if self.mu is None else np.asarray(self.mu)

    @property
    def effective_sigma(self) -> float:
        return 1.0 if self.distribution is DistributionKind.GAUSSIAN_IDENTITY else self.sigma


def _draw_clean(spec: GeneratorSpec) -> np.ndarray:
    rng = stage_rng(spec.seed, _STAGE_GOOD)
    z = rng.standard_normal((spec.n, spec.dim))
    if spec.distribution is DistributionKind.GAUSSIAN_IDENTITY:
        return spec.mean + z
    heavy = rng.random(spec.n) < _HEAVY_P
    scale = np.sqrt(np.where(heavy, _HEAVY_VAR, _LIGHT_VAR))[:, None]
    if spec.spectrum is None:
        shaped = z * scale
    else:
        shaped = z * scale * (np.sqrt(np.asarray(spec.spectrum)) / spec.sigma)
    return spec.mean + spec.sigma * shaped


def _random_units(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    u = rng.standard_normal((k, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _corrupt(clean: np.ndarray, idx: np.ndarray, good: np.ndarray, mu: np.ndarray,
             sigma: float, adv: AdversarySpec, rng: np.random.Generator) -> np.ndarray:
    k, d = idx.size, clean.shape[1]
    inliers = clean[good]
    mu_tilde = inliers.mean(axis=0)
    kind = adv.kind
    if kind is AdversaryKind.CLUSTER_SHIFT:
        return np.tile(mu + adv.magnitude * adv.unit_direction(d), (k, 1))
    if kind is AdversaryKind.FAR_POINTS:
        return mu_tilde + adv.radius * _random_units(rng, k, d)
    if kind is AdversaryKind.SUBSPACE_NOISE:
        r = min(adv.rank, d)
        basis, _ = np.linalg.qr(rng.standard_normal((d, r)))
        return mu + sigma * adv.scale * rng.standard_normal((k, r)) @ basis.T
    if kind is AdversaryKind.MEAN_MIMIC:
        # Copies of inliers shifted along their top principal direction.
        centered = inliers - mu_tilde
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        src = inliers[rng.integers(0, inliers.shape[0], size=k)]
        return src + adv.offset * sigma * vt[0]
    raise InvalidSpec(f"unsupported adversary {kind}")


def generate(spec: GeneratorSpec, adversary: AdversarySpec | None = None
             ) -> tuple[SampleSet, GroundTruth]:
    """Draw N clean samples and let the adversary replace floor(eps * N) of them."""
    adversary = adversary or AdversarySpec()
    clean = _draw_clean(spec)
    mu = spec.mean
    k = adversary.count(spec.n)
    good = np.ones(spec.n, dtype=bool)
    data = clean
    if k > 0:
        rng = stage_rng(spec.seed, _STAGE_ADVERSARY)
        idx = np.sort(rng.permutation(spec.n)[:k])
        good[idx] = False
        data = clean.copy()
        data[idx] = _corrupt(clean, idx, good, mu, spec.effective_sigma, adversary, rng)
    truth = GroundTruth(mu_star=mu, good_mask=good, sigma=spec.effective_sigma)
    return SampleSet(data), truth


# ---------------------------------------------------------------------------
# Condition spot-checks


@dataclass(frozen=True)
class ConditionReport:
    mean_deviation: float
    spectral_deviation: float
    max_norm: float
    delta: float
    delta2: float
    radius: float

    @property
    def mean_ok(self) -> bool:
        return self.mean_deviation <= self.delta

    @property
    def spectral_ok(self) -> bool:
        return self.spectral_deviation <= self.delta2

    @property
    def radius_ok(self) -> bool:
        return self.max_norm <= self.radius

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.spectral_ok and self.radius_ok

    def as_dict(self) -> dict:
        return dict(mean_deviation=self.mean_deviation, spectral_deviation=self.spectral_deviation,
                    max_norm=self.max_norm, delta=self.delta, delta2=self.delta2,
                    radius=self.radius, mean_ok=self.mean_ok, spectral_ok=self.spectral_ok,
                    radius_ok=self.radius_ok, passed=self.passed)


_ROUNDS = 10


def _top_m(scores: np.ndarray, m: int, largest: bool) -> np.ndarray:
    if m >= scores.size:
        return np.arange(scores.size)
    if largest:
        return np.argpartition(-scores, m - 1)[:m]
    return np.argpartition(scores, m - 1)[:m]


def _mean_trial(y: np.ndarray, m: int, u: np.ndarray) -> float:
    best = 0.0
    for _ in range(_ROUNDS):
        sel = _top_m(y @ u, m, largest=True)
        dev = y[sel].mean(axis=0)
        norm = float(np.linalg.norm(dev))
        best = max(best, norm)
        if norm == 0.0:
            break
        u = dev / norm
    return best


def _spectral_stat(y: np.ndarray, sel: np.ndarray, shift: float) -> tuple[float, np.ndarray, np.ndarray]:
    cov = y[sel].T @ y[sel] / sel.size
    evals, evecs = np.linalg.eigh(cov - shift * np.eye(y.shape[1]))
    return float(np.max(np.abs(evals))), evecs[:, -1], evecs[:, 0]


def _spectral_trial(y: np.ndarray, m: int, u: np.ndarray, shift: float) -> float:
    best = 0.0
    for largest in (True, False) if shift else (True,):
        v = u
        for _ in range(_ROUNDS):
            sel = _top_m((y @ v) ** 2, m, largest=largest)
            stat, top, bottom = _spectral_stat(y, sel, shift)
            best = max(best, stat)
            v = top if largest else bottom
    return best


def check_conditions(samples: SampleSet, truth: GroundTruth, schedule: ConstantSchedule,
                     trials: int = 8, seed: int = 0) -> ConditionReport:
    """Heuristic lower bounds on the good-sample deviation statistics.

    The suprema over weights in the 3-eps capped simplex are approached by
    alternating between a direction and the uniform weights on the
    (1 - 3 eps) fraction of good samples extreme along it. Statistics are
    computed in units of ``truth.sigma``. Trial t always uses the same
    random stream, so more trials never lower the reported maxima.
    """
    good = truth.good_mask
    if good.shape != (samples.n,):
        raise InvalidSpec("good_mask length does not match samples")
    y = (samples.data[good] - truth.mu_star) / truth.sigma
    n_good, d = y.shape
    eps3 = min(3 * schedule.eps, 0.999)
    m = min(n_good, max(1, math.ceil((1 - eps3) * n_good - 1e-9)))
    shift = 1.0 if schedule.regime is Regime.SUB_GAUSSIAN else 0.0

    full = np.arange(n_good)
    mean_dev = float(np.linalg.norm(y.mean(axis=0)))
    spec_dev = _spectral_stat(y, full, shift)[0]
    for t in range(trials):
        rng = stage_rng(seed, _STAGE_CHECK, t)
        u = _random_units(rng, 1, d)[0]
        mean_dev = max(mean_dev, _mean_trial(y, m, u))
        spec_dev = max(spec_dev, _spectral_trial(y, m, u, shift))
    max_norm = float(np.linalg.norm(y, axis=1).max())
    return ConditionReport(mean_dev, spec_dev, max_norm, schedule.delta, schedule.delta2,
                           schedule.good_radius(samples.n, d))


# ---------------------------------------------------------------------------
# Dataset files

MAGIC = b"RMES"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class FormatError(RobustMeanError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def save_dataset(path: str | Path, samples: SampleSet, truth: GroundTruth | None = None,
                 seed: int | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, samples.n, samples.dim))
        fh.write(samples.data.astype("<f8").tobytes())
    meta = sidecar_path(path)
    if truth is None:
        if meta.exists():
            meta.unlink()
        return
    lines = [
        "mu_star=" + " ".join(repr(float(x)) for x in truth.mu_star),
        "good_mask=" + "".join("1" if g else "0" for g in truth.good_mask),
        f"sigma={float(truth.sigma)!r}",
    ]
    if seed is not None:
        lines.append(f"seed={int(seed)}")
    meta.write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> tuple[SampleSet, GroundTruth | None, dict]:
    """Read a dataset file and its optional sidecar.

    Returns the samples, the ground truth (None without a sidecar) and the
    raw sidecar fields.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, version, n, d = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + 8 * n * d
    if len(raw) < expected:
        # offset of the first incomplete value
        complete = (len(raw) - _HEADER.size) // 8
        raise FormatError(f"truncated data: expected {n * d} values, found {complete}",
                          _HEADER.size + 8 * complete)
    if len(raw) > expected:
        raise FormatError("trailing bytes after data", expected)
    data = np.frombuffer(raw, dtype="<f8", count=n * d, offset=_HEADER.size).reshape(n, d)
    samples = SampleSet(data.astype(np.float64))

    meta_file = sidecar_path(path)
    if not meta_file.exists():
        return samples, None, {}
    fields = {}
    for line in meta_file.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    try:
        mu = np.array([float(x) for x in fields["mu_star"].split()])
        mask = np.array([c == "1" for c in fields["good_mask"]], dtype=bool)
        sigma = float(fields.get("sigma", 1.0))
    except KeyError as exc:
        raise FormatError(f"sidecar missing field {exc}", 0) from None
    if mu.shape != (d,) or mask.shape != (n,):
        raise FormatError("sidecar shapes do not match the matrix", 0)
    return samples, GroundTruth(mu, mask, sigma), fields
