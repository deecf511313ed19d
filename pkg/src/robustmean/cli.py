"""Batch experiment runner: dataset generation, estimation, benchmarks, condition checks.

Reports are JSON lines, one object per seed followed by one summary object.
Wall-clock fields are the only nondeterministic content; ``strip_timing``
removes them so two runs of the same config can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baseline import coordinatewise_median, empirical_mean
from .contamination import (AdversaryKind, AdversarySpec, DistributionKind, FormatError,
                            GeneratorSpec, check_conditions, generate, load_dataset, save_dataset)
from .model import (ConstantSchedule, ConstraintViolated, EpsOutOfRange, GroundTruth,
                    InvalidSpec, Regime, RobustMeanError, SampleSet, build_constants)
from .estimator import (EstimatorConfig, bounded_cov_working_set, estimate_bounded_cov,
                        estimate_subgaussian)
from .sdp import SdpContext
from .solver import MAX_REF_D, MAX_REF_N, reference_primal

__all__ = ["ConfigParse", "IoError", "RunConfig", "ExperimentResult", "run_experiment",
           "run_seed", "scaling_sweep", "fit_exponent", "strip_timing", "report_body",
           "load_dataset", "main"]

JOBS_ENV = "ROBUSTMEAN_JOBS"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TIMING_KEYS = frozenset({"wall_ms", "median_wall_ms"})
CONSTANT_NAMES = ("c1", "c2", "c3", "c4", "c5", "c6", "c7")


class ConfigParse(RobustMeanError, ValueError):
    pass


class IoError(RobustMeanError, OSError):
    def __init__(self, path: str | Path, cause: BaseException):
        super().__init__(f"{path}: {cause}")
        self.path = str(path)


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class RunConfig:
    """One experiment: data shape, contamination, estimator regime and seeds.

    ``n`` is the number of samples handed to the estimator; in the
    bounded-covariance regime they are split into two halves of n/2.
    ``constants`` holds explicit overrides of c1..c7 as sorted pairs.
    ``dataset`` loads a fixed dataset instead of generating one per seed.
    """

    mode: Regime = Regime.SUB_GAUSSIAN
    n: int = 200
    d: int = 20
    eps: float = 0.1
    sigma: float = 1.0
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    seeds: tuple[int, ...] = (0,)
    solver_tol: float | None = None
    constants: tuple[tuple[str, float], ...] = ()
    output_path: str = "-"
    dataset: str | None = None
    exact_oracle: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Regime(self.mode))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        pairs = dict(self.constants) if not isinstance(self.constants, dict) else self.constants
        object.__setattr__(self, "constants",
                           tuple(sorted((str(k), float(v)) for k, v in pairs.items())))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "eps", float(self.eps))
        object.__setattr__(self, "sigma", float(self.sigma))
        if self.n < 2 or self.d < 1:
            raise InvalidSpec("need n >= 2 and d >= 1")
        if not 0.0 < self.eps < 1.0 / 3.0:
            raise InvalidSpec(f"eps must lie in (0, 1/3), got {self.eps!r}")
        if not self.sigma > 0:
            raise InvalidSpec("sigma must be positive")
        if not self.seeds:
            raise InvalidSpec("need at least one seed")
        if any(not 0 <= s < 2**64 for s in self.seeds):
            raise InvalidSpec("seeds must be unsigned 64-bit integers")
        if self.adversary.eps > self.eps + 1e-12:
            raise InvalidSpec("adversary corrupts more than the eps budget")
        unknown = [k for k, _ in self.constants if k not in CONSTANT_NAMES]
        if unknown:
            raise InvalidSpec(f"unknown constants {unknown}")

    def schedule(self) -> ConstantSchedule:
        return build_constants(self.eps, self.mode, dict(self.constants))

    def generator(self, seed: int) -> GeneratorSpec:
        dist = (DistributionKind.GAUSSIAN_IDENTITY if self.mode is Regime.SUB_GAUSSIAN
                else DistributionKind.BOUNDED_COVARIANCE)
        return GeneratorSpec(self.n, self.d, seed, dist, sigma=self.sigma)

    def to_dict(self) -> dict:
        adv = dataclasses.asdict(self.adversary)
        adv["kind"] = self.adversary.kind.value
        adv["direction"] = None if adv["direction"] is None else list(adv["direction"])
        return dict(mode=self.mode.value, n=self.n, d=self.d, eps=self.eps, sigma=self.sigma,
                    adversary=adv, seeds=list(self.seeds), solver_tol=self.solver_tol,
                    constants={k: v for k, v in self.constants}, output_path=self.output_path,
                    dataset=self.dataset, exact_oracle=self.exact_oracle)

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigParse(f"unknown config keys {sorted(unknown)}")
        raw = dict(raw)
        try:
            if "adversary" in raw:
                adv = dict(raw["adversary"])
                if adv.get("direction") is not None:
                    adv["direction"] = tuple(adv["direction"])
                raw["adversary"] = AdversarySpec(**adv)
            if "seeds" in raw:
                raw["seeds"] = tuple(raw["seeds"])
            if "constants" in raw:
                raw["constants"] = dict(raw["constants"])
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigParse(str(exc)) from exc

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigParse(f"invalid config JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigParse("config must be a JSON object")
        return cls.from_dict(raw)


# ---------------------------------------------------------------------------
# Running


@dataclass(frozen=True)
class ExperimentResult:
    records: tuple[dict, ...]
    summary: dict

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in (*self.records, self.summary)]


def _load(path: str) -> tuple[SampleSet, GroundTruth | None, dict]:
    try:
        return load_dataset(path)
    except FormatError:
        raise
    except OSError as exc:
        raise IoError(path, exc) from exc


def _data(config: RunConfig, seed: int) -> tuple[SampleSet, GroundTruth | None]:
    if config.dataset is not None:
        samples, truth, _ = _load(config.dataset)
        return samples, truth
    return generate(config.generator(seed), config.adversary)


def _estimate(config: RunConfig, samples: SampleSet, truth: GroundTruth | None,
              schedule: ConstantSchedule):
    est = EstimatorConfig(solver_tol=config.solver_tol)
    if config.mode is Regime.SUB_GAUSSIAN:
        return estimate_subgaussian(samples, config.eps, schedule, est, truth)
    return estimate_bounded_cov(samples, config.eps, config.sigma, schedule, est, truth)


def _oracle_check(config: RunConfig, samples: SampleSet, report) -> dict:
    """Compare the returned objective against interior-point optima at the final guess."""
    scale = 1.0
    work = samples
    if config.mode is Regime.BOUNDED_COVARIANCE:
        work = bounded_cov_working_set(samples, config.eps, config.sigma).pruned
        scale = config.sigma
    if work.n > MAX_REF_N or work.dim > MAX_REF_D:
        return dict(skipped="instance above reference size limit")
    nu = np.asarray(report.nu) / scale
    opt_eps = reference_primal(SdpContext(work, nu, config.eps))
    opt_2eps = reference_primal(SdpContext(work, nu, min(2 * config.eps, 0.33)))
    obj = float(report.primal_objective)
    return dict(opt_eps=opt_eps.opt, opt_2eps=opt_2eps.opt,
                above_2eps_optimum=bool(obj >= opt_2eps.dual_value - 1e-6),
                ratio_to_optimum=obj / opt_eps.opt if opt_eps.opt > 0 else None)


def _error(est: np.ndarray, truth: GroundTruth | None) -> float | None:
    return None if truth is None else float(np.linalg.norm(est - truth.mu_star))


def run_seed(config: RunConfig, seed: int) -> dict:
    """Generate or load the data for one seed and run all estimators on it."""
    samples, truth = _data(config, seed)
    schedule = config.schedule()
    start = time.perf_counter()
    report = _estimate(config, samples, truth, schedule)
    wall = 1e3 * (time.perf_counter() - start)
    baselines = {}
    for name, fn in (("empirical_mean", empirical_mean),
                     ("coordinatewise_median", coordinatewise_median)):
        t0 = time.perf_counter()
        est = fn(samples)
        baselines[name] = dict(error=_error(est, truth), wall_ms=1e3 * (time.perf_counter() - t0))
    record = dict(seed=seed, estimator="robust", error=report.error_vs_truth, wall_ms=wall,
                  iterations=report.iterations, sdp_calls=report.sdp_calls,
                  terminal_case=report.terminal_case.value,
                  primal_objective=report.primal_objective,
                  verification=dict(report.verification), baselines=baselines,
                  constants=schedule.as_dict(), n=samples.n, d=samples.dim)
    if config.exact_oracle:
        record["oracle"] = _oracle_check(config, samples, report)
    return record


def _quantiles(values: list[float | None]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return dict(median_error=None, p90_error=None)
    return dict(median_error=float(np.median(vals)), p90_error=float(np.percentile(vals, 90)))


def summarize(records: Sequence[dict]) -> dict:
    out = dict(summary=True, seeds=len(records), estimators={})
    out["estimators"]["robust"] = dict(
        **_quantiles([r["error"] for r in records]),
        median_wall_ms=float(np.median([r["wall_ms"] for r in records])),
        all_verified=all(all(r["verification"].values()) for r in records))
    for name in ("empirical_mean", "coordinatewise_median"):
        out["estimators"][name] = dict(
            **_quantiles([r["baselines"][name]["error"] for r in records]),
            median_wall_ms=float(np.median([r["baselines"][name]["wall_ms"] for r in records])))
    return out


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        raise ConfigParse(f"{JOBS_ENV} must be an integer") from None


def _map(fn, config: RunConfig, items: Iterable, jobs: int) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(config, x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, [config] * len(items), items))


def run_experiment(config: RunConfig, jobs: int | None = None) -> ExperimentResult:
    """Run every seed, then write the report to ``config.output_path`` unless it is "-".

    Records are emitted in seed order regardless of the number of workers.
    """
    jobs = _default_jobs() if jobs is None else jobs
    config.schedule()  # fail early on an invalid schedule
    records = tuple(_map(run_seed, config, config.seeds, jobs))
    result = ExperimentResult(records, summarize(records))
    if config.output_path != "-":
        _write_lines(config.output_path, result.lines())
    return result


def _write_lines(path: str, lines: Iterable[str]) -> None:
    try:
        with open(path, "w") as fh:
            for line in lines:
                fh.write(line + "\n")
    except OSError as exc:
        raise IoError(path, exc) from exc


def strip_timing(obj):
    """Copy of a record with all wall-clock fields removed."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def report_body(result: ExperimentResult) -> str:
    rows = (*result.records, result.summary)
    return "\n".join(json.dumps(strip_timing(r), sort_keys=True) for r in rows) + "\n"


def format_summary(summary: dict) -> str:
    lines = [f"{'estimator':<24}{'median err':>12}{'p90 err':>12}{'median ms':>12}"]
    for name, row in summary["estimators"].items():
        med = "-" if row["median_error"] is None else f"{row['median_error']:.4f}"
        p90 = "-" if row["p90_error"] is None else f"{row['p90_error']:.4f}"
        lines.append(f"{name:<24}{med:>12}{p90:>12}{row['median_wall_ms']:>12.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Scaling sweep


def fit_exponent(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def sweep_size(d: int, eps: float, n_factor: float = 4.0) -> int:
    """N = n_factor * d / delta^2, linear in d at fixed eps."""
    delta = build_constants(eps).delta
    return math.ceil(n_factor * d / delta**2)


def scaling_sweep(dims: Sequence[int], eps: float = 0.1, seeds: Sequence[int] = (0,),
                  n_factor: float = 4.0, jobs: int = 1) -> tuple[list[dict], float]:
    """Robust-estimator wall time over dimensions with N proportional to d.

    Returns per-(d, seed) records and the fitted exponent of the median wall
    time against d * N.
    """
    delta = build_constants(eps).delta
    records, dn, times = [], [], []
    for d in dims:
        n = sweep_size(d, eps, n_factor)
        config = RunConfig(n=n, d=d, eps=eps, seeds=tuple(seeds),
                           adversary=AdversarySpec.cluster_shift(eps, delta / eps))
        rows = _map(run_seed, config, config.seeds, jobs)
        records.extend(rows)
        dn.append(d * n)
        times.append(float(np.median([r["wall_ms"] for r in rows])))
    return records, fit_exponent(dn, times)


# ---------------------------------------------------------------------------
# Command line


def _constant_pair(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad value in {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig file; other config flags are ignored")
    p.add_argument("--mode", choices=[r.value for r in Regime], default=Regime.SUB_GAUSSIAN.value)
    p.add_argument("--n", type=int, default=200, help="samples given to the estimator")
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--adversary", choices=[k.value for k in AdversaryKind],
                   default=AdversaryKind.CLUSTER_SHIFT.value)
    p.add_argument("--adv-eps", type=float, help="corrupted fraction (default: --eps)")
    p.add_argument("--magnitude", type=float, help="cluster shift distance (default: sigma*delta/eps)")
    p.add_argument("--direction", type=float, nargs="+")
    p.add_argument("--radius", type=float, default=0.0)
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--seed", type=int, nargs="+", default=[0])
    p.add_argument("--solver-tol", type=float)
    p.add_argument("--constant", type=_constant_pair, action="append", default=[],
                   metavar="NAME=VALUE")
    p.add_argument("--data", help="load this dataset instead of generating")
    p.add_argument("--output", help="report path, '-' for stdout (default)")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise IoError(args.config, exc) from exc
        config = RunConfig.parse(text)
        return dataclasses.replace(config, output_path=args.output or config.output_path,
                                   exact_oracle=config.exact_oracle or
                                   getattr(args, "exact_oracle", False))
    kind = AdversaryKind(args.adversary)
    mode = Regime(args.mode)
    adv_eps = 0.0 if kind is AdversaryKind.NONE else (args.eps if args.adv_eps is None
                                                      else args.adv_eps)
    magnitude = args.magnitude
    if magnitude is None:
        magnitude = (args.sigma if mode is Regime.BOUNDED_COVARIANCE else 1.0) * \
            build_constants(args.eps, mode, dict(args.constant)).delta / args.eps
    adversary = AdversarySpec(kind, adv_eps, direction=args.direction, magnitude=magnitude,
                              radius=args.radius, rank=args.rank, scale=args.scale,
                              offset=args.offset)
    return RunConfig(mode=mode, n=args.n, d=args.d, eps=args.eps, sigma=args.sigma,
                     adversary=adversary, seeds=tuple(args.seed), solver_tol=args.solver_tol,
                     constants=dict(args.constant), output_path=args.output or "-",
                     dataset=args.data, exact_oracle=getattr(args, "exact_oracle", False))


def _emit(lines: Iterable[str], path: str) -> None:
    if path == "-":
        for line in lines:
            print(line)
    else:
        _write_lines(path, lines)


def _cmd_generate(args) -> int:
    config = _config_from_args(args)
    if len(config.seeds) > 1 and "{seed}" not in args.out:
        raise ConfigParse("several seeds need a '{seed}' placeholder in --out")
    for seed in config.seeds:
        samples, truth = generate(config.generator(seed), config.adversary)
        path = args.out.replace("{seed}", str(seed))
        try:
            save_dataset(path, samples, truth, seed)
        except OSError as exc:
            raise IoError(path, exc) from exc
        print(path, file=sys.stderr)
    return EXIT_OK


def _cmd_estimate(args) -> int:
    config = _config_from_args(args)
    if args.print_config:
        print(config.serialize())
        return EXIT_OK
    result = run_experiment(dataclasses.replace(config, output_path="-"), jobs=args.jobs)
    _emit(result.lines(), config.output_path)
    print(format_summary(result.summary), file=sys.stderr)
    return EXIT_OK


def _cmd_bench(args) -> int:
    records, exponent = scaling_sweep(args.dims, args.eps, args.seed, args.n_factor,
                                      args.jobs or _default_jobs())
    summary = dict(summary=True, dims=list(args.dims), eps=args.eps,
                   fitted_exponent_vs_dn=exponent)
    _emit([json.dumps(r, sort_keys=True) for r in (*records, summary)], args.output)
    print(f"fitted exponent of wall time vs d*N: {exponent:.3f}", file=sys.stderr)
    return EXIT_OK


def _cmd_check(args) -> int:
    config = _config_from_args(args)
    schedule = config.schedule()
    lines, passed = [], 0
    for seed in config.seeds:
        samples, truth = _data(config, seed)
        if truth is None:
            raise ConfigParse("condition checks need ground truth (a sidecar file)")
        rep = check_conditions(samples, truth, schedule, trials=args.trials, seed=seed)
        passed += rep.passed
        lines.append(json.dumps(dict(seed=seed, **rep.as_dict()), sort_keys=True))
    lines.append(json.dumps(dict(summary=True, seeds=len(config.seeds), passed=passed)))
    _emit(lines, config.output_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustmean", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic datasets")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset path; may contain {seed}")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("estimate", help="run the robust estimator and baselines")
    _add_config_flags(p)
    p.add_argument("--exact-oracle", action="store_true",
                   help="cross-check against the interior-point solver on small instances")
    p.add_argument("--jobs", type=int, help=f"parallel seeds (default ${JOBS_ENV} or 1)")
    p.add_argument("--print-config", action="store_true", help="print the parsed config and exit")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("bench", help="wall-time scaling sweep over dimensions")
    p.add_argument("--dims", type=int, nargs="+", default=[50, 100, 200, 400])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--n-factor", type=float, default=4.0, help="N = n_factor * d / delta^2")
    p.add_argument("--seed", type=int, nargs="+", default=[0])
    p.add_argument("--jobs", type=int)
    p.add_argument("--output", default="-")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("check-conditions", help="spot-check the good-sample conditions")
    _add_config_flags(p)
    p.add_argument("--trials", type=int, default=8)
    p.set_defaults(func=_cmd_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigParse, InvalidSpec, ConstraintViolated, EpsOutOfRange) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RobustMeanError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
