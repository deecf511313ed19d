import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmean.cli import (ConfigParse, IoError, RunConfig, fit_exponent, main, report_body,
                            run_experiment, scaling_sweep, strip_timing, summarize)
from robustmean.contamination import (AdversaryKind, AdversarySpec, load_dataset, sidecar_path)
from robustmean.model import InvalidSpec, Regime

SMALL = dict(n=60, d=5, eps=0.1)


def small_config(**kw):
    args = dict(SMALL, adversary=AdversarySpec.cluster_shift(0.1, 3.0), seeds=(0, 1, 2))
    args.update(kw)
    return RunConfig(**args)


def read_lines(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# -- run_experiment ------------------------------------------------------------------

def test_three_seeds_give_three_records_and_a_summary(tmp_path):
    out = tmp_path / "report.jsonl"
    result = run_experiment(small_config(output_path=str(out)), jobs=1)
    rows = read_lines(out)
    assert len(rows) == 4
    assert [r["seed"] for r in rows[:3]] == [0, 1, 2]
    assert rows[3]["summary"] is True and rows[3]["seeds"] == 3
    assert len(result.records) == 3


def test_record_schema():
    result = run_experiment(small_config(seeds=(5,)), jobs=1)
    rec = result.records[0]
    for key in ("seed", "estimator", "error", "wall_ms", "iterations", "sdp_calls",
                "terminal_case", "primal_objective", "verification", "baselines", "constants"):
        assert key in rec
    assert rec["estimator"] == "robust"
    assert set(rec["verification"]) == {"weights_feasible", "objective_recheck", "below_threshold"}
    assert set(rec["baselines"]) == {"empirical_mean", "coordinatewise_median"}
    assert rec["error"] is not None and rec["error"] >= 0
    assert result.summary["estimators"]["robust"]["all_verified"]


def test_identical_configs_give_identical_bodies():
    a = run_experiment(small_config(), jobs=1)
    b = run_experiment(small_config(), jobs=1)
    assert report_body(a) == report_body(b)
    assert "wall_ms" not in report_body(a)


def test_parallel_run_matches_serial():
    serial = run_experiment(small_config(), jobs=1)
    parallel = run_experiment(small_config(), jobs=2)
    assert report_body(serial) == report_body(parallel)


def test_bounded_covariance_mode_runs():
    cfg = small_config(mode=Regime.BOUNDED_COVARIANCE, sigma=2.0, n=80,
                       adversary=AdversarySpec.cluster_shift(0.1, 6.0), seeds=(0,))
    rec = run_experiment(cfg, jobs=1).records[0]
    assert rec["n"] == 80 and rec["d"] == 5
    assert rec["constants"]["regime"] == Regime.BOUNDED_COVARIANCE.value


def test_exact_oracle_cross_check():
    rec = run_experiment(small_config(n=40, d=3, seeds=(0,), exact_oracle=True), jobs=1).records[0]
    oracle = rec["oracle"]
    assert oracle["above_2eps_optimum"]
    assert oracle["opt_2eps"] <= oracle["opt_eps"] + 1e-6
    big = run_experiment(small_config(n=100, d=3, seeds=(0,), exact_oracle=True), jobs=1)
    assert "skipped" in big.records[0]["oracle"]


def test_summary_quantiles():
    records = [dict(error=e, wall_ms=1.0, verification=dict(ok=True),
                    baselines={k: dict(error=2 * e, wall_ms=0.1)
                               for k in ("empirical_mean", "coordinatewise_median")})
               for e in (1.0, 2.0, 3.0, 4.0, 10.0)]
    s = summarize(records)["estimators"]
    assert s["robust"]["median_error"] == 3.0
    assert s["robust"]["p90_error"] == pytest.approx(np.percentile([1, 2, 3, 4, 10], 90))
    assert s["empirical_mean"]["median_error"] == 6.0


def test_strip_timing_is_recursive():
    rec = dict(a=1, wall_ms=3.0, nested=dict(wall_ms=1.0, b=[dict(median_wall_ms=2, c=3)]))
    assert strip_timing(rec) == dict(a=1, nested=dict(b=[dict(c=3)]))


def test_fit_exponent_recovers_power_law():
    x = np.array([1e3, 4e3, 1.6e4, 6.4e4])
    assert fit_exponent(x, 3.0 * x ** 1.2) == pytest.approx(1.2)


def test_scaling_sweep_shape():
    records, exponent = scaling_sweep([4, 8], seeds=(0,), n_factor=1.0)
    assert [r["d"] for r in records] == [4, 8]
    assert math.isfinite(exponent)


# -- RunConfig --------------------------------------------------------------------

adversaries = st.builds(
    AdversarySpec,
    kind=st.sampled_from([k for k in AdversaryKind if k is not AdversaryKind.NONE]),
    eps=st.floats(0.0, 0.05),
    direction=st.one_of(st.none(), st.lists(st.floats(-5, 5), min_size=3, max_size=3)),
    magnitude=st.floats(0, 100), radius=st.floats(0, 1e3), rank=st.integers(1, 3),
    scale=st.floats(0.1, 10), offset=st.floats(-5, 5))

configs = st.builds(
    RunConfig,
    mode=st.sampled_from(list(Regime)), n=st.integers(2, 10 ** 6), d=st.integers(1, 1000),
    eps=st.floats(0.05, 0.3), sigma=st.floats(1e-3, 1e3), adversary=adversaries,
    seeds=st.lists(st.integers(0, 2 ** 64 - 1), min_size=1, max_size=4).map(tuple),
    solver_tol=st.one_of(st.none(), st.floats(1e-4, 0.1)),
    constants=st.dictionaries(st.sampled_from(["c1", "c2", "c4"]), st.floats(1, 100)),
    output_path=st.text(min_size=1, max_size=12), dataset=st.one_of(st.none(), st.text(max_size=8)),
    exact_oracle=st.booleans())


@settings(max_examples=200)
@given(configs)
def test_config_round_trip(config):
    text = config.serialize()
    again = RunConfig.parse(text)
    assert again == config
    assert again.serialize() == text


@pytest.mark.parametrize("text", ["not json", "[1, 2]", '{"bogus": 1}', '{"n": "x"}',
                                  '{"adversary": {"kind": "alien"}}'])
def test_bad_config_text(text):
    with pytest.raises(ConfigParse):
        RunConfig.parse(text)


def test_config_validation():
    with pytest.raises(InvalidSpec):
        RunConfig(eps=0.5)
    with pytest.raises(InvalidSpec):
        RunConfig(seeds=())
    with pytest.raises(InvalidSpec):
        RunConfig(eps=0.05, adversary=AdversarySpec.cluster_shift(0.1, 1.0))
    with pytest.raises(InvalidSpec):
        RunConfig(constants={"c9": 1.0})


# -- command line ------------------------------------------------------------------------

CLI_SMALL = ["--n", "60", "--d", "5"]


def test_generate_then_estimate_from_file(tmp_path, capsys):
    path = tmp_path / "data_{seed}.bin"
    assert main(["generate", *CLI_SMALL, "--seed", "0", "1", "--out", str(path)]) == 0
    samples, truth, meta = load_dataset(tmp_path / "data_1.bin")
    assert samples.n == 60 and samples.dim == 5 and truth is not None
    report = tmp_path / "r.jsonl"
    code = main(["estimate", "--data", str(tmp_path / "data_1.bin"), "--output", str(report)])
    assert code == 0
    rows = read_lines(report)
    assert rows[0]["n"] == 60 and rows[0]["error"] is not None


def test_missing_sidecar_gives_null_error(tmp_path):
    path = tmp_path / "data.bin"
    assert main(["generate", *CLI_SMALL, "--out", str(path)]) == 0
    sidecar_path(path).unlink()
    report = tmp_path / "r.jsonl"
    assert main(["estimate", "--data", str(path), "--output", str(report)]) == 0
    rows = read_lines(report)
    assert rows[0]["error"] is None
    assert rows[0]["baselines"]["empirical_mean"]["error"] is None
    assert rows[1]["estimators"]["robust"]["median_error"] is None
    assert main(["check-conditions", "--data", str(path)]) == 2


def test_estimate_writes_jsonl_to_stdout(capsys):
    assert main(["estimate", *CLI_SMALL, "--seed", "0", "1", "2"]) == 0
    out = capsys.readouterr()
    rows = [json.loads(line) for line in out.out.splitlines()]
    assert len(rows) == 4 and rows[-1]["summary"]
    assert "median err" in out.err


def test_config_file_and_print_config(tmp_path, capsys):
    cfg = small_config(seeds=(7,), output_path=str(tmp_path / "from_config.jsonl"))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.serialize())
    assert main(["estimate", "--config", str(path), "--print-config"]) == 0
    assert RunConfig.parse(capsys.readouterr().out) == cfg
    assert main(["estimate", "--config", str(path)]) == 0
    assert len(read_lines(tmp_path / "from_config.jsonl")) == 2


@pytest.mark.parametrize("argv", [
    ["estimate", "--eps", "0.4"],
    ["estimate", "--constant", "c4=1e-9"],
    ["estimate", "--constant", "c9=1"],
    ["estimate", "--n", "1"],
    ["generate", "--seed", "0", "1", "--out", "x.bin"],
])
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_bad_flag_syntax_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--constant", "c4"])
    assert exc.value.code == 2


def test_runtime_errors_exit_3(tmp_path):
    assert main(["estimate", "--data", str(tmp_path / "missing.bin")]) == 3
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + bytes(20))
    assert main(["estimate", "--data", str(bad)]) == 3
    assert main(["estimate", *CLI_SMALL, "--output", str(tmp_path / "no" / "dir.jsonl")]) == 3


def test_missing_config_file_is_io_error(tmp_path):
    from robustmean.cli import _config_from_args, build_parser
    args = build_parser().parse_args(["estimate", "--config", str(tmp_path / "nope.json")])
    with pytest.raises(IoError) as exc:
        _config_from_args(args)
    assert exc.value.path.endswith("nope.json")


def test_jobs_env_var(monkeypatch, capsys):
    monkeypatch.setenv("ROBUSTMEAN_JOBS", "bogus")
    assert main(["estimate", *CLI_SMALL]) == 2
    monkeypatch.setenv("ROBUSTMEAN_JOBS", "2")
    assert main(["estimate", *CLI_SMALL, "--seed", "0", "1"]) == 0


def test_check_conditions_command(capsys):
    assert main(["check-conditions", "--n", "400", "--d", "3", "--seed", "0", "1",
                 "--trials", "2"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 3 and rows[-1]["seeds"] == 2
    assert {"mean_ok", "spectral_ok", "radius_ok"} <= set(rows[0])


def test_bench_command(capsys):
    assert main(["bench", "--dims", "4", "8", "--n-factor", "1"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert rows[-1]["summary"] and "fitted_exponent_vs_dn" in rows[-1]
    assert len(rows) == 3
