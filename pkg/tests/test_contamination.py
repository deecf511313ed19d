import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustmean.contamination import (MAGIC, AdversaryKind, AdversarySpec, DistributionKind,
                                      FormatError, GeneratorSpec, check_conditions, generate,
                                      load_dataset, save_dataset, sidecar_path)
from robustmean.model import GroundTruth, InvalidSpec, Regime, SampleSet, build_constants

ADVERSARIES = [
    AdversarySpec.cluster_shift(0.1, 5.0),
    AdversarySpec(AdversaryKind.FAR_POINTS, 0.1, radius=30.0),
    AdversarySpec(AdversaryKind.SUBSPACE_NOISE, 0.1, rank=2, scale=4.0),
    AdversarySpec(AdversaryKind.MEAN_MIMIC, 0.1, offset=2.0),
]


# ---------------------------------------------------------------------------
# generate


def test_clean_gaussian_mean_is_close():
    n, d = 1000, 10
    for seed in range(100):
        samples, truth = generate(GeneratorSpec(n, d, seed))
        assert truth.good_mask.all()
        assert np.linalg.norm(samples.data.mean(axis=0)) <= 5 * math.sqrt(d / n)


def test_cluster_shift_places_exactly_floor_eps_n():
    mu = tuple(np.arange(4.0))
    samples, truth = generate(GeneratorSpec(100, 4, 3, mu=mu), AdversarySpec.cluster_shift(0.1, 100.0))
    target = np.asarray(mu) + 100.0 * np.eye(4)[0]
    hits = np.all(samples.data == target, axis=1)
    assert hits.sum() == 10
    assert np.array_equal(hits, ~truth.good_mask)


def test_far_points_radius_zero_sits_at_good_mean():
    samples, truth = generate(GeneratorSpec(50, 3, 1),
                              AdversarySpec(AdversaryKind.FAR_POINTS, 0.2, radius=0.0))
    good_mean = samples.data[truth.good_mask].mean(axis=0)
    assert np.allclose(samples.data[~truth.good_mask], good_mean, atol=1e-14)


@pytest.mark.parametrize("adv", ADVERSARIES, ids=lambda a: a.kind.value)
def test_generate_reproducible_and_counts(adv):
    spec = GeneratorSpec(87, 5, 11)
    a, ta = generate(spec, adv)
    b, tb = generate(spec, adv)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(ta.good_mask, tb.good_mask)
    assert (~ta.good_mask).sum() == math.floor(adv.eps * 87)
    # good rows are untouched clean draws
    clean, _ = generate(spec)
    assert np.array_equal(a.data[ta.good_mask], clean.data[ta.good_mask])


@given(st.integers(1, 200), st.floats(0.0, 0.33, exclude_max=True), st.integers(0, 2**63))
def test_corrupted_count_is_floor(n, eps, seed):
    adv = AdversarySpec.cluster_shift(eps, 3.0) if eps > 0 else AdversarySpec()
    _, truth = generate(GeneratorSpec(n, 2, seed), adv)
    assert int(truth.good_mask.sum()) == n - math.floor(eps * n + 1e-9)


def test_no_corruption_requires_zero_eps():
    with pytest.raises(InvalidSpec):
        AdversarySpec(AdversaryKind.NONE, 0.1)
    with pytest.raises(InvalidSpec):
        AdversarySpec.cluster_shift(0.34, 1.0)


def test_generator_spec_validation():
    with pytest.raises(InvalidSpec):
        GeneratorSpec(10, 3, mu=(0.0, 1.0))
    with pytest.raises(InvalidSpec):
        GeneratorSpec(10, 2, distribution=DistributionKind.BOUNDED_COVARIANCE, sigma=1.0,
                      spectrum=(2.0, 0.5))


def test_bounded_covariance_draws_have_bounded_covariance():
    spec = GeneratorSpec(200000, 3, 0, DistributionKind.BOUNDED_COVARIANCE, sigma=2.0,
                         spectrum=(4.0, 1.0, 0.25))
    samples, truth = generate(spec)
    cov = np.cov(samples.data.T)
    assert np.allclose(np.diag(cov), [4.0, 1.0, 0.25], rtol=0.05)
    assert truth.sigma == 2.0


# ---------------------------------------------------------------------------
# check_conditions


def test_point_mass_reports_raw_values():
    schedule = build_constants(0.05)
    samples = SampleSet(np.zeros((40, 3)))
    truth = GroundTruth(np.zeros(3), np.ones(40, dtype=bool))
    rep = check_conditions(samples, truth, schedule)
    assert rep.mean_deviation == 0.0
    assert rep.max_norm == 0.0
    assert rep.spectral_deviation == pytest.approx(1.0)
    # delta2 < 1 at eps = 0.05, so the missing unit variance is flagged
    assert schedule.delta2 < 1.0 and not rep.spectral_ok and not rep.passed


def test_mean_condition_holds_at_large_n():
    schedule = build_constants(0.1)
    d = 20
    n = math.ceil(50 * d / schedule.delta**2)
    ok = [check_conditions(*generate(GeneratorSpec(n, d, seed)), schedule).mean_ok
          for seed in range(20)]
    assert sum(ok) >= 18


def test_far_good_sample_raises_radius_flag():
    schedule = build_constants(0.1)
    d, n = 20, 200
    samples, truth = generate(GeneratorSpec(n, d, 0))
    x = np.array(samples.data)
    x[0] = 10 * math.sqrt(d / 0.1) * np.eye(d)[0]
    rep = check_conditions(SampleSet(x), truth, schedule)
    assert not rep.radius_ok


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_more_trials_never_lower_statistics(seed, trials):
    schedule = build_constants(0.1)
    samples, truth = generate(GeneratorSpec(60, 3, seed), AdversarySpec.cluster_shift(0.1, 4.0))
    a = check_conditions(samples, truth, schedule, trials=trials, seed=seed)
    b = check_conditions(samples, truth, schedule, trials=trials + 3, seed=seed)
    assert b.mean_deviation >= a.mean_deviation
    assert b.spectral_deviation >= a.spectral_deviation


def test_bounded_regime_uses_sigma_units():
    schedule = build_constants(0.1, Regime.BOUNDED_COVARIANCE)
    spec = GeneratorSpec(400, 4, 2, DistributionKind.BOUNDED_COVARIANCE, sigma=3.0)
    spec1 = GeneratorSpec(400, 4, 2, DistributionKind.BOUNDED_COVARIANCE, sigma=1.0)
    a = check_conditions(*generate(spec), schedule)
    b = check_conditions(*generate(spec1), schedule)
    assert a.mean_deviation == pytest.approx(b.mean_deviation, rel=1e-9)
    assert a.spectral_deviation == pytest.approx(b.spectral_deviation, rel=1e-9)


# ---------------------------------------------------------------------------
# dataset files


def test_round_trip_bit_identical(tmp_path):
    samples, truth = generate(GeneratorSpec(33, 4, 9), AdversarySpec.cluster_shift(0.1, 3.0))
    path = tmp_path / "data.rmes"
    save_dataset(path, samples, truth, seed=9)
    loaded, t2, fields = load_dataset(path)
    assert loaded.data.tobytes() == samples.data.tobytes()
    assert np.array_equal(t2.mu_star, truth.mu_star)
    assert np.array_equal(t2.good_mask, truth.good_mask)
    assert fields["seed"] == "9"
    assert path.read_bytes()[:4] == MAGIC


def test_truncated_file_reports_offset(tmp_path):
    samples = SampleSet(np.arange(12.0).reshape(4, 3))
    path = tmp_path / "t.rmes"
    save_dataset(path, samples)
    raw = path.read_bytes()
    path.write_bytes(raw[:24 + 8 * 5 + 3])
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == 24 + 8 * 5


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "b.rmes"
    save_dataset(path, SampleSet(np.ones((2, 2))))
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == 0
    raw[4] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == 4


def test_missing_sidecar_gives_no_truth(tmp_path):
    path = tmp_path / "n.rmes"
    save_dataset(path, SampleSet(np.ones((2, 2))))
    assert not sidecar_path(path).exists()
    _, truth, fields = load_dataset(path)
    assert truth is None and fields == {}
