import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmean.model import SampleSet
from robustmean.sdp import DualCertificate, SdpContext, build_packing, capped_selection_value
from robustmean.solver import (BudgetExhausted, ImplicitPsdOperator, NoConvergence,
                               SizeLimitExceeded, exact_exponential_average,
                               packing_opt_from_primal, reference_primal, reference_solve,
                               retry_cap, solve_positive, solve_with_retries, subgradient_primal,
                               top_eigenvector, verify_outcome)


def _inst(x, nu=None, eps=0.1, rho=1.0):
    x = np.asarray(x, dtype=float)
    nu = np.zeros(x.shape[1]) if nu is None else np.asarray(nu, dtype=float)
    return build_packing(SdpContext(SampleSet(x), nu, eps, rho))


# ---------------------------------------------------------------------------
# solve_positive


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.3])
def test_degenerate_instance_closed_form(eps):
    inst = _inst(np.ones((7, 3)), nu=np.ones(3), eps=eps)
    out = solve_positive(inst, 0.01)
    assert out.packing_value >= (1 - 0.01) / (1 - eps)
    assert out.verified and verify_outcome(inst, out.w_prime, out.covering)


def test_single_sample_two_constraints():
    # top block forces w <= 1; the cap 1/(1-eps) is looser
    inst = _inst([[1.0]], eps=0.01)
    out = solve_positive(inst, 0.01)
    assert out.packing_value >= 0.99
    assert out.covering_value <= 1.01


@pytest.mark.parametrize("seed", range(4))
def test_brackets_reference_optimum(seed):
    rng = np.random.default_rng(seed)
    inst = _inst(rng.standard_normal((8, 3)) * 2, rng.standard_normal(3), eps=0.1, rho=0.3)
    tol = 0.1 / 30
    opt = reference_solve(inst).opt
    out = solve_positive(inst, tol)
    assert out.verified
    assert out.packing_value >= (1 - tol) * opt
    assert out.covering_value <= (1 + tol) * opt
    assert out.packing_value <= out.covering_value


@settings(max_examples=25)
@given(st.integers(2, 16), st.integers(1, 4), st.integers(0, 2**32 - 1),
       st.sampled_from([0.1, 0.3, 1.0]), st.sampled_from([0.1, 0.2]))
def test_outcome_always_feasible(n, d, seed, rho, eps):
    rng = np.random.default_rng(seed)
    inst = _inst(rng.standard_normal((n, d)) * rng.uniform(0.1, 5), eps=eps, rho=rho)
    out = solve_with_retries(inst, eps / 30)
    assert inst.is_packing_feasible(out.w_prime)
    assert out.covering.is_feasible(inst)
    assert out.packing_value <= out.covering_value * (1 + 1e-12)


def test_budget_exhaustion_carries_feasible_outcome(rng):
    inst = _inst(rng.standard_normal((16, 4)) * 3, eps=0.1, rho=0.5)
    with pytest.raises(BudgetExhausted) as info:
        solve_positive(inst, 1e-6, budget=3)
    out = info.value.outcome
    assert inst.is_packing_feasible(out.w_prime)
    assert out.covering.is_feasible(inst)


def test_retry_cap_formula():
    assert retry_cap(20, 0.1) == math.ceil(math.log2(math.log2(200))) + 2
    assert retry_cap(1, 0.3) == 3


# ---------------------------------------------------------------------------
# reference oracles


@given(st.integers(2, 20), st.integers(0, 2**32 - 1), st.floats(0.01, 0.3))
@settings(max_examples=20)
def test_reference_1d_is_fractional_knapsack(n, seed, eps):
    x = np.random.default_rng(seed).standard_normal((n, 1))
    ctx = SdpContext(SampleSet(x), np.zeros(1), eps)
    greedy = capped_selection_value(x[:, 0] ** 2, eps)
    assert reference_primal(ctx).opt == pytest.approx(greedy, rel=1e-6, abs=1e-9)


def test_reference_two_point_hand_algebra():
    # S(w) = diag(w1, 4 w2); balancing wants w1 = 0.8 > cap = 1/1.8, so w1 = cap
    ctx = SdpContext(SampleSet(np.array([[1.0, 0.0], [0.0, 2.0]])), np.zeros(2), 0.1)
    assert reference_primal(ctx).opt == pytest.approx(4 * (1 - 1 / 1.8), rel=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_reference_duality_gap(seed):
    rng = np.random.default_rng(seed)
    ctx = SdpContext(SampleSet(rng.standard_normal((20, 3))), rng.standard_normal(3), 0.1)
    ref = reference_primal(ctx)
    assert ref.opt - ref.dual_value <= 1e-5 * max(1.0, ref.opt)
    assert ref.certificate.check()


@pytest.mark.parametrize("seed", range(3))
def test_subgradient_cross_check(seed):
    rng = np.random.default_rng(seed)
    ctx = SdpContext(SampleSet(rng.standard_normal((16, 2))), rng.standard_normal(2), 0.2)
    best_p, best_d, _ = subgradient_primal(ctx)
    ref = reference_primal(ctx)
    # the subgradient bounds sandwich the interior-point optimum
    assert best_d <= ref.opt + 1e-7
    assert ref.opt <= best_p + 1e-7
    assert best_p - best_d <= 5e-3 * ref.opt


@pytest.mark.parametrize("rho", [0.1, 0.5, 1.0])
def test_packing_oracles_agree(rho):
    rng = np.random.default_rng(7)
    ctx = SdpContext(SampleSet(rng.standard_normal((12, 2)) * 2), np.zeros(2), 0.1)
    direct = reference_solve(build_packing(ctx.with_rho(rho))).opt
    assert packing_opt_from_primal(ctx, rho) == pytest.approx(direct, rel=1e-4)


def test_reference_size_limit():
    ctx = SdpContext(SampleSet(np.zeros((65, 2))), np.zeros(2), 0.1)
    with pytest.raises(SizeLimitExceeded):
        reference_primal(ctx)


# ---------------------------------------------------------------------------
# power method and implicit operators


def test_power_method_diagonal():
    v, lam = top_eigenvector(np.diag([3.0, 1.0]))
    assert abs(v[0]) == pytest.approx(1.0, abs=1e-6)
    assert lam >= 2.97


def test_power_method_rank_one_single_step():
    u = np.array([1.0, 2.0, -2.0]) / 3
    v, lam = top_eigenvector(np.outer(u, u), max_iter=2)
    assert abs(v @ u) == pytest.approx(1.0, abs=1e-12)
    assert lam == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(10))
def test_power_method_random_psd(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    lam = np.sort(rng.uniform(0, 1, 6))
    lam[-1] = lam[-2] * 1.1 + 0.01  # gap of at least 10%
    m = (q * lam) @ q.T
    v, theta = top_eigenvector(m, seed=seed)
    assert abs(v @ q[:, -1]) >= 0.99
    assert theta >= 0.99 * lam[-1]
    assert theta == pytest.approx(float(v @ m @ v), rel=1e-10)


def test_power_method_reports_no_convergence():
    m = np.diag([1.0, 1.0 - 1e-9, 0.5])
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    with pytest.raises(NoConvergence):
        top_eigenvector(q @ np.diag([1.0, -1.0, 0.0]) @ q.T, max_iter=5)
    top_eigenvector(m)  # equal-ish top eigenvalues still meet the eigenvalue target


def test_implicit_operator_matches_dense(rng):
    rows = rng.standard_normal((30, 5))
    blocks = [rng.uniform(0, 0.5, 30) for _ in range(3)]
    op = ImplicitPsdOperator(rows, blocks, tol=1e-10)
    dense = exact_exponential_average(rows, blocks)
    probes = rng.standard_normal((5, 4))
    assert np.allclose(op.matmat(probes), dense @ probes, rtol=1e-9, atol=1e-9)
    assert op.trace() == pytest.approx(1.0, abs=1e-8)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
@settings(max_examples=20)
def test_implicit_operator_symmetric_and_psd(seed, d):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((12, d)) * rng.uniform(0.1, 3)
    op = ImplicitPsdOperator(rows, [rng.uniform(0, 1, 12) for _ in range(2)])
    u, v = rng.standard_normal((2, d))
    a, b = u @ op.matvec(v), v @ op.matvec(u)
    assert abs(a - b) <= 1e-8 * max(1.0, abs(a))
    assert v @ op.matvec(v) >= -1e-8 * (v @ v)
    assert DualCertificate.implicit(op).check()
