import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mechlab.core import FunctionAllocation, GridStep, PostedThreshold, TopKByScore, make_rng
from mechlab.reduction_sp import (BksParams, bks_coefficient, bks_coefficients, bks_resample,
                                  exact_expected_allocation, exact_expected_payments, run_bks,
                                  run_bks_batch)


def test_coefficients():
    assert bks_coefficient(False, 0.3) == 1.0
    assert bks_coefficient(True, 0.5) == -1.0
    assert bks_coefficient(True, 0.25) == pytest.approx(-3.0)
    assert bks_coefficients([0.0, 1.0], np.array([False, False]), 0.5).tolist() == [0.0, -1.0]


@given(st.floats(0.01, 0.99))
def test_coefficient_mean_zero(g):
    assert (1 - g) * bks_coefficient(False, g) + g * bks_coefficient(True, g) == pytest.approx(
        0.0, abs=1e-12)


def test_params_reject_boundary():
    for g in (0.0, 1.0):
        with pytest.raises(ValueError):
            BksParams(g, 2)
    assert BksParams(0.1, 3).precision == pytest.approx(0.729)


def test_resampled_cdf_within_3_sigma():
    N = 100_000
    b_hat, kept = bks_resample(np.ones(N), 0.5, make_rng(1))
    low = b_hat[~kept]
    p, m = 0.5, len(low)
    assert abs((low <= 0.25).sum() - m * p) <= 3 * math.sqrt(m * p * (1 - p))
    assert abs((~kept).sum() - N * 0.5) <= 3 * math.sqrt(N * 0.25)


def test_resample_properties():
    b = np.array([0.0, 0.7, 2.0])
    b_hat, kept = bks_resample(np.tile(b, (1000, 1)), 0.4, make_rng(2))
    assert np.all(b_hat[:, 0] == 0.0)
    assert np.all(b_hat <= b)
    assert np.all(b_hat[kept] == np.tile(b, (1000, 1))[kept])
    with pytest.raises(ValueError):
        bks_resample([-1.0], 0.5, make_rng(0))


def test_small_gamma_rarely_resamples():
    _, kept = bks_resample(np.ones(100_000), 1e-4, make_rng(3))
    assert kept.mean() > 0.999


def test_exact_precision_frequency_within_3_sigma():
    N, n, g = 100_000, 3, 0.3
    batch = run_bks_batch(PostedThreshold([0.5] * n), np.ones(n), g, make_rng(4), N)
    p = (1 - g) ** n
    hits = batch.kept.all(axis=1).sum()
    assert abs(hits - N * p) <= 3 * math.sqrt(N * p * (1 - p))


def test_posted_threshold_run_branches():
    A = PostedThreshold([0.5])
    for k in range(200):
        run = run_bks(A, [0.8], 0.5, make_rng(5, k))
        assert run.oracle_calls == 1
        if run.kept[0]:
            assert run.payments[0] == pytest.approx(0.8)
        elif run.bids_hat[0] < 0.5:
            assert run.payments[0] == 0.0
        else:
            assert run.payments[0] == pytest.approx(-0.8)


def test_rebate_branch():
    A = FunctionAllocation(lambda b: np.ones_like(b))
    runs = [run_bks(A, [2.0], 0.5, make_rng(6, k)) for k in range(100)]
    assert {float(r.payments[0]) for r in runs} == {2.0, -2.0}


def test_constant_rule_is_free_in_expectation():
    A = GridStep([[0.4, 1.1]], [np.array([0.6, 0.6, 0.6])])
    assert exact_expected_payments(A, [0.9], 0.35)[0] == pytest.approx(0.0, abs=1e-15)
    batch = run_bks_batch(FunctionAllocation(lambda b: np.full_like(b, 0.6)), [0.9], 0.35,
                          make_rng(7), 100_000)
    se = batch.payments.std() / math.sqrt(100_000)
    assert abs(batch.payments.mean()) <= 4 * se


@pytest.mark.parametrize("seed", range(5))
def test_ex_post_ir(seed):
    rng = make_rng(8, seed)
    A = [TopKByScore(rng.uniform(0.2, 1, 3), 1), GridStep.random(rng, 3)][seed % 2]
    b = rng.uniform(0, 2, 3)
    g = rng.uniform(0.1, 0.9)
    batch = run_bks_batch(A, b, g, rng, 50_000)
    u = batch.allocation * b - batch.payments
    assert u.min() >= -1e-12
    lowered = ~batch.kept & (b > 0)
    assert np.allclose(u[lowered], (batch.allocation * b / g)[lowered])
    assert np.all(u[batch.kept] == pytest.approx(0.0, abs=1e-12))


def test_posted_threshold_expected_payment_closed_form():
    b, r, g = 0.8, 0.5, 0.5
    A = GridStep([[r]], [np.array([0.0, 1.0])])
    closed = b * (1 - g) + b * g * (1 - 1 / g) * (1 - (r / b) ** (1 - g))
    assert exact_expected_payments(A, [b], g)[0] == pytest.approx(closed, abs=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_exact_expectations_match_monte_carlo(seed):
    rng = make_rng(9, seed)
    A = GridStep.random(rng, 3)
    b = rng.uniform(0.1, 2.5, 3)
    g = 0.4
    N = 200_000
    batch = run_bks_batch(A, b, g, rng, N)
    for sample, exact in ((batch.allocation, exact_expected_allocation(A, b, g)),
                          (batch.payments, exact_expected_payments(A, b, g))):
        se = sample.std(axis=0) / math.sqrt(N)
        assert np.all(np.abs(sample.mean(axis=0) - exact) <= 4 * se + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_monotone_in_expectation(seed, g):
    rng = make_rng(seed)
    A = GridStep.random(rng, 3)
    b = rng.uniform(0, 2.5, 3)
    i = int(rng.integers(0, 3))
    up = b.copy()
    up[i] += rng.uniform(0, 1)
    assert (exact_expected_allocation(A, up, g)[i]
            >= exact_expected_allocation(A, b, g)[i] - 1e-12)
