"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mechlab.core import (GridStep, PostedThreshold, SubsetMask, TopKByScore,
                          clarke_reference_run, enforce_single_call, make_rng,
                          random_midr_instance)
from mechlab.metrics import (optimality_sweep, revenue_ratio, revenue_tight_witness, risk_stats,
                             vcg_revenue, welfare_ratio, welfare_tight_witness)
from mechlab.reduction_midr import (ProductGammaDistribution, SubsetDistribution,
                                    coefficient_table, run_generic_midr, run_optmidr,
                                    sample_subsets)
from mechlab.reduction_sp import run_bks, run_bks_batch
from mechlab.scenarios_ppc import (NaiveVcgSampler, PpcBksSampler, PpcMultiInstance,
                                   PpcSeparableInstance, appendix_a_example, run_ppc_optmidr)
from mechlab.verify import (BksSampler, OptMidrSampler, mc_truthfulness, misreport_grid,
                            verify_bks_payment_identity, verify_midr_truthfulness)

GAMMAS_1_9 = [round(0.1 * k, 1) for k in range(1, 10)]


def report(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[k] = line
    print(line)
    assert ok, line


def within_3_sigma(hits: int, N: int, p: float) -> bool:
    return abs(hits - N * p) <= 3 * math.sqrt(N * p * (1 - p))


def test_criterion_01_exact_midr_truthfulness():
    start = time.perf_counter()
    rng = make_rng(101)
    worst, count = 0.0, 0
    for gamma in (0.1, 0.3, 0.5):
        for _ in range(100):
            n = int(rng.integers(2, 7))
            inst = random_midr_instance(rng, n, int(rng.integers(2, 9)), int(rng.integers(1, 9)))
            bids = rng.uniform(0, 10, size=inst.valuations.shape)
            res = verify_midr_truthfulness(inst, bids, ProductGammaDistribution(gamma, n))
            worst = max(worst, float(res.max()))
            count += 1
    elapsed = time.perf_counter() - start
    report(1, count >= 100 and worst <= 1e-9 and elapsed < 30,
           f"{count} instances, max residual {worst:.3g} <= 1e-9, {elapsed:.1f}s < 30s")


def test_criterion_02_precision():
    analytic = max(abs(ProductGammaDistribution(g, n).masses[-1] - (1 - g) ** n)
                   for g in GAMMAS_1_9 for n in range(1, 9))
    N, n, g = 100_000, 3, 0.3
    p = (1 - g) ** n
    midr_hits = int((sample_subsets(ProductGammaDistribution(g, n), make_rng(102), N)
                     == (1 << n) - 1).sum())
    batch = run_bks_batch(PostedThreshold([0.5] * n), np.ones(n), g, make_rng(103), N)
    bks_hits = int(batch.kept.all(axis=1).sum())
    ok = analytic <= 1e-12 and within_3_sigma(midr_hits, N, p) and within_3_sigma(bks_hits, N, p)
    report(2, ok, f"analytic err {analytic:.2g}; Pr(b_hat=b)={p:.4f}: MIDR {midr_hits / N:.4f}, "
                  f"BKS {bks_hits / N:.4f} at N={N}, 3 sigma")


def test_criterion_03_welfare_bound_and_tightness():
    rng = make_rng(104)
    slack = math.inf
    for _ in range(200):
        n = int(rng.integers(1, 7))
        g = float(rng.choice(GAMMAS_1_9))
        inst = random_midr_instance(rng, n, int(rng.integers(2, 9)), int(rng.integers(1, 9)))
        slack = min(slack, welfare_ratio(inst, ProductGammaDistribution(g, n)) - (1 - g))
    tight = max(abs(welfare_ratio(welfare_tight_witness(n)[0], ProductGammaDistribution(g, n))
                    - (1 - g)) for g in GAMMAS_1_9 for n in (1, 2, 3, 4))
    report(3, slack >= -1e-12 and tight <= 1e-9,
           f"min(ratio - (1-gamma)) = {slack:.3g} on 200 instances; witness error {tight:.2g}")


def test_criterion_04_revenue_tightness():
    witness = revenue_ratio(revenue_tight_witness(3), ProductGammaDistribution(0.2, 3))
    rng = make_rng(105)
    slack, tested = math.inf, 0
    while tested < 200:
        n = int(rng.integers(2, 7))
        g = float(rng.choice(GAMMAS_1_9))
        inst = random_midr_instance(rng, n, int(rng.integers(2, 9)), int(rng.integers(1, 9)))
        if vcg_revenue(inst) <= 1e-9:
            continue
        slack = min(slack, revenue_ratio(inst, ProductGammaDistribution(g, n)) - (1 - g) ** n)
        tested += 1
    report(4, abs(witness - 0.512) <= 1e-9 and slack >= -1e-12,
           f"witness ratio {witness!r}; min(ratio - (1-gamma)^n) = {slack:.3g} "
           f"on {tested} tables from nonnegative MIDR instances")


def test_criterion_05_risk_closed_forms():
    err = 0.0
    for g in GAMMAS_1_9:
        for n in (2, 3, 5):
            var, worst = risk_stats(ProductGammaDistribution(g, n))
            err = max(err, abs(var - (1 - g) / g) / ((1 - g) / g),
                      abs(worst - max(1, (1 - g) / g)) / max(1, (1 - g) / g))
    rng = make_rng(106)
    mean_err = 0.0
    for n in range(1, 11):
        for dist in (ProductGammaDistribution(float(rng.uniform(0.05, 0.95)), n),
                     SubsetDistribution(rng.dirichlet(np.ones(1 << n)), n)):
            mean_err = max(mean_err, float(np.abs(dist.masses @ coefficient_table(dist)).max()))
    report(5, err <= 1e-12 and mean_err <= 1e-12,
           f"closed-form relative error {err:.2g}; max |E c| {mean_err:.2g} for n <= 10")


def test_criterion_06_bks_payment_identity():
    start = time.perf_counter()
    rng = make_rng(107)
    worst, count = 0.0, 0
    for _ in range(30):
        n = int(rng.integers(1, 4))
        A = GridStep.random(rng, n)
        b = rng.uniform(0.05, 2.5, n)
        for g in (0.2, 0.5, 0.8):
            worst = max(worst, float(verify_bks_payment_identity(A, b, g).max()))
        count += 1
    elapsed = time.perf_counter() - start
    report(6, count >= 25 and worst <= 1e-6 and elapsed < 60,
           f"{count} GridStep instances x 3 gammas, max residual {worst:.3g} <= 1e-6, "
           f"{elapsed:.1f}s < 60s")


def test_criterion_07_bks_ex_post_ir():
    rng = make_rng(108)
    total, worst = 0, math.inf
    rules = [TopKByScore([1.0, 0.8, 0.6], 2), GridStep.random(rng, 3), PostedThreshold([0.4] * 3)]
    for k in range(10):
        A = rules[k % 3]
        b = rng.uniform(0, 2, 3)
        g = float(rng.uniform(0.05, 0.95))
        batch = run_bks_batch(A, b, g, make_rng(108, k), 100_000)
        u = batch.allocation * b - batch.payments
        worst = min(worst, float(u.min()))
        total += len(u)
    report(7, total >= 10 ** 6 and worst >= -1e-12,
           f"{total} runs, min realized utility {worst:.3g} >= -1e-12")


def test_criterion_08_monte_carlo_truthfulness():
    N = 200_000
    A = TopKByScore([1.0, 0.9, 0.7], 1)
    bks = mc_truthfulness(BksSampler(A, [1.0, 1.05, 1.2], 0, 1.0, 0.3), misreport_grid(1.0),
                          10, N, seed=109)
    inst = random_midr_instance(make_rng(110), 3, 4, 5)
    v = inst.valuations[0]
    grid = [v * s for s in np.linspace(0.0, 2.0, 21)]
    grid[10] = v
    midr = mc_truthfulness(OptMidrSampler(inst, 0, 0.3), grid, 10, N, seed=111)
    ok = bks.truthful_is_max(4) and midr.truthful_is_max(4) and len(grid) == 21
    report(8, ok, f"21-point grids, N={N}: worst gain over truth BKS {bks.worst_violation():.2f} "
                  f"sigma, OptMIDR {midr.worst_violation():.2f} sigma (limit 4)")


def test_criterion_09_two_slot_example():
    rep = appendix_a_example()
    inst = PpcSeparableInstance.appendix_a()
    grid = misreport_grid(1.1)
    naive = mc_truthfulness(NaiveVcgSampler(inst, 0), grid, 10, 200_000, seed=112)
    bks = mc_truthfulness(PpcBksSampler(inst, 0, 0.3), grid, 10, 200_000, seed=113)
    ok = (abs(rep.u_truth - 0.0918182) <= 1e-6 and abs(rep.u_lie - 0.099) <= 1e-12
          and not naive.truthful_is_max() and bks.truthful_is_max(4))
    report(9, ok, f"u_truth {rep.u_truth:.7f}, u_lie {rep.u_lie:.3f}; naive VCG best report "
                  f"{grid[naive.best_index]} at {naive.worst_violation():.1f} sigma; "
                  f"BKS worst {bks.worst_violation():.2f} sigma")


def test_criterion_10_optimality_sweep():
    start = time.perf_counter()
    parts = []
    ok = True
    for g in (0.3, 0.5):
        rep = optimality_sweep(2, (1 - g) ** 2, resolution=1e-3)
        ok &= rep.worst_case_optimal() and rep.variance_optimal()
        parts.append(f"gamma={g}: max|c| best {rep.best_max_abs:.4g} vs {rep.pibar_max_abs:.4g}, "
                     f"variance best {rep.best_variance:.4g} vs {rep.pibar_variance:.4g}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    report(10, ok, "; ".join(parts) + f"; {elapsed:.1f}s < 120s")


def test_criterion_11_single_call():
    calls = []
    rng = make_rng(114)
    inst = random_midr_instance(rng, 3, 4, 5)
    for k in range(200):
        calls.append(run_optmidr(inst, None, 0.3, make_rng(114, k)).oracle_calls)
        dist = SubsetDistribution(rng.dirichlet(np.ones(8)), 3)
        calls.append(run_generic_midr(inst, None, dist, make_rng(115, k)).oracle_calls)
        calls.append(run_bks(TopKByScore([1.0, 0.5], 1), [0.7, 1.2], 0.4,
                             make_rng(116, k)).oracle_calls)
        calls.append(run_ppc_optmidr(PpcMultiInstance.random(make_rng(117), 3, 2), None, 0.3,
                                     make_rng(117, k)).oracle_calls)
    batch = run_bks_batch(GridStep.random(rng, 2), [1.0, 1.0], 0.5, rng, 10_000)
    curve = mc_truthfulness(OptMidrSampler(inst, 1, 0.3), [inst.valuations[1]], 0, 10_000, 118)
    clarke = clarke_reference_run(inst)
    ok = (set(calls) == {1} and batch.calls_per_run == 1 and curve.oracle_calls_per_run == 1
          and clarke.oracle_calls == 4 and not enforce_single_call(clarke))
    report(11, ok, f"{len(calls)} runs + batched/MC runs all at 1 call; "
                   f"Clarke reference made {clarke.oracle_calls} calls and is rejected")
