"""Truthfulness checks: exact identities where enumeration is feasible and
seeded Monte Carlo utility curves (common random numbers) elsewhere."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (CallCountedOracle, GridStep, MidrInstance, SingleParamAllocation,
                   make_rng, member_matrix)
from .payments import MAX_ENUM_AGENTS, clarke_pivot_of_reduction
from .reduction_midr import (ProductGammaDistribution, SubsetDistribution, coefficient_table,
                             expected_payments, expected_welfare, require_valid)
from .reduction_sp import (bks_coefficients, bks_transform, characterized_payment,
                           exact_expected_payments)

MC_CHUNK = 50_000
DEFAULT_SIGMAS = 4.0


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MECHLAB_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# exact checks


def verify_midr_truthfulness(source, b, dist: SubsetDistribution,
                             coeffs: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-agent ``|E[lambda_i] - expected Clarke payment of A^sc|``, both exact.

    ``coeffs`` overrides the associated coefficients (used for negative controls).
    """
    if source.n > MAX_ENUM_AGENTS:
        raise ValueError(f"exact verification refused for n={source.n} > {MAX_ENUM_AGENTS}")
    require_valid(dist)
    charged = expected_payments(source, dist, b, coeffs)
    reference = np.array([clarke_pivot_of_reduction(source, dist, b, i) for i in range(source.n)])
    return np.abs(charged - reference)


def verify_bks_payment_identity(A: GridStep, b, gamma: float) -> np.ndarray:
    """Per-agent residual between the cell-sum ``E[lambda_i]`` and the
    Archer-Tardos payment of the composed rule (outer integral by quadrature)."""
    if A.n > 3:
        raise ValueError("the BKS identity check is limited to n <= 3")
    lhs = exact_expected_payments(A, b, gamma)
    rhs = np.array([characterized_payment(A, b, gamma, i) for i in range(A.n)])
    return np.abs(lhs - rhs)


@dataclass(frozen=True)
class IrNptReport:
    mode: str
    min_utility: float
    min_payment: float
    ir: bool
    npt: bool
    tol: float

    @property
    def ok(self) -> bool:
        return self.ir and self.npt


def verify_ir_npt(utilities, payments, mode: str = "ex-post", tol: float = 1e-12) -> IrNptReport:
    """Check individual rationality and no positive transfers.

    ``ex-post``: ``utilities``/``payments`` are realized per-run values and every
    realization must pass. ``in-expectation``: they are exact means.
    NPT ex post means no realized transfer to the agent beyond ``tol``; the BKS
    rebate branch violates it by design, so BKS is judged on IR ex post and on
    NPT in expectation.
    """
    if mode not in ("ex-post", "in-expectation"):
        raise ValueError(f"unknown mode {mode!r}")
    u = np.asarray(utilities, dtype=float)
    p = np.asarray(payments, dtype=float)
    return IrNptReport(mode, float(u.min()), float(p.min()),
                       bool(u.min() >= -tol), bool(p.min() >= -tol), tol)


def midr_expected_ir_npt(source, dist: SubsetDistribution, b=None) -> IrNptReport:
    pay = expected_payments(source, dist, b)
    util = expected_welfare(source, dist, b) - pay
    scale = max(1.0, float(np.abs(pay).max(initial=0.0)))
    return verify_ir_npt(util, pay, mode="in-expectation", tol=1e-9 * scale)


# ---------------------------------------------------------------------------
# Monte Carlo utility curves


@dataclass
class UtilityCurve:
    """Mean utility per report plus paired (common-random-number) comparisons with truth."""

    reports: list
    truthful_index: int
    means: np.ndarray
    stderrs: np.ndarray
    gain_over_truth: np.ndarray
    gain_stderr: np.ndarray
    samples: int
    seed: int
    oracle_calls_per_run: float = 1.0
    sigmas: float = DEFAULT_SIGMAS

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.means))

    def truthful_is_max(self, sigmas: Optional[float] = None) -> bool:
        """Truth is within ``sigmas`` paired standard errors of every other report."""
        k = self.sigmas if sigmas is None else sigmas
        return bool(np.all(self.gain_over_truth <= k * self.gain_stderr + 1e-12))

    def worst_violation(self) -> float:
        """Largest gain over truth measured in paired standard errors."""
        gain = np.where(np.abs(self.gain_over_truth) > 1e-12, self.gain_over_truth, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.gain_stderr > 0, gain / self.gain_stderr,
                         np.where(gain > 0, np.inf, 0.0))
        return float(z.max())


def mc_truthfulness(sampler: "UtilitySampler", reports: Sequence, truthful_index: int,
                    n_samples: int, seed: int, sigmas: float = DEFAULT_SIGMAS) -> UtilityCurve:
    """Estimate ``E[u_i(report)]`` on a grid of reports with common random numbers.

    Replicas are processed in fixed-size chunks, chunk ``c`` drawing from stream
    ``(seed, c)``; the same draws feed every report, so the curve depends only on
    ``(seed, n_samples)`` and not on the thread count.
    """
    if n_samples < 10_000:
        raise ValueError("Monte Carlo truthfulness needs at least 10^4 replicas")
    if not 0 <= truthful_index < len(reports):
        raise ValueError("the truthful report must be on the grid")
    sizes = [MC_CHUNK] * (n_samples // MC_CHUNK)
    if n_samples % MC_CHUNK:
        sizes.append(n_samples % MC_CHUNK)

    def chunk(c: int):
        draws = sampler.draw(make_rng(seed, c), sizes[c])
        u = np.stack([sampler.utilities(r, draws) for r in reports])
        d = u - u[truthful_index]
        return u.sum(1), (u ** 2).sum(1), d.sum(1), (d ** 2).sum(1)

    start = sampler.oracle.calls if sampler.oracle is not None else 0
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(chunk, range(len(sizes))))
    s1, s2, d1, d2 = (np.sum([p[k] for p in parts], axis=0) for k in range(4))
    n = float(n_samples)
    means = s1 / n
    var = np.maximum(s2 / n - means ** 2, 0.0) * n / (n - 1)
    gain = d1 / n
    gvar = np.maximum(d2 / n - gain ** 2, 0.0) * n / (n - 1)
    calls = 1.0
    if sampler.oracle is not None:
        calls = (sampler.oracle.calls - start) / (len(reports) * n)
    return UtilityCurve(list(reports), truthful_index, means, np.sqrt(var / n), gain,
                        np.sqrt(gvar / n), n_samples, seed, calls, sigmas)


class UtilitySampler:
    """Draws shared randomness once per chunk and maps (report, draws) to utilities."""

    oracle: Optional[CallCountedOracle] = None

    def draw(self, rng: np.random.Generator, size: int):
        raise NotImplementedError

    def utilities(self, report, draws) -> np.ndarray:
        raise NotImplementedError


class BksSampler(UtilitySampler):
    """Agent ``i`` with true value ``value`` facing BKS over ``A`` with others at ``b``."""

    def __init__(self, A: SingleParamAllocation, b, i: int, value: float, gamma: float):
        self.b = np.asarray(b, dtype=float)
        self.i, self.value, self.gamma = i, float(value), float(gamma)
        self.oracle = CallCountedOracle(A)

    def draw(self, rng, size):
        shape = (size, self.b.size)
        return rng.random(shape), rng.random(shape)

    def utilities(self, report, draws):
        b = self.b.copy()
        b[self.i] = report
        b_hat, kept = bks_transform(b, self.gamma, *draws)
        a = self.oracle.evaluate_many(b_hat)[:, self.i]
        c = bks_coefficients(b, kept, self.gamma)[:, self.i]
        return self.value * a - report * c * a


class OptMidrSampler(UtilitySampler):
    """Agent ``i`` of ``inst`` reporting a scaled copy of its valuation row.

    Each replica draws one mask and one outcome uniform. Range entries are
    looked up once per distinct mask; every replica still corresponds to a
    single evaluation of the rule at its own b_hat.
    """

    def __init__(self, inst: MidrInstance, i: int, gamma: float, bids=None):
        self.inst, self.i = inst, i
        self.bids = inst.valuations if bids is None else np.asarray(bids, dtype=float)
        self.dist = ProductGammaDistribution(gamma, inst.n)
        self.coeffs = coefficient_table(self.dist)[:, i]
        self.members = member_matrix(inst.n)
        self.cdf = np.cumsum(inst.dist_range, axis=1)
        self.oracle = CallCountedOracle(inst.best_entry)

    def draw(self, rng, size):
        keep = rng.random((size, self.inst.n)) < 1.0 - self.dist.gamma
        return keep @ (1 << np.arange(self.inst.n)), rng.random(size)

    def utilities(self, report, draws):
        masks, u = draws
        bids = self.bids.copy()
        bids[self.i] = report
        entries = np.array([self.inst.best_entry(np.where(row[:, None], bids, 0.0))
                            for row in self.members])
        self.oracle.count(len(masks))
        d = entries[masks]
        outcome = np.minimum((self.cdf[d] < u[:, None] * self.cdf[d, -1:]).sum(axis=1),
                             self.cdf.shape[1] - 1)
        seen = np.where(self.members[masks], bids[:, outcome].T, 0.0)
        seen[:, self.i] = 0.0
        others = seen.sum(axis=1)
        return self.inst.valuations[self.i, outcome] - self.coeffs[masks] * others


def misreport_grid(truth: float, points: int = 21, low: float = 0.0, high: float = 2.0) -> list:
    """``points`` reports ``truth * s`` for s evenly spaced on [low, high].

    The middle point is replaced by ``truth`` itself, so [low, high] should be
    centred on 1.
    """
    if points % 2 == 0:
        raise ValueError("use an odd number of points so the truthful report is on the grid")
    grid = [truth * s for s in np.linspace(low, high, points)]
    grid[points // 2] = truth
    return grid
