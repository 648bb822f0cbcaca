"""BKS single-call reduction for monotone single-parameter rules with positive types.

Every bid is kept with probability 1 - gamma and otherwise lowered to
``b_i * x ** (1 / (1 - gamma))`` with ``x ~ U[0, 1]``. The rule is evaluated once
at the resampled vector; a kept agent pays ``b_i A_i(b_hat)`` and a lowered agent
receives the rebate ``(1/gamma - 1) b_i A_i(b_hat)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Optional

import numpy as np

from .core import CallCountedOracle, GridStep, SingleParamAllocation
from .payments import quad


@dataclass(frozen=True)
class BksParams:
    gamma: float
    n: int

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if self.n < 1:
            raise ValueError("need at least one agent")

    @property
    def precision(self) -> float:
        return (1.0 - self.gamma) ** self.n


@dataclass(frozen=True)
class SpReductionRun:
    seed: Optional[int]
    kept: np.ndarray
    bids_hat: np.ndarray
    allocation: np.ndarray
    payments: np.ndarray
    oracle_calls: int


def _check_bids(b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if np.any(b < 0) or not np.all(np.isfinite(b)):
        raise ValueError("BKS needs finite nonnegative bids")
    return b


def bks_transform(b, gamma: float, u_keep: np.ndarray, u_x: np.ndarray):
    """Deterministic part of the resampling, driven by pre-drawn uniforms.

    Splitting the randomness out lets several reports share the same draws.
    Returns ``(b_hat, kept)`` broadcast to the shape of the uniforms.
    """
    b = np.asarray(b, dtype=float)
    kept = (u_keep < 1.0 - gamma) | (b == 0)
    lowered = b * u_x ** (1.0 / (1.0 - gamma))
    return np.where(kept, b, lowered), kept


def bks_resample(b, gamma: float, rng: np.random.Generator):
    b = _check_bids(b)
    return bks_transform(b, gamma, rng.random(b.shape), rng.random(b.shape))


def bks_coefficient(resampled: bool, gamma: float) -> float:
    return 1.0 - 1.0 / gamma if resampled else 1.0


def bks_coefficients(b, kept: np.ndarray, gamma: float) -> np.ndarray:
    c = np.where(kept, 1.0, 1.0 - 1.0 / gamma)
    return np.where(np.asarray(b) == 0, 0.0, c)


def run_bks(A: SingleParamAllocation, b, gamma: float, rng: np.random.Generator,
            seed: Optional[int] = None) -> SpReductionRun:
    BksParams(gamma, len(np.atleast_1d(b)))
    b = _check_bids(b)
    b_hat, kept = bks_resample(b, gamma, rng)
    oracle = CallCountedOracle(A)
    alloc = np.asarray(oracle(b_hat), dtype=float)
    payments = b * bks_coefficients(b, kept, gamma) * alloc
    return SpReductionRun(seed, kept, b_hat, alloc, payments, oracle.calls)


@dataclass(frozen=True)
class SpBatch:
    """``size`` independent BKS runs stacked row-wise."""

    kept: np.ndarray
    bids_hat: np.ndarray
    allocation: np.ndarray
    payments: np.ndarray
    oracle_calls: int

    @property
    def calls_per_run(self) -> float:
        return self.oracle_calls / len(self.kept)


def run_bks_batch(A: SingleParamAllocation, b, gamma: float, rng: np.random.Generator,
                  size: int) -> SpBatch:
    BksParams(gamma, len(np.atleast_1d(b)))
    b = _check_bids(b)
    shape = (size, b.size)
    b_hat, kept = bks_transform(b, gamma, rng.random(shape), rng.random(shape))
    oracle = CallCountedOracle(A)
    alloc = oracle.evaluate_many(b_hat)
    payments = b * bks_coefficients(b, kept, gamma) * alloc
    return SpBatch(kept, b_hat, alloc, payments, oracle.calls)


# ---------------------------------------------------------------------------
# exact expectations on GridStep rules


def _cell_masses(breaks: np.ndarray, bid: float, gamma: float):
    """(atom, lowered) probability of each grid cell for one resampled coordinate."""
    cells = len(breaks) + 1
    atom = np.zeros(cells)
    atom[np.searchsorted(breaks, bid, side="right")] = 1.0
    lowered = np.zeros(cells)
    if bid <= 0:
        return atom, lowered
    atom *= 1.0 - gamma
    edges = np.concatenate([[0.0], np.minimum(breaks, bid), [bid]])
    cdf = (edges / bid) ** (1.0 - gamma)
    lowered[:] = gamma * np.diff(cdf)
    return atom, lowered


def _contract(table: np.ndarray, weights) -> float:
    return float(reduce(lambda t, w: np.tensordot(w, t, axes=(0, 0)), weights, table))


def exact_expected_allocation(A: GridStep, b, gamma: float) -> np.ndarray:
    """``E[A_i(b_hat)]`` for every agent by summing over grid cells."""
    b = _check_bids(b)
    probs = [sum(_cell_masses(A.breaks[j], b[j], gamma)) for j in range(A.n)]
    return np.array([_contract(A.tables[i], probs) for i in range(A.n)])


def exact_expected_payments(A: GridStep, b, gamma: float) -> np.ndarray:
    """``E[lambda_i]`` with the atom (kept) and lowered branches weighted separately."""
    b = _check_bids(b)
    parts = [_cell_masses(A.breaks[j], b[j], gamma) for j in range(A.n)]
    probs = [a + lo for a, lo in parts]
    out = np.zeros(A.n)
    for i in range(A.n):
        if b[i] == 0:
            continue
        atom, lowered = parts[i]
        weights = list(probs)
        weights[i] = atom + (1.0 - 1.0 / gamma) * lowered
        out[i] = b[i] * _contract(A.tables[i], weights)
    return out


def characterized_payment(A: GridStep, b, gamma: float, i: int) -> float:
    """Archer-Tardos payment of the composed rule:

    ``b_i E_{b}[A_i] - int_0^{b_i} E_{(u, b_-i)}[A_i] du`` with the outer integral by
    quadrature.
    """
    b = _check_bids(b)

    def inner(u):
        x = b.copy()
        x[i] = u
        return exact_expected_allocation(A, x, gamma)[i]

    return float(b[i] * inner(b[i]) - quad(inner, 0.0, b[i], points=A.breaks[i]))
