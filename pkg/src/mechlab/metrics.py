"""Expectation-vs-risk measurements, tight witnesses and brute-force optimality sweeps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .core import TableAllocation, make_rng, member_matrix, welfare_table
from .payments import MAX_ENUM_AGENTS, table_clarke_pivot
from .reduction_midr import (ProductGammaDistribution, SubsetDistribution, coefficient_table,
                             expected_payments)
from .reduction_sp import BksParams


@dataclass
class MetricsRecord:
    experiment: str
    n: int
    gamma: float
    seed: int
    precision: float
    welfare_ratio: float
    revenue_ratio: float
    coeff_variance: float
    max_abs_coeff: float
    truth_residual_max: float

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def normalized_worst_payment(self) -> float:
        """Bid-normalized worst case; every agent pays on n - 1 others."""
        return (self.n - 1) * self.max_abs_coeff


def precision(dist) -> float:
    """Probability that no bid is altered."""
    if isinstance(dist, BksParams):
        return dist.precision
    return float(dist.masses[-1])


def _ratio(num: float, den: float, tol: float = 1e-15) -> float:
    if abs(den) <= tol:
        return 1.0 if abs(num) <= tol else math.inf
    return num / den


def welfare_ratio(source, dist: SubsetDistribution, b=None) -> float:
    """Expected true welfare of the composed rule over the welfare of the rule at b."""
    w = welfare_table(source, b).welfare
    return _ratio(float(dist.masses @ w.sum(axis=1)), float(w[-1].sum()))


def vcg_revenue(source, b=None) -> float:
    table = welfare_table(source, b)
    return sum(table_clarke_pivot(table, i) for i in range(table.n))


def revenue_ratio(source, dist: SubsetDistribution, b=None) -> float:
    return _ratio(float(expected_payments(source, dist, b).sum()), vcg_revenue(source, b))


def _risk_from_masses(P: np.ndarray, n: int):
    """Row-wise ``(max_i Var c_i, max_{i,M} |c_i(M)|)`` for a stack of distributions."""
    P = np.atleast_2d(P)
    masks = np.arange(1 << n)
    members = member_matrix(n)
    var = np.empty((P.shape[0], n))
    worst = np.ones(P.shape[0])
    for i in range(n):
        out = ~members[:, i]
        ratio = P[:, masks[out] | 1 << i] / P[:, masks[out]]
        c = np.empty_like(P)
        c[:, members[:, i]] = -1.0
        c[:, out] = ratio
        mean = (P * c).sum(axis=1)
        var[:, i] = (P * c * c).sum(axis=1) - mean ** 2
        worst = np.maximum(worst, ratio.max(axis=1))
    return var.max(axis=1), worst


def risk_stats(dist: SubsetDistribution):
    """``(max_i Var_{M~pi} c_i(M), max_{i,M} |c_i(M)|)`` by exact enumeration."""
    if dist.n > MAX_ENUM_AGENTS:
        raise ValueError(f"n={dist.n} exceeds the enumeration cap")
    c = coefficient_table(dist)
    p = dist.masses[:, None]
    mean = (p * c).sum(axis=0)
    var = (p * c * c).sum(axis=0) - mean ** 2
    return float(var.max()), float(np.abs(c).max())


def coefficient_means(dist: SubsetDistribution) -> np.ndarray:
    return (dist.masses[:, None] * coefficient_table(dist)).sum(axis=0)


def metrics_record(experiment: str, source, dist: ProductGammaDistribution, seed: int = 0,
                   b=None, truth_residual_max: float = 0.0) -> MetricsRecord:
    var, worst = risk_stats(dist)
    return MetricsRecord(experiment, dist.n, dist.gamma, seed, precision(dist),
                         welfare_ratio(source, dist, b), revenue_ratio(source, dist, b),
                         var, worst, truth_residual_max)


# ---------------------------------------------------------------------------
# witnesses


def welfare_tight_witness(n: int, dist: Optional[SubsetDistribution] = None):
    """Table where only agent j has value, and only when j is in M.

    j is the agent most often dropped under ``dist`` (agent 0 for product laws).
    Returns ``(table, bids)`` with ``bids`` the unit indicator of j.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    members = member_matrix(n)
    j = 0
    if dist is not None:
        j = int(np.argmax(dist.masses @ ~members))
    w = np.zeros((1 << n, n))
    w[members[:, j], j] = 1.0
    bids = np.zeros(n)
    bids[j] = 1.0
    return TableAllocation(w), bids


def revenue_tight_witness(n: int) -> TableAllocation:
    """1/n to everyone at M = [n], 1/(n-1) to members of any smaller M, else 0."""
    if n < 2:
        raise ValueError("the revenue witness needs n >= 2")
    members = member_matrix(n)
    w = np.where(members, 1.0 / (n - 1), 0.0)
    w[-1] = 1.0 / n
    return TableAllocation(w)


# ---------------------------------------------------------------------------
# optimality sweeps


@dataclass
class SweepReport:
    n: int
    floor: float
    resolution: float
    candidates: int
    pibar_gamma: float
    pibar_max_abs: float
    pibar_variance: float
    best_max_abs: float
    best_variance: float
    argmin_max_abs: list
    argmin_variance: list

    @property
    def pibar_masses(self) -> np.ndarray:
        return ProductGammaDistribution(self.pibar_gamma, self.n).masses

    def worst_case_optimal(self, rtol: float = 1e-12) -> bool:
        """No candidate has a strictly smaller max |c| than pi-bar."""
        return self.best_max_abs >= self.pibar_max_abs * (1 - rtol)

    def variance_optimal(self, rtol: float = 1e-12) -> bool:
        """No candidate has a strictly smaller max coefficient variance than pi-bar."""
        return self.best_variance >= self.pibar_variance * (1 - rtol)

    def pibar_optimal(self, rtol: float = 1e-12) -> bool:
        return self.worst_case_optimal(rtol) and self.variance_optimal(rtol)

    def argmin_distance(self, measure: str = "max_abs") -> float:
        """Largest mass difference between a sweep minimizer and pi-bar."""
        best = self.argmin_max_abs if measure == "max_abs" else self.argmin_variance
        return float(np.abs(np.array(best) - self.pibar_masses).max())


def optimality_sweep(n: int, floor: float, resolution: float = 1e-3, seed: int = 0,
                     restarts: int = 40, steps: int = 400,
                     constraint: str = "precision") -> SweepReport:
    """Search subset distributions meeting ``floor`` for lower risk than pi-bar.

    ``constraint="precision"`` requires ``pi([n]) >= floor``; ``"welfare"``
    requires every agent to be kept with probability >= ``floor`` (n = 2 only).
    n = 2 scans the full simplex grid of step ``resolution``; n = 3 combines
    heterogeneous product laws, random perturbations of pi-bar and a
    randomized-restart local search.
    """
    if not 0.0 < floor < 1.0:
        raise ValueError(f"floor must lie in (0, 1), got {floor}")
    if resolution > 1e-2:
        raise ValueError("grid resolution must be <= 1e-2")
    if constraint not in ("precision", "welfare"):
        raise ValueError(f"unknown constraint {constraint!r}")
    gamma = 1.0 - (floor ** (1.0 / n) if constraint == "precision" else floor)
    pibar = ProductGammaDistribution(gamma, n)
    pv, pw = risk_stats(pibar)
    if n == 2:
        found = _grid_sweep_n2(floor, resolution, constraint)
    elif constraint != "precision":
        raise ValueError("welfare-constrained sweeps are implemented for n = 2")
    elif n == 3:
        found = _search_n3(floor, resolution, seed, restarts, steps)
    else:
        raise ValueError("sweeps are implemented for n in {2, 3}")
    count, (bw, aw), (bv, av) = found
    return SweepReport(n, floor, resolution, count, gamma, pw, pv, bw, bv,
                       list(map(float, aw)), list(map(float, av)))


def _grid_sweep_n2(floor: float, resolution: float, constraint: str = "precision"):
    units = int(round(1.0 / resolution))
    start = max(1, math.ceil(floor * units - 1e-9)) if constraint == "precision" else 1
    best_w, best_v = (math.inf, None), (math.inf, None)
    count = 0
    for k3 in range(start, units - 2):
        rem = units - k3
        k1, k2 = np.meshgrid(np.arange(1, rem), np.arange(1, rem), indexing="ij")
        ok = k1 + k2 <= rem - 1
        k1, k2 = k1[ok], k2[ok]
        k0 = rem - k1 - k2
        p0, p1, p2 = k0 / units, k1 / units, k2 / units
        p3 = k3 / units
        if constraint == "welfare":
            keep = (k1 + k3 >= floor * units - 1e-9) & (k2 + k3 >= floor * units - 1e-9)
            if not keep.any():
                continue
            p0, p1, p2 = p0[keep], p1[keep], p2[keep]
        worst = np.maximum.reduce([np.ones_like(p0), p1 / p0, p3 / p2, p2 / p0, p3 / p1])
        var = np.maximum(p1 + p3 + p1 ** 2 / p0 + p3 ** 2 / p2,
                         p2 + p3 + p2 ** 2 / p0 + p3 ** 2 / p1)
        count += len(p0)
        a, b = int(np.argmin(worst)), int(np.argmin(var))
        if worst[a] < best_w[0]:
            best_w = (float(worst[a]), (p0[a], p1[a], p2[a], p3))
        if var[b] < best_v[0]:
            best_v = (float(var[b]), (p0[b], p1[b], p2[b], p3))
    return count, best_w, best_v


def _search_n3(floor: float, resolution: float, seed: int, restarts: int, steps: int):
    n = 3
    rng = make_rng(seed)
    size = member_matrix(n)
    cands = []
    # heterogeneous product laws on a grid of per-agent keep probabilities
    keep = np.arange(floor, 1.0, 0.01)
    q = np.stack(np.meshgrid(keep, keep, keep, indexing="ij"), -1).reshape(-1, n)
    q = q[q.prod(axis=1) >= floor]
    q = q[(q < 1.0).all(axis=1)]
    cands.append(np.where(size[None, :, :], q[:, None, :], 1.0 - q[:, None, :]).prod(axis=2))
    gamma = 1.0 - floor ** (1.0 / n)
    base = ProductGammaDistribution(gamma, n).masses
    noise = np.exp(0.2 * rng.standard_normal((20_000, 1 << n)))
    cands.append(_lift(base * noise, floor))
    pool = np.concatenate(cands)
    pool = pool[np.all(pool > 0, axis=1)]
    v, w = _risk_from_masses(pool, n)
    count = len(pool)
    best_w = (float(w.min()), pool[int(np.argmin(w))])
    best_v = (float(v.min()), pool[int(np.argmin(v))])
    # local search from random feasible starts, once per objective
    for obj in (1, 0):
        for _ in range(restarts):
            p = _lift(rng.dirichlet(np.ones(1 << n))[None, :], floor)[0]
            cur = _risk_from_masses(p, n)[obj][0]
            scale = 0.3
            for _ in range(steps):
                prop = _lift((p * np.exp(scale * rng.standard_normal(1 << n)))[None, :], floor)
                val = _risk_from_masses(prop, n)[obj][0]
                count += 1
                if val < cur:
                    p, cur = prop[0], val
                else:
                    scale = max(resolution, scale * 0.98)
            best = best_w if obj == 1 else best_v
            if cur < best[0]:
                if obj == 1:
                    best_w = (float(cur), p)
                else:
                    best_v = (float(cur), p)
    return count, best_w, best_v


def _lift(P: np.ndarray, floor: float) -> np.ndarray:
    """Normalize rows and move mass onto the full set until precision reaches ``floor``."""
    P = P / P.sum(axis=1, keepdims=True)
    full = P[:, -1]
    t = np.clip((floor - full) / (1.0 - full), 0.0, 1.0)
    P = P * (1.0 - t)[:, None]
    P[:, -1] += t
    return P
