"""Reference truthful payments: Clarke pivots for MIDR rules and normalized
Archer-Tardos payments for monotone single-parameter rules."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import integrate

from .core import (MidrInstance, NumericalError, SingleParamAllocation, SubsetMask,
                   TableAllocation, member_welfare, welfare_table,
                   zero_mask_bids)

MAX_ENUM_AGENTS = 16
QUAD_TOL = 1e-8


def clarke_pivot(inst: MidrInstance, b, i: int) -> float:
    """VCG payment of agent ``i`` with the pivot maximized over the range."""
    b = np.asarray(b, dtype=float)
    others = np.delete(b, i, axis=0).sum(axis=0)
    others_by_entry = inst.dist_range @ others
    d_star = inst.best_entry(b)
    return float(others_by_entry.max() - others_by_entry[d_star])


def table_clarke_pivot(table: TableAllocation, i: int) -> float:
    """Clarke payment of the original rule read off a welfare table.

    The pivot is the others' welfare when the rule runs without agent ``i``,
    which for MIDR-generated tables equals the range maximum.
    """
    full = (1 << table.n) - 1
    w = table.welfare
    without = full & ~(1 << i)
    return float(np.delete(w[without], i).sum() - np.delete(w[full], i).sum())


def quad(f, a: float, b: float, points=None, tol: float = QUAD_TOL) -> float:
    """Integral of ``f`` on [a, b] to absolute tolerance ``tol``.

    With ``points`` (every place ``f`` may jump) each smooth piece goes to
    QUADPACK. Without them the integrand is opaque and may hide jumps, where
    QUADPACK's error estimate is unreliable, so adaptive Simpson is used.
    Raises NumericalError on non-convergence.
    """
    if b <= a:
        return 0.0
    if points is None:
        return adaptive_simpson(f, a, b, tol)
    knots = [a] + sorted(float(p) for p in points if a < p < b) + [b]
    total = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            res = integrate.quad(f, lo, hi, epsabs=tol / len(knots), epsrel=0.0,
                                 limit=200, full_output=1)
        if len(res) > 3:
            value, err, info, msg = res
            raise NumericalError(
                f"quadrature on [{lo}, {hi}] did not converge (err={err:.3g}, "
                f"evals={info['neval']}): {msg}")
        total += res[0]
    return total


def adaptive_simpson(f, a: float, b: float, tol: float = QUAD_TOL, max_depth: int = 40,
                     max_evals: int = 200_000) -> float:
    """Bisection Simpson with Richardson acceptance ``|S2 - S1| <= 15 eps``.

    A jump never passes the Richardson test, so a piece is also accepted once
    its width times the spread of the sampled values is below ``tol / 64``:
    for a monotone piece that bounds the error outright.
    """
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) * (fa + 4 * fm + fb) / 6
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    evals = 3
    while stack:
        evals += 2
        if evals > max_evals:
            raise NumericalError(f"adaptive Simpson exceeded {max_evals} evaluations on [{a}, {b}]")
        lo, hi, flo, fmid, fhi, s1, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        fl, fr = f(0.5 * (lo + mid)), f(0.5 * (mid + hi))
        left = (mid - lo) * (flo + 4 * fl + fmid) / 6
        right = (hi - mid) * (fmid + 4 * fr + fhi) / 6
        delta = left + right - s1
        spread = max(flo, fl, fmid, fr, fhi) - min(flo, fl, fmid, fr, fhi)
        if abs(delta) <= 15 * eps:
            total += left + right + delta / 15
        elif (hi - lo) * spread <= tol / 64:
            total += left + right
        elif depth >= max_depth:
            raise NumericalError(
                f"adaptive Simpson hit depth {max_depth} on [{lo}, {hi}] (|delta|={abs(delta):.3g})")
        else:
            stack.append((lo, mid, flo, fl, fmid, left, eps / 2, depth + 1))
            stack.append((mid, hi, fmid, fr, fhi, right, eps / 2, depth + 1))
    return total


def own_bid_integral(A: SingleParamAllocation, b, i: int, upper: float | None = None) -> float:
    """``int_0^upper A_i(u, b_-i) du``; exact for piecewise-constant rules."""
    b = np.asarray(b, dtype=float)
    upper = b[i] if upper is None else upper
    if upper <= 0:
        return 0.0
    breaks = A.own_breakpoints(i, b)

    def level(u):
        x = b.copy()
        x[i] = u
        return A(x)[i]

    if breaks is None:
        return quad(level, 0.0, upper)
    knots = np.unique(np.concatenate([[0.0, upper], np.clip(breaks, 0.0, upper)]))
    mids = 0.5 * (knots[:-1] + knots[1:])
    rows = np.repeat(b[None, :], len(mids), axis=0)
    rows[:, i] = mids
    return float(np.dot(A.evaluate_many(rows)[:, i], np.diff(knots)))


def archer_tardos_payment(A: SingleParamAllocation, b, i: int) -> float:
    """Normalized payment ``b_i A_i(b) - int_0^{b_i} A_i(u, b_-i) du``."""
    b = np.asarray(b, dtype=float)
    if b[i] < 0:
        raise ValueError("single-parameter payments need b_i >= 0")
    return float(b[i] * A(b)[i] - own_bid_integral(A, b, i))


def clarke_pivot_of_reduction(source, dist, b=None, i: int = 0) -> float:
    """Exact expected Clarke payment of the composed rule A^sc for agent ``i``.

    Each mask M contributes pi(M) times the welfare of the other members of M
    when the rule runs without ``i`` (at M minus i) less their welfare at M.
    Computed by re-evaluating the rule, independently of the coefficients.
    """
    n = source.n
    if n > MAX_ENUM_AGENTS:
        raise ValueError(f"exact enumeration refused for n={n} > {MAX_ENUM_AGENTS}")
    masses = dist.masses
    total = 0.0
    if isinstance(source, MidrInstance):
        bids = source.valuations if b is None else np.asarray(b, dtype=float)
        for m in range(1 << n):
            if masses[m] == 0.0:
                continue
            with_i = source.best_entry(zero_mask_bids(bids, SubsetMask(m, n)))
            without = source.best_entry(zero_mask_bids(bids, SubsetMask(m & ~(1 << i), n)))
            members = [j for j in range(n) if j != i and m >> j & 1]
            others = bids[members].sum(axis=0)
            pivot = source.dist_range[without] @ others
            total += masses[m] * (pivot - source.dist_range[with_i] @ others)
        return float(total)
    w = welfare_table(source).welfare
    masks = np.arange(1 << n)
    seen = member_welfare(w)
    others = seen.sum(axis=1) - seen[:, i]
    pivot = others[masks & ~(1 << i)]
    return float(np.dot(masses, pivot - others))
