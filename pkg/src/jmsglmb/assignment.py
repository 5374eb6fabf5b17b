"""Optimal and K-best (Murty) assignment over rectangular cost matrices."""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment


class InfeasibleAssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class CostMatrix:
    """Association costs for ``n`` rows against ``m`` shared columns.

    ``meas`` is (n, m): cost of row i taking shared column j (each shared column
    can be used once).  ``private`` is (n, b): b alternative outcomes per row
    (e.g. missed detection, death) that are private to that row.  The full
    matrix lays out one diagonal block per private outcome, so ``full()`` is
    (n, m + b*n) with +inf off the diagonals.
    """

    meas: np.ndarray
    private: np.ndarray

    def __post_init__(self):
        meas = np.asarray(self.meas, dtype=float)
        private = np.asarray(self.private, dtype=float)
        if private.ndim == 1:
            private = private[:, None]
        if meas.ndim != 2 or private.shape[0] != meas.shape[0]:
            raise ValueError("meas must be (n, m) and private (n, b)")
        object.__setattr__(self, "meas", meas)
        object.__setattr__(self, "private", private)

    @property
    def n_rows(self) -> int:
        return self.meas.shape[0]

    @property
    def n_meas(self) -> int:
        return self.meas.shape[1]

    def full(self) -> np.ndarray:
        n, m = self.meas.shape
        b = self.private.shape[1]
        out = np.full((n, m + b * n), np.inf)
        out[:, :m] = self.meas
        rows = np.arange(n)
        for j in range(b):
            out[rows, m + j * n + rows] = self.private[:, j]
        return out

    def decode(self, cols) -> list[tuple[str, int]]:
        """Map full-matrix columns to ('meas', j) or ('private', block)."""
        n, m = self.meas.shape
        out = []
        for c in cols:
            c = int(c)
            out.append(("meas", c) if c < m else ("private", (c - m) // n))
        return out

    def outcomes(self, cols) -> np.ndarray:
        """Compact per-row outcome codes: j >= 0 is a shared column, -1 - b a private block."""
        n, m = self.meas.shape
        cols = np.asarray(cols)
        return np.where(cols < m, cols, -1 - (cols - m) // max(n, 1))


CostLike = Union[np.ndarray, CostMatrix]


def _as_array(costs: CostLike) -> np.ndarray:
    if isinstance(costs, CostMatrix):
        return costs.full()
    return np.atleast_2d(np.asarray(costs, dtype=float))


def _lsa(costs: np.ndarray):
    n, m = costs.shape
    if n > m:
        raise InfeasibleAssignmentError(f"{n} rows cannot be assigned to {m} columns")
    try:
        rows, cols = linear_sum_assignment(costs)
    except ValueError as exc:
        raise InfeasibleAssignmentError(str(exc)) from exc
    total = float(np.sum(costs[rows, cols]))
    if not np.isfinite(total):
        raise InfeasibleAssignmentError("no finite-cost assignment")
    return cols, total


def solve_optimal(costs: CostLike) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment; returns (column for each row, total cost)."""
    C = _as_array(costs)
    if C.shape[0] == 0:
        return np.zeros(0, dtype=int), 0.0
    return _lsa(C)


def k_best(costs: CostLike, K: int, max_cost: Optional[float] = None) -> list[tuple[np.ndarray, float]]:
    """The ``K`` cheapest distinct assignments in nondecreasing cost order.

    Murty's partitioning with the optimal solver on each subproblem.  Equal
    costs are ordered by the lexicographic column vector.  If ``max_cost`` is
    given, enumeration stops at the first solution costing more than it.
    Returns an empty list when no finite assignment exists.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    C = _as_array(costs)
    n = C.shape[0]
    if n == 0:
        return [(np.zeros(0, dtype=int), 0.0)]
    try:
        cols, total = _lsa(C)
    except InfeasibleAssignmentError:
        return []

    # heap entries: (cost, assignment, tiebreak counter, constrained matrix, number of fixed leading rows)
    counter = 0
    heap = [(total, tuple(cols.tolist()), counter, C, 0)]
    out: list[tuple[np.ndarray, float]] = []
    while heap and len(out) < K:
        total, sol, _, M, fixed = heapq.heappop(heap)
        if max_cost is not None and total > max_cost:
            break
        out.append((np.array(sol, dtype=int), total))
        if len(out) == K:
            break
        # partition: child i keeps sol[:i], forbids sol[i]
        M_child = M.copy()
        for i in range(fixed, n):
            sub = M_child.copy()
            sub[i, sol[i]] = np.inf
            try:
                c_cols, c_total = _lsa(sub)
            except InfeasibleAssignmentError:
                c_cols = None
            if c_cols is not None:
                counter += 1
                heapq.heappush(heap, (c_total, tuple(c_cols.tolist()), counter, sub, i))
            # force row i onto sol[i] for the remaining children
            keep = M_child[i, sol[i]]
            M_child[i, :] = np.inf
            M_child[:, sol[i]] = np.inf
            M_child[i, sol[i]] = keep
    return out
