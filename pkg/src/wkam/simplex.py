"""Dense two-phase revised simplex with Bland's rule.

Meant for small problems (a few hundred columns) where an independent
solver is wanted to cross-check the production LP backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SimplexError(RuntimeError):
    pass


@dataclass
class SimplexResult:
    x: np.ndarray
    value: float
    basis: list
    iterations: int
    dropped_rows: list


def _iterate(A, b, cost, basis, allowed, tol, max_iter):
    """Primal simplex on min cost.x, A x = b, x >= 0 from a feasible basis."""
    m = A.shape[0]
    it = 0
    while True:
        if it >= max_iter:
            raise SimplexError(f"iteration cap {max_iter} reached")
        B = A[:, basis]
        xB = np.linalg.solve(B, b)
        y = np.linalg.solve(B.T, cost[basis])
        reduced = cost - A.T @ y
        entering = -1
        in_basis = set(basis)
        for j in np.flatnonzero(allowed):
            if j not in in_basis and reduced[j] < -tol:
                entering = int(j)
                break
        if entering < 0:
            return xB, it
        d = np.linalg.solve(B, A[:, entering])
        best = None
        for r in range(m):
            if d[r] > tol:
                ratio = max(xB[r], 0.0) / d[r]
                key = (ratio, basis[r])
                if best is None or key[0] < best[0] - 1e-14 or (abs(key[0] - best[0]) <= 1e-14 and key[1] < best[1]):
                    best = (ratio, basis[r], r)
        if best is None:
            raise SimplexError("problem is unbounded")
        basis[best[2]] = entering
        it += 1


def solve_simplex(cost, A_eq, b_eq, tol: float = 1e-10, max_iter: int = 50_000) -> SimplexResult:
    """Minimise cost.x subject to A_eq x = b_eq, x >= 0.

    Entering column: lowest index with negative reduced cost.  Leaving row:
    minimum ratio, ties broken by lowest basic variable index.
    """
    A = np.array(A_eq.toarray() if hasattr(A_eq, "toarray") else A_eq, dtype=float)
    b = np.array(b_eq, dtype=float)
    cost = np.asarray(cost, dtype=float)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase I: artificials n..n+m-1
    A1 = np.hstack([A, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = list(range(n, n + m))
    allowed = np.ones(n + m, dtype=bool)
    _, it1 = _iterate(A1, b, c1, basis, allowed, tol, max_iter)
    xB = np.linalg.solve(A1[:, basis], b)
    infeas = float(sum(xB[r] for r in range(m) if basis[r] >= n))
    if infeas > 1e-8:
        raise SimplexError(f"problem is infeasible (phase I residual {infeas:.3e})")

    # drive remaining artificials out; rows where that fails are redundant
    row_ids = list(range(m))
    dropped = []
    r = 0
    while r < len(basis):
        if basis[r] < n:
            r += 1
            continue
        row = np.linalg.solve(A1[:, basis], A1)[r]
        candidates = [j for j in range(n) if j not in basis and abs(row[j]) > 1e-9]
        if candidates:
            basis[r] = candidates[0]
            r += 1
            continue
        a = basis[r] - n
        dropped.append(row_ids.pop(a))
        A1 = np.delete(np.delete(A1, a, axis=0), n + a, axis=1)
        b = np.delete(b, a)
        del basis[r]
        basis = [j if j < n + a else j - 1 for j in basis]

    A2 = A1[:, :n]
    allowed = np.ones(n, dtype=bool)
    xB, it2 = _iterate(A2, b, cost, basis, allowed, tol, max_iter)
    x = np.zeros(n)
    x[basis] = np.maximum(xB, 0.0)
    return SimplexResult(x, float(cost @ x), list(basis), it1 + it2, sorted(dropped))
