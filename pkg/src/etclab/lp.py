"""Dense two-phase primal simplex for small linear programs.

Solves min c^T x subject to A x <= b with free variables (internally split
into positive parts). Bland's rule is used for both entering and leaving
choices, which prevents cycling at the cost of speed; problem sizes here are
tiny (a handful of variables, up to a few hundred constraints).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-9


@dataclass
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded" | "iteration_limit"
    x: np.ndarray | None = None
    objective: float | None = None


def _pivot(T: np.ndarray, basis: list[int], row: int, col: int) -> None:
    T[row] /= T[row, col]
    factors = T[:, col].copy()
    factors[row] = 0.0
    T -= np.outer(factors, T[row])
    basis[row] = col


def _bland_iterate(T: np.ndarray, basis: list[int], ncols: int,
                   tol: float, max_iter: int) -> str:
    for _ in range(max_iter):
        neg = np.flatnonzero(T[-1, :ncols] < -tol)
        if neg.size == 0:
            return "optimal"
        entering = int(neg[0])
        col = T[:-1, entering]
        pos = np.flatnonzero(col > tol)
        if pos.size == 0:
            return "unbounded"
        ratios = T[pos, -1] / col[pos]
        best_ratio = ratios.min()
        ties = pos[ratios <= best_ratio + 1e-12]
        # Bland tie-break: smallest basis index among minimum-ratio rows
        leaving = int(min(ties, key=lambda i: basis[i]))
        _pivot(T, basis, leaving, entering)
    return "iteration_limit"


def solve_lp(c, a_ub, b_ub, tol: float = DEFAULT_TOL,
             max_iter: int = 50_000) -> LpResult:
    """Minimize c^T x over {x : a_ub x <= b_ub} with x free."""
    c = np.asarray(c, dtype=float).reshape(-1)
    A = np.atleast_2d(np.asarray(a_ub, dtype=float))
    b = np.asarray(b_ub, dtype=float).reshape(-1)
    m, n = A.shape
    if c.shape[0] != n or b.shape[0] != m:
        raise ValueError("inconsistent LP dimensions")

    # split free variables, add slacks; flip rows so the rhs is nonnegative
    A2 = np.hstack([A, -A, np.eye(m)])
    b2 = b.copy()
    flip = b2 < 0.0
    A2[flip] *= -1.0
    b2[flip] *= -1.0
    n_struct = 2 * n + m

    art_rows = np.nonzero(flip)[0]
    n_art = art_rows.size
    n_total = n_struct + n_art
    T = np.zeros((m + 1, n_total + 1))
    T[:m, :n_struct] = A2
    T[:m, -1] = b2
    basis = [0] * m
    for i in range(m):
        if flip[i]:
            j = n_struct + int(np.nonzero(art_rows == i)[0][0])
            T[i, j] = 1.0
            basis[i] = j
        else:
            basis[i] = 2 * n + i  # slack basic

    # phase I: minimize sum of artificials
    if n_art:
        T[-1, n_struct:n_total] = 1.0
        for i in range(m):
            if basis[i] >= n_struct:
                T[-1] -= T[i]
        status = _bland_iterate(T, basis, n_total, tol, max_iter)
        if status == "iteration_limit":
            return LpResult("iteration_limit")
        if -T[-1, -1] > 1e-7:
            return LpResult("infeasible")
        # drive remaining artificials out of the basis
        for i in range(m):
            if basis[i] >= n_struct:
                piv = -1
                for j in range(n_struct):
                    if abs(T[i, j]) > tol:
                        piv = j
                        break
                if piv >= 0:
                    _pivot(T, basis, i, piv)
                else:
                    T[i, :] = 0.0  # redundant row
                    basis[i] = -1

    # phase II
    T[-1, :] = 0.0
    T[-1, :n] = c
    T[-1, n:2 * n] = -c
    for i in range(m):
        bi = basis[i]
        if 0 <= bi < n_struct and T[-1, bi] != 0.0:
            T[-1] -= T[-1, bi] * T[i]
    T[:, n_struct:n_total] = 0.0  # artificials stay out
    status = _bland_iterate(T, basis, n_struct, tol, max_iter)
    if status != "optimal":
        return LpResult(status)

    xfull = np.zeros(n_struct)
    for i in range(m):
        if basis[i] >= 0:
            xfull[basis[i]] = T[i, -1]
    x = xfull[:n] - xfull[n:2 * n]
    return LpResult("optimal", x=x, objective=float(c @ x))


def feasible_point(a_ub, b_ub, tol: float = DEFAULT_TOL) -> np.ndarray | None:
    """A vertex of {x : a_ub x <= b_ub}, or None if the region is empty."""
    n = np.atleast_2d(np.asarray(a_ub, dtype=float)).shape[1]
    res = solve_lp(np.zeros(n), a_ub, b_ub, tol=tol)
    if res.status == "optimal":
        return res.x
    return None
