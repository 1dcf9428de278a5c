"""Alternating minimization heuristics that produce rank-k incumbents."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .conic import ConeKind, ConicProgram
from .disjunctions import DisjunctionBranch
from .instance import CompletionInstance, Mode, is_infeasible, objective_value

log = logging.getLogger(__name__)

JITTER = 1e-12


@dataclass
class FactorPair:
    U: np.ndarray
    V: np.ndarray
    objective: float

    @property
    def X(self) -> np.ndarray:
        return self.U @ self.V


@dataclass
class NodePolyhedron:
    """Interval constraints ``lo <= x @ U[:, j] <= hi`` collected along a path."""

    rows: list[tuple[np.ndarray, int, float, float]] = field(default_factory=list)

    @classmethod
    def from_branches(cls, branches) -> "NodePolyhedron":
        poly = cls()
        for br in branches:
            for j, (lo, hi) in enumerate(br.intervals()):
                poly.rows.append((br.cut.x, j, lo, hi))
        return poly

    def violation(self, U: np.ndarray) -> float:
        worst = 0.0
        for x, j, lo, hi in self.rows:
            u = x @ U[:, j]
            worst = max(worst, lo - u, u - hi)
        return worst


def _orthonormal_complete(Q: np.ndarray, k: int) -> np.ndarray:
    """Pad the orthonormal columns of ``Q`` to ``k`` columns."""
    n = Q.shape[0]
    if Q.shape[1] >= k:
        return Q[:, :k]
    basis = np.hstack([Q, np.eye(n)])
    full, _ = np.linalg.qr(basis)
    return np.hstack([Q, full[:, Q.shape[1]:k]])


def top_left_singular(M: np.ndarray, k: int, rtol: float = 1e-12) -> np.ndarray:
    """Top-k left singular vectors; numerically null directions are padded."""
    Uf, s, _ = np.linalg.svd(M, full_matrices=False)
    rank = int(np.sum(s > rtol * max(s[0] if s.size else 0.0, 1e-300)))
    return _orthonormal_complete(Uf[:, :min(rank, k)], k)


def initialize_U(instance: CompletionInstance) -> np.ndarray:
    return top_left_singular(instance.observed_matrix(), instance.k)


def _solve_spd(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(G, b)
    except np.linalg.LinAlgError:
        log.debug("singular normal equations; adding jitter")
        return np.linalg.solve(G + JITTER * np.eye(G.shape[0]), b)


def v_step(instance: CompletionInstance, U: np.ndarray) -> np.ndarray:
    """Minimize the noisy objective over ``V`` with ``U`` fixed, column by column."""
    A, M, g = instance.observed_matrix(), instance.mask, instance.gamma
    reg = U.T @ U / g
    V = np.zeros((U.shape[1], instance.m))
    for j in range(instance.m):
        Uo = U[M[:, j]]
        V[:, j] = _solve_spd(Uo.T @ Uo + reg, Uo.T @ A[M[:, j], j])
    return V


def u_step(instance: CompletionInstance, V: np.ndarray) -> np.ndarray:
    """Minimize the noisy objective over ``U`` with ``V`` fixed, row by row."""
    A, M, g = instance.observed_matrix(), instance.mask, instance.gamma
    reg = V @ V.T / g
    U = np.zeros((instance.n, V.shape[0]))
    for i in range(instance.n):
        Vo = V[:, M[i]]
        U[i] = _solve_spd(Vo @ Vo.T + reg, Vo @ A[i, M[i]])
    return U


def _finalize(instance: CompletionInstance, X: np.ndarray) -> FactorPair:
    U = top_left_singular(X, instance.k)
    V = U.T @ X
    return FactorPair(U, V, objective_value(instance, U @ V))


def altmin(instance: CompletionInstance, U0: np.ndarray | None = None, max_iters: int = 500,
           tol: float = 1e-8, trace: list | None = None) -> FactorPair:
    """Alternating exact minimization over ``V`` and ``U`` (noisy objective).

    ``trace``, when given, receives the objective after every half-step.
    """
    if instance.mode is not Mode.NOISY:
        raise ValueError("altmin needs a noisy instance; use polish_basis_pursuit")
    U = initialize_U(instance) if U0 is None else np.asarray(U0, dtype=float)
    prev = math.inf
    for _ in range(max_iters):
        V = v_step(instance, U)
        if trace is not None:
            trace.append(objective_value(instance, U @ V))
        U = u_step(instance, V)
        obj = objective_value(instance, U @ V)
        if trace is not None:
            trace.append(obj)
        if prev - obj <= tol * max(abs(prev), 1e-300) and prev < math.inf:
            break
        prev = obj
    V = v_step(instance, U)
    return _finalize(instance, U @ V)


def node_selection_probability(depth: int, beta: float = 0.5) -> float:
    if depth < 0 or not 0 < beta <= 1:
        raise ValueError("need depth >= 0 and beta in (0, 1]")
    return beta ** depth


# ---------------------------------------------------------------------------
# node-constrained variant


def _u_step_conic(instance: CompletionInstance, V: np.ndarray, poly: NodePolyhedron,
                  tol: conic.Tolerances | None = None) -> np.ndarray | None:
    n, k = instance.n, V.shape[0]
    g = instance.gamma
    p = ConicProgram()
    U = p.add_free((n, k))
    # residual rows:  U[i] @ V[:, j] - A_ij  for observed entries, and
    # sqrt(1/g) * U[i] @ R.T for the regularizer with R.T @ R = V V^T
    R = np.linalg.cholesky(V @ V.T / g + JITTER * np.eye(k)).T
    rows_idx, rows_coef, rhs = [], [], []
    for (i, j), a in zip(instance.index, instance.values):
        rows_idx.append(U[i])
        rows_coef.append(V[:, j])
        rhs.append(a)
    for i in range(n):
        for s in range(k):
            rows_idx.append(U[i])
            rows_coef.append(R[s])
            rhs.append(0.0)
    nr = len(rhs)
    cone = p.add_cone(ConeKind.SOC, 2 + nr)
    a, b, r = cone[0], cone[1], cone[2:]
    p.add_equality([a, b], [1.0, -1.0], 1.0)
    p.add_equalities(np.column_stack([np.array(rows_idx), r]),
                     np.column_stack([np.array(rows_coef), -np.ones(nr)]), np.array(rhs))
    p.add_objective([a, b], 0.5)
    for x, j, lo, hi in poly.rows:
        p.add_inequality(U[:, j], -x, -lo)
        p.add_inequality(U[:, j], x, hi)
    # second-order cone relaxation of orthonormal columns
    def norm_bound(idx, coef, radius):
        s = p.add_cone(ConeKind.SOC, 1 + n)
        p.add_equality([s[0]], [1.0], radius)
        p.add_equalities(np.column_stack([s[1:]] + [c for c in idx]),
                         np.column_stack([np.ones(n)] + [-np.full(n, c) for c in coef]), 0.0)
    for j in range(k):
        norm_bound([U[:, j]], [1.0], 1.0)
    for j1 in range(k):
        for j2 in range(j1 + 1, k):
            norm_bound([U[:, j1], U[:, j2]], [1.0, 1.0], math.sqrt(2.0))
            norm_bound([U[:, j1], U[:, j2]], [1.0, -1.0], math.sqrt(2.0))
    sol = conic.solve(p, tol)
    if not sol.ok:
        return None
    return sol.x[U]


def altmin_node(instance: CompletionInstance, poly: NodePolyhedron, Y_relaxed: np.ndarray,
                max_iters: int = 20, tol: float = 1e-6) -> FactorPair | None:
    """Alternating minimization with the U-step restricted to the node region.

    Starts from the top-k eigenvectors of the node's relaxed ``Y``.  Returns
    ``None`` when the restricted U-step is infeasible.
    """
    if instance.mode is not Mode.NOISY:
        raise ValueError("altmin_node needs a noisy instance")
    U = top_left_singular(0.5 * (Y_relaxed + Y_relaxed.T), instance.k)
    prev = math.inf
    best: FactorPair | None = None
    for _ in range(max_iters):
        V = v_step(instance, U)
        U_new = _u_step_conic(instance, V, poly)
        if U_new is None:
            return best
        U = U_new
        obj = objective_value(instance, U @ V)
        if best is None or obj < best.objective:
            best = FactorPair(U.copy(), V.copy(), obj)
        if prev - obj <= tol * max(abs(prev), 1e-300) and prev < math.inf:
            break
        prev = obj
    if best is None:
        return None
    V = v_step(instance, best.U)
    obj = objective_value(instance, best.U @ V)
    if obj <= best.objective:
        best = FactorPair(best.U, V, obj)
    return best


# ---------------------------------------------------------------------------
# basis pursuit completion


def _min_norm_constrained(G: np.ndarray, C: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Minimize ``v' G v`` subject to ``C v = d`` (least squares if inconsistent)."""
    base = np.linalg.lstsq(C, d, rcond=None)[0]
    _, s, Vt = np.linalg.svd(C)
    rank = int(np.sum(s > 1e-10 * max(s[0], 1e-300))) if s.size else 0
    N = Vt[rank:].T
    if N.shape[1] == 0:
        return base
    w = np.linalg.lstsq(N.T @ G @ N, -N.T @ G @ base, rcond=None)[0]
    return base + N @ w


def polish_basis_pursuit(instance: CompletionInstance, U0: np.ndarray, max_iters: int = 2000,
                         tol: float = 1e-10) -> FactorPair:
    """Rank-k completion matching the observations with small Frobenius norm.

    Alternates minimum-norm exact fits of ``V`` (per column) and ``U`` (per
    row).  Stops once the observation residual is negligible and the norm has
    settled, or once the residual stops shrinking.  The objective is
    :data:`~lowrank_bnb.instance.INFEASIBLE` if the observations could not be
    matched.
    """
    A, M = instance.observed_matrix(), instance.mask
    scale = max(float(np.max(np.abs(A[M]), initial=0.0)), 1e-300)
    U = np.asarray(U0, dtype=float)
    prev_norm = prev_resid = math.inf
    stalled = 0
    for _ in range(max_iters):
        G = U.T @ U
        V = np.column_stack([_min_norm_constrained(G, U[M[:, j]], A[M[:, j], j]) for j in range(instance.m)])
        H = V @ V.T
        U = np.vstack([_min_norm_constrained(H, V[:, M[i]].T, A[i, M[i]]) for i in range(instance.n)])
        X = U @ V
        resid = float(np.max(np.abs(X[M] - A[M]), initial=0.0)) / scale
        norm = float(np.sum(X * X))
        if resid <= 1e-12 and abs(prev_norm - norm) <= tol * max(norm, 1e-300):
            break
        stalled = stalled + 1 if resid >= prev_resid * (1 - 1e-6) else 0
        if stalled >= 20:
            break
        prev_norm, prev_resid = norm, resid
    return _finalize(instance, U @ V)


def polish_incumbent(instance: CompletionInstance, X_relaxed: np.ndarray) -> FactorPair:
    """Rank-k candidate near a relaxed ``X``, re-evaluated on the true objective."""
    U0 = top_left_singular(X_relaxed, instance.k)
    if instance.mode is Mode.BASIS_PURSUIT:
        return polish_basis_pursuit(instance, U0)
    return altmin(instance, U0, max_iters=100)
