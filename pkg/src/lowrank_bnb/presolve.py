"""Determinant-minor presolve for basis pursuit.

For exact rank-k data every (k+1) x (k+1) minor vanishes, so a minor with a
single unknown entry pins that entry down, and a minor whose unknowns fill a
single row or column gives a linear equality between them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .instance import CompletionInstance, IndexSet, Mode

PIVOT_RTOL = 1e-10
AGREE_RTOL = 1e-6


class PresolveError(ValueError):
    pass


class PresolveContradiction(PresolveError):
    """Two minors force different values: the data is not exactly low rank."""


@dataclass(frozen=True)
class LinearEquality:
    """``sum(coef * X[entry]) == 0`` over unobserved entries."""

    entries: tuple[tuple[int, int], ...]
    coefs: tuple[float, ...]

    def residual(self, X: np.ndarray) -> float:
        return float(sum(c * X[e] for e, c in zip(self.entries, self.coefs)))


@dataclass
class PresolveResult:
    values: dict[tuple[int, int], float]
    index: IndexSet
    equalities: list[LinearEquality] = field(default_factory=list)
    fills: int = 0

    @property
    def fully_presolved(self) -> bool:
        return len(self.index) == self.index.n * self.index.m

    def instance(self, original: CompletionInstance) -> CompletionInstance:
        """The original instance with filled entries treated as observed."""
        return original.with_observed(self.values)

    def summary(self) -> dict:
        return {"fills": self.fills, "equalities": len(self.equalities),
                "observed": len(self.index), "fully_presolved": self.fully_presolved}


def _check_bp(instance: CompletionInstance) -> None:
    if instance.mode is not Mode.BASIS_PURSUIT:
        raise PresolveError("presolve applies to basis pursuit instances only")


def _nonsingular(B: np.ndarray) -> bool:
    k = B.shape[0]
    scale = float(np.max(np.abs(B), initial=0.0))
    if scale == 0.0:
        return False
    return abs(np.linalg.det(B)) > PIVOT_RTOL * scale ** k


def solve_minor_missing_entry(minor: np.ndarray, k: int | None = None) -> float | None:
    """Value of the single NaN entry of a (k+1) x (k+1) minor making it singular.

    Returns ``None`` when the cofactor of the unknown is numerically zero.
    """
    M = np.asarray(minor, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or (k is not None and M.shape[0] != k + 1):
        raise PresolveError("minor must be square of side k + 1")
    missing = np.argwhere(np.isnan(M))
    if len(missing) != 1:
        raise PresolveError(f"expected exactly one unknown entry, found {len(missing)}")
    r, c = missing[0]
    rows = [i for i in range(M.shape[0]) if i != r]
    cols = [j for j in range(M.shape[1]) if j != c]
    B = M[np.ix_(rows, cols)]
    if not _nonsingular(B):
        return None
    return float(M[r, cols] @ np.linalg.solve(B, M[rows, c]))


def _agree(a: np.ndarray, scale: float) -> bool:
    return float(np.ptp(a)) <= AGREE_RTOL * max(float(np.max(np.abs(a))), 1e-8 * scale)


# ---------------------------------------------------------------------------
# rank one


def _rank1_closure(X: np.ndarray, K: np.ndarray) -> int:
    n, _ = K.shape
    scale = float(np.max(np.abs(X[K]), initial=1.0))
    fills = 0
    changed = True
    while changed:
        changed = False
        for i in range(n):
            for r in range(n):
                if r == i:
                    continue
                common = K[i] & K[r]
                targets = np.flatnonzero(K[r] & ~K[i])
                if targets.size == 0 or not common.any():
                    continue
                piv = np.flatnonzero(common & (np.abs(X[r]) > PIVOT_RTOL * scale))
                if piv.size == 0:
                    continue
                for col in targets:
                    cand = X[i, piv] * X[r, col] / X[r, piv]
                    if not _agree(cand, scale):
                        raise PresolveContradiction(f"entry ({i}, {col}) forced to {cand.min()} and {cand.max()}")
                    X[i, col] = cand[0]
                    K[i, col] = True
                    fills += 1
                    changed = True
    return fills


class _UnionFind:
    def __init__(self) -> None:
        self.parent: dict = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def _rank1_equalities(X: np.ndarray, K: np.ndarray) -> list[LinearEquality]:
    """Ratio equalities between unknown entries, one per spanning-forest edge."""
    ok, blocks = check_block_rectangular(K)
    scale = float(np.max(np.abs(X[K]), initial=1.0))
    uf = _UnionFind()
    out = []

    def link(a, b, ratio):
        # X[b] - ratio * X[a] == 0
        if uf.union(a, b):
            out.append(_normalized(((a, -ratio), (b, 1.0))))

    for rows, cols in blocks:
        outside_cols = [c for c in range(K.shape[1]) if c not in set(cols)]
        outside_rows = [r for r in range(K.shape[0]) if r not in set(rows)]
        for prev, cur in zip(rows, rows[1:]):
            piv = [c for c in cols if abs(X[prev, c]) > PIVOT_RTOL * scale]
            if not piv:
                continue
            ratio = X[cur, piv[0]] / X[prev, piv[0]]
            for col in outside_cols:
                link((prev, col), (cur, col), ratio)
        for prev, cur in zip(cols, cols[1:]):
            piv = [r for r in rows if abs(X[r, prev]) > PIVOT_RTOL * scale]
            if not piv:
                continue
            ratio = X[piv[0], cur] / X[piv[0], prev]
            for row in outside_rows:
                link((row, prev), (row, cur), ratio)
    return out


def _normalized(terms) -> LinearEquality:
    terms = sorted(terms)
    last = terms[-1][1]
    return LinearEquality(tuple(e for e, _ in terms), tuple(c / last for _, c in terms))


def _result(instance: CompletionInstance, X: np.ndarray, K: np.ndarray, fills: int,
            equalities: list[LinearEquality]) -> PresolveResult:
    rows, cols = np.nonzero(K)
    values = {(int(i), int(j)): float(X[i, j]) for i, j in zip(rows, cols)}
    return PresolveResult(values, IndexSet(values, instance.n, instance.m), equalities, fills)


def presolve_rank1(instance: CompletionInstance, equalities: bool = True) -> PresolveResult:
    _check_bp(instance)
    if instance.k != 1:
        raise PresolveError("rank-one presolve needs k = 1")
    X, K = instance.observed_matrix(), instance.mask.copy()
    fills = _rank1_closure(X, K)
    eqs = _rank1_equalities(X, K) if equalities else []
    return _result(instance, X, K, fills, eqs)


# ---------------------------------------------------------------------------
# rank k


def _rankk_closure(X: np.ndarray, K: np.ndarray, k: int, max_subsets: int = 20) -> int:
    n, m = K.shape
    scale = float(np.max(np.abs(X[K]), initial=1.0))
    fills = 0
    changed = True
    while changed:
        changed = False
        for Cp in itertools.combinations(range(m), k):
            Cp = list(Cp)
            S = np.flatnonzero(K[:, Cp].all(axis=1))
            if S.size <= k:
                continue
            KS = K[S]
            counts = KS.sum(axis=0)
            eligible = np.flatnonzero((counts >= k) & (counts < S.size))
            for j in eligible:
                if j in Cp:
                    continue
                known = KS[:, j]
                Rbar, targets = S[known], S[~known]
                bases = []
                for Rp in itertools.islice(itertools.combinations(Rbar, k), max_subsets):
                    B = X[np.ix_(Rp, Cp)]
                    if _nonsingular(B):
                        bases.append((list(Rp), B))
                        if len(bases) == 2:
                            break
                if not bases:
                    continue
                vals = [X[np.ix_(targets, Cp)] @ np.linalg.solve(B, X[Rp, j]) for Rp, B in bases]
                if len(vals) == 2:
                    for a, b in zip(*vals):
                        if not _agree(np.array([a, b]), scale):
                            raise PresolveContradiction(f"column {j}: minors disagree ({a} vs {b})")
                X[targets, j] = vals[0]
                K[targets, j] = True
                fills += targets.size
                changed = True
    return fills


def presolve_rankk(instance: CompletionInstance, k: int | None = None,
                   equalities: bool = False) -> PresolveResult:
    """Fill entries forced by (k+1) x (k+1) minors, to a fixed point.

    Equality generation is opt-in (``equalities=True``) because the number of
    candidate minors grows quickly with k.
    """
    _check_bp(instance)
    k = instance.k if k is None else k
    X, K = instance.observed_matrix(), instance.mask.copy()
    fills = _rankk_closure(X, K, k)
    res = _result(instance, X, K, fills, [])
    if equalities:
        res.equalities = derive_minor_equalities(res.instance(instance), k)
    return res


def presolve(instance: CompletionInstance, equalities: bool = False) -> PresolveResult:
    if instance.k == 1:
        return presolve_rank1(instance, equalities=equalities)
    return presolve_rankk(instance, equalities=equalities)


# ---------------------------------------------------------------------------
# equalities and structure


def _missing_row_equalities(A: np.ndarray, K: np.ndarray, k: int, transpose: bool) -> list[LinearEquality]:
    n, m = K.shape
    out = []
    for Rp in itertools.combinations(range(n), k):
        S = np.flatnonzero(K[list(Rp)].all(axis=0))
        if S.size < k + 1:
            continue
        others = [r for r in range(n) if r not in Rp]
        for C in itertools.combinations(S, k + 1):
            C = list(C)
            block = A[np.ix_(Rp, C)]
            coefs = np.array([(-1) ** pos * np.linalg.det(np.delete(block, pos, axis=1)) for pos in range(k + 1)])
            if np.max(np.abs(coefs)) <= PIVOT_RTOL * max(float(np.max(np.abs(block))), 1e-300) ** k:
                continue
            for r in others:
                if K[r, C].any():
                    continue
                terms = [((c, r) if transpose else (r, c), coef) for c, coef in zip(C, coefs) if coef != 0.0]
                if terms:
                    out.append(_normalized(terms))
    return out


def derive_minor_equalities(instance: CompletionInstance, k: int | None = None) -> list[LinearEquality]:
    """Equalities from minors whose unknown entries form one whole row or column."""
    k = instance.k if k is None else k
    A, K = instance.observed_matrix(), instance.mask
    found = _missing_row_equalities(A, K, k, False) + _missing_row_equalities(A.T, K.T, k, True)
    seen, out = set(), []
    for eq in found:
        key = (eq.entries, tuple(round(c, 9) for c in eq.coefs))
        if key not in seen:
            seen.add(key)
            out.append(eq)
    return out


def check_block_rectangular(index) -> tuple[bool, list[tuple[list[int], list[int]]]]:
    """Whether an index set is a disjoint union of full rectangles ``R x C``.

    Returns the flag and the blocks (connected components of the row/column
    bipartite graph).  Rows or columns without entries make the flag false.
    """
    mask = index.mask if isinstance(index, IndexSet) else np.asarray(index, dtype=bool)
    n, m = mask.shape
    uf = _UnionFind()
    for i, j in zip(*np.nonzero(mask)):
        uf.union(("r", int(i)), ("c", int(j)))
    groups: dict = {}
    for i in range(n):
        if mask[i].any():
            groups.setdefault(uf.find(("r", i)), ([], []))[0].append(i)
    for j in range(m):
        if mask[:, j].any():
            groups.setdefault(uf.find(("c", j)), ([], []))[1].append(j)
    blocks = sorted(groups.values())
    ok = bool(mask.any(axis=1).all() and mask.any(axis=0).all())
    ok = ok and all(mask[np.ix_(R, C)].all() for R, C in blocks)
    return ok, blocks
