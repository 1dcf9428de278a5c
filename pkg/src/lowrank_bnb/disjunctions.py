"""Eigenvector disjunctions with piecewise chords of u**2, and McCormick boxes."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

CLAMP = 1.0 - 1e-9


class DisjunctionError(ValueError):
    pass


@dataclass(frozen=True)
class PiecewiseBound:
    """Chords of ``u**2`` between consecutive breakpoints on ``[-1, 1]``.

    Piece ``i`` covers ``[breakpoints[i], breakpoints[i + 1]]`` and evaluates
    to ``slopes[i] * u + intercepts[i]``.
    """

    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    intercepts: tuple[float, ...]

    @property
    def q(self) -> int:
        return len(self.slopes)

    def interval(self, piece: int) -> tuple[float, float]:
        return self.breakpoints[piece], self.breakpoints[piece + 1]

    def value(self, piece: int, u):
        return self.slopes[piece] * np.asarray(u) + self.intercepts[piece]

    def piece_of(self, u: float) -> int:
        """Index of a piece whose interval contains ``u``."""
        for p in range(self.q):
            lo, hi = self.interval(p)
            if lo <= u <= hi:
                return p
        raise DisjunctionError(f"{u} outside [-1, 1]")


def make_piecewise(u0: float, q: int) -> PiecewiseBound:
    if q not in (2, 3, 4):
        raise DisjunctionError(f"q must be 2, 3 or 4, got {q}")
    u0 = float(np.clip(u0, -CLAMP, CLAMP))
    a = abs(u0)
    bps = {2: (-1.0, u0, 1.0), 3: (-1.0, -a, a, 1.0), 4: (-1.0, -a, 0.0, a, 1.0)}[q]
    slopes = tuple(lo + hi for lo, hi in zip(bps, bps[1:]))
    intercepts = tuple(-lo * hi for lo, hi in zip(bps, bps[1:]))
    return PiecewiseBound(bps, slopes, intercepts)


def find_violating_eigenvector(Y: np.ndarray, U: np.ndarray, eps: float):
    """Most negative eigenpair of ``U U^T - Y`` if it is below ``-eps``.

    Returns ``(x, lam)`` or ``None``.  The sign of ``x`` is fixed so that its
    first nonzero component is positive.
    """
    Y = np.asarray(Y, dtype=float)
    U = np.asarray(U, dtype=float).reshape(Y.shape[0], -1)
    M = U @ U.T - 0.5 * (Y + Y.T)
    try:
        lam, vecs = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise DisjunctionError(f"eigensolver failed: {exc}") from exc
    if lam[0] >= -eps:
        return None
    x = vecs[:, 0]
    x = x / np.linalg.norm(x)
    nz = np.flatnonzero(np.abs(x) > 1e-12)
    if nz.size and x[nz[0]] < 0:
        x = -x
    return x, float(lam[0])


@dataclass(frozen=True)
class DisjunctionCut:
    U_hat: np.ndarray
    x: np.ndarray
    q: int
    pieces: tuple[PiecewiseBound, ...]

    @property
    def k(self) -> int:
        return len(self.pieces)

    @property
    def u0(self) -> np.ndarray:
        return np.clip(self.U_hat.T @ self.x, -CLAMP, CLAMP)

    def branches(self) -> Iterator["DisjunctionBranch"]:
        for z in itertools.product(range(self.q), repeat=self.k):
            yield DisjunctionBranch(self, z)


@dataclass(frozen=True)
class DisjunctionBranch:
    cut: DisjunctionCut
    z: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.z) != self.cut.k or any(not 0 <= v < self.cut.q for v in self.z):
            raise DisjunctionError(f"region {self.z} invalid for q={self.cut.q}, k={self.cut.k}")

    def intervals(self) -> list[tuple[float, float]]:
        return [p.interval(z) for p, z in zip(self.cut.pieces, self.z)]

    def linear_terms(self) -> tuple[np.ndarray, float]:
        """Slopes per column and total intercept of the aggregated bound."""
        slopes = np.array([p.slopes[z] for p, z in zip(self.cut.pieces, self.z)])
        return slopes, float(sum(p.intercepts[z] for p, z in zip(self.cut.pieces, self.z)))

    def violation(self, U: np.ndarray, Y: np.ndarray) -> float:
        """Largest constraint violation of this branch at ``(U, Y)`` (<= 0 if satisfied)."""
        x = self.cut.x
        proj = U.T @ x
        worst = -np.inf
        for (lo, hi), u in zip(self.intervals(), proj):
            worst = max(worst, lo - u, u - hi)
        slopes, icpt = self.linear_terms()
        worst = max(worst, x @ Y @ x - slopes @ proj - icpt)
        return float(worst)


def make_cut(U_hat: np.ndarray, Y_hat: np.ndarray, x: np.ndarray, q: int, eps: float = 0.0) -> DisjunctionCut:
    U_hat = np.asarray(U_hat, dtype=float)
    U_hat = U_hat.reshape(U_hat.shape[0], -1)
    x = np.asarray(x, dtype=float)
    if abs(np.linalg.norm(x) - 1.0) > 1e-10:
        raise DisjunctionError("cut direction must have unit length")
    gap = x @ (U_hat @ U_hat.T - Y_hat) @ x
    if gap >= -eps:
        raise DisjunctionError(f"direction is not violated (x'(UU'-Y)x = {gap:.3g})")
    u0 = np.clip(U_hat.T @ x, -CLAMP, CLAMP)
    pieces = tuple(make_piecewise(u, q) for u in u0)
    return DisjunctionCut(U_hat.copy(), x.copy(), q, pieces)


def default_pieces(n: int, k: int) -> int:
    return 4 if k == 1 and n <= 50 else 2


# ---------------------------------------------------------------------------
# McCormick


def mccormick_envelope(xl: float, xu: float, yl: float, yu: float) -> np.ndarray:
    """Rows ``(cv, cx, cy, rhs)`` meaning ``cv*v + cx*x + cy*y <= rhs``.

    The first two rows are the lower envelopes ``v >= xl*y + yl*x - xl*yl`` and
    ``v >= xu*y + yu*x - xu*yu``; the last two are the upper envelopes
    ``v <= yl*x + xu*y - xu*yl`` and ``v <= yu*x + xl*y - xl*yu``.
    """
    if xl > xu or yl > yu:
        raise DisjunctionError("inverted bounds")
    return np.array([
        [-1.0, yl, xl, xl * yl],
        [-1.0, yu, xu, xu * yu],
        [1.0, -yl, -xu, -xu * yl],
        [1.0, -yu, -xl, -xl * yu],
    ])


@dataclass(frozen=True)
class BoxState:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise DisjunctionError("box bounds must satisfy lower <= upper")

    @classmethod
    def root(cls, n: int, k: int) -> "BoxState":
        return cls(-np.ones((n, k)), np.ones((n, k)))

    def width(self) -> np.ndarray:
        return self.upper - self.lower


def make_mccormick_children(box: BoxState, var: tuple[int, int], split: float) -> tuple[BoxState, BoxState]:
    i, j = var
    lo, hi = box.lower[i, j], box.upper[i, j]
    if not lo < split < hi:
        raise DisjunctionError(f"split {split} not strictly inside [{lo}, {hi}]")
    left_hi = box.upper.copy()
    left_hi[i, j] = split
    right_lo = box.lower.copy()
    right_lo[i, j] = split
    return BoxState(box.lower.copy(), left_hi), BoxState(right_lo, box.upper.copy())
