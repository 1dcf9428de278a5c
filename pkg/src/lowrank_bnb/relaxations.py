"""Convex relaxations of rank-constrained matrix completion as conic programs.

Every builder returns a :class:`~lowrank_bnb.conic.ConicProgram` whose named
symbols include ``Y`` (n x n), ``X`` (n x m) and ``Theta`` (m x m); lifted
programs add ``U`` (n x k) and Shor-strengthened programs add ``W`` (n x m).

Objective scale.  The noisy objective is ``tr(Theta)/(2 gamma) + g(X)``.  For
basis pursuit the trace enters with weight one so that the relaxation value is
directly comparable with ``||X||_F^2``.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .conic import ConeKind, ConicProgram
from .disjunctions import BoxState, DisjunctionBranch, mccormick_envelope
from .instance import CompletionInstance, Mode


class RelaxationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# minors


@dataclass(frozen=True, order=True)
class Minor:
    """A 2x2 minor ``({i1, i2}, {j1, j2})`` with its number of observed entries."""

    i1: int
    i2: int
    j1: int
    j2: int
    observed: int = 0

    def __post_init__(self) -> None:
        if not (self.i1 < self.i2 and self.j1 < self.j2):
            raise RelaxationError("minor indices must be strictly increasing")

    @property
    def entries(self) -> tuple[tuple[int, int], ...]:
        return ((self.i1, self.j1), (self.i1, self.j2), (self.i2, self.j1), (self.i2, self.j2))

    @property
    def tag(self) -> str:
        return f"M{self.observed}"


@dataclass(frozen=True)
class MinorSet:
    minors: tuple[Minor, ...] = ()

    def __len__(self) -> int:
        return len(self.minors)

    def __iter__(self):
        return iter(self.minors)

    def count(self, observed: int) -> int:
        return sum(1 for mi in self.minors if mi.observed == observed)


class ShorPolicy(str, enum.Enum):
    NONE = "none"
    M4 = "m4"
    M4_HALF_M3 = "m4m3half"
    M4_M3 = "m4m3"


def enumerate_minors(mask: np.ndarray, min_observed: int = 3) -> list[Minor]:
    """All 2x2 minors with at least ``min_observed`` observed entries.

    Scans pairs of rows: a minor with four observed entries uses two columns
    observed in both rows; one with three uses one shared column and one
    column observed in exactly one of the rows.
    """
    n, m = mask.shape
    out: list[Minor] = []
    for i1, i2 in itertools.combinations(range(n), 2):
        both = mask[i1] & mask[i2]
        either = mask[i1] | mask[i2]
        if min_observed <= 2:
            cols = itertools.combinations(range(m), 2)
        else:
            shared = np.flatnonzero(both)
            if shared.size == 0:
                continue
            cols = ((a, b) for a, b in itertools.combinations(np.flatnonzero(either), 2)
                    if both[a] or both[b])
        for j1, j2 in cols:
            cnt = int(mask[i1, j1]) + int(mask[i1, j2]) + int(mask[i2, j1]) + int(mask[i2, j2])
            if cnt >= min_observed:
                out.append(Minor(i1, i2, int(j1), int(j2), cnt))
    return out


def minor_counts(mask: np.ndarray) -> dict[str, int]:
    """Number of minors per observed-entry count, ``M0`` to ``M4``."""
    n, m = mask.shape
    counts = dict.fromkeys(("M0", "M1", "M2", "M3", "M4"), 0)
    for i1, i2 in itertools.combinations(range(n), 2):
        per_col = mask[i1].astype(int) + mask[i2].astype(int)
        hist = np.bincount(per_col, minlength=3)
        # choose two columns and add their per-column counts
        for a in range(3):
            for b in range(a, 3):
                pairs = hist[a] * (hist[a] - 1) // 2 if a == b else hist[a] * hist[b]
                counts[f"M{a + b}"] += int(pairs)
    return counts


def select_minors(instance: CompletionInstance, policy: ShorPolicy | str, seed: int = 0) -> MinorSet:
    policy = ShorPolicy(policy)
    if policy is ShorPolicy.NONE:
        return MinorSet()
    found = enumerate_minors(instance.mask, 3)
    m4 = [mi for mi in found if mi.observed == 4]
    m3 = [mi for mi in found if mi.observed == 3]
    if policy is ShorPolicy.M4:
        chosen = m4
    elif policy is ShorPolicy.M4_M3:
        chosen = m4 + m3
    else:
        rng = np.random.default_rng(seed)
        take = math.ceil(len(m3) / 2)
        picks = sorted(rng.choice(len(m3), size=take, replace=False).tolist()) if m3 else []
        chosen = m4 + [m3[p] for p in picks]
    return MinorSet(tuple(sorted(chosen)))


# ---------------------------------------------------------------------------
# builder


@dataclass
class RelaxationSpec:
    """What to build: base formulation, Shor strengthening, lifting, cuts."""

    lifted: bool = False
    slices: bool = False
    minors: MinorSet | None = None
    moment_all_entries: bool = False
    theta_offdiag: bool = False
    cuts: Sequence[DisjunctionBranch] = ()
    box: BoxState | None = None


def _tril(side: int):
    return np.tril_indices(side)


class _Builder:
    def __init__(self, instance: CompletionInstance) -> None:
        self.inst = instance
        self.n, self.m, self.k = instance.n, instance.m, instance.k
        self.prog = ConicProgram()
        self.shared: dict[tuple, int] = {}
        self.links: list[tuple[int, int]] = []
        self.fixed: list[tuple[int, float]] = []

    # -- small helpers ---------------------------------------------------
    def bind(self, key: tuple, idx: int) -> None:
        """First use of ``key`` names ``idx``; later uses are tied by equality."""
        prev = self.shared.get(key)
        if prev is None:
            self.shared[key] = int(idx)
        else:
            self.links.append((int(idx), prev))

    def tie(self, a, b) -> None:
        self.links.extend(zip(np.ravel(a).tolist(), np.ravel(b).tolist()))

    def fix(self, idx, value) -> None:
        idx = np.ravel(idx)
        value = np.broadcast_to(np.asarray(value, dtype=float), idx.shape)
        self.fixed.extend(zip(idx.tolist(), value.tolist()))

    def flush(self) -> None:
        if self.links:
            pairs = np.array(self.links, dtype=np.int64)
            self.prog.add_equalities(pairs, np.array([1.0, -1.0]), 0.0)
            self.links.clear()
        if self.fixed:
            idx = np.array([[i] for i, _ in self.fixed], dtype=np.int64)
            self.prog.add_equalities(idx, np.ones_like(idx, dtype=float), np.array([v for _, v in self.fixed]))
            self.fixed.clear()

    def square_epigraph(self, w: np.ndarray, terms: np.ndarray) -> None:
        """``w[e] >= (sum of x[terms[e]])**2`` for every row ``e``."""
        p = self.prog
        w = np.ravel(w)
        terms = np.asarray(terms).reshape(w.size, -1)
        for e in range(w.size):
            a, b, r = p.add_cone(ConeKind.SOC, 3)
            p.add_equality([a, b], [1.0, -1.0], 1.0)
            p.add_equality([a, b, w[e]], [1.0, 1.0, -1.0], 0.0)
            p.add_equality(np.append(terms[e], r), np.append(-np.ones(terms.shape[1]), 1.0), 0.0)

    # -- pieces ------------------------------------------------------------
    def core(self) -> None:
        n, m = self.n, self.m
        p = self.prog
        block = p.add_cone(ConeKind.PSD, n + m)
        self.Y, self.X, self.Theta = block[:n, :n], block[:n, n:], block[n:, n:]
        self._identity_minus(self.Y[None])
        p.add_inequality(np.diag(self.Y), np.ones(n), self.k)

    def slice_core(self) -> None:
        n, m, k = self.n, self.m, self.k
        p = self.prog
        Ys, Xs, Ths = [], [], []
        for t in range(k):
            block = p.add_cone(ConeKind.PSD, n + m)
            Ys.append(block[:n, :n])
            Xs.append(block[:n, n:])
            Ths.append(block[n:, n:])
            p.add_inequality(np.diag(Ys[-1]), np.ones(n), 1.0)
            p.name(f"Y{t}", Ys[-1], symmetric=True)
            p.name(f"X{t}", Xs[-1])
            p.name(f"Theta{t}", Ths[-1], symmetric=True)
        self.Ys, self.Xs, self.Thetas = np.array(Ys), np.array(Xs), np.array(Ths)
        self._identity_minus(self.Ys)
        # aggregate matrices as free variables tied to the slice sums
        self.Y = self._sum_of(self.Ys, symmetric=True)
        self.X = self._sum_of(self.Xs)
        self.Theta = self._sum_of(self.Thetas, symmetric=True)

    def _sum_of(self, parts: np.ndarray, symmetric: bool = False) -> np.ndarray:
        if parts.shape[0] == 1:
            return parts[0]
        shape = parts.shape[1:]
        out = np.empty(shape, dtype=np.int64)
        if symmetric:
            r, c = _tril(shape[0])
            flat = self.prog.add_free(r.size)
            out[r, c] = flat
            out[c, r] = flat
            sel = (r, c)
        else:
            out[...] = self.prog.add_free(shape)
            sel = np.unravel_index(np.arange(int(np.prod(shape))), shape)
        idx = np.column_stack([out[sel]] + [pt[sel] for pt in parts])
        coef = np.array([1.0] + [-1.0] * parts.shape[0])
        self.prog.add_equalities(idx, coef, 0.0)
        return out

    def _identity_minus(self, Ys: np.ndarray) -> None:
        """``I - sum(Ys) >= 0``."""
        n = self.n
        Z = self.prog.add_cone(ConeKind.PSD, n)
        r, c = _tril(n)
        idx = np.column_stack([Z[r, c]] + [Yt[r, c] for Yt in Ys])
        self.prog.add_equalities(idx, np.ones(idx.shape[1]), (r == c).astype(float))

    def lifted(self) -> None:
        n, k = self.n, self.k
        p = self.prog
        if hasattr(self, "Ys"):
            cols = []
            for t in range(k):
                block = p.add_cone(ConeKind.PSD, n + 1)
                r, c = _tril(n)
                self.tie(block[r, c], self.Ys[t][r, c])
                self.fix(block[n, n], 1.0)
                cols.append(block[:n, n])
            self.U = np.column_stack(cols)
        else:
            block = p.add_cone(ConeKind.PSD, n + k)
            r, c = _tril(n)
            self.tie(block[r, c], self.Y[r, c])
            r, c = _tril(k)
            self.fix(block[n + r, n + c], (r == c).astype(float))
            self.U = block[:n, n:]
        p.name("U", self.U)

    def shor(self, minors: MinorSet, moment_all: bool, theta_offdiag: bool) -> None:
        n, m, k = self.n, self.m, self.k
        p = self.prog
        self.W = p.add_free((n, m))
        covered = np.zeros((n, m), dtype=bool)
        for mi in minors:
            for e in mi.entries:
                covered[e] = True
        sliced = hasattr(self, "Xs")
        if k == 1 and not sliced:
            moment = np.zeros((n, m), dtype=bool)
        else:
            moment = np.ones((n, m), dtype=bool) if moment_all or sliced else covered
        # per-slice entry variables X^t, W^t from moment matrices
        Xt = np.full((k, n, m), -1, dtype=np.int64)
        Wt = np.full((k, n, m), -1, dtype=np.int64)
        H = {}
        if k == 1 and not sliced:
            Xt[0], Wt[0] = self.X, self.W
        for i, j in zip(*np.nonzero(moment)):
            if sliced and not covered[i, j]:
                # weaker per-slice squares; cross products left free
                for t in range(k):
                    Xt[t, i, j] = self.Xs[t][i, j]
                    Wt[t, i, j] = p.add_free(1)[0]
                    self.square_epigraph(Wt[t, i, j], [[Xt[t, i, j]]])
                cross = {}
                for t, s in itertools.combinations(range(k), 2):
                    cross[(t, s)] = int(p.add_free(1)[0])
                H[(i, j)] = cross
            else:
                M = p.add_cone(ConeKind.PSD, k + 1)
                self.fix(M[0, 0], 1.0)
                for t in range(k):
                    Xt[t, i, j] = M[t + 1, 0]
                    Wt[t, i, j] = M[t + 1, t + 1]
                    if sliced:
                        self.tie(M[t + 1, 0], self.Xs[t][i, j])
                H[(i, j)] = {(t, s): int(M[t + 1, s + 1]) for t, s in itertools.combinations(range(k), 2)}
            if not sliced:
                # X = sum_t X^t
                p.add_equality(np.append(Xt[:, i, j], self.X[i, j]), np.append(np.ones(k), -1.0), 0.0)
            cross = list(H[(i, j)].values())
            p.add_equality(np.concatenate([[self.W[i, j]], Wt[:, i, j], cross]),
                           np.concatenate([[1.0], -np.ones(k), -2.0 * np.ones(len(cross))]), 0.0)
        # entries left without LMI structure: W >= X**2
        loose = ~moment if (k > 1 and not sliced) else ~covered
        for i, j in zip(*np.nonzero(loose)):
            self.square_epigraph(self.W[i, j], [[self.X[i, j]]])
        # 5x5 LMIs per minor and slice
        for mi in minors:
            for t in range(k):
                S = p.add_cone(ConeKind.PSD, 5)
                self.fix(S[0, 0], 1.0)
                for a, (i, j) in enumerate(mi.entries, start=1):
                    self.tie(S[a, 0], Xt[t, i, j])
                    self.tie(S[a, a], Wt[t, i, j])
                self.bind(("V1", t, mi.i1, mi.j1, mi.j2), S[1, 2])
                self.bind(("V1", t, mi.i2, mi.j1, mi.j2), S[3, 4])
                self.bind(("V2", t, mi.i1, mi.i2, mi.j1), S[1, 3])
                self.bind(("V2", t, mi.i1, mi.i2, mi.j2), S[2, 4])
                self.bind(("V3", t, mi), S[1, 4])
                self.bind(("V3", t, mi), S[2, 3])
        # diagonal of Theta from W
        if sliced:
            for t in range(k):
                for j in range(m):
                    p.add_equality(np.append(Wt[t, :, j], self.Thetas[t][j, j]),
                                   np.append(-np.ones(n), 1.0), 0.0)
            for t, s in itertools.combinations(range(k), 2):
                for j in range(m):
                    p.add_equality([H[(i, j)][(t, s)] for i in range(n)], np.ones(n), 0.0)
        else:
            for j in range(m):
                p.add_equality(np.append(self.W[:, j], self.Theta[j, j]), np.append(-np.ones(n), 1.0), 0.0)
        if theta_offdiag and k == 1:
            for j1, j2 in itertools.combinations(range(m), 2):
                keys = [("V1", 0, i, j1, j2) for i in range(n)]
                if all(key in self.shared for key in keys):
                    idx = [self.shared[key] for key in keys]
                    p.add_equality(np.append(idx, self.Theta[j1, j2]), np.append(-np.ones(n), 1.0), 0.0)
        p.name("W", self.W)
        if k > 1 or sliced:
            p.name("Xt", Xt)
            p.name("Wt", Wt)

    def objective(self, with_w: bool) -> None:
        inst, p = self.inst, self.prog
        rows, cols, vals = inst.rows, inst.cols, inst.values
        weight = 1.0 if inst.mode is Mode.BASIS_PURSUIT else 1.0 / (2.0 * inst.gamma)
        theta_parts = self.Thetas if hasattr(self, "Thetas") else self.Theta[None]
        for Th in theta_parts:
            p.add_objective(np.diag(Th), weight)
        X = self.X
        if inst.mode is Mode.BASIS_PURSUIT:
            self.fix(X[rows, cols], vals)
            return
        if with_w:
            p.add_objective(self.W[rows, cols], 0.5)
            p.add_objective(X[rows, cols], -vals)
            p.objective_offset += 0.5 * float(vals @ vals)
            return
        # 0.5 * ||X_obs - A_obs||^2 <= (a + b) / 2 with a - b = 1, (a, b, r) in SOC
        cone = p.add_cone(ConeKind.SOC, 2 + rows.size)
        a, b, r = cone[0], cone[1], cone[2:]
        p.add_equality([a, b], [1.0, -1.0], 1.0)
        p.add_equalities(np.column_stack([r, X[rows, cols]]), np.array([1.0, -1.0]), -vals)
        p.add_objective([a, b], 0.5)

    def branch(self, br: DisjunctionBranch) -> None:
        p, U, Y = self.prog, self.U, self.Y
        x = br.cut.x
        if br.cut.U_hat.shape != U.shape or x.shape != (self.n,):
            raise RelaxationError("cut dimensions do not match the instance")
        for j, (lo, hi) in enumerate(br.intervals()):
            p.add_inequality(U[:, j], -x, -lo)
            p.add_inequality(U[:, j], x, hi)
        slopes, icpt = br.linear_terms()
        idx = np.concatenate([Y.ravel(), U.T.ravel()])
        coef = np.concatenate([np.outer(x, x).ravel(), -(slopes[:, None] * x[None, :]).ravel()])
        p.add_inequality(idx, coef, icpt)

    def mccormick(self, box: BoxState) -> None:
        n, k = self.n, self.k
        p, U = self.prog, self.U
        if box.lower.shape != (n, k):
            raise RelaxationError("box dimensions do not match the instance")
        V = {}
        for j1 in range(k):
            for j2 in range(j1, k):
                V[(j1, j2)] = p.add_free(n)
                p.add_equality(V[(j1, j2)], np.ones(n), 1.0 if j1 == j2 else 0.0)
        rows_idx, rows_coef, rhs = [], [], []
        for (j1, j2), v in V.items():
            for i in range(n):
                env = mccormick_envelope(box.lower[i, j1], box.upper[i, j1], box.lower[i, j2], box.upper[i, j2])
                for cv, cx, cy, b in env:
                    rows_idx.append([v[i], U[i, j1], U[i, j2]])
                    rows_coef.append([cv, cx, cy])
                    rhs.append(b)
        p.add_inequalities(np.array(rows_idx), np.array(rows_coef), np.array(rhs))
        flat = U.ravel()
        p.add_inequalities(flat[:, None], -np.ones((flat.size, 1)), -box.lower.ravel())
        p.add_inequalities(flat[:, None], np.ones((flat.size, 1)), box.upper.ravel())
        p.name("Vmc", np.array([V[key] for key in V]))
        p.name("Vdiag", np.array([V[(j, j)] for j in range(k)]).T)

    def finish(self) -> ConicProgram:
        self.flush()
        p = self.prog
        p.name("Y", self.Y, symmetric=True)
        p.name("X", self.X)
        p.name("Theta", self.Theta, symmetric=True)
        return p


def build(instance: CompletionInstance, spec: RelaxationSpec) -> ConicProgram:
    b = _Builder(instance)
    if spec.slices:
        b.slice_core()
    else:
        b.core()
    minors = spec.minors
    use_w = minors is not None
    if use_w:
        b.shor(minors, spec.moment_all_entries, spec.theta_offdiag)
    if spec.lifted or spec.cuts or spec.box is not None or spec.slices:
        b.lifted()
    for br in spec.cuts:
        b.branch(br)
    if spec.box is not None:
        b.mccormick(spec.box)
    b.objective(use_w)
    return b.finish()


# ---------------------------------------------------------------------------
# public builders


def build_mprt(instance: CompletionInstance) -> ConicProgram:
    return build(instance, RelaxationSpec())


def build_lifted(instance: CompletionInstance, cuts: Iterable[DisjunctionBranch] = (),
                 minors: MinorSet | None = None, box: BoxState | None = None) -> ConicProgram:
    return build(instance, RelaxationSpec(lifted=True, cuts=tuple(cuts), minors=minors, box=box))


def build_shor_rank1(instance: CompletionInstance, minors: MinorSet) -> ConicProgram:
    if instance.k != 1:
        raise RelaxationError("the rank-one Shor relaxation needs k = 1")
    return build(instance, RelaxationSpec(minors=minors, theta_offdiag=True))


def build_shor_rankk(instance: CompletionInstance, minors: MinorSet) -> ConicProgram:
    return build(instance, RelaxationSpec(minors=minors, moment_all_entries=True))


def build_partial_shor(instance: CompletionInstance, minors: MinorSet, lifted: bool = False) -> ConicProgram:
    return build(instance, RelaxationSpec(minors=minors, lifted=lifted))


def build_slice_relaxation(instance: CompletionInstance, shor: bool = False,
                           minors: MinorSet | None = None) -> ConicProgram:
    if shor and minors is None:
        minors = MinorSet()
    return build(instance, RelaxationSpec(slices=True, minors=minors if shor else None))
