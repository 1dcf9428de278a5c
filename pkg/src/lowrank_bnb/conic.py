"""Standard-form conic programs and the solver seam used by every relaxation.

A :class:`ConicProgram` is stored in primal standard form::

    minimize    c @ x + offset
    subject to  A_eq @ x == b_eq
                x[span] in K    for every cone span

where the cone spans partition ``x``.  PSD spans hold the lower triangle of a
symmetric matrix in row-major order, entry ``(a, b)`` with ``a >= b``.  The
flat variable always holds the plain matrix entry; the ``sqrt(2)`` factor on
off-diagonals (the "svec" convention, under which the Euclidean inner product
of two packed vectors equals the Frobenius inner product of the matrices) is
applied when the program is handed to a backend.  Users of this module never
see scaled values.
"""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

SQRT2 = math.sqrt(2.0)


class ConeKind(str, enum.Enum):
    FREE = "free"
    NONNEG = "nonneg"
    SOC = "soc"
    PSD = "psd"


@dataclass(frozen=True)
class Cone:
    """A cone over the contiguous variable span ``[start, start + dim)``.

    ``size`` is the dimension for free/nonnegative/second-order cones and the
    matrix side for PSD cones.
    """

    kind: ConeKind
    start: int
    size: int

    @property
    def dim(self) -> int:
        if self.kind is ConeKind.PSD:
            return self.size * (self.size + 1) // 2
        return self.size

    @property
    def stop(self) -> int:
        return self.start + self.dim


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    NEAR_OPTIMAL = "near_optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class Tolerances:
    feasibility: float = 1e-8
    gap: float = 1e-8
    psd: float = 1e-8
    max_iter: int = 200
    regularization: float = 1e-8


@dataclass
class ConicSolution:
    x: np.ndarray
    objective: float
    status: Status
    psd_residual: float
    constraint_residual: float

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.NEAR_OPTIMAL)


class UnknownSymbol(KeyError):
    pass


class ConicProgram:
    """Incrementally built standard-form conic program.

    Builders allocate cones with :meth:`add_cone` (which returns flat indices),
    tie them together with :meth:`add_equality`, and register matrices of flat
    indices under symbolic names with :meth:`name`.
    """

    def __init__(self) -> None:
        self.num_vars = 0
        self.cones: list[Cone] = []
        self.objective_offset = 0.0
        self._obj_idx: list[np.ndarray] = []
        self._obj_val: list[np.ndarray] = []
        self._eq_rows: list[np.ndarray] = []
        self._eq_cols: list[np.ndarray] = []
        self._eq_vals: list[np.ndarray] = []
        self._eq_rhs: list[float] = []
        self.names: dict[str, np.ndarray] = {}
        self.symmetric: set[str] = set()

    # -- construction -------------------------------------------------
    def add_cone(self, kind: ConeKind | str, size: int) -> np.ndarray:
        """Append a cone and return its flat indices.

        For a PSD cone the result is a ``size x size`` symmetric matrix of
        indices; otherwise a vector of length ``size``.
        """
        kind = ConeKind(kind)
        if size <= 0:
            raise ValueError("cone size must be positive")
        cone = Cone(kind, self.num_vars, size)
        self.cones.append(cone)
        self.num_vars = cone.stop
        if kind is ConeKind.PSD:
            return psd_index_matrix(cone.start, size)
        return np.arange(cone.start, cone.stop)

    def add_free(self, shape: int | tuple[int, ...]) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape))
        return self.add_cone(ConeKind.FREE, count).reshape(shape)

    def add_equality(self, idx: Sequence[int], coef: Sequence[float], rhs: float) -> None:
        """Add ``sum(coef * x[idx]) == rhs``; repeated indices are summed."""
        idx = np.asarray(idx, dtype=np.int64).ravel()
        coef = np.asarray(coef, dtype=float).ravel()
        if idx.shape != coef.shape:
            raise ValueError("index and coefficient shapes differ")
        row = len(self._eq_rhs)
        self._eq_rows.append(np.full(idx.shape, row, dtype=np.int64))
        self._eq_cols.append(idx)
        self._eq_vals.append(coef)
        self._eq_rhs.append(float(rhs))

    def add_equalities(self, idx: np.ndarray, coef: np.ndarray, rhs: np.ndarray) -> None:
        """Add one equality per row of the 2-d arrays ``idx`` and ``coef``."""
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (idx.shape[0],))
        first = len(self._eq_rhs)
        rows = np.repeat(np.arange(first, first + idx.shape[0]), idx.shape[1])
        self._eq_rows.append(rows)
        self._eq_cols.append(idx.ravel())
        self._eq_vals.append(np.ascontiguousarray(coef).ravel())
        self._eq_rhs.extend(rhs.tolist())

    def add_inequality(self, idx: Sequence[int], coef: Sequence[float], rhs: float) -> int:
        """Add ``sum(coef * x[idx]) <= rhs`` through a fresh nonnegative slack.

        Returns the flat index of the slack.
        """
        slack = int(self.add_cone(ConeKind.NONNEG, 1)[0])
        idx = np.append(np.asarray(idx, dtype=np.int64).ravel(), slack)
        coef = np.append(np.asarray(coef, dtype=float).ravel(), 1.0)
        self.add_equality(idx, coef, rhs)
        return slack

    def add_inequalities(self, idx: np.ndarray, coef: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Row-wise ``coef @ x[idx] <= rhs`` for 2-d ``idx``/``coef``."""
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        slacks = self.add_cone(ConeKind.NONNEG, idx.shape[0])
        self.add_equalities(
            np.column_stack([idx, slacks]),
            np.column_stack([coef, np.ones(idx.shape[0])]),
            rhs,
        )
        return slacks

    def add_objective(self, idx: Sequence[int], coef: Sequence[float]) -> None:
        idx = np.asarray(idx, dtype=np.int64).ravel()
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).ravel()
        self._obj_idx.append(idx)
        self._obj_val.append(np.array(coef))

    def name(self, symbol: str, indices: np.ndarray, symmetric: bool = False) -> None:
        self.names[symbol] = np.asarray(indices, dtype=np.int64)
        if symmetric:
            self.symmetric.add(symbol)

    def copy(self) -> "ConicProgram":
        """Cheap copy: index arrays are shared, containers are not."""
        other = copy.copy(self)
        other.cones = list(self.cones)
        for attr in ("_obj_idx", "_obj_val", "_eq_rows", "_eq_cols", "_eq_vals", "_eq_rhs"):
            setattr(other, attr, list(getattr(self, attr)))
        other.names = dict(self.names)
        other.symmetric = set(self.symmetric)
        return other

    # -- assembled views ----------------------------------------------
    @property
    def num_equalities(self) -> int:
        return len(self._eq_rhs)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.num_vars)
        if self._obj_idx:
            np.add.at(c, np.concatenate(self._obj_idx), np.concatenate(self._obj_val))
        return c

    def equality_matrix(self) -> tuple[sp.csr_matrix, np.ndarray]:
        if self._eq_rhs:
            A = sp.csr_matrix(
                (np.concatenate(self._eq_vals), (np.concatenate(self._eq_rows), np.concatenate(self._eq_cols))),
                shape=(len(self._eq_rhs), self.num_vars),
            )
        else:
            A = sp.csr_matrix((0, self.num_vars))
        return A, np.asarray(self._eq_rhs, dtype=float)

    def evaluate_objective(self, x: np.ndarray) -> float:
        return float(self.objective_vector() @ x + self.objective_offset)

    def dump(self) -> str:
        """Sparse text dump, one line per nonzero.

        Line kinds: ``var <n>``, ``cone <kind> <start> <size>``,
        ``obj <col> <value>``, ``offset <value>``, ``eq <row> <col> <value>``,
        ``rhs <row> <value>``.  Indices are 0-based.
        """
        lines = [f"var {self.num_vars}"]
        lines += [f"cone {c.kind.value} {c.start} {c.size}" for c in self.cones]
        c = self.objective_vector()
        lines += [f"obj {j} {float(c[j])!r}" for j in np.flatnonzero(c)]
        lines.append(f"offset {float(self.objective_offset)!r}")
        A, b = self.equality_matrix()
        A = A.tocoo()
        lines += [f"eq {i} {j} {float(v)!r}" for i, j, v in zip(A.row, A.col, A.data)]
        lines += [f"rhs {i} {float(v)!r}" for i, v in enumerate(b)]
        return "\n".join(lines) + "\n"


def psd_index_matrix(start: int, side: int) -> np.ndarray:
    """Symmetric matrix of flat indices for a row-major lower-triangle span."""
    rows, cols = np.tril_indices(side)
    out = np.empty((side, side), dtype=np.int64)
    flat = start + np.arange(rows.size)
    out[rows, cols] = flat
    out[cols, rows] = flat
    return out


def svec_scale(side: int) -> np.ndarray:
    """Per-entry scale of the packed lower triangle (``sqrt(2)`` off-diagonal)."""
    rows, cols = np.tril_indices(side)
    return np.where(rows == cols, 1.0, SQRT2)


def unpack_psd(values: np.ndarray, side: int) -> np.ndarray:
    out = np.empty((side, side))
    rows, cols = np.tril_indices(side)
    out[rows, cols] = values
    out[cols, rows] = values
    return out


# ---------------------------------------------------------------------------
# solving


def psd_residual(program: ConicProgram, x: np.ndarray) -> float:
    """Most negative eigenvalue over all PSD blocks (0 if there are none)."""
    worst = 0.0
    for cone in program.cones:
        if cone.kind is ConeKind.PSD:
            lam = np.linalg.eigvalsh(unpack_psd(x[cone.start:cone.stop], cone.size))[0]
            worst = min(worst, float(lam))
    return worst


def cone_residual(program: ConicProgram, x: np.ndarray) -> float:
    """Largest violation of the non-PSD cone memberships."""
    worst = 0.0
    for cone in program.cones:
        v = x[cone.start:cone.stop]
        if cone.kind is ConeKind.NONNEG:
            worst = max(worst, float(-v.min(initial=0.0)))
        elif cone.kind is ConeKind.SOC:
            worst = max(worst, float(np.linalg.norm(v[1:]) - v[0]))
    return worst


class Backend:
    """Solver seam: subclasses turn a :class:`ConicProgram` into a solution."""

    name = "abstract"

    def solve(self, program: ConicProgram, tol: Tolerances) -> ConicSolution:
        raise NotImplementedError


class ClarabelBackend(Backend):
    """Primal-dual interior-point backend using the Clarabel solver."""

    name = "clarabel"

    def solve(self, program: ConicProgram, tol: Tolerances) -> ConicSolution:
        import clarabel

        n = program.num_vars
        A_eq, b_eq = program.equality_matrix()
        blocks = [A_eq.tocsc()]
        rhs = [b_eq]
        cones: list = []
        if A_eq.shape[0]:
            cones.append(clarabel.ZeroConeT(A_eq.shape[0]))
        for cone in program.cones:
            if cone.kind is ConeKind.FREE:
                continue
            cols = np.arange(cone.start, cone.stop)
            scale = svec_scale(cone.size) if cone.kind is ConeKind.PSD else np.ones(cone.dim)
            blocks.append(sp.csc_matrix((-scale, (np.arange(cone.dim), cols)), shape=(cone.dim, n)))
            rhs.append(np.zeros(cone.dim))
            if cone.kind is ConeKind.NONNEG:
                cones.append(clarabel.NonnegativeConeT(cone.dim))
            elif cone.kind is ConeKind.SOC:
                cones.append(clarabel.SecondOrderConeT(cone.dim))
            else:
                cones.append(clarabel.PSDTriangleConeT(cone.size))
        A = sp.vstack(blocks, format="csc")
        b = np.concatenate(rhs)
        P = sp.csc_matrix((n, n))
        q = program.objective_vector()

        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_feas = tol.feasibility
        settings.tol_gap_abs = tol.gap
        settings.tol_gap_rel = tol.gap
        settings.max_iter = tol.max_iter
        settings.static_regularization_constant = tol.regularization
        settings.chordal_decomposition_enable = False
        settings.presolve_enable = False
        try:
            result = clarabel.DefaultSolver(P, q, A, b, cones, settings).solve()
        except Exception:  # the backend reports trouble, never raises through
            return ConicSolution(np.zeros(n), math.nan, Status.NUMERICAL_FAILURE, -math.inf, math.inf)

        x = np.asarray(result.x, dtype=float)
        name = str(result.status)
        if name.endswith("PrimalInfeasible") or name.endswith("AlmostPrimalInfeasible"):
            status = Status.INFEASIBLE
        elif name.endswith("AlmostSolved"):
            status = Status.NEAR_OPTIMAL
        elif name.endswith("Solved"):
            status = Status.OPTIMAL
        else:
            status = Status.NUMERICAL_FAILURE
        if status is Status.INFEASIBLE or not np.all(np.isfinite(x)):
            obj = math.inf if status is Status.INFEASIBLE else math.nan
            return ConicSolution(x, obj, status, -math.inf, math.inf)
        eq_res = float(np.max(np.abs(A_eq @ x - b_eq), initial=0.0))
        cres = max(eq_res, cone_residual(program, x))
        return ConicSolution(x, program.evaluate_objective(x), status, psd_residual(program, x), cres)


DEFAULT_BACKEND: Backend = ClarabelBackend()


def solve(program: ConicProgram, tolerances: Tolerances | None = None,
          backend: Backend | None = None) -> ConicSolution:
    """Solve ``program``; failures come back as a status, never an exception."""
    return (backend or DEFAULT_BACKEND).solve(program, tolerances or Tolerances())


def extract(solution: ConicSolution | np.ndarray, names: dict[str, np.ndarray] | ConicProgram,
            symbol: str) -> np.ndarray:
    """Read a named matrix out of a solution vector."""
    x = solution.x if isinstance(solution, ConicSolution) else np.asarray(solution)
    symmetric: Iterable[str] = ()
    if isinstance(names, ConicProgram):
        symmetric = names.symmetric
        names = names.names
    if symbol not in names:
        raise UnknownSymbol(symbol)
    out = x[names[symbol]]
    if symbol in symmetric:
        out = 0.5 * (out + out.T)
    return out
