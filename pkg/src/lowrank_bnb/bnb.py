"""Branch-and-bound over eigenvector (or McCormick) disjunctions."""
from __future__ import annotations

import dataclasses
import enum
import heapq
import itertools
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .conic import Status, Tolerances
from .disjunctions import (
    BoxState,
    DisjunctionBranch,
    default_pieces,
    find_violating_eigenvector,
    make_cut,
    make_mccormick_children,
)
from .heuristics import (
    NodePolyhedron,
    altmin,
    altmin_node,
    node_selection_probability,
    polish_basis_pursuit,
    polish_incumbent,
    top_left_singular,
)
from .instance import CompletionInstance, Mode, is_infeasible, objective_value
from .presolve import presolve
from .relaxations import MinorSet, ShorPolicy, build_lifted, select_minors

log = logging.getLogger(__name__)


class DisjunctionMode(str, enum.Enum):
    EIGENVECTOR = "eig"
    MCCORMICK = "mccormick"


class NodeOrder(str, enum.Enum):
    BEST_FIRST = "best"
    BREADTH_FIRST = "breadth"
    DEPTH_FIRST = "depth"


class Termination(str, enum.Enum):
    GAP_CLOSED = "gap_closed"
    TIME_LIMIT = "time_limit"
    QUEUE_EMPTY = "queue_empty"
    INFEASIBLE = "infeasible"


@dataclass
class SolverConfig:
    disjunction: DisjunctionMode = DisjunctionMode.EIGENVECTOR
    pieces: int | None = None
    order: NodeOrder = NodeOrder.BEST_FIRST
    eps: float = 1e-4
    time_limit_s: float = math.inf
    use_node_altmin: bool = True
    shor: ShorPolicy = ShorPolicy.NONE
    presolve: bool = False
    seed: int = 0
    beta: float = 0.5
    workers: int = 1
    node_limit: int | None = None
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self) -> None:
        self.disjunction = DisjunctionMode(self.disjunction)
        self.order = NodeOrder(self.order)
        self.shor = ShorPolicy(self.shor)
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.pieces is not None and self.pieces not in (2, 3, 4):
            raise ValueError("pieces must be 2, 3 or 4")


@dataclass
class Node:
    seq: int
    depth: int
    bound: float
    branches: tuple[DisjunctionBranch, ...] = ()
    box: BoxState | None = None


@dataclass
class NodeSolution:
    objective: float
    Y: np.ndarray
    U: np.ndarray
    X: np.ndarray
    extra: dict = field(default_factory=dict)


@dataclass
class Incumbent:
    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    objective: float


@dataclass
class SolveReport:
    Z_lower: float
    Z_upper: float
    gap: float
    termination: Termination
    incumbent: Incumbent | None
    nodes: int
    node_times: list[float]
    lower_trace: list[tuple[float, float]]
    upper_trace: list[tuple[float, float]]
    root_bound: float
    root_gap: float
    root_time: float
    total_time: float
    failed_nodes: int = 0
    log_lines: list[str] = field(default_factory=list)
    initial_incumbent: Incumbent | None = None
    presolve_fills: int = 0
    fully_presolved: bool = False


def relative_gap(z_lower: float, z_upper: float) -> float:
    if math.isinf(z_upper) or math.isinf(z_lower) or math.isnan(z_lower) or math.isnan(z_upper):
        return math.inf
    return (z_upper - z_lower) / max(abs(z_upper), 1e-10)


# ---------------------------------------------------------------------------
# queue


class NodeQueue:
    """Open nodes under one of the three selection rules.

    Independently of the order, the smallest open bound is available in
    amortized logarithmic time.
    """

    def __init__(self, order: NodeOrder) -> None:
        self.order = NodeOrder(order)
        self._items: list | deque = deque() if self.order is NodeOrder.BREADTH_FIRST else []
        self._bounds: list[tuple[float, int]] = []
        self._gone: set[int] = set()

    def __len__(self) -> int:
        return len(self._items)

    def push(self, node: Node) -> None:
        if self.order is NodeOrder.BEST_FIRST:
            heapq.heappush(self._items, (node.bound, node.seq, node))
        else:
            self._items.append(node)
            heapq.heappush(self._bounds, (node.bound, node.seq))

    def pop(self) -> Node:
        if not self._items:
            raise IndexError("pop from an empty node queue")
        if self.order is NodeOrder.BEST_FIRST:
            return heapq.heappop(self._items)[2]
        node = self._items.popleft() if self.order is NodeOrder.BREADTH_FIRST else self._items.pop()
        self._gone.add(node.seq)
        return node

    def min_bound(self) -> float:
        if not self._items:
            return math.inf
        if self.order is NodeOrder.BEST_FIRST:
            return self._items[0][0]
        while self._bounds[0][1] in self._gone:
            self._gone.discard(heapq.heappop(self._bounds)[1])
        return self._bounds[0][0]


def next_node(queue: NodeQueue, policy: NodeOrder | None = None) -> Node:
    if policy is not None and NodeOrder(policy) is not queue.order:
        raise ValueError("queue was built for a different order")
    return queue.pop()


# ---------------------------------------------------------------------------
# node operations


def _num_pieces(instance: CompletionInstance, config: SolverConfig) -> int:
    return config.pieces or default_pieces(instance.n, instance.k)


def expand_node(node: Node, solution: NodeSolution, config: SolverConfig, counter,
                direction: np.ndarray | None = None, instance: CompletionInstance | None = None) -> list[Node]:
    """Children of a fractional node; they inherit the node's bound."""
    bound = max(node.bound, solution.objective)
    if config.disjunction is DisjunctionMode.EIGENVECTOR:
        if direction is None:
            found = find_violating_eigenvector(solution.Y, solution.U, 0.0)
            if found is None:
                return []
            direction = found[0]
        n = solution.Y.shape[0]
        q = config.pieces or default_pieces(n, solution.U.shape[1])
        cut = make_cut(solution.U, solution.Y, direction, q)
        return [Node(next(counter), node.depth + 1, bound, node.branches + (br,)) for br in cut.branches()]
    box = node.box if node.box is not None else BoxState.root(*solution.U.shape)
    (i, j), split = _mccormick_split(box, solution)
    return [Node(next(counter), node.depth + 1, bound, node.branches, child)
            for child in make_mccormick_children(box, (i, j), split)]


def _mccormick_split(box: BoxState, solution: NodeSolution) -> tuple[tuple[int, int], float]:
    """Entry with the largest slack ``V_ijj - U_ij**2``; split at its value."""
    U = solution.U
    Vd = solution.extra.get("Vdiag")
    slack = (Vd - U ** 2) if Vd is not None else box.width()
    slack = np.where(box.width() > 1e-9, slack, -np.inf)
    i, j = np.unravel_index(int(np.argmax(slack)), slack.shape)
    lo, hi = box.lower[i, j], box.upper[i, j]
    split = U[i, j]
    margin = 1e-3 * (hi - lo)
    if not lo + margin < split < hi - margin:
        split = 0.5 * (lo + hi)
    return (int(i), int(j)), float(split)


def check_incumbent(instance: CompletionInstance, solution: NodeSolution, eps: float) -> Incumbent | None:
    """Rank-k incumbent from an eps-feasible node, evaluated on the true objective.

    The relaxed ``X`` is rounded to rank ``k`` and polished; the returned
    ``(U, Y)`` is an exact projection pair.
    """
    if find_violating_eigenvector(solution.Y, solution.U, eps) is not None:
        return None
    return incumbent_from_X(instance, solution.X)


def incumbent_from_X(instance: CompletionInstance, X: np.ndarray) -> Incumbent | None:
    k = instance.k
    Us, s, Vt = np.linalg.svd(X, full_matrices=False)
    candidates = [(Us[:, :k] * s[:k]) @ Vt[:k], polish_incumbent(instance, X).X]
    best = None
    for Xc in candidates:
        obj = objective_value(instance, Xc)
        if not is_infeasible(obj) and (best is None or obj < best[0]):
            best = (obj, Xc)
    if best is None:
        return None
    return _make_incumbent(best[1], k, best[0])


def _truncated_incumbent(instance: CompletionInstance, X: np.ndarray) -> Incumbent | None:
    Us, s, Vt = np.linalg.svd(X, full_matrices=False)
    k = instance.k
    Xk = (Us[:, :k] * s[:k]) @ Vt[:k]
    obj = objective_value(instance, Xk)
    return None if is_infeasible(obj) else _make_incumbent(Xk, k, obj)


def _make_incumbent(X: np.ndarray, k: int, objective: float) -> Incumbent:
    U = top_left_singular(X, k)
    return Incumbent(X, U, U @ U.T, objective)


def _solve_node(instance: CompletionInstance, node: Node, minors: MinorSet | None,
                config: SolverConfig) -> tuple[conic.ConicSolution, conic.ConicProgram, float]:
    t0 = time.perf_counter()
    prog = build_lifted(instance, node.branches, minors=minors, box=node.box)
    sol = conic.solve(prog, config.tolerances)
    if not sol.ok and sol.status is not Status.INFEASIBLE:
        # near-empty regions trip the factorization; stronger regularization
        # usually settles them (typically as infeasible)
        sol = conic.solve(prog, dataclasses.replace(config.tolerances, max_iter=2 * config.tolerances.max_iter,
                                                    regularization=10 * config.tolerances.regularization))
    return sol, prog, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# driver


class _State:
    def __init__(self, config: SolverConfig, t0: float) -> None:
        self.config = config
        self.t0 = t0
        self.queue = NodeQueue(config.order)
        self.Z_upper = math.inf
        self.incumbent: Incumbent | None = None
        self.leaf_min = math.inf
        self.pruned_min = math.inf
        self.failed_min = math.inf
        self.lower_trace: list[tuple[float, float]] = []
        self.upper_trace: list[tuple[float, float]] = []
        self.last_lower = -math.inf
        self.lines: list[str] = []

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def z_lower(self) -> float:
        return min(self.queue.min_bound(), self.leaf_min, self.pruned_min, self.failed_min, self.Z_upper)

    def gap(self) -> float:
        return relative_gap(self.z_lower(), self.Z_upper)

    def threshold(self) -> float:
        return self.Z_upper - self.config.eps * abs(self.Z_upper)

    def offer(self, inc: Incumbent | None) -> bool:
        if inc is None or not inc.objective < self.Z_upper:
            return False
        self.Z_upper, self.incumbent = inc.objective, inc
        self.upper_trace.append((self.elapsed(), self.Z_upper))
        return True

    def record(self, node: Node, bound: float, action: str) -> None:
        zl = self.z_lower()
        if zl != self.last_lower:
            self.lower_trace.append((self.elapsed(), zl))
            self.last_lower = zl
        line = (f"seq={node.seq} depth={node.depth} bound={bound:.10g} Z_lower={zl:.10g} "
                f"Z_upper={self.Z_upper:.10g} gap={relative_gap(zl, self.Z_upper):.3e} action={action}")
        self.lines.append(line)
        log.info(line)


def solve(instance: CompletionInstance, config: SolverConfig | None = None) -> SolveReport:
    config = config or SolverConfig()
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    work = instance
    fills, full = 0, False
    if config.presolve and instance.mode is Mode.BASIS_PURSUIT:
        pres = presolve(instance)
        work = pres.instance(instance)
        fills, full = pres.fills, pres.fully_presolved
    minors = select_minors(work, config.shor, config.seed) if config.shor is not ShorPolicy.NONE else None
    counter = itertools.count()
    state = _State(config, t0)
    initial = None
    if work.mode is Mode.NOISY:
        fp = altmin(work)
        initial = _make_incumbent(fp.X, work.k, fp.objective)
        state.offer(initial)

    box = BoxState.root(work.n, work.k) if config.disjunction is DisjunctionMode.MCCORMICK else None
    state.queue.push(Node(next(counter), 0, -math.inf, (), box))
    node_times: list[float] = []
    explored = failed = 0
    root_bound, root_time, root_gap = -math.inf, 0.0, math.inf
    infeasible_only = True
    termination = None
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        while len(state.queue):
            if state.gap() <= config.eps:
                termination = Termination.GAP_CLOSED
                break
            if state.elapsed() >= config.time_limit_s or (config.node_limit is not None
                                                           and explored >= config.node_limit):
                termination = Termination.TIME_LIMIT
                break
            batch = []
            room = config.workers if config.node_limit is None else min(config.workers, config.node_limit - explored)
            while len(state.queue) and len(batch) < room:
                node = next_node(state.queue)
                if node.bound >= state.threshold():
                    state.pruned_min = min(state.pruned_min, node.bound) if node.bound < state.Z_upper else state.pruned_min
                    state.record(node, node.bound, "prune-bound")
                    continue
                batch.append(node)
            if not batch:
                continue
            if pool is not None:
                results = list(pool.map(lambda nd: _solve_node(work, nd, minors, config), batch))
            else:
                results = [_solve_node(work, nd, minors, config) for nd in batch]
            for node, (sol, prog, dt) in zip(batch, results):
                explored += 1
                node_times.append(dt)
                _process(work, node, sol, prog, state, config, counter, rng)
                if sol.status is not Status.INFEASIBLE:
                    infeasible_only = False
                if not sol.ok and sol.status is not Status.INFEASIBLE:
                    failed += 1
                if node.depth == 0:
                    root_bound = sol.objective if sol.ok else -math.inf
                    root_time = state.elapsed()
                    root_gap = relative_gap(root_bound, state.Z_upper)
    finally:
        if pool is not None:
            pool.shutdown()
    if termination is None:
        if state.gap() <= config.eps:
            termination = Termination.GAP_CLOSED
        elif infeasible_only and state.incumbent is None:
            termination = Termination.INFEASIBLE
        else:
            termination = Termination.QUEUE_EMPTY
    if math.isinf(root_gap):
        root_gap = relative_gap(root_bound, state.Z_upper)
    zl = state.z_lower()
    state.lower_trace.append((state.elapsed(), zl))
    return SolveReport(
        Z_lower=zl, Z_upper=state.Z_upper, gap=relative_gap(zl, state.Z_upper), termination=termination,
        incumbent=state.incumbent, nodes=explored, node_times=node_times, lower_trace=state.lower_trace,
        upper_trace=state.upper_trace, root_bound=root_bound, root_gap=root_gap, root_time=root_time,
        total_time=state.elapsed(), failed_nodes=failed, log_lines=state.lines, initial_incumbent=initial,
        presolve_fills=fills, fully_presolved=full,
    )


def _process(work: CompletionInstance, node: Node, sol: conic.ConicSolution, prog: conic.ConicProgram,
             state: _State, config: SolverConfig, counter, rng: np.random.Generator) -> None:
    if sol.status is Status.INFEASIBLE:
        state.record(node, math.inf, "prune-infeasible")
        return
    if not sol.ok:
        # keep the parent's bound so the reported lower bound stays valid
        state.failed_min = min(state.failed_min, node.bound)
        state.record(node, node.bound, "failed")
        return
    bound = max(node.bound, sol.objective)
    if bound >= state.threshold():
        if bound < state.Z_upper:
            state.pruned_min = min(state.pruned_min, bound)
        state.record(node, bound, "prune-bound")
        return
    ns = NodeSolution(sol.objective, conic.extract(sol, prog, "Y"), conic.extract(sol, prog, "U"),
                      conic.extract(sol, prog, "X"))
    if "Vdiag" in prog.names:
        ns.extra["Vdiag"] = sol.x[prog.names["Vdiag"]]
    if work.mode is Mode.BASIS_PURSUIT:
        # cheap rounding: the truncated SVD of the relaxed X is feasible whenever
        # the observations pin it down (for instance after a full presolve)
        state.offer(_truncated_incumbent(work, ns.X))
        if bound >= state.threshold():
            if bound < state.Z_upper:
                state.pruned_min = min(state.pruned_min, bound)
            state.record(node, bound, "prune-feasible")
            return
    found = find_violating_eigenvector(ns.Y, ns.U, config.eps)
    if found is None:
        inc = incumbent_from_X(work, ns.X)
        state.offer(inc)
        if bound >= state.threshold():
            if bound < state.Z_upper:
                state.pruned_min = min(state.pruned_min, bound)
            state.record(node, bound, "prune-feasible")
            return
        # the rounded point is worse than the bound: keep refining if possible
        weaker = find_violating_eigenvector(ns.Y, ns.U, 1e-9)
        if weaker is None:
            state.leaf_min = min(state.leaf_min, bound)
            state.record(node, bound, "prune-feasible")
            return
        found = weaker
    if node.depth >= 1 and config.use_node_altmin and rng.random() < node_selection_probability(node.depth, config.beta):
        if work.mode is Mode.NOISY:
            fp = altmin_node(work, NodePolyhedron.from_branches(node.branches), ns.Y)
            if fp is not None:
                state.offer(_make_incumbent(fp.X, work.k, fp.objective))
        else:
            fp = polish_basis_pursuit(work, top_left_singular(ns.X, work.k))
            if not is_infeasible(fp.objective):
                state.offer(_make_incumbent(fp.X, work.k, fp.objective))
    children = expand_node(node, NodeSolution(bound, ns.Y, ns.U, ns.X, ns.extra), config, counter,
                           direction=found[0] if config.disjunction is DisjunctionMode.EIGENVECTOR else None)
    for child in children:
        state.queue.push(child)
    state.record(node, bound, "branch")
