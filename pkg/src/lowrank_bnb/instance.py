"""Low-rank matrix completion instances: data model, generator, objective, I/O."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

# Objective value of a basis-pursuit candidate that misses an observation.
INFEASIBLE = math.inf


def is_infeasible(value: float) -> bool:
    return math.isinf(value) and value > 0


class Mode(str, enum.Enum):
    BASIS_PURSUIT = "basis_pursuit"
    NOISY = "noisy"


class InstanceError(ValueError):
    pass


class IndexSet:
    """Ordered set of ``(i, j)`` pairs with cached row and column slices."""

    def __init__(self, pairs, n: int, m: int) -> None:
        pairs = sorted({(int(i), int(j)) for i, j in pairs})
        for i, j in pairs:
            if not (0 <= i < n and 0 <= j < m):
                raise InstanceError(f"index ({i}, {j}) outside {n}x{m}")
        self.n, self.m = n, m
        self.pairs: tuple[tuple[int, int], ...] = tuple(pairs)
        self._set = frozenset(pairs)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, item) -> bool:
        return tuple(item) in self._set

    @cached_property
    def mask(self) -> np.ndarray:
        out = np.zeros((self.n, self.m), dtype=bool)
        for i, j in self.pairs:
            out[i, j] = True
        return out

    @cached_property
    def rows(self) -> tuple[tuple[int, ...], ...]:
        """Column indices observed in each row."""
        return tuple(tuple(np.flatnonzero(self.mask[i])) for i in range(self.n))

    @cached_property
    def cols(self) -> tuple[tuple[int, ...], ...]:
        """Row indices observed in each column."""
        return tuple(tuple(np.flatnonzero(self.mask[:, j])) for j in range(self.m))

    def covers_rows_and_columns(self) -> bool:
        return bool(self.mask.any(axis=1).all() and self.mask.any(axis=0).all())


@dataclass(frozen=True, eq=False)
class CompletionInstance:
    n: int
    m: int
    k: int
    gamma: float
    mode: Mode
    observed: Mapping[tuple[int, int], float]
    ground_truth: np.ndarray | None = field(default=None, repr=False)
    index: IndexSet = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mode = Mode(self.mode)
        object.__setattr__(self, "mode", mode)
        if not (1 <= self.k <= min(self.n, self.m)):
            raise InstanceError(f"rank bound {self.k} outside [1, {min(self.n, self.m)}]")
        if mode is Mode.BASIS_PURSUIT and self.gamma != 1.0:
            raise InstanceError("basis pursuit instances use gamma = 1")
        if self.gamma <= 0:
            raise InstanceError("gamma must be positive")
        obs = {(int(i), int(j)): float(v) for (i, j), v in self.observed.items()}
        object.__setattr__(self, "observed", obs)
        # validates ranges
        object.__setattr__(self, "index", IndexSet(obs, self.n, self.m))
        if self.ground_truth is not None:
            gt = np.asarray(self.ground_truth, dtype=float)
            if gt.shape != (self.n, self.m):
                raise InstanceError("ground truth has the wrong shape")
            object.__setattr__(self, "ground_truth", gt)

    @cached_property
    def rows(self) -> np.ndarray:
        return np.array([i for i, _ in self.index], dtype=np.int64)

    @cached_property
    def cols(self) -> np.ndarray:
        return np.array([j for _, j in self.index], dtype=np.int64)

    @cached_property
    def values(self) -> np.ndarray:
        return np.array([self.observed[p] for p in self.index], dtype=float)

    @property
    def mask(self) -> np.ndarray:
        return self.index.mask

    def observed_matrix(self) -> np.ndarray:
        """Observed values with zeros elsewhere."""
        out = np.zeros((self.n, self.m))
        out[self.rows, self.cols] = self.values
        return out

    def with_observed(self, observed: Mapping[tuple[int, int], float]) -> "CompletionInstance":
        return replace(self, observed=dict(observed))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompletionInstance):
            return NotImplemented
        same_gt = (self.ground_truth is None) == (other.ground_truth is None) and (
            self.ground_truth is None or np.array_equal(self.ground_truth, other.ground_truth))
        return (self.n, self.m, self.k, self.gamma, self.mode, self.observed) == (
            other.n, other.m, other.k, other.gamma, other.mode, other.observed) and same_gt


# ---------------------------------------------------------------------------
# generation

RATES = ("kn", "knlogn", "kn65logn", "kn15", "kn2")


def num_observed_for_rate(n: int, k: int, p: float, rate: str, m: int | None = None,
                          log_base: float = 10.0) -> int:
    """Observation count for one of the sampling-rate regimes, rounded up."""
    m = n if m is None else m
    log = math.log(n) / math.log(log_base)
    raw = {
        "kn": p * k * n,
        "knlogn": p * k * n * log,
        "kn65logn": p / 10 ** 1.2 * k * n ** 1.2 * log,
        "kn15": p * k * n ** 1.5,
        "kn2": p * k * n ** 2,
    }
    if rate not in raw:
        raise ValueError(f"unknown rate {rate!r}; expected one of {RATES}")
    return min(n * m, max(1, math.ceil(raw[rate] - 1e-9)))


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _covering_assignment(n: int, m: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """max(n, m) cells touching every row and column (a padded permutation)."""
    size = max(n, m)
    rows = np.concatenate([rng.permutation(n), rng.integers(0, n, size - n)])
    cols = np.concatenate([rng.permutation(m), rng.integers(0, m, size - m)])
    rng.shuffle(rows)
    return list(zip(rows.tolist(), cols.tolist()))


def sample_mask(n: int, m: int, k: int, num_observed: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniform mask of ``num_observed`` cells that hits every row and column."""
    if num_observed > n * m:
        raise InstanceError(f"cannot observe {num_observed} of {n * m} entries")
    if num_observed < max(n, m):
        raise InstanceError(f"{num_observed} entries cannot cover {n} rows and {m} columns")
    order = rng.permutation(n * m)
    if num_observed >= k * (n + m) + n:
        chosen = order[:num_observed]
        rows, cols = np.divmod(chosen, m)
        if len(set(rows.tolist())) == n and len(set(cols.tolist())) == m:
            return list(zip(rows.tolist(), cols.tolist()))
    cells = dict.fromkeys(_covering_assignment(n, m, rng))
    for flat in order:
        if len(cells) >= num_observed:
            break
        cells.setdefault(tuple(int(v) for v in divmod(int(flat), m)), None)
    return list(cells)


def generate_instance(n: int, m: int, k_true: int, gamma: float, noise_eps: float,
                      num_observed: int, seed: int, mode: Mode | str = Mode.NOISY) -> CompletionInstance:
    """Random instance ``A = U V + eps Z`` with standard normal factors.

    The factor and noise draws are prefix-consistent: the instance for a
    smaller ``n``/``m`` with the same seed sees the top-left block of the same
    full matrix.
    """
    mode = Mode(mode)
    U = _stream(seed, 0).standard_normal((n, k_true))
    V = _stream(seed, 1).standard_normal((m, k_true)).T
    Z = np.vstack([_stream(seed, 2, i).standard_normal(m) for i in range(n)])
    A = U @ V + noise_eps * Z
    mask = sample_mask(n, m, k_true, num_observed, _stream(seed, 3, n, m))
    observed = {(i, j): float(A[i, j]) for i, j in mask}
    if mode is Mode.BASIS_PURSUIT:
        gamma = 1.0
    return CompletionInstance(n, m, k_true, float(gamma), mode, observed, A)


# ---------------------------------------------------------------------------
# objective


def _check_shape(instance: CompletionInstance, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape != (instance.n, instance.m):
        raise InstanceError(f"expected a {instance.n}x{instance.m} matrix, got {X.shape}")
    return X


def observation_residual(instance: CompletionInstance, X: np.ndarray) -> np.ndarray:
    return X[instance.rows, instance.cols] - instance.values


def objective_value(instance: CompletionInstance, X: np.ndarray, tol: float = 1e-6) -> float:
    """Objective of a candidate ``X`` (rank is not checked here).

    Basis pursuit returns :data:`INFEASIBLE` when an observed entry is missed
    by more than ``tol * max(1, |A_ij|)``.
    """
    X = _check_shape(instance, X)
    r = observation_residual(instance, X)
    if instance.mode is Mode.BASIS_PURSUIT:
        if np.any(np.abs(r) > tol * np.maximum(1.0, np.abs(instance.values))):
            return INFEASIBLE
        return float(np.sum(X * X))
    return float(np.sum(X * X) / (2 * instance.gamma) + 0.5 * r @ r)


def mse_all_entries(instance: CompletionInstance, X: np.ndarray) -> float:
    if instance.ground_truth is None:
        raise InstanceError("instance has no ground truth")
    X = _check_shape(instance, X)
    return float(np.mean((X - instance.ground_truth) ** 2))


# ---------------------------------------------------------------------------
# serialization


def instance_to_dict(instance: CompletionInstance) -> dict:
    out = {
        "n": instance.n, "m": instance.m, "k": instance.k, "gamma": instance.gamma,
        "mode": instance.mode.value,
        "entries": [{"i": i + 1, "j": j + 1, "v": v} for (i, j), v in zip(instance.index, instance.values)],
    }
    if instance.ground_truth is not None:
        out["ground_truth"] = instance.ground_truth.ravel().tolist()
    return out


def instance_from_dict(data: dict) -> CompletionInstance:
    try:
        n, m, k = int(data["n"]), int(data["m"]), int(data["k"])
        gamma, mode = float(data["gamma"]), Mode(data["mode"])
        entries = data["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InstanceError(f"malformed instance: {exc}") from exc
    if not entries:
        raise InstanceError("instance has no observed entries")
    observed: dict[tuple[int, int], float] = {}
    for e in entries:
        i, j = int(e["i"]) - 1, int(e["j"]) - 1
        if not (0 <= i < n and 0 <= j < m):
            raise InstanceError(f"entry ({i + 1}, {j + 1}) outside {n}x{m}")
        if (i, j) in observed:
            raise InstanceError(f"duplicate entry ({i + 1}, {j + 1})")
        observed[(i, j)] = float(e["v"])
    gt = data.get("ground_truth")
    if gt is not None:
        gt = np.asarray(gt, dtype=float)
        if gt.size != n * m:
            raise InstanceError("ground truth has the wrong size")
        gt = gt.reshape(n, m)
    return CompletionInstance(n, m, k, gamma, mode, observed, gt)


def save_instance(instance: CompletionInstance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(instance)), encoding="utf-8")


def load_instance(path: str | Path) -> CompletionInstance:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InstanceError(f"malformed instance file: {exc}") from exc
    return instance_from_dict(data)
