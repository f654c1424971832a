"""
Dynamic time warping over sequences of D-dimensional points.

Every variant uses the squared Euclidean ground cost and a large finite sentinel in place of
infinity. The start cell is repaired to h[0, 0] = 0 so the first aligned pair is forced to
(1, 1); every other boundary cell holds the sentinel.
"""

import logging
from dataclasses import dataclass
from _compat import StrEnum
from typing import Iterable, Protocol, Sequence

import numpy as np
import numpy.typing as npt
from joblib import Parallel, cpu_count, delayed
from numba import njit

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
Label = int | str

DEFAULT_SENTINEL = 1e12
# guard on N + M for the exhaustive oracle
ORACLE_MAX_STEPS = 16


class DimensionError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NoFeasiblePathError(ValueError):
    pass


class OracleSizeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class MoveSet(StrEnum):
    FULL = "full"
    DOWN_DIAGONAL = "downdiag"


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """
    One sequence of N points in R^D, optionally labeled.
    values is stored as a read-only (N, D) float64 array. 1-D input is read as D = 1.
    """

    values: FloatArray
    label: Label | None = None
    id: str | None = None

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"Time series must be (N, D) with N, D >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"Time series {self.id} contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


class HasValues(Protocol):
    @property
    def values(self) -> FloatArray: ...


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """entries[i, j] is the squared Euclidean distance between x_i and y_j"""

    entries: FloatArray

    @property
    def n_rows(self) -> int:
        return int(self.entries.shape[0])

    @property
    def n_cols(self) -> int:
        return int(self.entries.shape[1])


@dataclass(frozen=True)
class WarpingPath:
    """Ordered 1-based index pairs from (1, 1) to (N, M)"""

    steps: tuple[tuple[int, int], ...]

    def is_valid(self, n: int, m: int, moves: MoveSet = MoveSet.FULL) -> bool:
        if not self.steps or self.steps[0] != (1, 1) or self.steps[-1] != (n, m):
            return False
        allowed = {(1, 0), (1, 1)} if moves is MoveSet.DOWN_DIAGONAL else {(1, 0), (0, 1), (1, 1)}
        for (e0, f0), (e1, f1) in zip(self.steps, self.steps[1:]):
            if (e1 - e0, f1 - f0) not in allowed:
                return False
        return True

    def __len__(self) -> int:
        return len(self.steps)


# ---- kernels ----------------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _sq_dist(a, b):  # type: ignore[no-untyped-def]
    s = 0.0
    for d in range(a.shape[0]):
        diff = a[d] - b[d]
        s += diff * diff
    return s


@njit(cache=True, nogil=True)
def _cost_matrix(x, y):  # type: ignore[no-untyped-def]
    n = x.shape[0]
    m = y.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = _sq_dist(x[i], y[j])
    return out


@njit(cache=True, nogil=True)
def _full_accumulate(cost, sentinel):  # type: ignore[no-untyped-def]
    n, m = cost.shape
    h = np.full((n + 1, m + 1), sentinel)
    h[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            h[i, j] = cost[i - 1, j - 1] + min(h[i - 1, j - 1], h[i - 1, j], h[i, j - 1])
    return h


@njit(cache=True, nogil=True)
def _downdiag_accumulate(cost, sentinel):  # type: ignore[no-untyped-def]
    n, m = cost.shape
    h = np.full((n + 1, m + 1), sentinel)
    h[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            h[i, j] = cost[i - 1, j - 1] + min(h[i - 1, j], h[i - 1, j - 1])
    return h


@njit(cache=True, nogil=True)
def _full_distance(x, y, sentinel):  # type: ignore[no-untyped-def]
    # two rows of the full recurrence
    m = y.shape[0]
    prev = np.full(m + 1, sentinel)
    curr = np.full(m + 1, sentinel)
    prev[0] = 0.0
    for i in range(x.shape[0]):
        curr[0] = sentinel
        for j in range(1, m + 1):
            curr[j] = _sq_dist(x[i], y[j - 1]) + min(prev[j - 1], prev[j], curr[j - 1])
        prev, curr = curr, prev
    return prev[m]


@njit(cache=True, nogil=True)
def _rolling(x, y, sentinel):  # type: ignore[no-untyped-def]
    m = y.shape[0]
    h = np.full(m + 1, sentinel)
    h[0] = 0.0
    for t in range(x.shape[0]):
        # descending j so h[j - 1] still holds the previous step
        for j in range(m, 0, -1):
            h[j] = _sq_dist(x[t], y[j - 1]) + min(h[j], h[j - 1])
        h[0] = sentinel
    return h[m]


@njit(cache=True, nogil=True)
def _batched(x, protos, sentinel):  # type: ignore[no-untyped-def]
    k, l_len = protos.shape[0], protos.shape[1]
    h = np.full((k, l_len + 1), sentinel)
    h[:, 0] = 0.0
    for t in range(x.shape[0]):
        for i in range(k):
            for j in range(l_len, 0, -1):
                h[i, j] = _sq_dist(x[t], protos[i, j - 1]) + min(h[i, j], h[i, j - 1])
            h[i, 0] = sentinel
    return h[:, l_len].copy()


@njit(cache=True, nogil=True)
def _nn_search(queries, refs, sentinel):  # type: ignore[no-untyped-def]
    q = queries.shape[0]
    idx = np.empty(q, dtype=np.int64)
    dist = np.empty(q)
    for a in range(q):
        best = np.inf
        best_i = -1
        for r in range(refs.shape[0]):
            d = _full_distance(queries[a], refs[r], sentinel)
            # strict < keeps the lower reference index on ties
            if d < best:
                best = d
                best_i = r
        idx[a] = best_i
        dist[a] = best
    return idx, dist


# ---- public operations ------------------------------------------------------------------------


def _check_dims(x: HasValues, y: HasValues) -> None:
    if x.values.shape[1] != y.values.shape[1]:
        raise DimensionError(
            f"Dimension mismatch: {x.values.shape[1]} vs {y.values.shape[1]}"
        )


def _check_feasible(n: int, m: int) -> None:
    if n < m:
        raise NoFeasiblePathError(
            f"Down/diagonal alignment needs N >= M, got N={n}, M={m}"
        )


def cost_matrix(x: HasValues, y: HasValues) -> CostMatrix:
    _check_dims(x, y)
    return CostMatrix(_cost_matrix(x.values, y.values))


def dtw_full(
    x: HasValues, y: HasValues, sentinel: float = DEFAULT_SENTINEL
) -> tuple[float, WarpingPath]:
    """
    Classic DTW with all three moves. Returns the distance and a minimizing path.
    Backtracking prefers diagonal, then down, then right.
    """
    cost = cost_matrix(x, y).entries
    h = _full_accumulate(cost, sentinel)
    i, j = cost.shape
    steps = [(i, j)]
    while (i, j) != (1, 1):
        diag = h[i - 1, j - 1]
        down = h[i - 1, j]
        right = h[i, j - 1]
        if diag <= down and diag <= right:
            i, j = i - 1, j - 1
        elif down <= right:
            i -= 1
        else:
            j -= 1
        steps.append((i, j))
    steps.reverse()
    return float(h[-1, -1]), WarpingPath(tuple(steps))


def dtw_distance(x: HasValues, y: HasValues, sentinel: float = DEFAULT_SENTINEL) -> float:
    """Full DTW distance in O(M) memory, no path"""
    _check_dims(x, y)
    return float(_full_distance(x.values, y.values, sentinel))


def path_cost(cost: CostMatrix, path: WarpingPath) -> float:
    total = 0.0
    for e, f in path.steps:
        total = cost.entries[e - 1, f - 1] + total
    return float(total)


def brute_force_dtw(x: HasValues, y: HasValues, moves: MoveSet = MoveSet.FULL) -> float:
    """
    Minimal path cost by enumerating every path from (1, 1) to (N, M).
    Costs are summed in path order, the same order the recurrences use.
    """
    cost = cost_matrix(x, y).entries
    n, m = cost.shape
    if n + m > ORACLE_MAX_STEPS:
        raise OracleSizeError(f"N + M = {n + m} exceeds oracle limit {ORACLE_MAX_STEPS}")
    steps = ((1, 0), (1, 1)) if moves is MoveSet.DOWN_DIAGONAL else ((1, 0), (0, 1), (1, 1))

    best = np.inf

    def walk(i: int, j: int, acc: float) -> None:
        nonlocal best
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        for di, dj in steps:
            ni, nj = i + di, j + dj
            if ni < n and nj < m:
                walk(ni, nj, cost[ni, nj] + acc)

    walk(0, 0, float(cost[0, 0]))
    if not np.isfinite(best):
        raise NoFeasiblePathError(f"No {moves} path from (1, 1) to ({n}, {m})")
    return float(best)


def dtw_downdiag(x: HasValues, y: HasValues, sentinel: float = DEFAULT_SENTINEL) -> float:
    """DTW restricted to down and diagonal moves, full cumulative matrix"""
    cost = cost_matrix(x, y).entries
    _check_feasible(*cost.shape)
    h = _downdiag_accumulate(cost, sentinel)
    return float(h[-1, -1])


def dtw_rolling(x: HasValues, y: HasValues, sentinel: float = DEFAULT_SENTINEL) -> float:
    """Same value as dtw_downdiag, keeping a single state of length M + 1"""
    _check_dims(x, y)
    _check_feasible(x.values.shape[0], y.values.shape[0])
    return float(_rolling(x.values, y.values, sentinel))


def stack_values(series: Iterable[HasValues]) -> FloatArray:
    """Stack equal-length sequences into a (K, L, D) array"""
    arrays = [s.values for s in series]
    if not arrays:
        raise ShapeError("Cannot stack an empty collection of sequences")
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ShapeError(f"Sequences have ragged lengths: {sorted(lengths)}")
    dims = {a.shape[1] for a in arrays}
    if len(dims) != 1:
        raise DimensionError(f"Sequences have mixed dimensions: {sorted(dims)}")
    return np.ascontiguousarray(np.stack(arrays))


def dtw_batched(
    x: HasValues, protos: Iterable[HasValues], sentinel: float = DEFAULT_SENTINEL
) -> FloatArray:
    """Down/diagonal DTW from x to each of K equal-length prototypes, read as h_N[:, L]"""
    tensor = stack_values(protos)
    if tensor.shape[2] != x.values.shape[1]:
        raise DimensionError(f"Dimension mismatch: {x.values.shape[1]} vs {tensor.shape[2]}")
    _check_feasible(x.values.shape[0], tensor.shape[1])
    out: FloatArray = _batched(x.values, tensor, sentinel)
    return out


def nearest_neighbor(
    queries: Sequence[HasValues],
    refs: Sequence[HasValues],
    n_jobs: int = 1,
    sentinel: float = DEFAULT_SENTINEL,
) -> tuple[npt.NDArray[np.int64], FloatArray]:
    """
    1-NN under full DTW. Returns the reference index and distance for every query.
    Ties go to the lower reference index.
    """
    q = stack_values(queries)
    r = stack_values(refs)
    if q.shape[2] != r.shape[2]:
        raise DimensionError(f"Dimension mismatch: {q.shape[2]} vs {r.shape[2]}")

    workers = cpu_count() if n_jobs < 0 else n_jobs
    chunks = [c for c in np.array_split(np.arange(len(q)), max(1, workers * 4)) if len(c)]
    logger.info(f"NN-DTW: {len(q)} queries x {len(r)} references in {len(chunks)} chunks")
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_nn_search)(q[c], r, sentinel) for c in chunks
    )
    idx = np.concatenate([res[0] for res in results])
    dist = np.concatenate([res[1] for res in results])
    return idx, dist
