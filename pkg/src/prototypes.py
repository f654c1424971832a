"""
Prototype selection and dynamic length shortening.

Shortening repeatedly merges the closest pair of successive points into their mean until the
sequence reaches its target length. All prototypes of a set share one length L so they stack
into the (K, L, D) tensor the recurrent model trains.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from _compat import StrEnum
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

import codec
from data_io import Dataset
from dtw_core import (
    FloatArray,
    HasValues,
    Label,
    ShapeError,
    TimeSeries,
    dtw_distance,
    stack_values,
)

logger = logging.getLogger(__name__)

PROTO_MAGIC = b"WNPROTO\0"
PROTO_VERSION = 1

Span = tuple[int, int]


class RangeError(ValueError):
    pass


class EmptyClassError(ValueError):
    pass


class PrototypeFileError(codec.CodecError):
    pass


class SelectionStrategy(StrEnum):
    RANDOM = "random"
    MEDOID = "medoid"


@dataclass(frozen=True, eq=False)
class Prototype:
    """
    A shortened reference sequence. spans[j] is the half-open range of original time indices
    merged into position j.
    """

    values: FloatArray
    class_label: Label
    source_ids: tuple[str, ...] = ()
    original_length: int = 0
    spans: tuple[Span, ...] = ()

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ShapeError(f"Prototype values must be (L, D) with L >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Prototype contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if self.original_length == 0:
            object.__setattr__(self, "original_length", arr.shape[0])
        if not self.spans:
            object.__setattr__(self, "spans", tuple((j, j + 1) for j in range(arr.shape[0])))
        if not 1 <= arr.shape[0] <= self.original_length:
            raise ShapeError(
                f"Prototype length {arr.shape[0]} outside [1, {self.original_length}]"
            )

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """
    K prototypes in (class order, selection order). Position i is row i of the model's P, W
    and b.
    """

    prototypes: tuple[Prototype, ...]
    classes: tuple[Label, ...]
    class_index: dict[Label, tuple[int, ...]]
    common_length: int
    shorten_ratio: float = 1.0
    seed: int = 0
    strategy: SelectionStrategy = SelectionStrategy.RANDOM
    _tensor: FloatArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.prototypes:
            raise ShapeError("A prototype set needs at least one prototype")
        for i, p in enumerate(self.prototypes):
            if len(p) != self.common_length:
                raise ShapeError(
                    f"Prototype {i} has length {len(p)}, expected {self.common_length}"
                )
        seen: list[int] = []
        for c in self.classes:
            rows = self.class_index.get(c, ())
            if not rows:
                raise EmptyClassError(f"Class {c!r} owns no prototype")
            for r in rows:
                if self.prototypes[r].class_label != c:
                    raise ValueError(f"Prototype {r} is not of class {c!r}")
            seen.extend(rows)
        if sorted(seen) != list(range(len(self.prototypes))):
            raise ValueError("Class index does not partition the prototype rows")
        tensor = stack_values(self.prototypes)
        tensor.setflags(write=False)
        object.__setattr__(self, "_tensor", tensor)

    def __len__(self) -> int:
        return len(self.prototypes)

    def __iter__(self) -> Iterator[Prototype]:
        return iter(self.prototypes)

    def __getitem__(self, i: int) -> Prototype:
        return self.prototypes[i]

    @property
    def dim(self) -> int:
        return int(self._tensor.shape[2])

    def tensor(self) -> FloatArray:
        return self._tensor


# ---- shortening -------------------------------------------------------------------------------


def _gap(a: FloatArray, b: FloatArray) -> float:
    d = a - b
    return float(np.dot(d, d))


def shorten_with_spans(y: HasValues, target_length: int) -> tuple[FloatArray, tuple[Span, ...]]:
    """
    Merge the closest successive points (leftmost pair on ties) until target_length remain.
    Only the two gaps next to a merged point are recomputed after each merge.
    """
    m = y.values.shape[0]
    if not 1 <= target_length <= m:
        raise RangeError(f"Target length {target_length} outside [1, {m}]")

    points = [row.copy() for row in y.values]
    spans = [(j, j + 1) for j in range(m)]
    gaps = [_gap(points[j], points[j + 1]) for j in range(m - 1)]

    while len(points) > target_length:
        j = int(np.argmin(gaps))
        points[j : j + 2] = [(points[j] + points[j + 1]) / 2]
        spans[j : j + 2] = [(spans[j][0], spans[j + 1][1])]
        del gaps[j]
        if j > 0:
            gaps[j - 1] = _gap(points[j - 1], points[j])
        if j < len(points) - 1:
            gaps[j] = _gap(points[j], points[j + 1])

    return np.stack(points), tuple(spans)


def shorten(
    y: TimeSeries | Prototype,
    target_length: int,
    class_label: Label | None = None,
    source_ids: Sequence[str] = (),
) -> Prototype:
    values, spans = shorten_with_spans(y, target_length)
    if class_label is None:
        class_label = y.class_label if isinstance(y, Prototype) else y.label
    if class_label is None:
        raise ValueError("Cannot build a prototype from an unlabeled series")
    if not source_ids and isinstance(y, TimeSeries) and y.id is not None:
        source_ids = (y.id,)
    if not source_ids and isinstance(y, Prototype):
        source_ids = y.source_ids
    original = len(y)
    if isinstance(y, Prototype):
        # spans and length refer back to the series y was itself shortened from
        original = y.original_length
        spans = tuple((y.spans[a][0], y.spans[b - 1][1]) for a, b in spans)
    return Prototype(values, class_label, tuple(source_ids), original, spans)


def target_length(m: int, ratio: float) -> int:
    """ceil(ratio * m), ignoring float noise like 0.8 * 140 = 112.00000000000001"""
    if not 0.0 < ratio <= 1.0:
        raise RangeError(f"Shortening ratio must be in (0, 1], got {ratio}")
    return min(m, max(1, math.ceil(ratio * m - 1e-9)))


def shortening_report(
    queries: Sequence[HasValues], refs: Sequence[TimeSeries], ratio: float, eps: float = 1e-12
) -> float:
    """Median relative change of full DTW to each ref once that ref is shortened"""
    changes = []
    for x, y in zip(queries, refs):
        before = dtw_distance(x, y)
        short, _ = shorten_with_spans(y, target_length(len(y), ratio))
        after = dtw_distance(x, TimeSeries(short))
        changes.append(abs(after - before) / (before + eps))
    if not changes:
        raise ValueError("Shortening report needs at least one pair")
    return float(np.median(changes))


# ---- selection --------------------------------------------------------------------------------


def _distance_matrix(series: Sequence[TimeSeries]) -> FloatArray:
    n = len(series)
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            out[a, b] = out[b, a] = dtw_distance(series[a], series[b])
    return out


def greedy_medoids(dist: FloatArray, k: int) -> list[int]:
    """
    Greedy k-medoids build: start from the instance with the smallest summed distance, then
    keep adding whichever instance lowers the total distance-to-nearest-medoid the most.
    Ties go to the lowest index.
    """
    n = dist.shape[0]
    k = min(k, n)
    chosen = [int(np.argmin(dist.sum(axis=1)))]
    nearest = dist[:, chosen[0]].copy()
    while len(chosen) < k:
        totals = np.minimum(nearest[:, None], dist).sum(axis=0)
        totals[chosen] = np.inf
        best = int(np.argmin(totals))
        chosen.append(best)
        nearest = np.minimum(nearest, dist[:, best])
    return chosen


def select_prototypes(
    train: Dataset,
    per_class: int,
    strategy: SelectionStrategy = SelectionStrategy.RANDOM,
    seed: int = 0,
) -> dict[Label, list[TimeSeries]]:
    """Pick min(per_class, class size) instances of every class"""
    if per_class < 1:
        raise RangeError(f"per_class must be >= 1, got {per_class}")
    if len(train) == 0:
        raise EmptyClassError("Cannot select prototypes from an empty dataset")

    rng = np.random.default_rng(seed)
    selected: dict[Label, list[TimeSeries]] = {}
    for c, positions in train.by_class().items():
        if not positions:
            raise EmptyClassError(f"Class {c!r} has no training instances")
        k = min(per_class, len(positions))
        if k < per_class:
            logger.warning(f"Class {c!r} has only {len(positions)} instances, using all of them")
        members = [train.instances[p] for p in positions]
        if strategy is SelectionStrategy.MEDOID:
            picks = greedy_medoids(_distance_matrix(members), k)
        else:
            picks = [int(i) for i in rng.choice(len(members), size=k, replace=False)]
        selected[c] = [members[i] for i in picks]
    return selected


def build_prototype_set(
    train: Dataset,
    per_class: int,
    shorten_ratio: float,
    strategy: SelectionStrategy = SelectionStrategy.RANDOM,
    seed: int = 0,
) -> PrototypeSet:
    lengths = {len(s) for s in train.instances}
    if len(lengths) != 1:
        raise ShapeError(f"Training series must share one length, got {sorted(lengths)}")
    m = lengths.pop()
    l_len = target_length(m, shorten_ratio)

    protos: list[Prototype] = []
    index: dict[Label, tuple[int, ...]] = {}
    for c, members in select_prototypes(train, per_class, strategy, seed).items():
        start = len(protos)
        protos.extend(shorten(s, l_len, class_label=c) for s in members)
        index[c] = tuple(range(start, len(protos)))

    ps = PrototypeSet(tuple(protos), train.classes, index, l_len, shorten_ratio, seed, strategy)
    logger.info(f"Built {len(ps)} prototypes of length {l_len} (M={m}, ratio={shorten_ratio})")
    return ps


# ---- files ------------------------------------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_prototype_set(ps: PrototypeSet, path: Path | str) -> None:
    """Binary tensor file plus a readable JSON sidecar with provenance"""
    path = Path(path)
    with open(path, "wb") as f:
        codec.write_header(
            f,
            PROTO_MAGIC,
            PROTO_VERSION,
            (len(ps), ps.common_length, ps.dim),
            (),
            codec.encode_class_table(ps.classes, ps.class_index),
        )
        codec.write_array(f, ps.tensor())

    sidecar = {
        "classes": list(ps.classes),
        "shorten_ratio": ps.shorten_ratio,
        "seed": ps.seed,
        "strategy": str(ps.strategy),
        "prototypes": [
            {
                "row": i,
                "class": p.class_label,
                "source_ids": list(p.source_ids),
                "original_length": p.original_length,
                "spans": [list(s) for s in p.spans],
            }
            for i, p in enumerate(ps)
        ],
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")


def load_prototype_set(path: Path | str) -> PrototypeSet:
    path = Path(path)
    with open(path, "rb") as f:
        header = codec.read_header(f, PROTO_MAGIC, PrototypeFileError)
        if header.version != PROTO_VERSION:
            raise PrototypeFileError(f"Unsupported prototype file version {header.version}")
        tensor = codec.read_array(f, header.shape, PrototypeFileError)
    classes, index = codec.decode_class_table(header.table, PrototypeFileError)
    label_of = {r: c for c, rows in index.items() for r in rows}

    meta: dict[str, Any] = {}
    if _sidecar_path(path).exists():
        with open(_sidecar_path(path), "r") as f:
            meta = json.load(f)
    else:
        logger.warning(f"No sidecar for {path}, provenance will be empty")
    rows_meta: list[dict[str, Any]] = meta.get("prototypes", [])

    protos = []
    for i in range(header.shape[0]):
        rm = rows_meta[i] if i < len(rows_meta) else {}
        protos.append(
            Prototype(
                tensor[i],
                label_of[i],
                tuple(rm.get("source_ids", ())),
                int(rm.get("original_length", 0)),
                tuple((int(s[0]), int(s[1])) for s in rm.get("spans", ())),
            )
        )
    return PrototypeSet(
        tuple(protos),
        classes,
        index,
        header.shape[1],
        float(meta.get("shorten_ratio", 1.0)),
        int(meta.get("seed", 0)),
        SelectionStrategy(meta.get("strategy", SelectionStrategy.RANDOM)),
    )
