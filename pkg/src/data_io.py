"""UCR-format datasets: loading, writing, normalization and stratified subsampling"""

import logging
import math
import re
from dataclasses import dataclass, replace
from _compat import StrEnum
from pathlib import Path

import numpy as np

from dtw_core import FloatArray, Label, ShapeError, TimeSeries, DimensionError

logger = logging.getLogger(__name__)

# label first, then values separated by tabs, commas or spaces
_FIELD_SPLIT = re.compile(r"[,\t ]+")

STD_FLOOR = 1e-12


class FormatError(ValueError):
    def __init__(self, message: str, line: int, column: int | None = None) -> None:
        where = f"line {line}" if column is None else f"line {line}, column {column}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.column = column


class EmptyDatasetError(ValueError):
    pass


class Split(StrEnum):
    TRAIN = "train"
    TEST = "test"


class Normalization(StrEnum):
    NONE = "none"
    Z = "z-per-series"


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Labeled equal-length time series plus the class table.
    Class order is the order of first appearance in the source file.
    """

    instances: tuple[TimeSeries, ...]
    classes: tuple[Label, ...]
    split: Split = Split.TRAIN
    normalization: Normalization = Normalization.NONE
    name: str = ""

    def __post_init__(self) -> None:
        lengths = {len(s) for s in self.instances}
        if len(lengths) > 1:
            raise ShapeError(f"Dataset {self.name} has ragged lengths: {sorted(lengths)}")
        dims = {s.dim for s in self.instances}
        if len(dims) > 1:
            raise DimensionError(f"Dataset {self.name} has mixed dimensions: {sorted(dims)}")
        known = set(self.classes)
        for s in self.instances:
            if s.label is None or s.label not in known:
                raise ValueError(f"Instance {s.id} has label {s.label!r} outside the class table")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def length(self) -> int:
        return len(self.instances[0]) if self.instances else 0

    @property
    def dim(self) -> int:
        return self.instances[0].dim if self.instances else 0

    def by_class(self) -> dict[Label, list[int]]:
        """Positions of every class's instances, in class-table order"""
        out: dict[Label, list[int]] = {c: [] for c in self.classes}
        for i, s in enumerate(self.instances):
            assert s.label is not None
            out[s.label].append(i)
        return out


def _parse_label(token: str) -> Label:
    try:
        return int(token)
    except ValueError:
        pass
    # older archive files write labels as floats, e.g. 1.0000000e+00
    try:
        f = float(token)
    except ValueError:
        return token
    return int(f) if math.isfinite(f) and f.is_integer() else token


def load_ucr_tsv(path: Path | str, split: Split = Split.TRAIN, name: str = "") -> Dataset:
    """
    Parse a UCR file: one series per line, label first.
    Blank lines are skipped; anything else malformed raises FormatError with its location.
    """
    path = Path(path)
    instances: list[TimeSeries] = []
    classes: list[Label] = []
    width: int | None = None

    with open(path, "r") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = _FIELD_SPLIT.split(line)
            if len(fields) < 2:
                raise FormatError("expected a label followed by at least one value", line_no)
            if width is None:
                width = len(fields) - 1
            elif len(fields) - 1 != width:
                raise FormatError(
                    f"series has {len(fields) - 1} values, expected {width}", line_no
                )

            values = np.empty(width)
            for col, tok in enumerate(fields[1:], start=2):
                try:
                    v = float(tok)
                except ValueError:
                    raise FormatError(f"non-numeric value {tok!r}", line_no, col) from None
                if not math.isfinite(v):
                    raise FormatError(f"non-finite value {tok!r}", line_no, col)
                values[col - 2] = v

            label = _parse_label(fields[0])
            if label not in classes:
                classes.append(label)
            instances.append(TimeSeries(values, label=label, id=f"{path.name}:{line_no}"))

    if not instances:
        raise EmptyDatasetError(f"No series found in {path}")

    ds = Dataset(tuple(instances), tuple(classes), split, Normalization.NONE, name or path.stem)
    logger.info(f"Loaded {ds.name}: {len(ds)} series, M={ds.length}, classes={list(ds.classes)}")
    return ds


def write_ucr_tsv(ds: Dataset, path: Path | str) -> None:
    """Write univariate series back in the tab-separated UCR layout"""
    if ds.dim > 1:
        raise DimensionError("The UCR layout holds univariate series only")
    with open(path, "w") as f:
        for s in ds.instances:
            f.write(str(s.label) + "\t" + "\t".join(repr(float(v)) for v in s.values[:, 0]))
            f.write("\n")


def load_split(
    train_path: Path | str, test_path: Path | str, normalize: bool = True, name: str = ""
) -> tuple[Dataset, Dataset]:
    """Load a train/test pair and give the test split the train class table"""
    train = load_ucr_tsv(train_path, Split.TRAIN, name)
    test = load_ucr_tsv(test_path, Split.TEST, name or train.name)
    unknown = [c for c in test.classes if c not in train.classes]
    if unknown:
        raise ValueError(f"Test classes {unknown} do not appear in the training split")
    if test.length != train.length:
        raise ShapeError(f"Train length {train.length} != test length {test.length}")
    test = replace(test, classes=train.classes)
    if normalize:
        train, test = z_normalize(train), z_normalize(test)
    return train, test


def _z_values(values: FloatArray) -> FloatArray:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    out = np.zeros_like(values)
    live = std >= STD_FLOOR
    out[:, live] = (values[:, live] - mean[live]) / std[live]
    return out


def z_normalize(ds: Dataset) -> Dataset:
    """Standardize each series (each dimension separately); constant series become zeros"""
    instances = tuple(
        TimeSeries(_z_values(s.values), label=s.label, id=s.id) for s in ds.instances
    )
    return replace(ds, instances=instances, normalization=Normalization.Z)


def stratified_subsample(ds: Dataset, rate: float, seed: int) -> Dataset:
    """
    Keep max(1, round(rate * class_size)) instances of every class, drawn without replacement.
    The kept instances stay in file order.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"Subsample rate must be in (0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for c, positions in ds.by_class().items():
        if not positions:
            continue
        k = min(len(positions), max(1, round(rate * len(positions))))
        chosen = rng.choice(len(positions), size=k, replace=False)
        keep.extend(positions[i] for i in chosen)
        logger.debug(f"class {c!r}: kept {k} of {len(positions)}")
    keep.sort()
    return replace(ds, instances=tuple(ds.instances[i] for i in keep))
