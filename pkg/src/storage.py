import sqlite3
import logging
from dataclasses import dataclass, fields, astuple
from pathlib import Path
from typing import Any, Generic, Iterator, TypeVar

logger = logging.getLogger(__name__)

LEDGER_FILE_NAME = "runs.db"

# explicit affinities, so hex hashes made of digits stay text
SQL_TYPES: dict[Any, str] = {str: "TEXT", int: "INTEGER", float: "REAL"}


class RunExistsError(ValueError):
    pass


TR = TypeVar("TR")


class PersistentTable(Generic[TR]):
    """
    Table-like object backed by a sqlite file. Rows are dataclasses; the first field is the
    primary key and columns are typed from the field annotations.
    """

    def __init__(self, db_file: Path, table_name: str, row_type: type[TR]):
        self.db_file = db_file
        self.table_name = table_name
        self.row_type = row_type
        row_fields = fields(row_type)  # type: ignore[arg-type]
        self.fieldnames = tuple(f.name for f in row_fields)

        fieldtypes = tuple(SQL_TYPES[f.type] for f in row_fields if f.type in SQL_TYPES)
        if len(row_fields) != len(fieldtypes):
            raise TypeError("Table row fields must be str, int or float")

        column_str = f"{self.fieldnames[0]} {fieldtypes[0]} PRIMARY KEY, " \
            + ", ".join(f"{n} {t}" for n, t in zip(self.fieldnames[1:], fieldtypes[1:]))
        db_file.parent.mkdir(parents=True, exist_ok=True)
        con = sqlite3.connect(self.db_file)
        con.execute(f"CREATE TABLE IF NOT EXISTS {self.table_name}({column_str})")
        con.close()

    def append(self, row: TR) -> None:
        """
        Append a new row. Rows are never replaced: a duplicate key raises RunExistsError.
        """
        if tuple(f.name for f in fields(row)) != self.fieldnames:  # type: ignore[arg-type]
            raise ValueError("Invalid row passed to append")
        sql = (f"INSERT INTO {self.table_name} VALUES"
               "(" + ", ".join('?' * len(self.fieldnames)) + ")")
        values = astuple(row)  # type: ignore[call-overload]
        con = sqlite3.connect(self.db_file)
        try:
            con.execute(sql, values)
            con.commit()
        except sqlite3.IntegrityError:
            raise RunExistsError(f"Row {values[0]!r} already in {self.table_name}") from None
        finally:
            con.close()

    def keys(self) -> tuple[Any, ...]:
        pk_col = self.fieldnames[0]
        con = sqlite3.connect(self.db_file)
        res = con.execute(f"SELECT {pk_col} FROM {self.table_name}")
        all = res.fetchall()
        con.close()
        return tuple(a[0] for a in all)

    def __len__(self) -> int:
        con = sqlite3.connect(self.db_file)
        res = con.execute(f"SELECT count() FROM {self.table_name}")
        n = res.fetchone()[0]
        con.close()
        assert isinstance(n, int)
        return n

    def __getitem__(self, key: Any) -> TR:
        con = sqlite3.connect(self.db_file)
        res = con.execute(f"SELECT * FROM {self.table_name} WHERE {self.fieldnames[0]} = ?", (key,))
        found = res.fetchone()
        con.close()
        if found is None:
            raise KeyError(key)
        return self.row_type(*found)

    def __iter__(self) -> Iterator[TR]:
        con = sqlite3.connect(self.db_file)
        res = con.execute(f"SELECT * FROM {self.table_name}")
        rows = res.fetchall()
        con.close()
        for r in rows:
            yield self.row_type(*r)


@dataclass(frozen=True, slots=True)
class RunRecord:
    """
    One finished run: where it lives and its headline accuracy
    """

    run_id: str
    dataset: str
    method: str
    rate: float
    selection_seed: int
    train_seed: int
    subsample_seed: int
    config_hash: str
    accuracy: float
    run_dir: str


class RunLedger(PersistentTable[RunRecord]):
    """
    Append-only index of the runs written under one output directory
    """

    TABLE_NAME = 'Runs'

    def __init__(self, output_dir: Path):
        super().__init__(output_dir / LEDGER_FILE_NAME, self.TABLE_NAME, RunRecord)
        self.output_dir = output_dir

    def allocate_run_dir(self, stem: str) -> Path:
        """
        Create a fresh directory for a run. Reruns get .1, .2, ... suffixes so earlier
        results are never overwritten. mkdir doubles as the lock between parallel runs.
        """
        taken = set(self.keys())
        attempt = 0
        while True:
            run_id = stem if attempt == 0 else f"{stem}.{attempt}"
            attempt += 1
            if run_id in taken:
                continue
            path = self.output_dir / run_id
            try:
                path.mkdir(parents=True, exist_ok=False)
            except FileExistsError:
                continue
            logger.debug(f"Allocated run directory {path}")
            return path
