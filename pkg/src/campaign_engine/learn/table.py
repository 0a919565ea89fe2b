"""Column-oriented data tables and the dense (table-level) transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

NUMERIC = "numeric"
STRING = "string"
TIMESTAMP = "timestamp"
KINDS = (NUMERIC, STRING, TIMESTAMP)

DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


class SchemaError(ValueError):
    """A column is missing or has the wrong kind."""


def _as_column(values: Any, kind: str) -> np.ndarray:
    if kind == NUMERIC:
        return np.asarray(values, dtype=np.float64)
    if kind == TIMESTAMP:
        return np.asarray(values, dtype="datetime64[s]")
    arr = np.empty(len(values), dtype=object)
    arr[:] = [None if v is None else str(v) for v in values]
    return arr


def _infer_kind(values: np.ndarray) -> str:
    if values.dtype.kind in "fiub":
        return NUMERIC
    if values.dtype.kind == "M":
        return TIMESTAMP
    return STRING


@dataclass
class DataTable:
    """Named, equal-length columns with one designated numeric target.

    Numeric missing values are NaN; string missing values are None.
    """

    columns: dict[str, np.ndarray]
    kinds: dict[str, str]
    target: str | None = None
    target_transform: str | None = None

    def __post_init__(self) -> None:
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise SchemaError(f"columns have unequal lengths {sorted(lengths)}")
        for name in self.columns:
            if name not in self.kinds:
                raise SchemaError(f"no kind declared for column {name!r}")
        if self.target is not None:
            if self.target not in self.columns:
                raise SchemaError(f"target column {self.target!r} missing")
            if self.kinds[self.target] != NUMERIC:
                raise SchemaError("target column must be numeric")

    @classmethod
    def from_columns(
        cls,
        data: Mapping[str, Sequence[Any]],
        target: str | None = None,
        kinds: Mapping[str, str] | None = None,
    ) -> "DataTable":
        kinds = dict(kinds or {})
        cols: dict[str, np.ndarray] = {}
        for name, values in data.items():
            if name in kinds:
                cols[name] = _as_column(values, kinds[name])
            else:
                arr = np.asarray(values)
                kind = _infer_kind(arr)
                cols[name] = _as_column(values, kind)
                kinds[name] = kind
        return cls(cols, kinds, target)

    @classmethod
    def from_records(
        cls,
        rows: Sequence[Mapping[str, Any]],
        kinds: Mapping[str, str],
        target: str | None = None,
    ) -> "DataTable":
        data = {name: [row.get(name) for row in rows] for name in kinds}
        for name, kind in kinds.items():
            if kind == NUMERIC:
                data[name] = [np.nan if v is None else v for v in data[name]]
        return cls.from_columns(data, target=target, kinds=kinds)

    @property
    def n_rows(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def __len__(self) -> int:
        return self.n_rows

    @property
    def input_names(self) -> list[str]:
        return [c for c in self.columns if c != self.target]

    def y(self) -> np.ndarray:
        if self.target is None:
            raise SchemaError("table has no target column")
        return self.columns[self.target]

    def take(self, idx: np.ndarray) -> "DataTable":
        idx = np.asarray(idx, dtype=np.int64)
        cols = {k: v[idx] for k, v in self.columns.items()}
        return DataTable(cols, dict(self.kinds), self.target, self.target_transform)

    def with_column(self, name: str, values: Any, kind: str) -> "DataTable":
        cols = dict(self.columns)
        kinds = dict(self.kinds)
        cols[name] = _as_column(values, kind)
        kinds[name] = kind
        return DataTable(cols, kinds, self.target, self.target_transform)

    def without(self, names: Iterable[str]) -> "DataTable":
        drop = set(names)
        cols = {k: v for k, v in self.columns.items() if k not in drop}
        kinds = {k: v for k, v in self.kinds.items() if k not in drop}
        target = self.target if self.target not in drop else None
        return DataTable(cols, kinds, target, self.target_transform)

    def concat(self, other: "DataTable") -> "DataTable":
        if list(self.columns) != list(other.columns):
            raise SchemaError("cannot concatenate tables with different columns")
        cols = {k: np.concatenate([v, other.columns[k]]) for k, v in self.columns.items()}
        return DataTable(cols, dict(self.kinds), self.target, self.target_transform)

    def row(self, i: int) -> dict[str, Any]:
        return {k: v[i] for k, v in self.columns.items()}


def split_train_tune(
    table: DataTable, tune_fraction: float, seed: int
) -> tuple[DataTable, DataTable]:
    """Disjoint random row partition into train and tune tables."""
    if not 0.0 < tune_fraction < 1.0:
        raise ValueError(f"tune_fraction must lie in (0, 1), got {tune_fraction}")
    n = table.n_rows
    if n < 10:
        raise ValueError(f"need at least 10 rows to split train/tune, got {n}; supply more data")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_tune = min(n - 1, max(1, int(round(n * tune_fraction))))
    tune_idx = np.sort(perm[:n_tune])
    train_idx = np.sort(perm[n_tune:])
    return table.take(train_idx), table.take(tune_idx)


# --------------------------------------------------------------------------
# table transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TableTransform:
    """A named table transform plus its parameters (JSON-serializable)."""

    name: str
    params: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TableTransform":
        return cls(d["name"], dict(d.get("params", {})))


def _require(table: DataTable, column: str, kind: str) -> np.ndarray:
    if column not in table.columns:
        raise SchemaError(f"column {column!r} missing")
    if table.kinds[column] != kind:
        raise SchemaError(f"column {column!r} is {table.kinds[column]}, expected {kind}")
    return table.columns[column]


def calendar(table: DataTable, column: str, holidays: Iterable[str] = ()) -> DataTable:
    ts = _require(table, column, TIMESTAMP)
    holiday_set = {np.datetime64(h, "D") for h in holidays}
    days = ts.astype("datetime64[D]")
    # 1970-01-01 was a Thursday
    dow = (days.astype(np.int64) + 3) % 7
    names = [DAY_NAMES[int(d)] for d in dow]
    is_holiday = [1.0 if d in holiday_set else 0.0 for d in days]
    out = table.with_column(f"{column}_day_of_week", names, STRING)
    return out.with_column(f"{column}_is_holiday", is_holiday, NUMERIC)


_ROLLING_STATS: dict[str, Callable[[np.ndarray], float]] = {
    "median": lambda v: float(np.median(v)),
    "mean": lambda v: float(np.mean(v)),
    "sum": lambda v: float(np.sum(v)),
    "max": lambda v: float(np.max(v)),
}


def rolling(
    table: DataTable, column: str, entity: str, time: str, days: int, stat: str = "median"
) -> DataTable:
    """Per-entity statistic over the entity's rows in the preceding `days` days.

    The current row is excluded; rows with no prior history get NaN.
    """
    values = _require(table, column, NUMERIC)
    ts = _require(table, time, TIMESTAMP).astype("datetime64[s]")
    if entity not in table.columns:
        raise SchemaError(f"column {entity!r} missing")
    if stat not in _ROLLING_STATS:
        raise ValueError(f"unknown rolling statistic {stat!r}")
    fn = _ROLLING_STATS[stat]
    ent = table.columns[entity]
    span = np.timedelta64(int(days), "D")
    out = np.full(table.n_rows, np.nan)
    groups: dict[Any, list[int]] = {}
    for i, e in enumerate(ent):
        groups.setdefault(e, []).append(i)
    for rows in groups.values():
        idx = np.asarray(rows)
        t = ts[idx]
        v = values[idx]
        for k, i in enumerate(idx):
            mask = (t < t[k]) & (t >= t[k] - span) & ~np.isnan(v)
            if mask.any():
                out[i] = fn(v[mask])
    return table.with_column(f"{column}_rolling_{stat}_{days}d", out, NUMERIC)


def log_target(table: DataTable) -> DataTable:
    """Replace the target with log(1 + y); zero activity maps to zero."""
    y = table.y()
    if np.any(y < 0):
        raise ValueError("log target requires non-negative target values")
    cols = dict(table.columns)
    cols[table.target] = np.log1p(y)
    return DataTable(cols, dict(table.kinds), table.target, "log1p")


def log_columns(table: DataTable, columns: Sequence[str]) -> DataTable:
    """Add log(1 + x) copies of non-negative numeric inputs, named ``log1p(x)``."""
    out = table
    for c in columns:
        if c not in table.columns:
            continue
        v = _require(table, c, NUMERIC)
        out = out.with_column(f"log1p({c})", np.log1p(np.clip(v, 0.0, None)), NUMERIC)
    return out


def drop_columns(table: DataTable, columns: Sequence[str]) -> DataTable:
    return table.without([c for c in columns if c != table.target])


TRANSFORMS: dict[str, Callable[..., DataTable]] = {
    "calendar": calendar,
    "rolling": rolling,
    "log_target": log_target,
    "log_columns": log_columns,
    "drop_columns": drop_columns,
}


def apply_table_transform(table: DataTable, transform: TableTransform) -> DataTable:
    fn = TRANSFORMS.get(transform.name)
    if fn is None:
        raise ValueError(f"unknown table transform {transform.name!r}")
    if transform.name == "log_target" and table.target is None:
        # prediction-time tables carry no target column
        return table
    return fn(table, **transform.params)


def apply_table_transforms(table: DataTable, transforms: Sequence[TableTransform]) -> DataTable:
    for t in transforms:
        table = apply_table_transform(table, t)
    return table
