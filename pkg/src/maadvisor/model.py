"""Core domain model: schemas, workloads, indexes, budgets.

Everything here is an immutable value object. Loading validates the
documented invariants up front so the rest of the package can assume
well-formed inputs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional


class ValidationError(ValueError):
    """A schema or workload document violates a structural invariant."""


class OperatorClass(str, Enum):
    """How a query touches a column, as far as indexing cares."""

    EQ = "Eq"
    RANGE = "Range"
    JOIN = "Join"
    SORT_GROUP = "SortGroup"


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    cardinality: int
    width_bytes: int
    min_value: Optional[float] = None
    max_value: Optional[float] = None
    histogram: Optional[tuple[tuple[float, int], ...]] = None

    def __post_init__(self) -> None:
        if not _IDENT_RE.match(self.name):
            raise ValidationError(f"bad column name: {self.name!r}")
        if self.cardinality < 1:
            raise ValidationError(f"column {self.name}: cardinality must be >= 1")
        if self.width_bytes < 1:
            raise ValidationError(f"column {self.name}: width_bytes must be >= 1")
        if (
            self.min_value is not None
            and self.max_value is not None
            and self.min_value > self.max_value
        ):
            raise ValidationError(f"column {self.name}: min > max")


@dataclass(frozen=True)
class TableMeta:
    name: str
    row_count: int
    columns: tuple[ColumnMeta, ...]

    def __post_init__(self) -> None:
        if not _IDENT_RE.match(self.name):
            raise ValidationError(f"bad table name: {self.name!r}")
        if self.row_count < 0:
            raise ValidationError(f"table {self.name}: row_count must be >= 0")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValidationError(f"table {self.name}: duplicate column names")
        for col in self.columns:
            if col.cardinality > max(self.row_count, 1):
                raise ValidationError(
                    f"column {self.name}.{col.name}: cardinality {col.cardinality} "
                    f"exceeds row_count {self.row_count}"
                )
            if col.histogram is not None:
                total = sum(freq for _, freq in col.histogram)
                if total != self.row_count:
                    raise ValidationError(
                        f"column {self.name}.{col.name}: histogram frequencies "
                        f"sum to {total}, expected {self.row_count}"
                    )

    def column(self, name: str) -> ColumnMeta:
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(f"{self.name}.{name}")


@dataclass(frozen=True)
class DatabaseSchema:
    tables: tuple[TableMeta, ...]

    def __post_init__(self) -> None:
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate table names")

    def table(self, name: str) -> TableMeta:
        for tab in self.tables:
            if tab.name == name:
                return tab
        raise KeyError(name)

    def has_column(self, table: str, column: str) -> bool:
        try:
            self.table(table).column(column)
        except KeyError:
            return False
        return True

    def column(self, table: str, column: str) -> ColumnMeta:
        return self.table(table).column(column)

    def column_count(self) -> int:
        return sum(len(t.columns) for t in self.tables)

    def total_table_storage_mb(self) -> float:
        """Raw table heap size estimate; basis for fractional budgets."""
        total_bytes = 0
        for tab in self.tables:
            row_width = sum(c.width_bytes for c in tab.columns)
            total_bytes += tab.row_count * row_width
        return total_bytes / 1_048_576.0


@dataclass(frozen=True)
class ColumnUsage:
    table: str
    column: str
    operator: OperatorClass

    def __post_init__(self) -> None:
        if not isinstance(self.operator, OperatorClass):
            raise ValidationError(f"unknown operator class: {self.operator!r}")


@dataclass(frozen=True)
class Query:
    id: str
    sql_text: str
    usages: tuple[ColumnUsage, ...] = ()
    base_cost: Optional[float] = None

    def __post_init__(self) -> None:
        if self.base_cost is not None and self.base_cost <= 0:
            raise ValidationError(f"query {self.id}: base_cost must be > 0")

    def tables(self) -> tuple[str, ...]:
        seen: list[str] = []
        for usage in self.usages:
            if usage.table not in seen:
                seen.append(usage.table)
        return tuple(seen)

    def column_operators(self) -> dict[tuple[str, str], frozenset[OperatorClass]]:
        """Operator set per distinct (table, column) used by this query."""
        acc: dict[tuple[str, str], set[OperatorClass]] = {}
        for usage in self.usages:
            acc.setdefault((usage.table, usage.column), set()).add(usage.operator)
        return {key: frozenset(ops) for key, ops in acc.items()}


@dataclass(frozen=True)
class Workload:
    queries: tuple[Query, ...]

    def __post_init__(self) -> None:
        if not self.queries:
            raise ValidationError("workload must contain at least one query")
        ids = [q.id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate query ids")


@dataclass(frozen=True)
class Index:
    table: str
    columns: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.columns:
            raise ValidationError("index needs at least one column")
        if len(set(self.columns)) != len(self.columns):
            raise ValidationError(f"index on {self.table}: duplicate columns")

    @property
    def leading_column(self) -> str:
        return self.columns[0]

    def validate_against(self, schema: DatabaseSchema) -> None:
        table = schema.table(self.table)
        for col in self.columns:
            table.column(col)


@dataclass(frozen=True)
class IndexConfiguration:
    indexes: tuple[Index, ...] = ()
    est_storage_mb: float = 0.0

    def __post_init__(self) -> None:
        keys = [canonical_key(idx) for idx in self.indexes]
        if len(set(keys)) != len(keys):
            raise ValidationError("configuration contains duplicate indexes")
        if self.est_storage_mb < 0:
            raise ValidationError("est_storage_mb must be >= 0")

    def keys(self) -> tuple[str, ...]:
        return tuple(canonical_key(idx) for idx in self.indexes)

    def with_index(self, index: Index, est_storage_mb: float) -> "IndexConfiguration":
        return IndexConfiguration(self.indexes + (index,), est_storage_mb)

    def on_table(self, table: str) -> tuple[Index, ...]:
        return tuple(idx for idx in self.indexes if idx.table == table)


@dataclass(frozen=True)
class Budget:
    total_mb: float
    used_mb: float = 0.0

    def __post_init__(self) -> None:
        if self.total_mb <= 0:
            raise ValidationError("budget total_mb must be > 0")
        if self.used_mb < 0:
            raise ValidationError("budget used_mb must be >= 0")

    @property
    def remaining_mb(self) -> float:
        return self.total_mb - self.used_mb

    def fits(self, extra_mb: float) -> bool:
        return self.used_mb + extra_mb <= self.total_mb

    def spend(self, extra_mb: float) -> "Budget":
        new_used = self.used_mb + extra_mb
        if new_used > self.total_mb:
            raise ValidationError(
                f"budget overrun: used {new_used:.6f} MB of {self.total_mb:.6f} MB"
            )
        return Budget(self.total_mb, new_used)

    def with_used(self, used_mb: float) -> "Budget":
        return Budget(self.total_mb, used_mb)


_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_KEY_RE = re.compile(r"^I\((C [A-Za-z_][\w]*\.[A-Za-z_][\w]*)(,C [A-Za-z_][\w]*\.[A-Za-z_][\w]*)*\)$")


def canonical_key(index: Index) -> str:
    """Stable textual identity, e.g. ``I(C orders.o_id,C orders.o_date)``.

    Column order is preserved, so indexes differing only in order get
    distinct keys.
    """
    parts = ",".join(f"C {index.table}.{col}" for col in index.columns)
    return f"I({parts})"


def index_from_canonical_key(key: str) -> Index:
    """Inverse of :func:`canonical_key`; raises ValidationError on bad input."""
    if not _KEY_RE.match(key):
        raise ValidationError(f"not a canonical index key: {key!r}")
    body = key[2:-1]
    tables: list[str] = []
    columns: list[str] = []
    for part in body.split(","):
        ref = part[2:]  # strip "C "
        table, col = ref.split(".", 1)
        tables.append(table)
        columns.append(col)
    if len(set(tables)) != 1:
        raise ValidationError(f"canonical key spans multiple tables: {key!r}")
    return Index(tables[0], tuple(columns))


def _expect(obj: dict[str, Any], key: str, context: str) -> Any:
    if key not in obj:
        raise ValidationError(f"{context}: missing field {key!r}")
    return obj[key]


def load_schema(document: str | bytes | dict[str, Any]) -> DatabaseSchema:
    """Parse and validate a schema document (JSON text or parsed object).

    Format: ``{"tables": [{"name", "rows", "columns": [{"name",
    "cardinality", "width_bytes", "min"?, "max"?, "histogram"?}]}]}``.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"schema document is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ValidationError("schema document must be a JSON object")
    tables_raw = _expect(document, "tables", "schema")
    if not isinstance(tables_raw, list):
        raise ValidationError("schema: 'tables' must be a list")
    tables = []
    for traw in tables_raw:
        tname = _expect(traw, "name", "table")
        rows = _expect(traw, "rows", f"table {tname}")
        cols_raw = _expect(traw, "columns", f"table {tname}")
        columns = []
        for craw in cols_raw:
            cname = _expect(craw, "name", f"table {tname} column")
            hist = craw.get("histogram")
            columns.append(
                ColumnMeta(
                    name=cname,
                    cardinality=int(_expect(craw, "cardinality", f"column {tname}.{cname}")),
                    width_bytes=int(_expect(craw, "width_bytes", f"column {tname}.{cname}")),
                    min_value=craw.get("min"),
                    max_value=craw.get("max"),
                    histogram=tuple((b, int(f)) for b, f in hist) if hist else None,
                )
            )
        tables.append(TableMeta(name=tname, row_count=int(rows), columns=tuple(columns)))
    return DatabaseSchema(tables=tuple(tables))


def schema_to_document(schema: DatabaseSchema) -> dict[str, Any]:
    """Inverse of :func:`load_schema` (used by the instance generator)."""
    tables = []
    for tab in schema.tables:
        cols = []
        for col in tab.columns:
            entry: dict[str, Any] = {
                "name": col.name,
                "cardinality": col.cardinality,
                "width_bytes": col.width_bytes,
            }
            if col.min_value is not None:
                entry["min"] = col.min_value
            if col.max_value is not None:
                entry["max"] = col.max_value
            if col.histogram is not None:
                entry["histogram"] = [[b, f] for b, f in col.histogram]
            cols.append(entry)
        tables.append({"name": tab.name, "rows": tab.row_count, "columns": cols})
    return {"tables": tables}
