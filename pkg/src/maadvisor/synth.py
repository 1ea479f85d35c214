"""Seeded synthetic instances: schemas plus workloads whose SQL parses
back to exactly the usages it was generated from."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

from .model import (
    DatabaseSchema,
    OperatorClass,
    Workload,
    load_schema,
    schema_to_document,
)
from .sqltext import load_workload

_WIDTHS = (1, 2, 4, 8)
_OPERATOR_WEIGHTS = (
    (OperatorClass.EQ, 0.35),
    (OperatorClass.RANGE, 0.25),
    (OperatorClass.JOIN, 0.2),
    (OperatorClass.SORT_GROUP, 0.2),
)


@dataclass(frozen=True)
class SyntheticInstanceSpec:
    seed: int
    table_count: tuple[int, int] = (1, 3)
    columns_per_table: tuple[int, int] = (2, 5)
    row_range: tuple[int, int] = (1_000, 1_000_000)
    low_cardinality_share: float = 0.25
    query_count: tuple[int, int] = (3, 6)
    usages_per_query: tuple[int, int] = (1, 4)
    base_cost_range: tuple[float, float] = (50.0, 500.0)
    histogram_share: float = 0.25


def _log_uniform_int(rng: random.Random, lo: int, hi: int) -> int:
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


def _pick_operator(rng: random.Random) -> OperatorClass:
    roll = rng.random()
    acc = 0.0
    for op, weight in _OPERATOR_WEIGHTS:
        acc += weight
        if roll < acc:
            return op
    return _OPERATOR_WEIGHTS[-1][0]


def _histogram(rng: random.Random, rows: int, buckets: int) -> list[list[int]]:
    cuts = sorted(rng.sample(range(1, rows), buckets - 1)) if rows > buckets else []
    bounds = [0] + cuts + [rows]
    freqs = [bounds[i + 1] - bounds[i] for i in range(len(bounds) - 1)]
    return [[(i + 1) * 10, f] for i, f in enumerate(freqs)]


def _schema_document(spec: SyntheticInstanceSpec, rng: random.Random) -> dict:
    tables = []
    for t in range(rng.randint(*spec.table_count)):
        rows = _log_uniform_int(rng, *spec.row_range)
        columns = []
        for c in range(rng.randint(*spec.columns_per_table)):
            if rng.random() < spec.low_cardinality_share:
                cardinality = rng.randint(1, min(20, rows))
            else:
                cardinality = rng.randint(1, rows)
            entry = {
                "name": f"c{c}",
                "cardinality": cardinality,
                "width_bytes": rng.choice(_WIDTHS),
                "min": 0,
                "max": cardinality,
            }
            if rng.random() < spec.histogram_share and rows >= 8:
                entry["histogram"] = _histogram(rng, rows, 4)
            columns.append(entry)
        tables.append({"name": f"t{t}", "rows": rows, "columns": columns})
    return {"tables": tables}


def _query_sql(
    spec: SyntheticInstanceSpec, rng: random.Random, schema: DatabaseSchema
) -> str:
    n_usages = rng.randint(*spec.usages_per_query)
    eq_parts: list[str] = []
    join_parts: list[str] = []
    order_parts: list[str] = []
    tables_used: list[str] = []

    def touch(table: str) -> None:
        if table not in tables_used:
            tables_used.append(table)

    for _ in range(n_usages):
        table = rng.choice(schema.tables)
        column = rng.choice(table.columns)
        op = _pick_operator(rng)
        if op is OperatorClass.JOIN and len(schema.tables) >= 2:
            others = [t for t in schema.tables if t.name != table.name]
            partner = rng.choice(others)
            partner_col = rng.choice(partner.columns)
            touch(table.name)
            touch(partner.name)
            join_parts.append(
                f"{table.name}.{column.name} = {partner.name}.{partner_col.name}"
            )
            continue
        touch(table.name)
        if op is OperatorClass.EQ or op is OperatorClass.JOIN:
            eq_parts.append(f"{table.name}.{column.name} = {rng.randint(0, column.cardinality)}")
        elif op is OperatorClass.RANGE:
            eq_parts.append(f"{table.name}.{column.name} > {rng.randint(0, column.cardinality)}")
        else:
            ref = f"{table.name}.{column.name}"
            if ref not in order_parts:
                order_parts.append(ref)

    if not tables_used:
        tables_used.append(rng.choice(schema.tables).name)
    sql = "SELECT * FROM " + ", ".join(tables_used)
    where = join_parts + eq_parts
    if where:
        sql += " WHERE " + " AND ".join(where)
    if order_parts:
        sql += " ORDER BY " + ", ".join(order_parts)
    return sql


def generate_instance(spec: SyntheticInstanceSpec) -> tuple[DatabaseSchema, Workload]:
    """Deterministic (schema, workload) pair for a seed.

    The workload is built by parsing the generated SQL, so in-memory
    instances and file round-trips agree exactly.
    """
    rng = random.Random(spec.seed)
    schema = load_schema(_schema_document(spec, rng))
    sqls, costs = [], []
    for _ in range(rng.randint(*spec.query_count)):
        sqls.append(_query_sql(spec, rng, schema))
        costs.append(round(rng.uniform(*spec.base_cost_range), 2))
    workload = load_workload(sqls, schema, base_costs=costs)
    return schema, workload


def write_instance(spec: SyntheticInstanceSpec, out_dir: str | Path) -> tuple[Path, Path]:
    """Emit schema.json / workload.json loadable by the file loaders."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(spec.seed)
    schema = load_schema(_schema_document(spec, rng))
    entries = []
    for i in range(rng.randint(*spec.query_count)):
        sql = _query_sql(spec, rng, schema)
        cost = round(rng.uniform(*spec.base_cost_range), 2)
        entries.append({"id": f"q{i + 1}", "sql": sql, "base_cost": cost})
    schema_path = out / "schema.json"
    workload_path = out / "workload.json"
    schema_path.write_text(json.dumps(schema_to_document(schema), indent=2) + "\n")
    workload_path.write_text(json.dumps(entries, indent=2) + "\n")
    return schema_path, workload_path
