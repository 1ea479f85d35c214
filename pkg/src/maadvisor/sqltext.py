"""Column-usage extraction from SELECT statements.

Deliberately not a full SQL front end: the extractor covers the query
shapes the advisor consumes (single SELECTs with WHERE predicates,
explicit JOIN ... ON plus implicit equi-joins, GROUP BY, ORDER BY, and
nested subqueries). Anything it cannot classify is skipped with a
warning rather than an error; a statement without a SELECT is an error.
"""

from __future__ import annotations

import logging
import re
from typing import Any, Iterable, Optional, Sequence

from .model import (
    ColumnUsage,
    DatabaseSchema,
    OperatorClass,
    Query,
    ValidationError,
    Workload,
)

log = logging.getLogger(__name__)

_STRING_RE = re.compile(r"'(?:[^']|'')*'")
_FROM_ITEM_RE = re.compile(
    r"\b(?:from|join)\s+([A-Za-z_]\w*)(?:\s+(?:as\s+)?([A-Za-z_]\w*))?",
    re.IGNORECASE,
)
_FROM_COMMA_RE = re.compile(
    r",\s*([A-Za-z_]\w*)(?:\s+(?:as\s+)?([A-Za-z_]\w*))?"
)
_COLREF = r"(?<![\w.])(?:([A-Za-z_]\w*)\.)?([A-Za-z_]\w*)"
_OPERAND = r"('(?:[^']|'')*'|[-+]?\d+(?:\.\d+)?|[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)?)"
_CMP_RE = re.compile(
    rf"{_COLREF}\s*(=|<=|>=|<>|!=|<|>)\s*{_OPERAND}",
    re.IGNORECASE,
)
_BETWEEN_RE = re.compile(rf"{_COLREF}\s+between\s+", re.IGNORECASE)
_LIKE_RE = re.compile(rf"{_COLREF}\s+(?:not\s+)?like\s+('(?:[^']|'')*'|\S+)", re.IGNORECASE)
_IN_RE = re.compile(rf"{_COLREF}\s+(?:not\s+)?in\s*\(", re.IGNORECASE)
_COLREF_ONLY_RE = re.compile(rf"^{_COLREF}$")
_RESERVED = {
    "select", "from", "where", "join", "inner", "left", "right", "outer",
    "full", "cross", "on", "and", "or", "not", "group", "order", "by",
    "having", "limit", "offset", "as", "asc", "desc", "between", "like",
    "in", "is", "null", "distinct", "union", "all", "exists", "case",
    "when", "then", "else", "end",
}

# SQL keywords that terminate the clause being scanned.
_CLAUSE_BOUNDARY = re.compile(
    r"\b(where|group\s+by|order\s+by|having|limit|offset|union)\b", re.IGNORECASE
)


class SqlExtractionError(ValidationError):
    """Raised when a statement has no extractable SELECT."""


def _mask_strings(sql: str) -> str:
    """Blank out string literals so their content can't look like columns."""
    return _STRING_RE.sub(lambda m: "'" + "x" * (len(m.group(0)) - 2) + "'", sql)


def _split_statements(sql: str) -> list[str]:
    parts = [p.strip() for p in sql.split(";")]
    return [p for p in parts if p]


def _alias_map(sql: str) -> dict[str, str]:
    """alias (or bare table name) -> table name, for FROM/JOIN items."""
    aliases: dict[str, str] = {}

    def add(table: str, alias: Optional[str]) -> None:
        if table.lower() in _RESERVED:
            return
        aliases.setdefault(table, table)
        if alias and alias.lower() not in _RESERVED:
            aliases[alias] = table

    for match in _FROM_ITEM_RE.finditer(sql):
        add(match.group(1), match.group(2))
        # comma-separated FROM lists: scan forward until a clause keyword
        tail = sql[match.end():]
        boundary = _CLAUSE_BOUNDARY.search(tail)
        join_kw = re.search(r"\bjoin\b", tail, re.IGNORECASE)
        stop = len(tail)
        for m2 in (boundary, join_kw):
            if m2:
                stop = min(stop, m2.start())
        for cmatch in _FROM_COMMA_RE.finditer(tail[:stop]):
            add(cmatch.group(1), cmatch.group(2))
    return aliases


def _resolve(
    qualifier: Optional[str],
    column: str,
    aliases: dict[str, str],
    schema: DatabaseSchema,
) -> Optional[tuple[str, str]]:
    """Map a (possibly qualified) column reference onto a schema column."""
    if column.lower() in _RESERVED:
        return None
    if qualifier is not None:
        table = aliases.get(qualifier)
        if table is None or not schema.has_column(table, column):
            return None
        return table, column
    owners = [
        table
        for table in dict.fromkeys(aliases.values())
        if schema.has_column(table, column)
    ]
    if len(owners) == 1:
        return owners[0], column
    if len(owners) > 1:
        log.warning("ambiguous column %r (tables %s); dropped", column, owners)
    return None


def _is_column_operand(text: str, aliases: dict[str, str], schema: DatabaseSchema) -> Optional[tuple[str, str]]:
    match = _COLREF_ONLY_RE.match(text.strip())
    if not match:
        return None
    return _resolve(match.group(1), match.group(2), aliases, schema)


def _clause(sql: str, keyword: str) -> Optional[str]:
    pattern = re.compile(rf"\b{keyword}\b(.*?)(?:\b(?:where|group\s+by|order\s+by|having|limit|offset|union)\b|$)",
                         re.IGNORECASE | re.DOTALL)
    match = pattern.search(sql)
    return match.group(1) if match else None


def extract_column_usages(sql: str, schema: DatabaseSchema) -> list[ColumnUsage]:
    """Pull (table, column, operator) usages out of one SELECT statement.

    References to columns the schema does not know are dropped with a
    warning; so are constructs outside the supported scope.
    """
    masked = _mask_strings(sql)
    if not re.search(r"\bselect\b", masked, re.IGNORECASE):
        raise SqlExtractionError(f"no SELECT found in statement: {sql[:80]!r}")
    aliases = _alias_map(masked)
    found: set[ColumnUsage] = set()

    def add(ref: Optional[tuple[str, str]], op: OperatorClass) -> None:
        if ref is not None:
            found.add(ColumnUsage(ref[0], ref[1], op))

    # comparison predicates, including implicit and explicit equi-joins
    for match in _CMP_RE.finditer(masked):
        qual, col, op, rhs = match.groups()
        left = _resolve(qual, col, aliases, schema)
        rhs_col = _is_column_operand(rhs, aliases, schema)
        if op == "=" and rhs_col is not None and left is not None:
            add(left, OperatorClass.JOIN)
            add(rhs_col, OperatorClass.JOIN)
        elif op == "=":
            add(left, OperatorClass.EQ)
        elif op in ("<", ">", "<=", ">="):
            if rhs_col is not None:
                add(rhs_col, OperatorClass.RANGE)
            add(left, OperatorClass.RANGE)
        # <> / != do not benefit from an index; skipped

    for match in _BETWEEN_RE.finditer(masked):
        add(_resolve(match.group(1), match.group(2), aliases, schema), OperatorClass.RANGE)

    for match in _LIKE_RE.finditer(masked):
        pattern = sql[match.start(3):match.end(3)]  # unmasked literal
        if pattern.startswith("'") and pattern[1:2] == "%":
            log.warning("LIKE pattern without literal prefix is not indexable: %s", pattern)
            continue
        add(_resolve(match.group(1), match.group(2), aliases, schema), OperatorClass.RANGE)

    for match in _IN_RE.finditer(masked):
        add(_resolve(match.group(1), match.group(2), aliases, schema), OperatorClass.EQ)

    for keyword in ("group\\s+by", "order\\s+by"):
        clause = _clause(masked, keyword)
        if clause is None:
            continue
        for item in clause.split(","):
            item = item.strip()
            item = re.sub(r"\s+(asc|desc)$", "", item, flags=re.IGNORECASE)
            if not item:
                continue
            ref = _is_column_operand(item, aliases, schema)
            if ref is None:
                if not item.isdigit():
                    log.warning("unsupported %s item skipped: %r",
                                keyword.replace("\\s+", " ").upper(), item)
                continue
            add(ref, OperatorClass.SORT_GROUP)

    return sorted(found, key=lambda u: (u.table, u.column, u.operator.value))


def load_workload(
    sql_texts: Sequence[str],
    schema: DatabaseSchema,
    ids: Optional[Sequence[str]] = None,
    base_costs: Optional[Sequence[Optional[float]]] = None,
) -> Workload:
    """Build a workload from raw SQL statements.

    Each statement must contain a single SELECT. Queries with no
    indexable column are kept (with a warning) so workload cost stays
    defined for them.
    """
    if not sql_texts:
        raise ValidationError("empty workload")
    if ids is None:
        ids = [f"q{i + 1}" for i in range(len(sql_texts))]
    if base_costs is None:
        base_costs = [None] * len(sql_texts)
    queries = []
    for qid, sql, cost in zip(ids, sql_texts, base_costs):
        statements = _split_statements(sql)
        if len(statements) != 1:
            raise SqlExtractionError(f"query {qid}: expected a single statement")
        usages = extract_column_usages(statements[0], schema)
        if not usages:
            log.warning("query %s has no indexable column", qid)
        queries.append(Query(id=qid, sql_text=sql, usages=tuple(usages), base_cost=cost))
    return Workload(queries=tuple(queries))


def load_workload_document(document: str | bytes | list[Any], schema: DatabaseSchema) -> Workload:
    """Load the workload file format: a JSON array of {id, sql, base_cost?}."""
    import json

    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"workload document is not valid JSON: {exc}") from exc
    if not isinstance(document, list):
        raise ValidationError("workload document must be a JSON array")
    ids, sqls, costs = [], [], []
    for entry in document:
        if not isinstance(entry, dict) or "id" not in entry or "sql" not in entry:
            raise ValidationError("workload entries need 'id' and 'sql' fields")
        ids.append(str(entry["id"]))
        sqls.append(entry["sql"])
        costs.append(entry.get("base_cost"))
    return load_workload(sqls, schema, ids=ids, base_costs=costs)
