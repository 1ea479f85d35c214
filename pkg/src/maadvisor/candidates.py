"""Workload representation: per-query column information merged into one
candidate per distinct column.

The merge is what keeps prompt/context size bounded by the schema's
column count no matter how many queries the workload has. Utilities are
always accumulated per query, in workload order, so the merged value is
bit-identical to a brute-force per-query sum.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from .model import (
    Budget,
    ColumnMeta,
    DatabaseSchema,
    Index,
    IndexConfiguration,
    OperatorClass,
    Query,
    Workload,
    canonical_key,
)
from .oracle import CostOracle, SyntheticCostOracle

_OP_ORDER = {op: i for i, op in enumerate(OperatorClass)}


@dataclass(frozen=True)
class ColumnProfile:
    """Distribution digest shown to policies: bounds plus bucket count."""

    min_value: Optional[float] = None
    max_value: Optional[float] = None
    bucket_count: int = 0

    @classmethod
    def from_meta(cls, meta: ColumnMeta) -> "ColumnProfile":
        return cls(
            min_value=meta.min_value,
            max_value=meta.max_value,
            bucket_count=len(meta.histogram) if meta.histogram else 0,
        )

    def render(self) -> str:
        if self.min_value is None or self.max_value is None:
            return "n/a"
        return f"{self.min_value:g}…{self.max_value:g}, {self.bucket_count} buckets"


@dataclass(frozen=True)
class QueryColumnInfo:
    query_id: str
    table: str
    column: str
    operators: frozenset[OperatorClass]
    est_cardinality: float
    distribution: ColumnProfile
    est_storage_mb: float
    utility: float


@dataclass(frozen=True)
class ColumnCandidate:
    name: str  # "Table.Column"
    operators: frozenset[OperatorClass]
    est_cardinality: float
    distribution: ColumnProfile
    est_storage_mb: float
    est_utility: float

    @property
    def table(self) -> str:
        return self.name.split(".", 1)[0]

    @property
    def column(self) -> str:
        return self.name.split(".", 1)[1]

    def as_index(self) -> Index:
        return Index(self.table, (self.column,))


def compute_index_utility(
    query: Query,
    index: Index,
    config: IndexConfiguration,
    oracle: CostOracle,
) -> float:
    """Cost saved by adding `index` on top of `config`, per MB of its storage.

    Negative when the oracle reports a cost increase (possible under
    perturbed statistics).
    """
    storage = oracle.estimate_index_storage(index)
    if storage <= 0:
        raise ValueError(f"index {canonical_key(index)} has zero storage estimate")
    before = oracle.estimate_query_cost(query, config)
    extended = IndexConfiguration(config.indexes + (index,), config.est_storage_mb + storage)
    after = oracle.estimate_query_cost(query, extended)
    return (before - after) / storage


def build_query_infos(
    workload: Workload,
    schema: DatabaseSchema,
    oracle: CostOracle,
) -> list[QueryColumnInfo]:
    """One info per (query, distinct column used by it); utilities are
    measured against the empty configuration."""
    empty = IndexConfiguration()
    infos: list[QueryColumnInfo] = []
    for query in workload.queries:
        for (table, column), ops in sorted(query.column_operators().items()):
            meta = schema.column(table, column)
            index = Index(table, (column,))
            storage = oracle.estimate_index_storage(index)
            if storage <= 0:
                continue  # zero-row table; nothing to index
            infos.append(
                QueryColumnInfo(
                    query_id=query.id,
                    table=table,
                    column=column,
                    operators=ops,
                    est_cardinality=float(meta.cardinality),
                    distribution=ColumnProfile.from_meta(meta),
                    est_storage_mb=storage,
                    utility=compute_index_utility(query, index, empty, oracle),
                )
            )
    return infos


def merge_candidates(infos: Sequence[QueryColumnInfo]) -> list[ColumnCandidate]:
    """Collapse per-query infos into one candidate per distinct column.

    Operators are unioned; utilities are summed in info order; the
    remaining fields are schema-derived and identical across queries.
    """
    order: list[tuple[str, str]] = []
    grouped: dict[tuple[str, str], list[QueryColumnInfo]] = {}
    for info in infos:
        key = (info.table, info.column)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(info)
    candidates = []
    for key in order:
        group = grouped[key]
        ops: frozenset[OperatorClass] = frozenset()
        utility = 0.0
        for info in group:
            ops |= info.operators
            utility += info.utility
        first = group[0]
        candidates.append(
            ColumnCandidate(
                name=f"{first.table}.{first.column}",
                operators=ops,
                est_cardinality=first.est_cardinality,
                distribution=first.distribution,
                est_storage_mb=first.est_storage_mb,
                est_utility=utility,
            )
        )
    return candidates


def _marginal_utility(
    workload: Workload,
    base_costs: Sequence[float],
    candidate_config: IndexConfiguration,
    storage_mb: float,
    oracle: CostOracle,
) -> float:
    # accumulated per query, same float order as the initial merge
    total = 0.0
    for query, before in zip(workload.queries, base_costs):
        total += (before - oracle.estimate_query_cost(query, candidate_config)) / storage_mb
    return total


def refresh_candidates(
    candidates: Sequence[ColumnCandidate],
    config: IndexConfiguration,
    workload: Workload,
    oracle: CostOracle,
    max_width: int = 3,
) -> list[ColumnCandidate]:
    """Recompute utilities as marginal gains relative to `config`.

    A candidate that already heads an index is spent: utility 0. For the
    rest, the utility is the best per-MB gain achievable by bringing the
    column in, either as a fresh single-column index or appended to an
    existing index on its table (the move a later combination step can
    realize). With an empty configuration this reduces exactly to the
    initial merged utilities.
    """
    heads = {(idx.table, idx.leading_column) for idx in config.indexes}
    base_costs = [oracle.estimate_query_cost(q, config) for q in workload.queries]
    refreshed = []
    for cand in candidates:
        if (cand.table, cand.column) in heads:
            refreshed.append(replace(cand, est_utility=0.0))
            continue
        best = _marginal_utility(
            workload,
            base_costs,
            IndexConfiguration(config.indexes + (cand.as_index(),), 0.0),
            cand.est_storage_mb,
            oracle,
        )
        for idx in config.on_table(cand.table):
            if cand.column in idx.columns or len(idx.columns) >= max_width:
                continue
            widened = Index(idx.table, idx.columns + (cand.column,))
            others = tuple(i for i in config.indexes if i is not idx)
            utility = _marginal_utility(
                workload,
                base_costs,
                IndexConfiguration(others + (widened,), 0.0),
                cand.est_storage_mb,
                oracle,
            )
            if utility > best:
                best = utility
        refreshed.append(replace(cand, est_utility=best))
    return refreshed


def sort_candidates(candidates: Iterable[ColumnCandidate]) -> list[ColumnCandidate]:
    """Descending utility, name as tie-break: the presentation order."""
    return sorted(candidates, key=lambda c: (-c.est_utility, c.name))


def render_operators(ops: frozenset[OperatorClass]) -> str:
    return ",".join(op.value for op in sorted(ops, key=lambda o: _OP_ORDER[o]))


def render_candidates(
    candidates: Sequence[ColumnCandidate],
    budget: Budget,
    config: IndexConfiguration,
) -> str:
    """Deterministic text block consumed by policy prompts and the CLI."""
    lines = [f"column candidates ({len(candidates)}):"]
    for cand in sort_candidates(candidates):
        flag = " | flag=no-gain" if cand.est_utility <= 0 else ""
        lines.append(
            f"  {cand.name} | ops={render_operators(cand.operators)}"
            f" | card={cand.est_cardinality:g}"
            f" | dist={cand.distribution.render()}"
            f" | storage={cand.est_storage_mb:.3f} MB"
            f" | utility={cand.est_utility:.1f}{flag}"
        )
    lines.append(f"budget: used {budget.used_mb:.3f} MB of {budget.total_mb:.3f} MB")
    if config.indexes:
        lines.append("current indexes: " + "; ".join(config.keys()))
    else:
        lines.append("current indexes: (none)")
    return "\n".join(lines) + "\n"
