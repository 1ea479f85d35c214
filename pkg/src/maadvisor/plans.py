"""Stylized query-plan trees for the regression indicator.

Synthetic mode has no real optimizer, so plans are derived from the cost
oracle: one scan leaf per referenced table (switching to an index scan
where a configured index applies, with the rewritten cost), a join chain
above, and a sort on top when the query orders or groups. The root cost
equals the oracle's query cost.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

from .model import (
    DatabaseSchema,
    Index,
    IndexConfiguration,
    OperatorClass,
    Query,
    ValidationError,
    Workload,
    canonical_key,
)
from .oracle import SyntheticCostOracle
from .synth import SyntheticInstanceSpec, generate_instance

PLAN_OPERATORS = (
    "SeqScan",
    "IndexScan",
    "IndexOnlyScan",
    "BitmapScan",
    "NestLoop",
    "HashJoin",
    "MergeJoin",
    "Sort",
    "Aggregate",
    "Hash",
    "Materialize",
    "Other",
)


@dataclass(frozen=True)
class PlanNode:
    operator: str
    table: Optional[str] = None
    column: Optional[str] = None
    est_cost: float = 0.0
    est_cardinality: float = 0.0
    children: tuple["PlanNode", ...] = ()

    def __post_init__(self) -> None:
        if self.operator not in PLAN_OPERATORS:
            raise ValidationError(f"unknown plan operator {self.operator!r}")
        if len(self.children) > 2:
            raise ValidationError("plan trees are binary")
        if self.est_cost < 0 or self.est_cardinality < 0:
            raise ValidationError("plan estimates must be non-negative")

    def size(self) -> int:
        return 1 + sum(child.size() for child in self.children)


@dataclass(frozen=True)
class LabeledPair:
    plans_before: tuple[PlanNode, ...]
    plans_after: tuple[PlanNode, ...]
    label: int  # -1 regression, +1 improvement

    def __post_init__(self) -> None:
        if len(self.plans_before) != len(self.plans_after):
            raise ValidationError("before/after plan counts differ")
        if self.label not in (-1, 1):
            raise ValidationError("label must be -1 or +1")


def _best_index_for_table(
    query: Query, table: str, config: IndexConfiguration, oracle: SyntheticCostOracle
) -> Optional[Index]:
    operators = query.column_operators()
    best: Optional[tuple[float, Index]] = None
    for index in config.on_table(table):
        factor = oracle.index_factor(index, operators)
        if factor is None:
            continue
        if best is None or factor < best[0]:
            best = (factor, index)
    return best[1] if best else None


def build_query_plan(
    query: Query,
    config: IndexConfiguration,
    schema: DatabaseSchema,
    oracle: SyntheticCostOracle,
) -> PlanNode:
    """Deterministic plan skeleton whose root carries the oracle cost."""
    total = oracle.estimate_query_cost(query, config)
    tables = query.tables()
    if not tables:
        return PlanNode("Other", est_cost=total, est_cardinality=1.0)
    assert query.base_cost is not None
    share = query.base_cost / len(tables)
    operators = query.column_operators()
    leaves = []
    for table in tables:
        rows = schema.table(table).row_count
        index = _best_index_for_table(query, table, config, oracle)
        if index is not None:
            factor = oracle.index_factor(index, operators)
            sel = 1.0 / max(oracle.estimated_cardinality(table, index.leading_column), 1e-12)
            leaves.append(
                PlanNode(
                    "IndexScan",
                    table=table,
                    column=index.leading_column,
                    est_cost=share * (factor if factor is not None else 1.0),
                    est_cardinality=rows * min(sel, 1.0),
                )
            )
        else:
            used = sorted(col for (tab, col) in operators if tab == table)
            leaves.append(
                PlanNode(
                    "SeqScan",
                    table=table,
                    column=used[0] if used else None,
                    est_cost=share,
                    est_cardinality=float(rows),
                )
            )
    has_join = any(OperatorClass.JOIN in ops for ops in operators.values())
    node = leaves[0]
    for leaf in leaves[1:]:
        node = PlanNode(
            "HashJoin" if has_join else "NestLoop",
            est_cost=node.est_cost + leaf.est_cost,
            est_cardinality=max(node.est_cardinality, leaf.est_cardinality),
            children=(node, leaf),
        )
    if any(OperatorClass.SORT_GROUP in ops for ops in operators.values()):
        node = PlanNode(
            "Sort",
            est_cost=node.est_cost,
            est_cardinality=node.est_cardinality,
            children=(node,),
        )
    return replace(node, est_cost=total)


def build_workload_plans(
    workload: Workload,
    config: IndexConfiguration,
    schema: DatabaseSchema,
    oracle: SyntheticCostOracle,
) -> tuple[PlanNode, ...]:
    return tuple(build_query_plan(q, config, schema, oracle) for q in workload.queries)


# -- labeled pair generation --------------------------------------------------


def _pair_spec(seed: int) -> SyntheticInstanceSpec:
    return SyntheticInstanceSpec(
        seed=seed,
        table_count=(1, 2),
        columns_per_table=(2, 4),
        row_range=(500, 200_000),
        low_cardinality_share=0.4,
        query_count=(2, 4),
        usages_per_query=(1, 3),
    )


def generate_labeled_pairs(
    count: int, seed: int, regression_share: float = 0.4
) -> list[LabeledPair]:
    """Seeded stream of (plans before, plans after, true-cost label) pairs.

    Each pair adds one single-column index on top of a random starting
    configuration; the label is the sign of the true workload cost change,
    so shadowed or barely useful additions come out as regressions. A class
    quota keeps the stream balanced enough to train on (raw sampling is
    dominated by improvements).
    """
    rng = random.Random(seed)
    want = {-1: int(round(count * regression_share))}
    want[1] = count - want[-1]
    got = {-1: 0, 1: 0}
    pairs: list[LabeledPair] = []
    attempt = 0
    while len(pairs) < count:
        attempt += 1
        schema, workload = generate_instance(_pair_spec(seed * 1_000_003 + attempt))
        oracle = SyntheticCostOracle(schema)
        usable = sorted(
            {(u.table, u.column) for q in workload.queries for u in q.usages}
        )
        if not usable:
            continue
        base_indexes: list[Index] = []
        if rng.random() < 0.65:
            table, column = usable[rng.randrange(len(usable))]
            base_indexes.append(Index(table, (column,)))
        base_heads = {(i.table, i.columns[0]) for i in base_indexes}
        remaining = [tc for tc in usable if tc not in base_heads]
        if not remaining:
            continue
        # shadowed same-table additions are the main source of regressions
        same_table = [tc for tc in remaining if any(tc[0] == t for t, _ in base_heads)]
        pool = same_table if same_table and rng.random() < 0.5 else remaining
        table, column = pool[rng.randrange(len(pool))]
        added = Index(table, (column,))
        before_cfg = IndexConfiguration(tuple(base_indexes), 0.0)
        after_cfg = IndexConfiguration(tuple(base_indexes) + (added,), 0.0)
        true_before = oracle.true_workload_cost(workload, before_cfg)
        true_after = oracle.true_workload_cost(workload, after_cfg)
        if true_before == true_after:
            continue  # index touches no query; nothing to learn
        label = 1 if true_after < true_before else -1
        if got[label] >= want[label]:
            continue
        got[label] += 1
        pairs.append(
            LabeledPair(
                plans_before=build_workload_plans(workload, before_cfg, schema, oracle),
                plans_after=build_workload_plans(workload, after_cfg, schema, oracle),
                label=label,
            )
        )
    return pairs


# -- JSON round trip ----------------------------------------------------------


def plan_to_dict(node: PlanNode) -> dict[str, Any]:
    out: dict[str, Any] = {
        "op": node.operator,
        "est_cost": node.est_cost,
        "est_cardinality": node.est_cardinality,
    }
    if node.table is not None:
        out["table"] = node.table
    if node.column is not None:
        out["column"] = node.column
    if node.children:
        out["children"] = [plan_to_dict(c) for c in node.children]
    return out


def plan_from_dict(raw: dict[str, Any]) -> PlanNode:
    return PlanNode(
        operator=raw["op"],
        table=raw.get("table"),
        column=raw.get("column"),
        est_cost=float(raw["est_cost"]),
        est_cardinality=float(raw["est_cardinality"]),
        children=tuple(plan_from_dict(c) for c in raw.get("children", ())),
    )


def pairs_to_json(pairs: Sequence[LabeledPair]) -> str:
    return json.dumps(
        {
            "pairs": [
                {
                    "before": [plan_to_dict(p) for p in pair.plans_before],
                    "after": [plan_to_dict(p) for p in pair.plans_after],
                    "label": pair.label,
                }
                for pair in pairs
            ]
        }
    )


def pairs_from_json(text: str) -> list[LabeledPair]:
    raw = json.loads(text)
    return [
        LabeledPair(
            plans_before=tuple(plan_from_dict(p) for p in entry["before"]),
            plans_after=tuple(plan_from_dict(p) for p in entry["after"]),
            label=int(entry["label"]),
        )
        for entry in raw["pairs"]
    ]
