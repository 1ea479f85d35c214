import pytest

from maadvisor.model import Index, IndexConfiguration, ValidationError
from maadvisor.plans import (
    LabeledPair,
    PlanNode,
    build_query_plan,
    build_workload_plans,
    generate_labeled_pairs,
    pairs_from_json,
    pairs_to_json,
    plan_from_dict,
    plan_to_dict,
)

I_ID = Index("orders", ("o_id",))


def cfg(*indexes):
    return IndexConfiguration(tuple(indexes), 0.0)


def test_plan_root_cost_matches_oracle(s1_schema, s1_workload, s1_oracle):
    q1 = s1_workload.queries[0]
    plan = build_query_plan(q1, cfg(), s1_schema, s1_oracle)
    assert plan.est_cost == s1_oracle.estimate_query_cost(q1, cfg())
    with_index = build_query_plan(q1, cfg(I_ID), s1_schema, s1_oracle)
    assert with_index.est_cost == s1_oracle.estimate_query_cost(q1, cfg(I_ID))


def test_plan_switches_scan_operator(s1_schema, s1_workload, s1_oracle):
    q1 = s1_workload.queries[0]

    def scan_ops(node):
        if not node.children:
            return [node.operator]
        return [op for child in node.children for op in scan_ops(child)]

    without = build_query_plan(q1, cfg(), s1_schema, s1_oracle)
    with_index = build_query_plan(q1, cfg(I_ID), s1_schema, s1_oracle)
    assert scan_ops(without) == ["SeqScan"]
    assert scan_ops(with_index) == ["IndexScan"]


def test_plan_has_sort_for_sort_group(s1_schema, s1_workload, s1_oracle):
    q2 = s1_workload.queries[1]  # ORDER BY query
    plan = build_query_plan(q2, cfg(), s1_schema, s1_oracle)
    assert plan.operator == "Sort"


def test_plans_are_binary_and_finite(s1_schema, s1_workload, s1_oracle):
    for plan in build_workload_plans(s1_workload, cfg(I_ID), s1_schema, s1_oracle):
        stack = [plan]
        while stack:
            node = stack.pop()
            assert len(node.children) <= 2
            stack.extend(node.children)


def test_plan_node_validation():
    with pytest.raises(ValidationError):
        PlanNode("FullScan")
    with pytest.raises(ValidationError):
        PlanNode("SeqScan", est_cost=-1)
    kids = tuple(PlanNode("SeqScan", est_cost=1, est_cardinality=1) for _ in range(3))
    with pytest.raises(ValidationError):
        PlanNode("HashJoin", est_cost=1, est_cardinality=1, children=kids)


def test_labeled_pair_validation():
    node = PlanNode("SeqScan", est_cost=1, est_cardinality=1)
    with pytest.raises(ValidationError):
        LabeledPair((node,), (node, node), 1)
    with pytest.raises(ValidationError):
        LabeledPair((node,), (node,), 0)


def test_generate_labeled_pairs_deterministic_and_balanced():
    first = generate_labeled_pairs(40, seed=5)
    second = generate_labeled_pairs(40, seed=5)
    assert first == second
    labels = [p.label for p in first]
    assert labels.count(-1) == 16  # 40% regression quota
    assert labels.count(1) == 24
    for pair in first:
        assert len(pair.plans_before) == len(pair.plans_after)


def test_pairs_json_round_trip():
    pairs = generate_labeled_pairs(6, seed=2)
    text = pairs_to_json(pairs)
    assert pairs_from_json(text) == pairs


def test_plan_dict_round_trip(s1_schema, s1_workload, s1_oracle):
    plan = build_query_plan(s1_workload.queries[1], cfg(I_ID), s1_schema, s1_oracle)
    assert plan_from_dict(plan_to_dict(plan)) == plan
