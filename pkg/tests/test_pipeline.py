import pytest

from maadvisor.model import (
    Budget,
    ColumnUsage,
    Index,
    IndexConfiguration,
    OperatorClass,
    Query,
    Workload,
    load_schema,
)
from maadvisor.oracle import OracleError, SyntheticCostOracle
from maadvisor.pipeline import (
    PipelineAborted,
    PipelineConfig,
    PipelineState,
    RecommendationResult,
    combine_indexes,
    revise_indexes,
    run_pipeline,
    trace_to_jsonl,
    validate_trace,
)
from maadvisor.policy import (
    ActionKind,
    AgentAction,
    AgentRole,
    PolicyResponse,
    RuleBackend,
    Suggestion,
)
from maadvisor.rules import CombinationRule, load_experience_rules


class ScriptedBackend:
    """Pops scripted decisions per role; falls back to the rule script."""

    def __init__(self, **scripts):
        self._scripts = {AgentRole[k.upper()]: list(v) for k, v in scripts.items()}
        self._rule = RuleBackend()

    def decide(self, request):
        queue = self._scripts.get(request.agent_role)
        if queue:
            return PolicyResponse(decision=queue.pop(0))
        return self._rule.decide(request)


def actions(result: RecommendationResult):
    return [entry.action.kind for entry in result.trace]


def test_s1_rule_trace(s1_schema, s1_workload, s1_oracle, s1_budget):
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, RuleBackend())
    assert actions(result) == [
        ActionKind.SELECTION,
        ActionKind.SELECTION,
        ActionKind.COMBINATION,
        ActionKind.REVISION,
        ActionKind.STOP,
    ]
    assert result.trace[0].config_keys == ("I(C orders.o_id)",)
    assert result.trace[1].config_keys == ("I(C orders.o_id)", "I(C orders.o_date)")
    assert result.final_config.keys() == ("I(C orders.o_id,C orders.o_date)",)
    assert result.budget.used_mb == 10000 * 16 / 1_048_576  # 0.15259 MB
    assert result.est_cost_before == 300
    assert result.est_cost_after == pytest.approx(41.42286432, abs=1e-8)
    assert result.exceptions == 0
    validate_trace(result.trace)


def test_budget_respected_at_every_step(s1_schema, s1_workload, s1_oracle, s1_budget):
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, RuleBackend())
    for entry in result.trace:
        assert entry.used_mb <= s1_budget.total_mb


def test_unaffordable_budget_yields_stop_only(s1_schema, s1_workload, s1_oracle):
    result = run_pipeline(s1_workload, s1_schema, Budget(total_mb=1e-9), s1_oracle, RuleBackend())
    assert actions(result) == [ActionKind.STOP]
    assert result.final_config.indexes == ()


def test_substep_cap_bounds_trace(s1_schema, s1_workload, s1_oracle, s1_budget):
    result = run_pipeline(
        s1_workload, s1_schema, s1_budget, s1_oracle, RuleBackend(),
        PipelineConfig(max_substeps=1),
    )
    assert len(result.trace) == 2  # cap is alpha + 1 planning calls
    assert result.budget.used_mb <= s1_budget.total_mb
    validate_trace(result.trace)


def test_rule_pipeline_deterministic(s1_schema, s1_workload, s1_oracle, s1_budget):
    first = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, RuleBackend())
    second = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, RuleBackend())
    assert trace_to_jsonl(first.trace) == trace_to_jsonl(second.trace)
    assert first.final_config == second.final_config


def test_scripted_exception_consumes_substep(s1_schema, s1_workload, s1_oracle, s1_budget):
    policy = ScriptedBackend(planning=[AgentAction(ActionKind.EXCEPTION, raw="CreateIndex")])
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, policy)
    assert result.trace[0].action.kind is ActionKind.EXCEPTION
    assert result.trace[0].action.raw == "CreateIndex"
    assert result.trace[0].config_keys == ()
    assert result.exceptions >= 1
    validate_trace(result.trace)


def test_planner_garbage_decision_recorded_as_exception(s1_schema, s1_workload, s1_oracle, s1_budget):
    policy = ScriptedBackend(planning=["Selection"])  # a bare string is not a valid decision
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, policy)
    assert result.trace[0].action.kind is ActionKind.EXCEPTION
    assert result.exceptions >= 1


def test_unaffordable_selection_rejected(s1_schema, s1_workload, s1_oracle):
    # planner insists on Selection; the pick does not fit the budget
    policy = ScriptedBackend(
        planning=[AgentAction(ActionKind.SELECTION), AgentAction(ActionKind.STOP)],
        selection=["orders.o_id"],
    )
    tiny = Budget(total_mb=0.01)
    result = run_pipeline(s1_workload, s1_schema, tiny, s1_oracle, policy)
    assert result.trace[0].action.kind is ActionKind.EXCEPTION
    assert result.final_config.indexes == ()
    assert result.budget.used_mb == 0.0


def test_duplicate_selection_rejected(s1_schema, s1_workload, s1_oracle, s1_budget):
    policy = ScriptedBackend(
        planning=[
            AgentAction(ActionKind.SELECTION),
            AgentAction(ActionKind.SELECTION),
            AgentAction(ActionKind.STOP),
        ],
        selection=["orders.o_id", "orders.o_id"],
    )
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, policy)
    assert actions(result)[:2] == [ActionKind.SELECTION, ActionKind.EXCEPTION]
    assert result.final_config.keys() == ("I(C orders.o_id)",)


def test_non_argmax_selection_accepted(s1_schema, s1_workload, s1_oracle, s1_budget):
    policy = ScriptedBackend(
        planning=[AgentAction(ActionKind.SELECTION), AgentAction(ActionKind.STOP)],
        selection=["orders.o_date"],
    )
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, policy)
    assert result.final_config.keys() == ("I(C orders.o_date)",)
    assert result.budget.used_mb == pytest.approx(0.11444091796875)


def _state(schema, workload, oracle, indexes, budget_mb=1.0):
    used = oracle.config_storage_mb(indexes)
    state = PipelineState(
        schema=schema,
        workload=workload,
        oracle=oracle,
        policy=RuleBackend(),
        budget=Budget(total_mb=budget_mb, used_mb=used),
        combination_rule=CombinationRule(),
        experience_rules=tuple(load_experience_rules()),
        pipeline_config=PipelineConfig(),
        indexes=list(indexes),
    )
    from maadvisor.candidates import build_query_infos, merge_candidates

    state.candidates = merge_candidates(build_query_infos(workload, schema, oracle))
    state.base_utilities = {c.name: c.est_utility for c in state.candidates}
    return state


def test_combination_merges_and_recomputes_storage(s1_schema, s1_workload, s1_oracle):
    state = _state(
        s1_schema, s1_workload, s1_oracle,
        [Index("orders", ("o_id",)), Index("orders", ("o_date",))],
    )
    response = combine_indexes(state, RuleBackend())
    assert not isinstance(response.decision, AgentAction)
    assert [i.columns for i in state.indexes] == [("o_id", "o_date")]
    assert state.budget.used_mb == s1_oracle.estimate_index_storage(
        Index("orders", ("o_id", "o_date"))
    )


def test_combination_invalid_proposal_leaves_state(s1_schema, s1_workload, s1_oracle):
    state = _state(s1_schema, s1_workload, s1_oracle, [Index("orders", ("o_id",))])
    before = list(state.indexes)
    policy = ScriptedBackend(combination=[[Index("orders", ("o_id", "o_date"))]])
    response = combine_indexes(state, policy)
    assert isinstance(response.decision, AgentAction)
    assert response.decision.kind is ActionKind.EXCEPTION
    assert state.indexes == before


def test_combination_never_grows_column_set(s1_schema, s1_workload, s1_oracle):
    state = _state(
        s1_schema, s1_workload, s1_oracle,
        [Index("orders", ("o_id",)), Index("orders", ("o_date",))],
    )
    before_cols = {(i.table, c) for i in state.indexes for c in i.columns}
    combine_indexes(state, RuleBackend())
    after_cols = {(i.table, c) for i in state.indexes for c in i.columns}
    assert after_cols <= before_cols


def test_revision_removes_duplicates_programmatically(s1_schema, s1_workload, s1_oracle):
    state = _state(s1_schema, s1_workload, s1_oracle, [Index("orders", ("o_id",))])
    state.indexes.append(Index("orders", ("o_id",)))  # simulate an upstream slip
    revise_indexes(state, RuleBackend())
    assert state.config_keys() == ("I(C orders.o_id)",)


def test_revision_drops_scripted_indicator_score(s1_schema, s1_workload, s1_oracle):
    state = _state(
        s1_schema, s1_workload, s1_oracle,
        [Index("orders", ("o_id",)), Index("orders", ("o_date",))],
    )
    state.pipeline_config = PipelineConfig(enable_indicator=True)
    state.indicator_scorer = lambda workload, config: {"I(C orders.o_date)": -0.9}
    revise_indexes(state, RuleBackend())
    assert state.config_keys() == ("I(C orders.o_id)",)


def test_revision_drops_zero_marginal_single(s1_schema, s1_workload, s1_oracle):
    # o_date is shadowed by o_id under the min rule: zero marginal, dropped
    state = _state(
        s1_schema, s1_workload, s1_oracle,
        [Index("orders", ("o_id",)), Index("orders", ("o_date",))],
    )
    revise_indexes(state, RuleBackend())
    assert state.config_keys() == ("I(C orders.o_id)",)


def test_revision_never_increases_storage(s1_schema, s1_workload, s1_oracle):
    state = _state(
        s1_schema, s1_workload, s1_oracle,
        [Index("orders", ("o_id",)), Index("orders", ("o_date",))],
    )
    before = state.budget.used_mb
    revise_indexes(state, RuleBackend())
    assert state.budget.used_mb <= before


def test_revision_rejects_absent_index(s1_schema, s1_workload, s1_oracle):
    state = _state(s1_schema, s1_workload, s1_oracle, [Index("orders", ("o_id",))])
    policy = ScriptedBackend(revision=[[Index("orders", ("o_status",))]])
    response = revise_indexes(state, policy)
    assert isinstance(response.decision, AgentAction)
    assert state.config_keys() == ("I(C orders.o_id)",)


def test_revision_disabled_records_exception(s1_schema, s1_workload, s1_oracle, s1_budget):
    policy = ScriptedBackend(
        planning=[AgentAction(ActionKind.REVISION), AgentAction(ActionKind.STOP)]
    )
    result = run_pipeline(
        s1_workload, s1_schema, s1_budget, s1_oracle, policy,
        PipelineConfig(enable_revision=False),
    )
    assert result.trace[0].action.kind is ActionKind.EXCEPTION
    assert result.exceptions == 1


def test_reflection_suggestion_reaches_next_planning(s1_schema, s1_workload, s1_oracle, s1_budget):
    # scripted reflection discourages Selection; the rule planner then stops
    # (no singles to combine, revision follows, etc.)
    policy = ScriptedBackend(
        reflection=[Suggestion("pause", frozenset({ActionKind.SELECTION}))]
    )
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, policy)
    # step 0 selects; reflection then discourages Selection, so step 1 is not Selection
    assert actions(result)[0] is ActionKind.SELECTION
    assert actions(result)[1] is not ActionKind.SELECTION


def test_oracle_failure_aborts_with_partial_trace(s1_schema, s1_workload, s1_budget):
    class FailingOracle(SyntheticCostOracle):
        def __init__(self, schema):
            super().__init__(schema)
            self.calls = 0

        def estimate_query_cost(self, query, config):
            self.calls += 1
            if self.calls > 10:
                raise OracleError("boom")
            return super().estimate_query_cost(query, config)

    with pytest.raises(PipelineAborted) as err:
        run_pipeline(s1_workload, s1_schema, s1_budget, FailingOracle(s1_schema), RuleBackend())
    assert len(err.value.trace) >= 1  # the failure struck mid-loop


def test_missing_base_cost_aborts(s1_schema, s1_budget, s1_oracle):
    workload = Workload(
        (Query(id="q", sql_text="", usages=(ColumnUsage("orders", "o_id", OperatorClass.EQ),)),)
    )
    with pytest.raises(PipelineAborted):
        run_pipeline(workload, s1_schema, s1_budget, s1_oracle, RuleBackend())


def test_no_final_duplicate_keys_random_policies(s1_schema, s1_workload, s1_oracle, s1_budget):
    # a policy that tries hard to create duplicates still cannot
    policy = ScriptedBackend(
        planning=[AgentAction(ActionKind.SELECTION)] * 3 + [AgentAction(ActionKind.STOP)],
        selection=["orders.o_id", "orders.o_id", "orders.o_date"],
    )
    result = run_pipeline(s1_workload, s1_schema, s1_budget, s1_oracle, policy)
    keys = result.final_config.keys()
    assert len(keys) == len(set(keys))
