"""The multi-agent recommendation loop.

One sub-step = one planning decision plus the local action it dispatches
(select / combine / revise), followed by a reflection pass. The loop
keeps hard guarantees regardless of the policy backend: the budget is
respected at every step boundary, undefined or invalid decisions are
recorded as exceptions without touching state, and the sub-step cap
bounds the trace length even under adversarial policies.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

from .candidates import (
    ColumnCandidate,
    build_query_infos,
    merge_candidates,
    refresh_candidates,
    render_candidates,
)
from .model import (
    Budget,
    DatabaseSchema,
    Index,
    IndexConfiguration,
    ValidationError,
    Workload,
    canonical_key,
)
from .oracle import CostOracle, OracleError
from .policy import (
    ActionKind,
    AgentAction,
    AgentRole,
    PolicyRequest,
    PolicyResponse,
    RequestPayload,
    Suggestion,
    decide,
    order_composite_columns,
)
from .rules import CombinationRule, ExperienceRule, load_experience_rules

log = logging.getLogger(__name__)

IndicatorScorer = Callable[[Workload, IndexConfiguration], Mapping[str, float]]


@dataclass(frozen=True)
class TraceEntry:
    step: int
    action: AgentAction
    used_mb: float
    config_keys: tuple[str, ...]
    fallback: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    max_substeps: int = 20
    enable_revision: bool = True
    enable_indicator: bool = False
    policy_backend: str = "rules"
    oracle_id: str = "synthetic"
    indicator_threshold: float = -0.5

    def __post_init__(self) -> None:
        if self.max_substeps < 1:
            raise ValidationError("max_substeps must be >= 1")


@dataclass(frozen=True)
class RecommendationResult:
    final_config: IndexConfiguration
    trace: tuple[TraceEntry, ...]
    est_cost_before: float
    est_cost_after: float
    budget: Budget
    exceptions: int


class PipelineAborted(RuntimeError):
    """An oracle failure stopped the loop; carries the partial trace."""

    def __init__(self, message: str, trace: Sequence[TraceEntry]):
        super().__init__(message)
        self.trace = tuple(trace)


@dataclass
class PipelineState:
    schema: DatabaseSchema
    workload: Workload
    oracle: CostOracle
    policy: Any
    budget: Budget
    combination_rule: CombinationRule
    experience_rules: tuple[ExperienceRule, ...]
    pipeline_config: PipelineConfig
    indicator_scorer: Optional[IndicatorScorer] = None
    indexes: list[Index] = field(default_factory=list)
    candidates: list[ColumnCandidate] = field(default_factory=list)
    base_utilities: dict[str, float] = field(default_factory=dict)
    trace: list[TraceEntry] = field(default_factory=list)
    suggestion: Suggestion = Suggestion()
    performed_since_change: set[ActionKind] = field(default_factory=set)
    exceptions: int = 0

    def config(self) -> IndexConfiguration:
        return IndexConfiguration(tuple(self.indexes), self.budget.used_mb)

    def config_keys(self) -> tuple[str, ...]:
        return tuple(canonical_key(idx) for idx in self.indexes)

    def refresh(self) -> None:
        self.candidates = refresh_candidates(
            self.candidates,
            self.config(),
            self.workload,
            self.oracle,
            max_width=self.combination_rule.max_width,
        )

    def set_storage_from_config(self) -> None:
        used = self.oracle.config_storage_mb(self.indexes)
        if used > self.budget.total_mb + 1e-12:
            raise ValidationError(
                f"configuration storage {used:.6f} MB exceeds budget "
                f"{self.budget.total_mb:.6f} MB"
            )
        self.budget = self.budget.with_used(used)

    def record_exception(self, raw: str) -> AgentAction:
        self.exceptions += 1
        log.warning("pipeline exception: %s", raw)
        return AgentAction(ActionKind.EXCEPTION, raw=raw)

    def payload(self, **overrides: Any) -> RequestPayload:
        base = dict(
            candidates=tuple(self.candidates),
            budget=self.budget,
            config=self.config(),
            combination_rule=self.combination_rule,
            experience_rules=self.experience_rules,
            base_utilities=dict(self.base_utilities),
            trace=tuple((e.action.kind, e.config_keys) for e in self.trace),
            performed_since_change=frozenset(self.performed_since_change),
            revision_enabled=self.pipeline_config.enable_revision,
            suggestion=self.suggestion,
            indicator_threshold=self.pipeline_config.indicator_threshold,
        )
        base.update(overrides)
        return RequestPayload(**base)

    def context_text(self) -> str:
        return render_candidates(self.candidates, self.budget, self.config())


def index_marginal_utilities(
    workload: Workload,
    indexes: Sequence[Index],
    oracle: CostOracle,
) -> dict[str, float]:
    """Per-index utility of keeping it: cost increase if removed, per MB."""
    config = IndexConfiguration(tuple(indexes), 0.0)
    with_costs = [oracle.estimate_query_cost(q, config) for q in workload.queries]
    marginals: dict[str, float] = {}
    for idx in indexes:
        others = IndexConfiguration(tuple(i for i in indexes if i is not idx), 0.0)
        gain = 0.0
        for query, with_cost in zip(workload.queries, with_costs):
            gain += oracle.estimate_query_cost(query, others) - with_cost
        storage = oracle.estimate_index_storage(idx)
        marginals[canonical_key(idx)] = gain / storage if storage > 0 else 0.0
    return marginals


def evaluate_experience_rules(
    state: PipelineState,
    marginals: Mapping[str, float],
) -> dict[str, tuple[str, ...]]:
    """Which experience rules match which current index."""
    by_name = {c.name: c for c in state.candidates}
    flags: dict[str, tuple[str, ...]] = {}
    for idx in state.indexes:
        key = canonical_key(idx)
        leading = by_name.get(f"{idx.table}.{idx.leading_column}")
        if leading is None:
            continue
        operators: frozenset = frozenset()
        for col in idx.columns:
            cand = by_name.get(f"{idx.table}.{col}")
            if cand is not None:
                operators |= cand.operators
        rows = state.schema.table(idx.table).row_count
        matched = tuple(
            rule.id
            for rule in state.experience_rules
            if rule.matches(leading.est_cardinality, rows, operators, marginals.get(key, 0.0))
        )
        if matched:
            flags[key] = matched
    return flags


def select_index(state: PipelineState, policy: Any) -> PolicyResponse:
    """Dispatch one Selection: append a single-column index within budget."""
    request = PolicyRequest(AgentRole.SELECTION, state.context_text(), state.payload())
    response = decide(policy, request)
    decision = response.decision
    if isinstance(decision, AgentAction):
        return _reject(state, response, decision.raw or "selection failed")
    if not isinstance(decision, str):
        return _reject(state, response, f"selection returned {decision!r}")
    cand = next((c for c in state.candidates if c.name == decision), None)
    if cand is None:
        return _reject(state, response, f"candidate {decision!r} was not offered")
    index = cand.as_index()
    key = canonical_key(index)
    if key in state.config_keys():
        return _reject(state, response, f"{key} is already selected")
    if not state.budget.fits(cand.est_storage_mb):
        return _reject(state, response, f"{decision} does not fit the remaining budget")
    state.indexes.append(index)
    state.budget = state.budget.spend(cand.est_storage_mb)
    return response


def combine_indexes(state: PipelineState, policy: Any) -> PolicyResponse:
    """Dispatch one Combination: merge same-table indexes into composites."""
    request = PolicyRequest(AgentRole.COMBINATION, state.context_text(), state.payload())
    response = decide(policy, request)
    decision = response.decision
    if isinstance(decision, AgentAction):
        return _reject(state, response, decision.raw or "combination failed")
    if not isinstance(decision, list) or not all(isinstance(i, Index) for i in decision):
        return _reject(state, response, f"combination returned {decision!r}")

    planned: list[tuple[list[Index], Index]] = []
    for proposal in decision:
        if len(proposal.columns) > state.combination_rule.max_width:
            return _reject(
                state, response, f"proposal {canonical_key(proposal)} exceeds max width"
            )
        wanted = set(proposal.columns)
        members = [
            idx
            for idx in state.indexes
            if idx.table == proposal.table and set(idx.columns) <= wanted
        ]
        covered = set().union(*(set(m.columns) for m in members)) if members else set()
        if covered != wanted:
            return _reject(
                state,
                response,
                f"proposal {canonical_key(proposal)} references indexes not in the "
                "current configuration",
            )
        if len(members) < 2:
            continue  # merging a single index with itself is a no-op
        ordered = order_composite_columns(proposal.table, proposal.columns, request.payload)
        planned.append((members, Index(proposal.table, ordered)))

    for members, merged in planned:
        remaining = [idx for idx in state.indexes if idx not in members]
        if canonical_key(merged) not in {canonical_key(i) for i in remaining}:
            remaining.append(merged)
        state.indexes = remaining
    state.set_storage_from_config()
    return response


def revise_indexes(state: PipelineState, policy: Any) -> PolicyResponse:
    """Dispatch one Revision: drop duplicates, then policy-flagged indexes."""
    deduped: list[Index] = []
    seen: set[str] = set()
    for idx in state.indexes:
        key = canonical_key(idx)
        if key not in seen:
            seen.add(key)
            deduped.append(idx)
    state.indexes = deduped

    marginals = index_marginal_utilities(state.workload, state.indexes, state.oracle)
    flags = evaluate_experience_rules(state, marginals)
    scores: Optional[Mapping[str, float]] = None
    if state.pipeline_config.enable_indicator and state.indicator_scorer is not None:
        scores = state.indicator_scorer(state.workload, state.config())
    payload = state.payload(
        index_marginals=marginals, experience_flags=flags, indicator_scores=scores
    )
    request = PolicyRequest(AgentRole.REVISION, state.context_text(), payload)
    response = decide(policy, request)
    decision = response.decision
    if isinstance(decision, AgentAction):
        _finish_revision(state)
        return _reject(state, response, decision.raw or "revision failed")
    if not isinstance(decision, list) or not all(isinstance(i, Index) for i in decision):
        _finish_revision(state)
        return _reject(state, response, f"revision returned {decision!r}")
    current = {canonical_key(idx) for idx in state.indexes}
    drop_keys = {canonical_key(idx) for idx in decision}
    unknown = drop_keys - current
    if unknown:
        _finish_revision(state)
        return _reject(state, response, f"revision names absent indexes: {sorted(unknown)}")
    state.indexes = [idx for idx in state.indexes if canonical_key(idx) not in drop_keys]
    _finish_revision(state)
    return response


def _finish_revision(state: PipelineState) -> None:
    state.set_storage_from_config()


def _reject(state: PipelineState, response: PolicyResponse, reason: str) -> PolicyResponse:
    action = state.record_exception(reason)
    return PolicyResponse(
        decision=action,
        raw_text=response.raw_text,
        attempts=response.attempts,
        fallback=response.fallback,
    )


def reflect(state: PipelineState, policy: Any) -> Suggestion:
    request = PolicyRequest(AgentRole.REFLECTION, state.context_text() or " ", state.payload())
    response = decide(policy, request)
    if isinstance(response.decision, Suggestion):
        return response.decision
    return Suggestion()


def run_pipeline(
    workload: Workload,
    schema: DatabaseSchema,
    budget: Budget,
    oracle: CostOracle,
    policy: Any,
    pipeline_config: Optional[PipelineConfig] = None,
    combination_rule: Optional[CombinationRule] = None,
    experience_rules: Optional[Sequence[ExperienceRule]] = None,
    indicator_scorer: Optional[IndicatorScorer] = None,
) -> RecommendationResult:
    """Run the full planning loop and return the final recommendation."""
    cfg = pipeline_config or PipelineConfig()
    state = PipelineState(
        schema=schema,
        workload=workload,
        oracle=oracle,
        policy=policy,
        budget=budget,
        combination_rule=combination_rule or CombinationRule(),
        experience_rules=tuple(
            experience_rules if experience_rules is not None else load_experience_rules()
        ),
        pipeline_config=cfg,
        indicator_scorer=indicator_scorer,
    )
    try:
        est_before = oracle.estimate_workload_cost(workload, IndexConfiguration())
        state.candidates = merge_candidates(build_query_infos(workload, schema, oracle))
        state.base_utilities = {c.name: c.est_utility for c in state.candidates}

        step = 0
        while step <= cfg.max_substeps:
            keys_before = state.config_keys()
            planning_request = PolicyRequest(
                AgentRole.PLANNING, state.context_text(), state.payload()
            )
            planning = decide(policy, planning_request)
            action = planning.decision
            if not isinstance(action, AgentAction):
                action = state.record_exception(f"planner returned {planning.decision!r}")

            fallback = planning.fallback
            if action.kind is ActionKind.STOP:
                state.trace.append(
                    TraceEntry(step, action, state.budget.used_mb, state.config_keys(), fallback)
                )
                break
            if action.kind is ActionKind.SELECTION:
                local = select_index(state, policy)
            elif action.kind is ActionKind.COMBINATION:
                local = combine_indexes(state, policy)
            elif action.kind is ActionKind.REVISION:
                if cfg.enable_revision:
                    local = revise_indexes(state, policy)
                else:
                    local = PolicyResponse(
                        state.record_exception("Revision is disabled for this run")
                    )
            else:
                if planning.decision is action:
                    state.exceptions += 1  # exception handed down by the policy itself
                local = PolicyResponse(action)

            recorded = action
            if isinstance(local.decision, AgentAction) and (
                local.decision.kind is ActionKind.EXCEPTION
            ):
                recorded = local.decision
            fallback = fallback or local.fallback
            state.trace.append(
                TraceEntry(step, recorded, state.budget.used_mb, state.config_keys(), fallback)
            )

            if state.config_keys() != keys_before:
                state.performed_since_change = set()
                state.refresh()
            elif action.kind in (ActionKind.COMBINATION, ActionKind.REVISION):
                state.performed_since_change.add(action.kind)

            state.suggestion = reflect(state, policy)
            step += 1

        final = state.config()
        est_after = oracle.estimate_workload_cost(workload, final)
    except OracleError as exc:
        raise PipelineAborted(f"oracle failure: {exc}", state.trace) from exc
    return RecommendationResult(
        final_config=final,
        trace=tuple(state.trace),
        est_cost_before=est_before,
        est_cost_after=est_after,
        budget=state.budget,
        exceptions=state.exceptions,
    )


def trace_to_jsonl(trace: Sequence[TraceEntry]) -> str:
    """One JSON record per step; consumed by the CLI --trace-out flag."""
    lines = []
    for entry in trace:
        record: dict[str, Any] = {
            "step": entry.step,
            "action": entry.action.kind.value,
            "used_mb": entry.used_mb,
            "config_keys": list(entry.config_keys),
        }
        if entry.action.kind is ActionKind.EXCEPTION and entry.action.raw:
            record["raw"] = entry.action.raw
        if entry.fallback:
            record["fallback"] = True
        lines.append(json.dumps(record, separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def validate_trace(trace: Sequence[TraceEntry]) -> None:
    """Assert the structural trace invariants (used by tests)."""
    for i, entry in enumerate(trace):
        if entry.step != i:
            raise ValidationError(f"trace steps not consecutive at {i}")
    stops = [e for e in trace if e.action.kind is ActionKind.STOP]
    if len(stops) > 1:
        raise ValidationError("trace contains more than one Stop")
    if stops and trace[-1].action.kind is not ActionKind.STOP:
        raise ValidationError("Stop is not the last trace entry")
