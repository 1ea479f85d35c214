"""Decision backends behind a uniform request/response contract.

Every agent call goes through ``decide``: the rule backend is a total,
deterministic script over the request payload; the LLM backend speaks a
chat-completions wire protocol, validates structured JSON replies, and
falls back to the rule script when the model cannot produce one. Totality
here is what lets the pipeline guarantee budget compliance regardless of
model behavior.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Sequence, Union

import requests

from .candidates import ColumnCandidate, render_candidates
from .model import (
    Budget,
    Index,
    IndexConfiguration,
    ValidationError,
    canonical_key,
    index_from_canonical_key,
)
from .rules import CombinationRule, ExperienceRule

log = logging.getLogger(__name__)

LLM_ENDPOINT_ENV_VAR = "MAADVISOR_LLM_ENDPOINT"
LLM_API_KEY_ENV_VAR = "MAADVISOR_LLM_API_KEY"
LLM_MODEL_ENV_VAR = "MAADVISOR_LLM_MODEL"

DEFAULT_INDICATOR_THRESHOLD = -0.5


class AgentRole(str, Enum):
    PLANNING = "Planning"
    SELECTION = "Selection"
    COMBINATION = "Combination"
    REVISION = "Revision"
    REFLECTION = "Reflection"


class ActionKind(str, Enum):
    SELECTION = "Selection"
    COMBINATION = "Combination"
    REVISION = "Revision"
    STOP = "Stop"
    EXCEPTION = "Exception"


@dataclass(frozen=True)
class AgentAction:
    kind: ActionKind
    raw: Optional[str] = None  # offending text, for Exception only

    def __post_init__(self) -> None:
        if self.kind is ActionKind.EXCEPTION and self.raw is None:
            raise ValidationError("Exception action must carry the raw decision")


@dataclass(frozen=True)
class Suggestion:
    text: str = ""
    discouraged_actions: frozenset[ActionKind] = frozenset()

    @property
    def empty(self) -> bool:
        return not self.text and not self.discouraged_actions


_PLANNING_ACTIONS = (ActionKind.SELECTION, ActionKind.COMBINATION, ActionKind.REVISION,
                     ActionKind.STOP)
_DISCOURAGEABLE = (ActionKind.SELECTION, ActionKind.COMBINATION, ActionKind.REVISION)


@dataclass(frozen=True)
class RequestPayload:
    """Role-specific structured context accompanying the rendered text."""

    candidates: tuple[ColumnCandidate, ...] = ()
    budget: Optional[Budget] = None
    config: IndexConfiguration = IndexConfiguration()
    combination_rule: CombinationRule = CombinationRule()
    experience_rules: tuple[ExperienceRule, ...] = ()
    experience_flags: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    index_marginals: Mapping[str, float] = field(default_factory=dict)
    indicator_scores: Optional[Mapping[str, float]] = None
    indicator_threshold: float = DEFAULT_INDICATOR_THRESHOLD
    base_utilities: Mapping[str, float] = field(default_factory=dict)
    trace: tuple[tuple[ActionKind, tuple[str, ...]], ...] = ()
    performed_since_change: frozenset[ActionKind] = frozenset()
    revision_enabled: bool = True
    suggestion: Suggestion = Suggestion()


@dataclass(frozen=True)
class PolicyRequest:
    agent_role: AgentRole
    context_text: str
    payload: RequestPayload = RequestPayload()

    def __post_init__(self) -> None:
        if self.agent_role in (AgentRole.PLANNING, AgentRole.SELECTION) and not self.context_text:
            raise ValidationError(f"{self.agent_role.value} request needs context_text")


Decision = Union[AgentAction, str, list, Suggestion]


@dataclass(frozen=True)
class PolicyResponse:
    decision: Decision
    raw_text: str = ""
    attempts: int = 0
    fallback: bool = False


class ResponseFormatError(ValueError):
    """The raw text does not contain a decision valid for the role."""

    def __init__(self, message: str, kind: str = "schema"):
        super().__init__(message)
        self.kind = kind  # "no-json" | "schema" | "undefined-action" | "not-offered"


def _first_json_object(text: str) -> Optional[dict[str, Any]]:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            return obj
        pos = text.find("{", pos + 1)
    return None


def _parse_index_entry(entry: Any) -> Index:
    if isinstance(entry, str):
        return index_from_canonical_key(entry)
    if isinstance(entry, list) and entry and all(isinstance(c, str) for c in entry):
        tables, columns = [], []
        for ref in entry:
            if "." not in ref:
                raise ResponseFormatError(f"column reference {ref!r} is not Table.Column")
            table, col = ref.split(".", 1)
            tables.append(table)
            columns.append(col)
        if len(set(tables)) != 1:
            raise ResponseFormatError("an index cannot span tables")
        return Index(tables[0], tuple(columns))
    raise ResponseFormatError(f"cannot interpret index entry: {entry!r}")


def parse_agent_response(
    raw_text: str,
    agent_role: AgentRole,
    offered: Optional[set[str]] = None,
) -> Decision:
    """Extract the first JSON object from raw_text and validate it for the role.

    `offered` (Selection only) is the set of candidate names the policy
    was shown; a selection outside it is rejected.
    """
    obj = _first_json_object(raw_text)
    if obj is None:
        raise ResponseFormatError("no JSON object found in response", kind="no-json")

    if agent_role is AgentRole.PLANNING:
        action = obj.get("action")
        if not isinstance(action, str):
            raise ResponseFormatError("missing 'action' field")
        for kind in _PLANNING_ACTIONS:
            if action == kind.value:
                return AgentAction(kind)
        raise ResponseFormatError(f"undefined agent call: {action!r}", kind="undefined-action")

    if agent_role is AgentRole.SELECTION:
        name = obj.get("select")
        if not isinstance(name, str):
            raise ResponseFormatError("missing 'select' field")
        if offered is not None and name not in offered:
            raise ResponseFormatError(f"candidate {name!r} was not offered", kind="not-offered")
        return name

    if agent_role in (AgentRole.COMBINATION, AgentRole.REVISION):
        entries = obj.get("indexes")
        if not isinstance(entries, list):
            raise ResponseFormatError("missing 'indexes' list")
        try:
            return [_parse_index_entry(e) for e in entries]
        except ValidationError as exc:
            raise ResponseFormatError(str(exc)) from exc

    if agent_role is AgentRole.REFLECTION:
        text = obj.get("suggestion", "")
        if not isinstance(text, str):
            raise ResponseFormatError("'suggestion' must be a string")
        discourage = obj.get("discourage", [])
        if not isinstance(discourage, list):
            raise ResponseFormatError("'discourage' must be a list")
        kinds = set()
        for item in discourage:
            matched = next((k for k in _DISCOURAGEABLE if k.value == item), None)
            if matched is None:
                raise ResponseFormatError(f"cannot discourage {item!r}")
            kinds.add(matched)
        return Suggestion(text, frozenset(kinds))

    raise ResponseFormatError(f"unknown agent role {agent_role!r}")


# ---------------------------------------------------------------------------
# rule backend
# ---------------------------------------------------------------------------


def _affordable_positive(payload: RequestPayload) -> list[ColumnCandidate]:
    budget = payload.budget
    if budget is None:
        return []
    return [
        c
        for c in payload.candidates
        if c.est_utility > 0 and budget.fits(c.est_storage_mb)
    ]


def _combinable_tables(payload: RequestPayload) -> list[str]:
    singles: dict[str, int] = {}
    for idx in payload.config.indexes:
        if len(idx.columns) == 1:
            singles[idx.table] = singles.get(idx.table, 0) + 1
    return sorted(t for t, n in singles.items() if n >= 2)


def _ordering_utility(payload: RequestPayload, name: str) -> float:
    if name in payload.base_utilities:
        return payload.base_utilities[name]
    for cand in payload.candidates:
        if cand.name == name:
            return cand.est_utility
    return 0.0


def _rule_planning(payload: RequestPayload) -> AgentAction:
    discouraged = payload.suggestion.discouraged_actions
    if _affordable_positive(payload) and ActionKind.SELECTION not in discouraged:
        return AgentAction(ActionKind.SELECTION)
    if _combinable_tables(payload) and ActionKind.COMBINATION not in payload.performed_since_change:
        return AgentAction(ActionKind.COMBINATION)
    if (
        payload.config.indexes
        and payload.revision_enabled
        and ActionKind.REVISION not in payload.performed_since_change
    ):
        return AgentAction(ActionKind.REVISION)
    return AgentAction(ActionKind.STOP)


def _rule_selection(payload: RequestPayload) -> Decision:
    budget = payload.budget
    if budget is None:
        return AgentAction(ActionKind.EXCEPTION, raw="selection without budget context")
    affordable = [c for c in payload.candidates if budget.fits(c.est_storage_mb)]
    if not affordable:
        return AgentAction(ActionKind.EXCEPTION, raw="no affordable candidate")
    best = min(affordable, key=lambda c: (-c.est_utility, c.name))
    return best.name


def order_composite_columns(
    table: str,
    columns: Sequence[str],
    payload: RequestPayload,
) -> tuple[str, ...]:
    """Order composite columns by operator precedence, utility, then name."""
    rule = payload.combination_rule
    ops_by_name = {c.name: c.operators for c in payload.candidates}

    def sort_key(col: str) -> tuple[int, float, str]:
        name = f"{table}.{col}"
        rank = rule.rank(ops_by_name.get(name, frozenset()))
        return (rank, -_ordering_utility(payload, name), col)

    return tuple(sorted(columns, key=sort_key))


def _rule_combination(payload: RequestPayload) -> list[Index]:
    tables = _combinable_tables(payload)
    if not tables:
        return []
    table = tables[0]
    singles = [idx.columns[0] for idx in payload.config.on_table(table) if len(idx.columns) == 1]
    ordered = order_composite_columns(table, singles, payload)
    chosen = ordered[: payload.combination_rule.max_width]
    return [Index(table, chosen)]


def _rule_revision(payload: RequestPayload) -> list[Index]:
    drops = []
    scores = payload.indicator_scores or {}
    for idx in payload.config.indexes:
        key = canonical_key(idx)
        if scores.get(key, 0.0) < payload.indicator_threshold:
            drops.append(idx)
        elif payload.index_marginals.get(key, 0.0) <= 0.0:
            drops.append(idx)
    return drops


def _rule_reflection(payload: RequestPayload) -> Suggestion:
    trace = payload.trace
    if trace and trace[-1][0] is ActionKind.EXCEPTION:
        return Suggestion(
            "the last step was an undefined or invalid action; valid actions are "
            "Selection, Combination, Revision, Stop"
        )
    if len(trace) >= 2:
        (kind_a, keys_a), (kind_b, keys_b) = trace[-2], trace[-1]
        if kind_a is kind_b and kind_a in _DISCOURAGEABLE and keys_a == keys_b:
            return Suggestion(
                f"repeated {kind_a.value} without changing the configuration; try another action",
                frozenset({kind_a}),
            )
    return Suggestion()


class RuleBackend:
    """Deterministic decision script; same request, same decision."""

    def decide(self, request: PolicyRequest) -> PolicyResponse:
        payload = request.payload
        if request.agent_role is AgentRole.PLANNING:
            decision: Decision = _rule_planning(payload)
        elif request.agent_role is AgentRole.SELECTION:
            decision = _rule_selection(payload)
        elif request.agent_role is AgentRole.COMBINATION:
            decision = _rule_combination(payload)
        elif request.agent_role is AgentRole.REVISION:
            decision = _rule_revision(payload)
        elif request.agent_role is AgentRole.REFLECTION:
            decision = _rule_reflection(payload)
        else:  # pragma: no cover - enum is closed
            raise ValidationError(f"unknown role {request.agent_role!r}")
        return PolicyResponse(decision=decision, raw_text="", attempts=0)


def rule_decide(request: PolicyRequest) -> PolicyResponse:
    return RuleBackend().decide(request)


# ---------------------------------------------------------------------------
# LLM backend
# ---------------------------------------------------------------------------


_SYSTEM_INSTRUCTIONS = {
    AgentRole.PLANNING: (
        "You plan one step of an index tuning loop. Review the candidates, the "
        "current indexes, and the budget, then answer with exactly one JSON "
        'object: {"action": "Selection"|"Combination"|"Revision"|"Stop"}.'
    ),
    AgentRole.SELECTION: (
        "You pick one new single-column index. Choose a candidate whose storage "
        "fits the remaining budget and whose utility is high. Answer with exactly "
        'one JSON object: {"select": "Table.Column"}.'
    ),
    AgentRole.COMBINATION: (
        "You merge single-column indexes on the same table into composite "
        "indexes when that helps the workload. Answer with exactly one JSON "
        'object: {"indexes": [["Table.Col1", "Table.Col2"], ...]} listing the '
        "composites to create (empty list for none)."
    ),
    AgentRole.REVISION: (
        "You remove duplicated, regressive, or useless indexes from the current "
        'recommendation. Answer with exactly one JSON object: {"indexes": [...]} '
        "listing the indexes to remove, each as a canonical key or a column list "
        "(empty list for none)."
    ),
    AgentRole.REFLECTION: (
        "You review the planning history and point out unproductive patterns. "
        'Answer with exactly one JSON object: {"suggestion": "...", '
        '"discourage": ["Selection"|"Combination"|"Revision", ...]}.'
    ),
}


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str
    api_key: str = ""
    model: str = "gpt-4o"
    timeout_s: float = 60.0
    max_inflight: int = 4

    @classmethod
    def from_env(cls) -> "LlmConfig":
        endpoint = os.environ.get(LLM_ENDPOINT_ENV_VAR, "")
        if not endpoint:
            raise ValidationError(f"{LLM_ENDPOINT_ENV_VAR} is not set")
        return cls(
            endpoint=endpoint,
            api_key=os.environ.get(LLM_API_KEY_ENV_VAR, ""),
            model=os.environ.get(LLM_MODEL_ENV_VAR, "gpt-4o"),
        )


def render_payload(request: PolicyRequest) -> str:
    """Deterministic textual rendering of the auxiliary payload for prompts."""
    payload = request.payload
    sections = [request.context_text.rstrip()]
    if request.agent_role is AgentRole.COMBINATION:
        sections.append(payload.combination_rule.render())
    if request.agent_role is AgentRole.REVISION:
        if payload.experience_rules:
            sections.append(
                "experience rules:\n"
                + "\n".join("  " + rule.render() for rule in payload.experience_rules)
            )
        if payload.experience_flags:
            flagged = "; ".join(
                f"{key}: {', '.join(rules)}"
                for key, rules in sorted(payload.experience_flags.items())
            )
            sections.append(f"flagged by experience rules: {flagged}")
        if payload.index_marginals:
            marg = "; ".join(
                f"{key}={value:.1f}" for key, value in sorted(payload.index_marginals.items())
            )
            sections.append(f"marginal utility per index: {marg}")
        if payload.indicator_scores is not None:
            scores = "; ".join(
                f"{key}={value:+.2f}" for key, value in sorted(payload.indicator_scores.items())
            )
            sections.append(f"regression indicator scores (-1 bad, +1 good): {scores}")
    if request.agent_role in (AgentRole.PLANNING, AgentRole.REFLECTION) and payload.trace:
        steps = ", ".join(kind.value for kind, _ in payload.trace)
        sections.append(f"actions so far: {steps}")
    if request.agent_role is AgentRole.PLANNING and not payload.suggestion.empty:
        note = payload.suggestion.text
        if payload.suggestion.discouraged_actions:
            discouraged = ", ".join(
                sorted(k.value for k in payload.suggestion.discouraged_actions)
            )
            note += f" (discouraged: {discouraged})"
        sections.append(f"reflection: {note}")
    return "\n\n".join(s for s in sections if s)


class LlmBackend:
    """Chat-completions decision backend with parse-retry and rule fallback."""

    MAX_UPSTREAM_CALLS = 3

    def __init__(self, config: LlmConfig, session: Optional[requests.Session] = None):
        self.config = config
        self.session = session or requests.Session()
        self._fallback = RuleBackend()
        self._gate = threading.BoundedSemaphore(config.max_inflight)

    def _post(self, messages: list[dict[str, str]]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        body = {"model": self.config.model, "messages": messages, "temperature": 0}
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        with self._gate:
            response = self.session.post(
                url, json=body, headers=headers, timeout=self.config.timeout_s
            )
        response.raise_for_status()
        return response.json()["choices"][0]["message"]["content"]

    def decide(self, request: PolicyRequest) -> PolicyResponse:
        offered = None
        if request.agent_role is AgentRole.SELECTION:
            offered = {c.name for c in request.payload.candidates}
        messages = [
            {"role": "system", "content": _SYSTEM_INSTRUCTIONS[request.agent_role]},
            {"role": "user", "content": render_payload(request)},
        ]
        attempts = 0
        raw = ""
        while attempts < self.MAX_UPSTREAM_CALLS:
            attempts += 1
            try:
                raw = self._post(messages)
            except (requests.RequestException, KeyError, ValueError) as exc:
                log.warning("LLM transport failure (%s); falling back to rules", exc)
                raw = f"transport error: {exc}"
                break
            try:
                decision = parse_agent_response(raw, request.agent_role, offered=offered)
                return PolicyResponse(decision=decision, raw_text=raw, attempts=attempts)
            except ResponseFormatError as exc:
                log.warning("LLM parse failure on attempt %d: %s", attempts, exc)
                messages = messages + [
                    {"role": "assistant", "content": raw},
                    {
                        "role": "user",
                        "content": f"Invalid response ({exc}). Reply with exactly one "
                        "JSON object in the required format.",
                    },
                ]
        fallback = self._fallback.decide(request)
        return PolicyResponse(
            decision=fallback.decision, raw_text=raw, attempts=attempts, fallback=True
        )


def llm_decide(request: PolicyRequest, llm_config: LlmConfig) -> PolicyResponse:
    return LlmBackend(llm_config).decide(request)


def decide(backend: Any, request: PolicyRequest) -> PolicyResponse:
    """Uniform facade: every backend exposes decide(request)."""
    return backend.decide(request)
