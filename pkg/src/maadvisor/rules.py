"""Composite-ordering and expert-experience rules fed to the decision layer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional, Sequence

from .model import OperatorClass, ValidationError


@dataclass(frozen=True)
class CombinationRule:
    """How composite indexes order their columns.

    Columns of a merged index are sorted by operator precedence
    (equality first by default), utility breaking ties, then name;
    composites never exceed max_width columns.
    """

    precedence: tuple[OperatorClass, ...] = (
        OperatorClass.EQ,
        OperatorClass.JOIN,
        OperatorClass.RANGE,
        OperatorClass.SORT_GROUP,
    )
    max_width: int = 3

    def __post_init__(self) -> None:
        if sorted(self.precedence, key=lambda o: o.value) != sorted(
            OperatorClass, key=lambda o: o.value
        ):
            raise ValidationError("precedence must be a total order over operator classes")
        if self.max_width < 2:
            raise ValidationError("max_width must be >= 2")

    def rank(self, operators: frozenset[OperatorClass]) -> int:
        """Rank of a column by its best (earliest-precedence) operator."""
        if not operators:
            return len(self.precedence)
        return min(self.precedence.index(op) for op in operators)

    def render(self) -> str:
        order = " < ".join(op.value for op in self.precedence)
        return f"composite column order: {order}; max width {self.max_width}"


@dataclass(frozen=True)
class ExperienceRule:
    """A machine-evaluable heuristic about indexes that tend to regress."""

    id: str
    description: str
    verdict: str  # "discourage" | "remove"
    max_cardinality_fraction: Optional[float] = None
    only_operators: Optional[frozenset[OperatorClass]] = None
    max_rows: Optional[int] = None
    max_utility: Optional[float] = None

    def __post_init__(self) -> None:
        if self.verdict not in ("discourage", "remove"):
            raise ValidationError(f"rule {self.id}: bad verdict {self.verdict!r}")
        if all(
            v is None
            for v in (
                self.max_cardinality_fraction,
                self.only_operators,
                self.max_rows,
                self.max_utility,
            )
        ):
            raise ValidationError(f"rule {self.id}: predicate is empty")

    def matches(
        self,
        cardinality: float,
        row_count: int,
        operators: frozenset[OperatorClass],
        utility: float,
    ) -> bool:
        if self.max_cardinality_fraction is not None:
            if row_count <= 0:
                return False
            if cardinality / row_count >= self.max_cardinality_fraction:
                return False
        if self.only_operators is not None and not operators <= self.only_operators:
            return False
        if self.max_rows is not None and row_count >= self.max_rows:
            return False
        if self.max_utility is not None and utility > self.max_utility:
            return False
        return True

    def render(self) -> str:
        return f"[{self.id}] {self.description} -> {self.verdict}"


def _rule_from_dict(raw: dict[str, Any]) -> ExperienceRule:
    when = raw.get("when", {})
    only_ops = when.get("only_operators")
    return ExperienceRule(
        id=raw["id"],
        description=raw.get("description", ""),
        verdict=raw.get("verdict", "discourage"),
        max_cardinality_fraction=when.get("max_cardinality_fraction"),
        only_operators=frozenset(OperatorClass(o) for o in only_ops) if only_ops else None,
        max_rows=when.get("max_rows"),
        max_utility=when.get("max_utility"),
    )


def load_experience_rules(text: Optional[str] = None) -> list[ExperienceRule]:
    """Parse experience rules from JSON; defaults to the built-in set."""
    if text is None:
        text = resources.files("maadvisor.data").joinpath("experience_rules.json").read_text()
    raw = json.loads(text)
    if not isinstance(raw, list):
        raise ValidationError("experience rules file must be a JSON array")
    return [_rule_from_dict(entry) for entry in raw]
