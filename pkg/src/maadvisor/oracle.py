"""What-if cost estimation.

The synthetic oracle is a closed-form stand-in for a DBMS optimizer:
cheap, deterministic, and analytically checkable. A perturbation wrapper
injects cardinality estimation error (the root cause of index
regressions), and a ground-truth variant adds per-index access overhead
so that near-useless indexes genuinely hurt. A live-DBMS adapter is
specified as an abstract contract only.
"""

from __future__ import annotations

import abc
import random
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .model import (
    Budget,
    DatabaseSchema,
    Index,
    IndexConfiguration,
    OperatorClass,
    Query,
    ValidationError,
    Workload,
)

BYTES_PER_MB = 1_048_576
DB_URL_ENV_VAR = "MAADVISOR_DB_URL"


class OracleError(RuntimeError):
    """A cost or storage estimate could not be produced."""


@dataclass(frozen=True)
class SyntheticOracleConfig:
    """Knobs of the synthetic cost model.

    The per-operator weight w interpolates the benefit of an index on a
    column with selectivity s as (1 - w) + w * s: constant columns
    (s -> 1) gain nothing, highly selective ones approach the full
    operator-specific speedup.
    """

    operator_weights: Mapping[OperatorClass, float] = field(
        default_factory=lambda: {
            OperatorClass.EQ: 0.9,
            OperatorClass.JOIN: 0.7,
            OperatorClass.RANGE: 0.6,
            OperatorClass.SORT_GROUP: 0.3,
        }
    )
    composite_bonus: float = 0.9
    cost_floor_fraction: float = 0.01
    per_index_row_overhead_bytes: int = 8
    true_overhead_fraction: float = 0.02

    def __post_init__(self) -> None:
        for op, weight in self.operator_weights.items():
            if not 0.0 <= weight <= 1.0:
                raise ValidationError(f"weight for {op} out of [0, 1]: {weight}")
        if not 0.0 < self.composite_bonus <= 1.0:
            raise ValidationError("composite_bonus must be in (0, 1]")
        if not 0.0 < self.cost_floor_fraction < 1.0:
            raise ValidationError("cost_floor_fraction must be in (0, 1)")


@dataclass(frozen=True)
class PerturbationSpec:
    """Seeded cardinality estimation error: a fixed fraction of columns
    has its cardinality multiplied or divided by error_factor in every
    estimate."""

    seed: int
    fraction_columns: float
    error_factor: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction_columns <= 1.0:
            raise ValidationError("fraction_columns must be in [0, 1]")
        if self.error_factor <= 0:
            raise ValidationError("error_factor must be > 0")


class CostOracle(abc.ABC):
    """The what-if interface every advisor component talks to."""

    @abc.abstractmethod
    def estimate_query_cost(self, query: Query, config: IndexConfiguration) -> float:
        raise NotImplementedError

    @abc.abstractmethod
    def estimate_workload_cost(self, workload: Workload, config: IndexConfiguration) -> float:
        raise NotImplementedError

    @abc.abstractmethod
    def estimate_index_storage(self, index: Index) -> float:
        raise NotImplementedError

    def config_storage_mb(self, indexes: tuple[Index, ...] | list[Index]) -> float:
        return sum(self.estimate_index_storage(idx) for idx in indexes)


class SyntheticCostOracle(CostOracle):
    """Deterministic closed-form cost model over schema statistics.

    Per query: for every referenced table, each configured index whose
    leading column the query uses contributes a factor equal to the
    product, over the longest contiguous prefix of its columns that the
    query uses, of (1 - w_op) + w_op / cardinality, times a bonus when
    the matched prefix spans >= 2 columns. The table takes the minimum
    factor of its applicable indexes; the query cost is base_cost times
    the product of table factors, floored at a fraction of base_cost.
    """

    def __init__(
        self,
        schema: DatabaseSchema,
        config: Optional[SyntheticOracleConfig] = None,
        cardinality_overrides: Optional[Mapping[tuple[str, str], float]] = None,
    ) -> None:
        self.schema = schema
        self.params = config or SyntheticOracleConfig()
        self._card_overrides = dict(cardinality_overrides or {})

    # -- statistics ------------------------------------------------------

    def estimated_cardinality(self, table: str, column: str) -> float:
        """Optimizer's (possibly perturbed) cardinality estimate."""
        override = self._card_overrides.get((table, column))
        if override is not None:
            return override
        return float(self.schema.column(table, column).cardinality)

    def _selectivity(self, table: str, column: str) -> float:
        return 1.0 / self.estimated_cardinality(table, column)

    # -- storage ---------------------------------------------------------

    def estimate_index_storage(self, index: Index) -> float:
        try:
            table = self.schema.table(index.table)
            widths = sum(table.column(c).width_bytes for c in index.columns)
        except KeyError as exc:
            raise OracleError(f"index references unknown table or column: {exc}") from exc
        total = table.row_count * (widths + self.params.per_index_row_overhead_bytes)
        return total / BYTES_PER_MB

    # -- cost ------------------------------------------------------------

    def index_factor(
        self,
        index: Index,
        operators: Mapping[tuple[str, str], frozenset[OperatorClass]],
    ) -> Optional[float]:
        """Factor of one index for one query, or None if inapplicable."""
        ops = operators.get((index.table, index.leading_column))
        if not ops:
            return None
        factor = 1.0
        matched = 0
        for col in index.columns:
            col_ops = operators.get((index.table, col))
            if not col_ops:
                break
            weight = max(self.params.operator_weights[op] for op in col_ops)
            sel = self._selectivity(index.table, col)
            factor *= (1.0 - weight) + weight * sel
            matched += 1
        if matched >= 2:
            factor *= self.params.composite_bonus
        return factor

    def estimate_query_cost(self, query: Query, config: IndexConfiguration) -> float:
        if query.base_cost is None:
            raise OracleError(f"query {query.id} has no base_cost (synthetic mode)")
        operators = query.column_operators()
        cost = query.base_cost
        for table in query.tables():
            best: Optional[float] = None
            for index in config.indexes:
                if index.table != table:
                    continue
                factor = self.index_factor(index, operators)
                if factor is not None and (best is None or factor < best):
                    best = factor
            if best is not None:
                cost *= best
        floor = self.params.cost_floor_fraction * query.base_cost
        return max(cost, floor)

    def estimate_workload_cost(self, workload: Workload, config: IndexConfiguration) -> float:
        return sum(self.estimate_query_cost(q, config) for q in workload.queries)

    # -- ground truth ------------------------------------------------------

    def _applicable_count(self, query: Query, config: IndexConfiguration) -> int:
        operators = query.column_operators()
        tables = set(query.tables())
        count = 0
        for index in config.indexes:
            if index.table in tables and (index.table, index.leading_column) in operators:
                count += 1
        return count

    def true_query_cost(self, query: Query, config: IndexConfiguration) -> float:
        """Unperturbed estimate plus per-applicable-index access overhead."""
        unperturbed = self._unperturbed()
        base = unperturbed.estimate_query_cost(query, config)
        assert query.base_cost is not None
        overhead = (
            self.params.true_overhead_fraction
            * query.base_cost
            * self._applicable_count(query, config)
        )
        return base + overhead

    def true_workload_cost(self, workload: Workload, config: IndexConfiguration) -> float:
        return sum(self.true_query_cost(q, config) for q in workload.queries)

    def _unperturbed(self) -> "SyntheticCostOracle":
        if not self._card_overrides:
            return self
        return SyntheticCostOracle(self.schema, self.params)

    # -- perturbation ------------------------------------------------------

    def with_perturbed_statistics(self, spec: PerturbationSpec) -> "SyntheticCostOracle":
        """New oracle whose estimates use distorted cardinalities.

        The receiver is untouched. Column choice and error direction are
        drawn from a generator seeded with spec.seed, so the same spec
        always perturbs the same columns the same way.
        """
        rng = random.Random(spec.seed)
        all_columns = [
            (tab.name, col.name)
            for tab in self.schema.tables
            for col in tab.columns
        ]
        count = int(round(spec.fraction_columns * len(all_columns)))
        chosen = rng.sample(all_columns, count) if count else []
        overrides: dict[tuple[str, str], float] = {}
        for table, column in sorted(chosen):
            card = float(self.schema.column(table, column).cardinality)
            if rng.random() < 0.5:
                overrides[(table, column)] = card * spec.error_factor
            else:
                overrides[(table, column)] = card / spec.error_factor
        return SyntheticCostOracle(self.schema, self.params, overrides)


def perturb_statistics(oracle: SyntheticCostOracle, spec: PerturbationSpec) -> SyntheticCostOracle:
    return oracle.with_perturbed_statistics(spec)


def true_cost(
    workload: Workload, config: IndexConfiguration, oracle: SyntheticCostOracle
) -> float:
    """Ground-truth workload cost; see SyntheticCostOracle.true_workload_cost."""
    return oracle.true_workload_cost(workload, config)


class LiveWhatIfAdapter(CostOracle):
    """Contract for a live-DBMS what-if backend (HypoPG-style).

    Implementations hold a session against the database named by the
    MAADVISOR_DB_URL environment variable, maintain hypothetical indexes
    in that session, and answer the CostOracle interface from optimizer
    estimates. No implementation ships here; the synthetic oracle covers
    every test.
    """

    @abc.abstractmethod
    def create_hypothetical_index(self, index: Index) -> str:
        """Register a hypothetical index; returns a session-local handle."""
        raise NotImplementedError

    @abc.abstractmethod
    def drop_hypothetical_index(self, handle: str) -> None:
        raise NotImplementedError

    @abc.abstractmethod
    def explain_cost(self, sql_text: str) -> float:
        """Optimizer-estimated cost of one statement under the current
        hypothetical configuration."""
        raise NotImplementedError

    @abc.abstractmethod
    def hypothetical_index_size_mb(self, handle: str) -> float:
        raise NotImplementedError
