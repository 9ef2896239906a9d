"""
Core classes for the feed query language.

Queries are JsonLogic-style dicts restricted to a conjunctive filter grammar:
field comparisons, ``in``, and the ``and`` / ``or`` / ``!`` combinators. Rows
are flat dicts built from trade-ledger entries; the fields a query may
reference are listed in :data:`ROW_FIELDS`.
"""

from __future__ import annotations
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Set


ROW_FIELDS: FrozenSet[str] = frozenset({
    'seq', 'kind', 'isin', 'party', 'buyer', 'seller', 'side', 'qty', 'price',
    'order_id', 'trade_id', 'state_version', 'status',
})


class Operator(Enum):
    """Supported comparison operators."""

    EQ = "=="
    NE = "!="
    GT = ">"
    GTE = ">="
    LT = "<"
    LTE = "<="
    IN = "in"


class Logic(Enum):
    """Logic operators for combining queries."""
    AND = "and"
    OR = "or"
    NOT = "!"


COMPARISONS: FrozenSet[str] = frozenset(op.value for op in Operator)
LOGIC: FrozenSet[str] = frozenset(op.value for op in Logic)


@dataclass
class QueryFields:
    """Row fields a query references."""
    fields: Set[str] = field(default_factory=set)

    def add_field(self, field_name: str) -> None:
        self.fields.add(field_name)

    def merge(self, other: QueryFields) -> QueryFields:
        return QueryFields(self.fields | other.fields)

    @property
    def unknown(self) -> Set[str]:
        """Referenced fields that rows do not have."""
        return self.fields - ROW_FIELDS


@dataclass
class QueryResult:
    """
    Rows matching a supervisor query.

    ``seqs`` are the trade-ledger seqs of the rows, so a supervisor can
    re-fetch and verify each one independently.
    """
    rows: List[Dict[str, Any]]
    ledger_length: int

    @property
    def seqs(self) -> List[int]:
        return [row['seq'] for row in self.rows]

    def __bool__(self) -> bool:
        return bool(self.rows)

    def __len__(self) -> int:
        return len(self.rows)


class Query(ABC):
    """
    Abstract base class for queries.

    All query types (Condition, QuerySet, JsonQuery) implement these methods.
    """

    @abstractmethod
    def to_json(self) -> Dict[str, Any]:
        """Convert to the JsonLogic-style dict."""

    @abstractmethod
    def get_fields(self) -> QueryFields:
        """Row fields referenced by the query."""

    def __and__(self, other: Query) -> QuerySet:
        if isinstance(self, QuerySet) and self.logic == Logic.AND:
            return QuerySet(Logic.AND, self.queries + [other])
        if isinstance(other, QuerySet) and other.logic == Logic.AND:
            return QuerySet(Logic.AND, [self] + other.queries)
        return QuerySet(Logic.AND, [self, other])

    def __or__(self, other: Query) -> QuerySet:
        if isinstance(self, QuerySet) and self.logic == Logic.OR:
            return QuerySet(Logic.OR, self.queries + [other])
        if isinstance(other, QuerySet) and other.logic == Logic.OR:
            return QuerySet(Logic.OR, [self] + other.queries)
        return QuerySet(Logic.OR, [self, other])

    def __invert__(self) -> QuerySet:
        return QuerySet(Logic.NOT, [self])


class QuerySet(Query):
    """
    Queries combined with a logic operator.

    This represents a branch node in the query tree.
    """

    def __init__(self, logic: Logic, queries: List[Query]):
        self.logic = logic
        self.queries = queries

    def to_json(self) -> Dict[str, Any]:
        if self.logic == Logic.NOT:
            if self.queries:
                return {"!": self.queries[0].to_json()}
            return {}

        children = [query.to_json() for query in self.queries]
        if len(children) == 0:
            return {}
        if len(children) == 1:
            return children[0]
        return {self.logic.value: children}

    def get_fields(self) -> QueryFields:
        fields = QueryFields()
        for query in self.queries:
            fields = fields.merge(query.get_fields())
        return fields

    def __repr__(self) -> str:
        return f"QuerySet({self.logic.name}, {len(self.queries)} queries)"


class RowSource(ABC):
    """Anything that can be presented to a query as a flat row."""

    @abstractmethod
    def to_row(self) -> Dict[str, Any]:
        """Field values for evaluation."""
