"""
Query builder: a fluent API for feed filters.

Build queries with Python expressions instead of raw dicts.
"""

from __future__ import annotations
from typing import Any, Dict, List

from ..core import MalformedQuery
from .core import COMPARISONS, LOGIC, Logic, Operator, Query, QueryFields, QuerySet


__all__ = [
    'Field',
    'Condition',
    'Q',
    'QueryBuilder',
    'JsonQuery',
    'AND',
    'OR',
    'NOT',
]


class Field:
    """
    Fluent builder for field-based conditions.

    Examples:
        >>> Field('isin').equals('XS0000000001')
        >>> Field('qty').greater_than(100)
        >>> Field('seq') >= 10
        >>> Field('kind').is_in(['TradeSettled'])
    """

    def __init__(self, name: str):
        self.name = name

    def equals(self, value: Any) -> Condition:
        """Field == value"""
        return Condition(self.name, Operator.EQ, value)

    def eq(self, value: Any) -> Condition:
        return self.equals(value)

    def not_equals(self, value: Any) -> Condition:
        """Field != value"""
        return Condition(self.name, Operator.NE, value)

    def ne(self, value: Any) -> Condition:
        return self.not_equals(value)

    def greater_than(self, value: Any) -> Condition:
        return Condition(self.name, Operator.GT, value)

    def gt(self, value: Any) -> Condition:
        return self.greater_than(value)

    def greater_or_equal(self, value: Any) -> Condition:
        return Condition(self.name, Operator.GTE, value)

    def gte(self, value: Any) -> Condition:
        return self.greater_or_equal(value)

    def less_than(self, value: Any) -> Condition:
        return Condition(self.name, Operator.LT, value)

    def lt(self, value: Any) -> Condition:
        return self.less_than(value)

    def less_or_equal(self, value: Any) -> Condition:
        return Condition(self.name, Operator.LTE, value)

    def lte(self, value: Any) -> Condition:
        return self.less_or_equal(value)

    def is_in(self, values: List[Any]) -> Condition:
        """Field value is in list"""
        return Condition(self.name, Operator.IN, list(values))

    def between(self, low: Any, high: Any) -> QuerySet:
        """low <= field <= high (inclusive range, e.g. of ledger seqs)"""
        return QuerySet(Logic.AND, [self.gte(low), self.lte(high)])

    def __eq__(self, value: Any) -> Condition:  # type: ignore[override]
        """Enable: Field('isin') == 'XS...'"""
        return self.equals(value)

    def __ne__(self, value: Any) -> Condition:  # type: ignore[override]
        return self.not_equals(value)

    def __gt__(self, value: Any) -> Condition:
        return self.greater_than(value)

    def __ge__(self, value: Any) -> Condition:
        return self.greater_or_equal(value)

    def __lt__(self, value: Any) -> Condition:
        return self.less_than(value)

    def __le__(self, value: Any) -> Condition:
        return self.less_or_equal(value)


class Condition(Query):
    """
    A single field comparison.

    This is the leaf node in a query tree.
    """

    def __init__(self, field: str, operator: Operator, value: Any):
        self.field = field
        self.operator = operator
        self.value = value

    def to_json(self) -> Dict[str, Any]:
        return {self.operator.value: [{"var": self.field}, self.value]}

    def get_fields(self) -> QueryFields:
        return QueryFields({self.field})

    def __repr__(self) -> str:
        return f"Condition({self.field} {self.operator.value} {self.value!r})"


class Q(Query):
    """
    Keyword-style query objects.

    Examples:
        >>> Q(isin='XS0000000001')
        >>> Q(qty__gt=100)
        >>> Q(kind__in=['TradeSettled', 'TradeFailed'])
        >>> Q(buyer='A') | Q(seller='A')
        >>> ~Q(status='Settled')
    """

    OPERATORS = {
        'eq': Operator.EQ,
        'ne': Operator.NE,
        'gt': Operator.GT,
        'gte': Operator.GTE,
        'lt': Operator.LT,
        'lte': Operator.LTE,
        'in': Operator.IN,
    }

    def __init__(self, **kwargs):
        if len(kwargs) != 1:
            raise ValueError("Q() requires exactly one keyword argument")
        key, value = list(kwargs.items())[0]
        self.field, self.operator, self.value = self._parse_kwarg(key, value)
        self._condition = Condition(self.field, self.operator, self.value)

    def _parse_kwarg(self, key: str, value: Any) -> tuple:
        """Parse field__operator=value into components."""
        parts = key.split('__')
        if len(parts) == 1:
            return parts[0], Operator.EQ, value
        field = '__'.join(parts[:-1])
        op_str = parts[-1]
        if op_str in self.OPERATORS:
            return field, self.OPERATORS[op_str], value
        return key, Operator.EQ, value

    def to_json(self) -> Dict[str, Any]:
        return self._condition.to_json()

    def get_fields(self) -> QueryFields:
        return self._condition.get_fields()

    def __repr__(self) -> str:
        return f"Q({self.field}__{self.operator.name.lower()}={self.value!r})"


def AND(*queries: Query) -> QuerySet:
    """Combine queries with AND logic."""
    return QuerySet(Logic.AND, list(queries))


def OR(*queries: Query) -> QuerySet:
    """Combine queries with OR logic."""
    return QuerySet(Logic.OR, list(queries))


def NOT(query: Query) -> QuerySet:
    """Negate a query."""
    return QuerySet(Logic.NOT, [query])


class JsonQuery(Query):
    """
    Wrapper for raw query dicts, e.g. loaded from a rules file or received
    from a supervisor.

    Examples:
        >>> query = JsonQuery({"==": [{"var": "isin"}, "XS0000000001"]})
        >>> combined = query & Field('seq').gte(10)
        >>> combined.to_json()
    """

    def __init__(self, json_data: Dict[str, Any]):
        self._json = json_data

    def to_json(self) -> Dict[str, Any]:
        return self._json

    def get_fields(self) -> QueryFields:
        """
        Raises:
            MalformedQuery: if the dict is outside the filter grammar.
        """
        return self._extract_fields(self._json)

    def _extract_fields(self, node: Any) -> QueryFields:
        fields = QueryFields()
        if not isinstance(node, dict) or not node:
            return fields
        if len(node) != 1:
            raise MalformedQuery(f"query node must have exactly one operator: {node!r}")
        op, operands = next(iter(node.items()))
        if op == 'var':
            if not isinstance(operands, str) or not operands:
                raise MalformedQuery(f"malformed field reference {operands!r}")
            fields.add_field(operands)
            return fields
        if op not in COMPARISONS and op not in LOGIC:
            raise MalformedQuery(f"unknown operator {op!r}")
        if not isinstance(operands, list):
            operands = [operands]
        for operand in operands:
            fields = fields.merge(self._extract_fields(operand))
        return fields

    def __repr__(self) -> str:
        return f"JsonQuery({self._json})"


class QueryBuilder:
    """
    Factory for queries from various sources.

    Examples:
        >>> query = QueryBuilder.and_(
        ...     QueryBuilder.field('isin').equals('XS0000000001'),
        ...     QueryBuilder.field('seq').between(10, 20),
        ... )
    """

    @staticmethod
    def field(name: str) -> Field:
        return Field(name)

    @staticmethod
    def from_json(json_data: Dict[str, Any]) -> JsonQuery:
        return JsonQuery(json_data)

    @staticmethod
    def and_(*queries: Query) -> QuerySet:
        return QuerySet(Logic.AND, list(queries))

    @staticmethod
    def or_(*queries: Query) -> QuerySet:
        return QuerySet(Logic.OR, list(queries))

    @staticmethod
    def not_(query: Query) -> QuerySet:
        return QuerySet(Logic.NOT, [query])

    @staticmethod
    def nested(logic: str, *queries: Query) -> QuerySet:
        """
        Args:
            logic: 'and', 'or' or 'not'

        Raises:
            MalformedQuery: on any other logic name.
        """
        logic_map = {'and': Logic.AND, 'or': Logic.OR, 'not': Logic.NOT}
        if logic.lower() not in logic_map:
            raise MalformedQuery(f"unknown logic {logic!r}")
        return QuerySet(logic_map[logic.lower()], list(queries))
