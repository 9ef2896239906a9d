"""
Query engine: validation and evaluation of feed filters over rows.
"""

from __future__ import annotations
from typing import Any, Callable, Dict, Iterable, List, Union

from ..core import MalformedQuery
from .builder import JsonQuery
from .core import ROW_FIELDS, Query, QueryFields, RowSource


__all__ = ['QueryEngine', 'QuerySpec']

QuerySpec = Union[Dict[str, Any], Query]


class QueryEngine:
    """
    Evaluates filter queries against flat rows.

    Comparisons are exact: values of different types never compare equal or
    ordered, and a missing field never satisfies a comparison.

    Examples:
        >>> engine = QueryEngine()
        >>> engine.matches(Field('qty') > 5, {'qty': 10})
        True
        >>> rows = engine.filter(Q(isin='XS0000000001'), rows)
    """

    def __init__(self, fields: Iterable[str] = ROW_FIELDS):
        self.fields = frozenset(fields)

    # =========================================================================
    # Validation
    # =========================================================================

    def get_fields(self, query: QuerySpec) -> QueryFields:
        if isinstance(query, Query):
            return query.get_fields()
        return JsonQuery(query).get_fields()

    def validate(self, query: QuerySpec) -> Dict[str, Any]:
        """
        Check a query against the grammar and the row fields.

        Returns:
            The query as a dict.

        Raises:
            MalformedQuery: on unknown operators or fields.
        """
        json_query = query.to_json() if isinstance(query, Query) else query
        if not isinstance(json_query, dict):
            raise MalformedQuery(f"query must be a dict, got {type(json_query).__name__}")
        unknown = JsonQuery(json_query).get_fields().fields - self.fields
        if unknown:
            raise MalformedQuery(f"unknown fields: {', '.join(sorted(unknown))}")
        return json_query

    # =========================================================================
    # Evaluation
    # =========================================================================

    def evaluate(self, query: QuerySpec, row: Dict[str, Any]) -> bool:
        """
        Raises:
            MalformedQuery
        """
        return bool(self._eval(self.validate(query), row))

    def matches(self, query: QuerySpec, row: Dict[str, Any]) -> bool:
        return self.evaluate(query, row)

    def filter(self, query: QuerySpec, rows: Iterable[Dict[str, Any]]) -> List[Dict[str, Any]]:
        """Rows matching ``query``, in input order. The query is validated once."""
        json_query = self.validate(query)
        return [row for row in rows if self._eval(json_query, row)]

    def select(self, query: QuerySpec, sources: Iterable[RowSource]) -> List[RowSource]:
        json_query = self.validate(query)
        return [source for source in sources if self._eval(json_query, source.to_row())]

    def compile(self, query: QuerySpec) -> Callable[[Dict[str, Any]], bool]:
        """A validated predicate for repeated use (rule filters)."""
        json_query = self.validate(query)
        return lambda row: bool(self._eval(json_query, row))

    def _eval(self, node: Any, row: Dict[str, Any]) -> Any:
        if not isinstance(node, dict):
            return node
        if not node:
            return True
        op, operands = next(iter(node.items()))
        if op == 'var':
            return row.get(operands)
        if not isinstance(operands, list):
            operands = [operands]
        if op == 'and':
            return all(self._eval(o, row) for o in operands)
        if op == 'or':
            return any(self._eval(o, row) for o in operands)
        if op == '!':
            return not self._eval(operands[0], row) if operands else True
        if len(operands) != 2:
            raise MalformedQuery(f"{op} takes two operands")
        a, b = (self._eval(o, row) for o in operands)
        return self._apply_op(op, a, b)

    def _apply_op(self, op: str, a: Any, b: Any) -> bool:
        if op == 'in':
            return isinstance(b, (list, tuple)) and a in b
        if op == '==':
            return self._same_type(a, b) and a == b
        if op == '!=':
            return not (self._same_type(a, b) and a == b)
        if a is None or b is None or not self._same_type(a, b):
            return False
        if op == '>':
            return a > b
        if op == '>=':
            return a >= b
        if op == '<':
            return a < b
        if op == '<=':
            return a <= b
        raise MalformedQuery(f"unknown operator {op!r}")

    @staticmethod
    def _same_type(a: Any, b: Any) -> bool:
        if isinstance(a, bool) or isinstance(b, bool):
            return type(a) is type(b)
        if isinstance(a, int) and isinstance(b, int):
            return True
        return type(a) is type(b)
