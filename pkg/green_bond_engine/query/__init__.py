"""
Feed query language shared by monitor rule filters and supervisor queries.

Quick Start:
    from green_bond_engine.query import QueryEngine, Field, Q

    engine = QueryEngine()
    query = Q(isin='XS0000000001') & Field('seq').between(10, 20)
    engine.filter(query, rows)
"""

from .core import (
    ROW_FIELDS,
    Logic,
    Operator,
    Query,
    QueryFields,
    QueryResult,
    QuerySet,
    RowSource,
)
from .builder import (
    AND,
    NOT,
    OR,
    Condition,
    Field,
    JsonQuery,
    Q,
    QueryBuilder,
)
from .evaluator import QueryEngine, QuerySpec


__all__ = [
    'QueryEngine',
    'QuerySpec',
    'ROW_FIELDS',
    'Logic',
    'Operator',
    'Query',
    'QueryFields',
    'QueryResult',
    'QuerySet',
    'RowSource',
    'Field',
    'Condition',
    'Q',
    'QueryBuilder',
    'JsonQuery',
    'AND',
    'OR',
    'NOT',
]
