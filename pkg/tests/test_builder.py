"""Tests for the feed query builder."""

import pytest
from green_bond_engine.query import (
    AND, NOT, OR, Condition, Field, JsonQuery, Q, QueryBuilder, QuerySet,
)
from green_bond_engine.core import MalformedQuery
from green_bond_engine.query.core import Logic, Operator


ISIN = "XS0000000001"


class TestField:
    """Test Field builder."""

    def test_equals(self):
        query = Field('isin').equals(ISIN)
        assert query.to_json() == {"==": [{"var": "isin"}, ISIN]}

    def test_not_equals(self):
        query = Field('status').not_equals('Settled')
        assert query.to_json() == {"!=": [{"var": "status"}, "Settled"]}

    def test_greater_than(self):
        assert Field('qty').greater_than(100).to_json() == {">": [{"var": "qty"}, 100]}

    def test_greater_or_equal(self):
        assert Field('seq').greater_or_equal(10).to_json() == {">=": [{"var": "seq"}, 10]}

    def test_less_than(self):
        assert Field('price').less_than(99).to_json() == {"<": [{"var": "price"}, 99]}

    def test_less_or_equal(self):
        assert Field('seq').less_or_equal(20).to_json() == {"<=": [{"var": "seq"}, 20]}

    def test_is_in(self):
        query = Field('kind').is_in(('TradeSettled', 'TradeFailed'))
        assert query.to_json() == {"in": [{"var": "kind"}, ["TradeSettled", "TradeFailed"]]}

    def test_between(self):
        query = Field('seq').between(10, 20)
        assert isinstance(query, QuerySet)
        assert query.to_json() == {
            "and": [{">=": [{"var": "seq"}, 10]}, {"<=": [{"var": "seq"}, 20]}]
        }

    def test_short_aliases(self):
        assert Field('qty').gt(1).to_json() == Field('qty').greater_than(1).to_json()
        assert Field('qty').lte(1).to_json() == Field('qty').less_or_equal(1).to_json()
        assert Field('party').ne('A').to_json() == Field('party').not_equals('A').to_json()

    def test_operator_overloads(self):
        assert (Field('party') == 'A').to_json() == {"==": [{"var": "party"}, "A"]}
        assert (Field('party') != 'A').to_json() == {"!=": [{"var": "party"}, "A"]}
        assert (Field('qty') > 5).to_json() == {">": [{"var": "qty"}, 5]}
        assert (Field('qty') >= 5).to_json() == {">=": [{"var": "qty"}, 5]}
        assert (Field('qty') < 5).to_json() == {"<": [{"var": "qty"}, 5]}
        assert (Field('qty') <= 5).to_json() == {"<=": [{"var": "qty"}, 5]}


class TestQ:
    """Test Q keyword queries."""

    def test_simple_equals(self):
        assert Q(isin=ISIN).to_json() == {"==": [{"var": "isin"}, ISIN]}

    def test_operators(self):
        assert Q(qty__gt=100).to_json() == {">": [{"var": "qty"}, 100]}
        assert Q(seq__gte=3).to_json() == {">=": [{"var": "seq"}, 3]}
        assert Q(price__lt=99).to_json() == {"<": [{"var": "price"}, 99]}
        assert Q(price__lte=99).to_json() == {"<=": [{"var": "price"}, 99]}
        assert Q(side__ne='Buy').to_json() == {"!=": [{"var": "side"}, "Buy"]}
        assert Q(kind__in=['TradeSettled']).to_json() == {
            "in": [{"var": "kind"}, ["TradeSettled"]]
        }

    def test_unknown_suffix_is_part_of_field(self):
        query = Q(state_version__like=3)
        assert query.field == 'state_version__like'
        assert query.operator is Operator.EQ

    def test_one_keyword_only(self):
        with pytest.raises(ValueError):
            Q(isin=ISIN, party='A')
        with pytest.raises(ValueError):
            Q()

    def test_combinators(self):
        query = (Q(buyer='A') | Q(seller='A')) & Q(isin=ISIN)
        assert query.to_json() == {
            "and": [
                {"or": [{"==": [{"var": "buyer"}, "A"]}, {"==": [{"var": "seller"}, "A"]}]},
                {"==": [{"var": "isin"}, ISIN]},
            ]
        }

    def test_negation(self):
        assert (~Q(status='Settled')).to_json() == {"!": {"==": [{"var": "status"}, "Settled"]}}


class TestLogic:
    """Test AND / OR / NOT helpers."""

    def test_and_flattens(self):
        query = Q(isin=ISIN) & Q(party='A') & Q(side='Buy')
        assert query.logic is Logic.AND
        assert len(query.queries) == 3

    def test_or_flattens(self):
        query = Q(party='A') | Q(party='B') | Q(party='C')
        assert query.logic is Logic.OR
        assert len(query.queries) == 3

    def test_mixed_does_not_flatten(self):
        query = (Q(party='A') | Q(party='B')) & Q(isin=ISIN)
        assert query.logic is Logic.AND
        assert len(query.queries) == 2

    def test_helpers(self):
        both = Q(party='A') & Q(side='Buy')
        assert AND(Q(party='A'), Q(side='Buy')).to_json() == both.to_json()
        assert OR(Q(party='A'), Q(party='B')).to_json() == (Q(party='A') | Q(party='B')).to_json()
        assert NOT(Q(party='A')).to_json() == (~Q(party='A')).to_json()

    def test_degenerate_sets(self):
        assert AND().to_json() == {}
        assert AND(Q(party='A')).to_json() == {"==": [{"var": "party"}, "A"]}
        assert QuerySet(Logic.NOT, []).to_json() == {}


class TestFields:
    """Test field extraction."""

    def test_condition(self):
        assert Condition('qty', Operator.GT, 1).get_fields().fields == {'qty'}

    def test_nested(self):
        query = (Q(buyer='A') | Q(seller='A')) & Field('seq').between(1, 9)
        assert query.get_fields().fields == {'buyer', 'seller', 'seq'}

    def test_unknown(self):
        query = Q(isin=ISIN) & Q(colour='green')
        assert query.get_fields().unknown == {'colour'}


class TestJsonQuery:
    """Test raw dict queries."""

    def test_wraps_and_combines(self):
        raw = {"==": [{"var": "isin"}, ISIN]}
        query = JsonQuery(raw) & Field('seq').gte(10)
        assert query.to_json() == {"and": [raw, {">=": [{"var": "seq"}, 10]}]}

    def test_fields(self):
        raw = {"or": [{"==": [{"var": "buyer"}, "A"]}, {"!": {"==": [{"var": "seller"}, "A"]}}]}
        assert JsonQuery(raw).get_fields().fields == {'buyer', 'seller'}

    @pytest.mark.parametrize("raw", [
        {"some": [{"var": "tags"}, {"==": [{"var": ""}, "x"]}]},
        {"==": [{"var": ""}, 1]},
        {"==": [{"var": 3}, 1]},
        {"==": [{"var": "qty"}, 1], "!=": [{"var": "qty"}, 2]},
        {"_startswith": [{"var": "isin"}, "XS"]},
    ])
    def test_outside_grammar(self, raw):
        with pytest.raises(MalformedQuery):
            JsonQuery(raw).get_fields()


class TestQueryBuilder:
    """Test the factory."""

    def test_field(self):
        assert QueryBuilder.field('qty').gt(1).to_json() == {">": [{"var": "qty"}, 1]}

    def test_from_json(self):
        raw = {"==": [{"var": "party"}, "A"]}
        assert QueryBuilder.from_json(raw).to_json() == raw

    def test_and_or_not(self):
        a, b = Q(party='A'), Q(party='B')
        assert QueryBuilder.and_(a, b).logic is Logic.AND
        assert QueryBuilder.or_(a, b).logic is Logic.OR
        assert QueryBuilder.not_(a).logic is Logic.NOT

    def test_nested(self):
        query = QueryBuilder.nested('OR', Q(party='A'), Q(party='B'))
        assert query.logic is Logic.OR
        with pytest.raises(MalformedQuery):
            QueryBuilder.nested('xor', Q(party='A'))
