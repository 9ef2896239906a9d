"""Tests for the feed query engine."""

import pytest
from green_bond_engine.query import Field, Q, QueryEngine, QueryResult, RowSource
from green_bond_engine.core import MalformedQuery


ISIN = "XS0000000001"


def trade(seq, buyer, seller, qty, price, isin=ISIN, kind='TradeSettled'):
    return {
        'seq': seq, 'kind': kind, 'isin': isin, 'buyer': buyer, 'seller': seller,
        'qty': qty, 'price': price, 'trade_id': f"trading:t{seq}",
    }


class TestQueryEngine:
    """Test evaluation of single rows."""

    def setup_method(self):
        self.engine = QueryEngine()
        self.row = trade(7, 'A', 'B', 100, 98)

    def test_simple_equals(self):
        assert self.engine.evaluate(Field('buyer').equals('A'), self.row) is True
        assert self.engine.evaluate(Field('buyer').equals('B'), self.row) is False

    def test_comparison_operators(self):
        assert self.engine.evaluate(Field('qty').gt(99), self.row) is True
        assert self.engine.evaluate(Field('qty').gt(100), self.row) is False
        assert self.engine.evaluate(Field('qty').gte(100), self.row) is True
        assert self.engine.evaluate(Field('price').lt(99), self.row) is True
        assert self.engine.evaluate(Field('price').lte(97), self.row) is False

    def test_in(self):
        assert self.engine.evaluate(Q(kind__in=['TradeSettled', 'TradeFailed']), self.row)
        assert not self.engine.evaluate(Q(kind__in=['OrderAccepted']), self.row)

    def test_logic(self):
        assert self.engine.evaluate(Q(buyer='A') & Q(seller='B'), self.row)
        assert not self.engine.evaluate(Q(buyer='A') & Q(seller='A'), self.row)
        assert self.engine.evaluate(Q(buyer='B') | Q(seller='B'), self.row)
        assert self.engine.evaluate(~Q(buyer='B'), self.row)

    def test_range(self):
        assert self.engine.evaluate(Field('seq').between(7, 7), self.row)
        assert not self.engine.evaluate(Field('seq').between(8, 20), self.row)

    def test_empty_query_matches(self):
        assert self.engine.evaluate({}, self.row) is True

    def test_raw_dict(self):
        assert self.engine.evaluate({"==": [{"var": "isin"}, ISIN]}, self.row)

    def test_matches_alias(self):
        assert self.engine.matches(Q(qty=100), self.row)


class TestExactComparison:
    """Values of different types never compare, missing fields never match."""

    def setup_method(self):
        self.engine = QueryEngine()
        self.row = {'qty': 5, 'isin': ISIN, 'state_version': 0}

    def test_types_do_not_coerce(self):
        assert not self.engine.evaluate(Q(qty='5'), self.row)
        assert not self.engine.evaluate(Q(qty__gt='1'), self.row)
        assert self.engine.evaluate(Q(qty__ne='5'), self.row)

    def test_bool_is_not_int(self):
        assert not self.engine.evaluate(Q(state_version=False), self.row)

    def test_missing_field(self):
        assert not self.engine.evaluate(Q(price__gt=0), self.row)
        assert not self.engine.evaluate(Q(price__lt=0), self.row)
        assert not self.engine.evaluate(Q(party='A'), self.row)


class TestValidation:
    """Test validation against the row fields."""

    def setup_method(self):
        self.engine = QueryEngine()

    def test_unknown_field(self):
        with pytest.raises(MalformedQuery):
            self.engine.evaluate(Q(colour='green'), {})

    def test_unknown_operator(self):
        with pytest.raises(MalformedQuery):
            self.engine.validate({"some": [{"var": "isin"}, ISIN]})

    def test_not_a_dict(self):
        with pytest.raises(MalformedQuery):
            self.engine.validate(["==", "isin", ISIN])

    def test_arity(self):
        with pytest.raises(MalformedQuery):
            self.engine.evaluate({">": [{"var": "qty"}]}, {'qty': 1})

    def test_custom_fields(self):
        engine = QueryEngine(fields={'colour'})
        assert engine.evaluate(Q(colour='green'), {'colour': 'green'})
        with pytest.raises(MalformedQuery):
            engine.validate(Q(isin=ISIN))

    def test_returns_dict(self):
        assert self.engine.validate(Q(party='A')) == {"==": [{"var": "party"}, "A"]}


class TestFilter:
    """Test filtering row collections."""

    def setup_method(self):
        self.engine = QueryEngine()
        self.rows = [
            trade(1, 'A', 'B', 10, 100),
            trade(2, 'B', 'A', 10, 101),
            trade(3, 'C', 'D', 50, 99, isin="XS0000000002"),
            trade(4, 'A', 'C', 5, 100, kind='TradeFailed'),
        ]

    def test_filter_keeps_order(self):
        rows = self.engine.filter(Q(buyer='A') | Q(seller='A'), self.rows)
        assert [r['seq'] for r in rows] == [1, 2, 4]

    def test_filter_combined(self):
        query = Q(isin=ISIN) & Q(kind='TradeSettled') & Field('price').gte(101)
        assert self.engine.filter(query, self.rows) == [self.rows[1]]

    def test_compile(self):
        predicate = self.engine.compile(Q(qty__gte=10))
        assert [predicate(r) for r in self.rows] == [True, True, True, False]

    def test_compile_validates(self):
        with pytest.raises(MalformedQuery):
            self.engine.compile(Q(colour='green'))

    def test_result(self):
        result = QueryResult(self.engine.filter(Q(isin=ISIN), self.rows), ledger_length=9)
        assert result.seqs == [1, 2, 4]
        assert len(result) == 3
        assert not QueryResult([], 9)


class Row(RowSource):
    def __init__(self, party, qty):
        self.party, self.qty = party, qty

    def to_row(self):
        return {'party': self.party, 'qty': self.qty}


class TestSelect:
    """Test selecting row sources."""

    def test_select(self):
        sources = [Row('A', 1), Row('B', 2), Row('A', 3)]
        selected = QueryEngine().select(Q(party='A') & Q(qty__gt=1), sources)
        assert selected == [sources[2]]
