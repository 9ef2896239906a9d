"""Tests for the s-expression text form of specifications."""

import pytest

from green_bond_engine.calculus import (
    DONE, BinOp, Lit, Notice, Observation, PartyTarget, Payment, Pred, ProRata, Seq, Var,
    bind_parties, make_green_bond,
)
from green_bond_engine.core import MalformedSpec
from green_bond_engine.sexpr import format_expr, format_spec, parse_spec


class TestFormat:
    """Test the canonical printer."""

    def test_atoms(self):
        assert format_spec(DONE) == "(done)"
        assert format_spec(Notice("I", "prepay", 8)) == "(notice I prepay 8)"
        payment = Payment("I", PartyTarget("A"), "EUR", BinOp("*", Var("y"), Lit(2)), 10)
        assert format_spec(payment) == "(pay I (party A) EUR (* y 2) 10)"
        assert format_spec(Payment("I", ProRata(None), "EUR", Lit(5), 3)) \
            == "(pay I (pro-rata) EUR 5 3)"

    def test_observation(self):
        observation = Observation("C", "yield_1", Pred(">=", Lit(0)), 9, snapshot="holders_1")
        assert format_spec(observation) == "(observe C yield_1 (>= 0) 9 holders_1)"

    def test_expr(self):
        assert format_expr(BinOp("/", BinOp("-", Var("a"), Lit(-1)), Lit(3))) == "(/ (- a -1) 3)"


class TestParse:
    """Test the reader."""

    def test_green_bond(self):
        spec = bind_parties(make_green_bond(1_000_000, "EUR", 2, 1, [10, 20], callable=True),
                            {"issuer": "I", "verifier": "V", "calculator": "C"})
        text = format_spec(spec)
        assert parse_spec(text) == spec
        assert format_spec(parse_spec(text)) == text

    def test_whitespace_is_not_significant(self):
        text = "(seq\n  (notice I a 1)\n\t(pay I (pro-rata h) EUR 7 2))"
        spec = parse_spec(text)
        assert spec == Seq(Notice("I", "a", 1), Payment("I", ProRata("h"), "EUR", Lit(7), 2))
        assert format_spec(spec) == "(seq (notice I a 1) (pay I (pro-rata h) EUR 7 2))"

    @pytest.mark.parametrize("text", [
        "",
        "(done",
        "(done))",
        "(done) (done)",
        "done",
        "(teleport I)",
        "(done extra)",
        "(notice I a soon)",
        "(seq (done))",
        "(observe V k (~ 1) 5)",
        "(observe V k >= 5)",
        "(pay I (everyone) EUR 1 5)",
        "(pay I (party A) EUR (% 1 2) 5)",
        "(pay I (party A B) EUR 1 5)",
    ])
    def test_malformed(self, text):
        with pytest.raises(MalformedSpec):
            parse_spec(text)
