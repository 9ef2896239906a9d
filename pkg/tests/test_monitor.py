"""Tests for the trade monitor and supervisor queries."""

import json
import random
from pathlib import Path

import pytest

import green_bond_engine
from green_bond_engine.core import ConfigError, CorruptLedger, MalformedQuery, Role, Unauthorized
from green_bond_engine.crypto import Signer
from green_bond_engine.ledger import FileStore
from green_bond_engine.monitor import (
    Alert, AlertEngine, AlertMode, Monitor, RuleKind, RuleSpec, SettledTrade, evaluate_stream,
    expost_scan, load_rules, parse_rules,
)
from green_bond_engine.monitor import (
    PriceSpikeDetector, SelfTradeDetector, VolumeSurgeDetector, WashTradeDetector,
)
from green_bond_engine.query import Q
from green_bond_engine.trading import Side

from tests.test_trading import INVESTORS, ISIN, MarketFixture


def settled(seq, buyer, seller, qty=10, price=100, entries=(-1, -1), isin=ISIN):
    row = {"seq": seq, "kind": "TradeSettled", "isin": isin, "buyer": buyer,
           "seller": seller, "qty": qty, "price": price, "status": "Settled"}
    return SettledTrade(seq, isin, buyer, seller, qty, price, entries[0], entries[1], row)


def persist(ledger, path):
    """Write a live ledger out the way a FileStore-backed node would."""
    store = FileStore(path, fsync=False)
    for envelope in ledger:
        store.write(envelope.encode())
    store.sync(len(ledger), ledger.head_hash)
    store.close()
    return path


class TestDetectors:
    """Rule predicates over hand-built trades."""

    def test_self_trade(self):
        detector = SelfTradeDetector(RuleSpec(rule_id="self", kind="SelfTrade", window=10))
        assert detector.observe(settled(5, "A", "B", entries=(1, 2))) == []
        [alert] = detector.observe(settled(9, "A", "A", entries=(3, 4)))
        assert alert.implicated_parties == ("A",)
        assert alert.evidence == (3, 4, 9)
        assert alert.alert_id == "self@9:A"

    def test_self_trade_window(self):
        detector = SelfTradeDetector(RuleSpec(rule_id="self", kind="SelfTrade", window=10))
        assert detector.observe(settled(30, "A", "A", entries=(2, 20))) == []

    def test_self_trade_through_owner_map(self):
        rule = RuleSpec(rule_id="self", kind="SelfTrade", window=10, owners={"A2": "A"})
        [alert] = SelfTradeDetector(rule).observe(settled(9, "A", "A2", entries=(3, 4)))
        assert alert.implicated_parties == ("A", "A2")

    def test_wash_trade(self):
        rule = RuleSpec(rule_id="wash", kind="WashTrade", window=50, min_round_trips=2)
        detector = WashTradeDetector(rule)
        alerts = []
        for seq, (buyer, seller) in enumerate([("A", "B"), ("B", "A"), ("A", "B"), ("B", "A")], 1):
            alerts.extend(detector.observe(settled(seq, buyer, seller)))
        assert [a.implicated_parties for a in alerts] == [("B",), ("A",)]
        assert all(a.evidence == (1, 2, 3, 4) and a.detected_at == 4 for a in alerts)

        # the count restarts after an alert
        assert detector.observe(settled(5, "A", "B")) == []
        assert detector.observe(settled(6, "B", "A")) == []

    def test_wash_trade_window(self):
        rule = RuleSpec(rule_id="wash", kind="WashTrade", window=2, min_round_trips=2)
        detector = WashTradeDetector(rule)
        for seq, (buyer, seller) in zip((1, 2, 10, 11), [("A", "B"), ("B", "A")] * 2):
            assert detector.observe(settled(seq, buyer, seller)) == []

    def test_wash_trade_price_tolerance(self):
        strict = WashTradeDetector(RuleSpec(rule_id="w", kind="WashTrade", window=50,
                                            min_round_trips=1))
        strict.observe(settled(1, "A", "B", price=100))
        assert strict.observe(settled(2, "B", "A", price=101)) == []

        loose = WashTradeDetector(RuleSpec(rule_id="w", kind="WashTrade", window=50,
                                           min_round_trips=1, price_tolerance_bp=100))
        loose.observe(settled(1, "A", "B", price=100))
        assert len(loose.observe(settled(2, "B", "A", price=101))) == 2

    def test_wash_trade_needs_equal_quantity(self):
        detector = WashTradeDetector(RuleSpec(rule_id="w", kind="WashTrade", window=50,
                                              min_round_trips=1))
        detector.observe(settled(1, "A", "B", qty=10))
        assert detector.observe(settled(2, "B", "A", qty=9)) == []

    def test_price_spike(self):
        detector = PriceSpikeDetector(RuleSpec(rule_id="spike", kind="PriceSpike", window=20,
                                               threshold_bp=500))
        assert detector.observe(settled(1, "A", "B", price=100)) == []
        assert detector.observe(settled(2, "C", "D", price=105)) == []
        [alert] = detector.observe(settled(3, "C", "D", price=106))
        assert alert.evidence == (1, 3)
        assert alert.implicated_parties == ("A", "B", "C", "D")
        # the window restarts after an alert
        assert detector.observe(settled(4, "C", "D", price=107)) == []

    def test_price_spike_window(self):
        detector = PriceSpikeDetector(RuleSpec(rule_id="spike", kind="PriceSpike", window=5))
        detector.observe(settled(1, "A", "B", price=100))
        assert detector.observe(settled(10, "A", "B", price=200)) == []

    def test_volume_surge(self):
        detector = VolumeSurgeDetector(RuleSpec(rule_id="vol", kind="VolumeSurge", window=20,
                                                multiple=5))
        assert detector.observe(settled(1, "A", "B", qty=10)) == []
        assert detector.observe(settled(2, "A", "B", qty=10)) == []
        assert detector.observe(settled(3, "A", "B", qty=50)) == []
        [alert] = detector.observe(settled(4, "C", "D", qty=200))
        assert alert.evidence == (1, 2, 3, 4)


class TestRules:
    """Test rule configuration."""

    def test_bundled_rules(self):
        path = Path(green_bond_engine.__file__).parent / "data" / "rules.yaml"
        rules = load_rules(path)
        assert [r.kind for r in rules] == [
            RuleKind.SELF_TRADE, RuleKind.WASH_TRADE, RuleKind.PRICE_SPIKE, RuleKind.VOLUME_SURGE,
        ]

    def test_bare_list(self):
        [rule] = parse_rules([{"rule_id": "s", "kind": "SelfTrade", "window": 3}])
        assert rule.enabled

    @pytest.mark.parametrize("data", [
        {"rules": {"rule_id": "s"}},
        [{"rule_id": "s", "kind": "SelfTrade", "window": 0}],
        [{"rule_id": "s", "kind": "Spoofing", "window": 3}],
        [{"rule_id": "s", "kind": "SelfTrade", "window": 3, "filter": {"==": [{"var": "x"}, 1]}}],
        [{"rule_id": "s", "kind": "SelfTrade", "window": 3},
         {"rule_id": "s", "kind": "WashTrade", "window": 3}],
    ])
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            parse_rules(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_rules(tmp_path / "absent.yaml")


RULES = [
    RuleSpec(rule_id="self-trade", kind="SelfTrade", window=100),
    RuleSpec(rule_id="wash-trade", kind="WashTrade", window=50, min_round_trips=2),
    RuleSpec(rule_id="price-spike", kind="PriceSpike", window=20, threshold_bp=300),
    RuleSpec(rule_id="volume-surge", kind="VolumeSurge", window=20, multiple=3),
]


class MonitorFixture(MarketFixture):
    """The market plus a supervisor and a monitor attached to the trade feed."""

    cash = 10**9
    units = 10**6

    def setup_method(self):
        super().setup_method()
        self.signers["S"] = Signer.from_label("S")
        self.identity.register_party("S", {Role.SUPERVISOR}, self.signers["S"].public_key, "S")
        self.monitor = Monitor("monitor", self.identity, RULES)
        self.monitor.attach(self.trading)

    def self_trade(self):
        self.sell("A", 10, 100)
        self.buy("A", 10, 100)


class TestMonitor(MonitorFixture):
    """Test the real-time monitor on a live trade feed."""

    def test_self_trade_alert(self):
        self.sell("B", 5, 101)
        self.self_trade()
        [alert] = [a for a in self.monitor.alerts if a.kind is RuleKind.SELF_TRADE]
        assert alert.implicated_parties == ("A",)
        assert alert.evidence == (1, 2, 4)
        assert alert.mode is AlertMode.REAL_TIME

    def test_rule_filter_and_shard(self):
        rule = RuleSpec(rule_id="s", kind="SelfTrade", window=100,
                        filter={"!=": [{"var": "isin"}, ISIN]})
        self.self_trade()
        assert list(evaluate_stream(self.trading.trade_feed(), [rule])) == []
        assert list(evaluate_stream(self.trading.trade_feed(), RULES, isins=["XS9"])) == []
        disabled = rule.model_copy(update={"enabled": False, "filter": None})
        assert AlertEngine([disabled]).detectors == []

    def test_alerts_file_is_written_once(self, tmp_path):
        path = tmp_path / "alerts.jsonl"
        monitor = Monitor("monitor", self.identity, RULES, alerts_path=path)
        monitor.attach(self.trading)
        self.self_trade()
        restarted = Monitor("monitor", self.identity, RULES, alerts_path=path)
        restarted.attach(self.trading)
        assert restarted.alerts == monitor.alerts
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [line["alert_id"] for line in lines] == [a.alert_id for a in monitor.alerts]
        assert Alert.from_value(lines[0]) == monitor.alerts[0]

    def test_detach(self):
        self.monitor.detach()
        self.self_trade()
        assert self.monitor.alerts == []


class TestExPost(MonitorFixture):
    """The ex-post scan of a ledger file finds exactly the real-time alerts."""

    def random_flow(self, seed, n=60):
        rng = random.Random(seed)
        for _ in range(n):
            party = rng.choice(INVESTORS)
            side = rng.choice([Side.BUY, Side.SELL])
            qty = rng.choice([10, 10, 20, rng.randint(1, 200)])
            self.submit(party, side, qty, rng.randint(94, 106))

    @pytest.mark.parametrize("seed", range(2))
    def test_same_alerts(self, tmp_path, seed):
        self.random_flow(seed)
        path = persist(self.trading.ledger, tmp_path / "trading.ledger")
        expost = expost_scan(path, RULES, self.identity.key_at)
        assert self.monitor.alerts
        assert [a.key() for a in expost] == [a.key() for a in self.monitor.alerts]
        assert {a.mode for a in expost} == {AlertMode.EX_POST}

    def test_tampered_file(self, tmp_path):
        self.self_trade()
        path = persist(self.trading.ledger, tmp_path / "trading.ledger")
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptLedger):
            expost_scan(path, RULES, self.identity.key_at)


class TestSupervisor(MonitorFixture):
    """Test supervisor queries over the trade ledger."""

    def query(self, query, party="S"):
        return self.monitor.supervisor_query(self.request("SupervisorQuery", {"query": query},
                                                          party))

    def test_query(self):
        self.sell("B", 5, 99)
        self.buy("C", 5, 100)
        self.buy("D", 1, 90)
        result = self.query((Q(kind="TradeSettled") & Q(buyer="C")).to_json())
        assert result.seqs == [3]
        assert result.rows[0]["seller"] == "B"
        assert result.ledger_length == 5

        bids = self.query({"and": [{"==": [{"var": "side"}, "Buy"]},
                                   {"==": [{"var": "kind"}, "OrderAccepted"]}]})
        assert [row["party"] for row in bids.rows] == ["C", "D"]

    def test_rows_carry_verifiable_seqs(self):
        self.self_trade()
        result = self.query(Q(kind="TradeSettled").to_json())
        for seq in result.seqs:
            assert self.trading.ledger[seq].payload_kind == "TradeSettled"

    def test_needs_supervisor_role(self):
        with pytest.raises(Unauthorized):
            self.query({}, party="A")

    def test_malformed(self):
        with pytest.raises(MalformedQuery):
            self.query({"some": [{"var": "isin"}, ISIN]})
        with pytest.raises(MalformedQuery):
            self.query(Q(colour="green").to_json())

    def test_handle(self):
        self.self_trade()
        reply = self.monitor.handle(self.request(
            "SupervisorQuery", {"query": Q(kind="TradeSettled").to_json()}, "S"
        ))
        assert reply["seqs"] == [3]
