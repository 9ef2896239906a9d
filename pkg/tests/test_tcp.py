"""Tests for the TCP transport."""

from pathlib import Path

import pytest

import green_bond_engine
from green_bond_engine.calculus import make_green_bond
from green_bond_engine.core import InvalidParams
from green_bond_engine.crypto import Signer
from green_bond_engine.harness.cluster import Cluster
from green_bond_engine.harness.config import Topology, read_yaml
from green_bond_engine.harness.tcp import TcpDriver, parse_address
from green_bond_engine.messages import TxnKind, TxnMessage
from green_bond_engine.runtime import Call
from green_bond_engine.sexpr import format_spec


DATA = Path(green_bond_engine.__file__).parent / "data"


class TestAddresses:

    def test_parse(self):
        assert parse_address("127.0.0.1:7001") == ("127.0.0.1", 7001)
        assert parse_address("[::1]:0") == ("[::1]", 0)

    @pytest.mark.parametrize("address", ["localhost", ":7001", "host:port", "host:"])
    def test_invalid(self, address):
        with pytest.raises(InvalidParams):
            parse_address(address)


class Echo:
    def handle(self, message):
        if message.txn_id == "bad":
            raise InvalidParams("bad txn")
        return message


class Relay:
    def handle(self, message):
        reply = yield Call("echo", message)
        return reply.value


@pytest.mark.slow
class TestTcpDriver:
    """Nodes behind loopback servers."""

    def setup_method(self):
        self.driver = TcpDriver({"echo": "127.0.0.1:0", "relay": "127.0.0.1:0"},
                                call_timeout=5.0)
        self.driver.register("echo", Echo())
        self.driver.register("relay", Relay())
        self.operator = Signer.from_label("operator")

    def teardown_method(self):
        self.driver.close()

    def message(self, txn_id="tx-1"):
        return TxnMessage.create(TxnKind.DECISION_QUERY, txn_id, self.operator, {"n": 1})

    def test_ephemeral_ports(self):
        assert all(parse_address(a)[1] > 0 for a in self.driver.addresses.values())

    def test_round_trip(self):
        message = self.message()
        assert self.driver.call("echo", message).value == message
        assert self.driver.call("relay", message).value == message

    def test_error_reply(self):
        assert self.driver.call("echo", self.message("bad")).error == "InvalidParams"

    def test_unreachable(self):
        assert self.driver.call("nowhere", self.message()) is None
        self.driver.down.add("echo")
        assert self.driver.call("echo", self.message()) is None

    def test_register_needs_address(self):
        with pytest.raises(InvalidParams):
            self.driver.register("other", Echo())


@pytest.mark.slow
class TestTcpCluster:
    """The reference topology over TCP settles a DvP."""

    def test_dvp(self):
        data = read_yaml(DATA / "topology.yaml")
        data["transport"] = {"kind": "tcp"}
        cluster = Cluster(Topology.model_validate(data))
        try:
            assert isinstance(cluster.driver, TcpDriver)
            spec = format_spec(make_green_bond(1_000_000, "EUR", 1, 0, [10]))
            isin, outcome = cluster.issue("GB", spec, 1_000_000,
                                          parties={"verifier": "V", "calculator": "C"})
            assert outcome.committed
            assert cluster.dvp("GB", "A", isin, 250_000, 1).committed
            cluster.quiesce()
            assert cluster.balance("A", isin) == 250_000
            assert cluster.balance("GB", "EUR") == 350_000
            assert cluster.check_conservation() == []
            assert all(cluster.ledger_status().values())
        finally:
            cluster.close()
