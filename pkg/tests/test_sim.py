"""Tests for the simulated network and a cluster under injected faults."""

from pathlib import Path

import pytest

import green_bond_engine
from green_bond_engine.calculus import make_green_bond
from green_bond_engine.core import EngineError, InvalidParams
from green_bond_engine.crypto import Signer
from green_bond_engine.harness.cluster import Cluster
from green_bond_engine.harness.config import (
    FaultPlan, FaultSpec, Topology, load_topology, read_yaml,
)
from green_bond_engine.harness.sim import SimDriver
from green_bond_engine.messages import TxnKind, TxnMessage
from green_bond_engine.resource import ReservationStatus
from green_bond_engine.runtime import Call, Gather, Send, Sleep
from green_bond_engine.sexpr import format_spec


DATA = Path(green_bond_engine.__file__).parent / "data"


class Echo:
    def __init__(self):
        self.seen = []

    def handle(self, message):
        self.seen.append(message)
        return message


class Sleeper:
    def __init__(self, span, concurrent=False):
        self.span = span
        self.concurrent = concurrent

    def handle(self, message):
        yield Sleep(self.span)
        return message


class Caller:
    """Forwards to ``dst`` with a timeout."""

    def __init__(self, dst, timeout=None):
        self.dst = dst
        self.timeout = timeout

    def handle(self, message):
        reply = yield Call(self.dst, message, self.timeout)
        return None if reply is None else reply.value


class Fanout:
    def __init__(self, dst, n):
        self.dst = dst
        self.n = n

    def handle(self, message):
        if message == "send":
            for i in range(self.n):
                yield Send(self.dst, i)
            return self.n
        replies = yield Gather(tuple(Call(self.dst, i) for i in range(self.n)))
        return [r.value for r in replies]


class Failing:
    def handle(self, message):
        raise InvalidParams("no such thing")


def fault(kind, target, **kwargs):
    return FaultSpec(fault=kind, target=target, **kwargs)


class TestDelivery:
    """Test latency, replies and timeouts."""

    def setup_method(self):
        self.driver = SimDriver(latency=0.5)
        self.echo = Echo()
        self.driver.register("echo", self.echo)

    def test_round_trip(self):
        reply = self.driver.call("echo", "hi")
        assert reply.ok and reply.value == "hi"
        assert self.driver.clock == pytest.approx(1.0)
        assert self.driver.messages == 1

    def test_unknown_node(self):
        assert self.driver.call("nowhere", "hi") is None
        assert self.driver.clock == pytest.approx(0.5)

    def test_engine_error_becomes_failure(self):
        self.driver.register("failing", Failing())
        reply = self.driver.call("failing", "hi")
        assert reply.error == "InvalidParams"
        with pytest.raises(InvalidParams):
            reply.unwrap()

    def test_timeout(self):
        self.driver.register("slow", Sleeper(5.0))
        self.driver.register("caller", Caller("slow", timeout=1.0))
        reply = self.driver.call("caller", "hi")
        assert reply.ok and reply.value is None
        assert self.driver.clock == pytest.approx(2.0)
        self.driver.settle()
        assert self.driver.clock == pytest.approx(6.5)

    def test_run_plain_value(self):
        assert self.driver.run(3) == 3

    def test_send_is_delivered_on_settle(self):
        self.driver.register("fanout", Fanout("echo", 3))
        assert self.driver.call("fanout", "send").value == 3
        self.driver.settle()
        assert sorted(self.echo.seen) == [0, 1, 2]


class TestNodeSerialization:
    """A node handles one message at a time unless it is concurrent."""

    def test_serialized(self):
        driver = SimDriver(latency=0.5)
        driver.register("sleeper", Sleeper(1.0))
        driver.register("fanout", Fanout("sleeper", 2))
        assert driver.call("fanout", "gather").value == [0, 1]
        assert driver.clock == pytest.approx(4.0)

    def test_concurrent(self):
        driver = SimDriver(latency=0.5)
        driver.register("sleeper", Sleeper(1.0, concurrent=True))
        driver.register("fanout", Fanout("sleeper", 2))
        assert driver.call("fanout", "gather").value == [0, 1]
        assert driver.clock == pytest.approx(3.0)


class TestFaults:
    """Test crash, restart and message faults."""

    def setup_method(self):
        self.driver = SimDriver(latency=0.5, seed=3)
        self.echo = Echo()
        self.driver.register("echo", self.echo)
        self.crashed = []
        self.restarted = []
        self.driver.on_crash = self.crashed.append
        self.driver.on_restart = self._restart

    def _restart(self, node_id):
        self.restarted.append(node_id)

        def recovery():
            yield Sleep(1.0)
            return "recovered"

        return recovery()

    def test_crash_and_restart(self):
        self.driver.crash("echo")
        assert self.driver.call("echo", "hi") is None
        assert self.crashed == ["echo"]
        self.driver.restart("echo")
        assert self.restarted == ["echo"]
        assert self.driver.call("echo", "hi").value == "hi"
        assert [f.split()[-2:] for f in self.driver.faults] == [
            ["Crash", "echo"], ["Restart", "echo"],
        ]

    def test_crash_is_idempotent(self):
        self.driver.crash("echo")
        self.driver.crash("echo")
        self.driver.restart("echo")
        self.driver.restart("echo")
        assert len(self.driver.faults) == 2

    def test_crash_abandons_process_in_flight(self):
        self.driver.register("slow", Sleeper(5.0))
        self.driver.schedule(FaultPlan(faults=[fault("Crash", "slow", at=1.0)]))
        assert self.driver.call("slow", "hi") is None
        assert self.driver.down == {"slow"}

    def test_restart_does_not_revive_old_process(self):
        self.driver.register("slow", Sleeper(5.0))
        self.driver.schedule(FaultPlan(faults=[
            fault("Crash", "slow", at=1.0), fault("Restart", "slow", at=2.0),
        ]))
        assert self.driver.call("slow", "hi") is None
        assert self.driver.down == set()
        assert self.restarted == ["slow"]

    def test_delay(self):
        self.driver.apply(fault("DelayMessages", "echo", at=0.0, span=3.0))
        self.driver.call("echo", "hi")
        assert self.driver.clock == pytest.approx(4.0)
        start = self.driver.clock
        self.driver.call("echo", "hi")
        assert self.driver.clock - start == pytest.approx(1.0)

    def test_duplicate_only_txn_messages(self):
        operator = Signer.from_label("operator")
        query = TxnMessage.create(TxnKind.DECISION_QUERY, "tx-1", operator)
        self.driver.apply(fault("DuplicateNext", "echo", at=0.0))
        self.driver.call("echo", "plain")
        assert self.echo.seen == ["plain"]
        self.driver.call("echo", query)
        self.driver.settle()
        assert self.echo.seen == ["plain", query, query]
        self.driver.call("echo", query)
        assert len(self.echo.seen) == 4

    def test_reorder_is_deterministic(self):
        def arrivals(seed):
            driver = SimDriver(latency=0.5, seed=seed)
            echo = Echo()
            driver.register("echo", echo)
            driver.register("fanout", Fanout("echo", 6))
            driver.apply(fault("ReorderWindow", "echo", at=0.0, k=6))
            driver.call("fanout", "send")
            driver.settle()
            return echo.seen

        assert arrivals(11) == arrivals(11)
        assert sorted(arrivals(11)) == list(range(6))

    def test_phase_fault_needs_crash_points(self):
        plan = FaultPlan(faults=[fault("Crash", "echo", phase="after_votes")])
        with pytest.raises(EngineError):
            self.driver.schedule(plan)


class TestClusterCoordinatorCrash:
    """A coordinator lost after the votes leaves both legs prepared until the operator decides."""

    def setup_method(self):
        self.cluster = Cluster(load_topology(DATA / "topology.yaml"))
        spec = format_spec(make_green_bond(
            principal=1_000_000, currency="EUR", n_coupons=2, co2_threshold=1,
            maturity_schedule=[10, 20],
        ))
        self.isin, outcome = self.cluster.issue(
            "GB", spec, 1_000_000, parties={"verifier": "V", "calculator": "C"}
        )
        assert outcome.committed
        self.cluster.driver.schedule(FaultPlan(faults=[
            fault("Crash", "tm-0", phase="after_votes"),
        ]))
        self.outcome = self.cluster.dvp("GB", "A", self.isin, 600_000, 1)

    def teardown_method(self):
        self.cluster.close()

    def test_blocked(self):
        assert not self.outcome.committed
        assert self.outcome.reason == "Timeout"
        assert self.cluster.driver.down == {"tm-0"}
        self.cluster.quiesce()
        alerts = self.cluster.operator_alerts()
        assert {a.txn_id for a in alerts} == {self.outcome.txn_id}
        assert {a.manager_id for a in alerts} == {"currency", "securities"}
        assert self.cluster.atomicity_violations() == []

    def test_operator_commits(self):
        self.cluster.quiesce()
        assert self.cluster.resolve_blocked(commit=True) == [self.outcome.txn_id]
        assert self.cluster.operator_alerts() == []
        assert self.cluster.balance("A", self.isin) == 600_000
        assert self.cluster.balance("A", "EUR") == 400_000
        assert self.cluster.balance("GB", "EUR") == 700_000
        assert self.cluster.check_conservation() == []
        assert self.cluster.atomicity_violations() == []

    def test_operator_aborts(self):
        self.cluster.quiesce()
        self.cluster.resolve_blocked(commit=False)
        assert self.cluster.balance("GB", self.isin) == 1_000_000
        assert self.cluster.balance("A", "EUR") == 1_000_000
        assert self.cluster.check_conservation() == []
        assert all(self.cluster.ledger_status().values())

    def test_restarted_coordinator_serves_new_transactions(self):
        self.cluster.quiesce()
        self.cluster.resolve_blocked(commit=False)
        self.cluster.driver.restart("tm-0")
        assert self.cluster.dvp("GB", "B", self.isin, 100, 1).committed
        assert self.cluster.balance("B", self.isin) == 100


class TestClusterReservationExpiry:
    """A hold nobody settles is returned once it outlives the configured TTL."""

    def setup_method(self):
        data = read_yaml(DATA / "topology.yaml")
        data["managers"][0]["reservation_ttl"] = 3
        self.cluster = Cluster(Topology.model_validate(data))
        self.currency = self.cluster.managers["currency"]

    def teardown_method(self):
        self.cluster.close()

    def test_stranded_hold_expires(self):
        assert self.currency.reservation_ttl == 3
        reply = self.cluster.call("currency", self.cluster.request(
            "Reserve", {"owner": "A", "resource": "EUR", "amount": 500}, "A"
        ))
        rid = reply.unwrap()
        self.cluster.quiesce()
        assert self.currency.reservation(rid).status is ReservationStatus.HELD
        for _ in range(3):
            assert self.cluster.transfer("A", "B", "EUR", 1).ok
        self.cluster.quiesce()
        assert self.currency.reservation(rid).status is ReservationStatus.RETURNED
        assert self.currency.account("A", "EUR").reserved == 0
        assert self.cluster.balance("A", "EUR") == 1_000_000 - 3
        assert self.cluster.check_conservation() == []

    def test_ttl_survives_restart(self):
        self.cluster.driver.crash("currency")
        self.cluster.driver.restart("currency")
        assert self.cluster.managers["currency"].reservation_ttl == 3
        assert self.cluster.managers["securities"].reservation_ttl is None
