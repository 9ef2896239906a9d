"""Tests for resource accounts, reservations and pledges."""

import random

import pytest

from green_bond_engine.core import (
    AlreadyTerminal, InsufficientBalance, InvalidParams, NotOwner, Role, Unauthorized,
    UnknownAccount, UnknownReservation, UnknownResource,
)
from green_bond_engine.crypto import Signer
from green_bond_engine.identity import IdentityManager
from green_bond_engine.ledger import MemoryStore, verify_chain
from green_bond_engine.messages import SignedRequest
from green_bond_engine.resource import ReservationStatus, ResourceManager, TransferInstruction


class ResourceFixture:
    """Central bank ``CB`` issuing EUR, investors ``A`` and ``B``."""

    def setup_method(self):
        self.operator = Signer.from_label("operator")
        self.identity = IdentityManager.genesis(self.operator)
        self.cb = Signer.from_label("CB")
        self.alice = Signer.from_label("A")
        self.bob = Signer.from_label("B")
        self.identity.register_party("Central Bank", {Role.ISSUER}, self.cb.public_key, "CB")
        self.identity.register_party("Alice", {Role.INVESTOR}, self.alice.public_key, "A")
        self.identity.register_party("Bob", {Role.INVESTOR}, self.bob.public_key, "B")
        self.store = MemoryStore()
        self.currency = ResourceManager("currency", self.identity, self.operator, store=self.store)
        self.currency.register_resource("EUR", "CB", decimals=2)
        self.nonce = 0
        self.issue("A", 1000)

    def request(self, kind, body, signer):
        self.nonce += 1
        return SignedRequest.create(kind, body, signer, self.nonce)

    def issue(self, target, amount):
        return self.currency.issue_units(self.request(
            "IssueUnits", {"resource": "EUR", "target": target, "amount": amount}, self.cb
        ))

    def reserve(self, owner, amount, signer, pledgee=None):
        body = {"owner": owner, "resource": "EUR", "amount": amount}
        if pledgee is not None:
            body["pledgee"] = pledgee
        return self.currency.reserve(self.request("Reserve", body, signer))

    def settle(self, reservation_id, decision, signer, beneficiary=None):
        body = {"reservation_id": reservation_id, "decision": decision}
        if beneficiary is not None:
            body["beneficiary"] = beneficiary
        return self.currency.settle_reservation(self.request("Settle", body, signer))


class TestTransfers(ResourceFixture):
    """Test issuance and transfers."""

    def test_issue(self):
        assert self.currency.balance("A", "EUR") == 1000
        assert self.currency.total_supply("EUR") == 1000
        assert self.currency.balance("B", "EUR") == 0

    def test_only_registered_issuer_issues(self):
        request = self.request("IssueUnits", {"resource": "EUR", "target": "A", "amount": 5},
                               self.alice)
        with pytest.raises(Unauthorized):
            self.currency.issue_units(request)
        with pytest.raises(UnknownResource):
            self.currency.issue_units(self.request(
                "IssueUnits", {"resource": "USD", "target": "A", "amount": 5}, self.cb
            ))

    def test_transfer(self):
        seq = self.currency.transfer(TransferInstruction("A", "B", "EUR", 300).sign(self.alice, 1))
        assert self.currency.ledger[seq].payload_kind == "Transferred"
        assert self.currency.balance("A", "EUR") == 700
        assert self.currency.balance("B", "EUR") == 300

    def test_insufficient_balance_changes_nothing(self):
        before = len(self.currency.ledger)
        with pytest.raises(InsufficientBalance):
            self.currency.transfer(TransferInstruction("A", "B", "EUR", 1001).sign(self.alice))
        assert len(self.currency.ledger) == before
        assert self.currency.balance("A", "EUR") == 1000

    def test_credit_limit(self):
        self.currency.set_credit_limit("A", "EUR", -500)
        self.currency.transfer(TransferInstruction("A", "B", "EUR", 1500).sign(self.alice))
        assert self.currency.balance("A", "EUR") == -500
        with pytest.raises(InvalidParams):
            self.currency.set_credit_limit("A", "EUR", 10)

    def test_third_party_is_refused(self):
        with pytest.raises(Unauthorized):
            self.currency.transfer(TransferInstruction("A", "B", "EUR", 1).sign(self.bob))

    def test_operator_acts_as_agent(self):
        self.currency.transfer(TransferInstruction("A", "B", "EUR", 10).sign(self.operator))
        assert self.currency.balance("B", "EUR") == 10

    def test_rejections(self):
        with pytest.raises(InvalidParams):
            self.currency.transfer(TransferInstruction("A", "A", "EUR", 1).sign(self.alice))
        with pytest.raises(InvalidParams):
            self.currency.transfer(TransferInstruction("A", "B", "EUR", 0).sign(self.alice))
        with pytest.raises(UnknownAccount):
            self.currency.transfer(TransferInstruction("B", "A", "EUR", 1).sign(self.bob))
        with pytest.raises(UnknownAccount):
            self.currency.transfer(TransferInstruction("A", "ghost", "EUR", 1).sign(self.alice))
        with pytest.raises(UnknownAccount):
            self.currency.account("B", "EUR")

    def test_conservation(self):
        self.issue("B", 250)
        for amount in (10, 20, 30):
            self.currency.transfer(TransferInstruction("A", "B", "EUR", amount).sign(self.alice))
        self.reserve("B", 40, self.bob)
        assert self.currency.total_holdings("EUR") == self.currency.total_supply("EUR") == 1250
        assert self.currency.holders("EUR") == {"A": 940, "B": 310}


class TestReservations(ResourceFixture):
    """Test holds and their terminal decisions."""

    def test_reserve_moves_to_reserved(self):
        rid = self.reserve("A", 400, self.alice)
        assert rid == "currency:r0"
        account = self.currency.account("A", "EUR")
        assert (account.available, account.reserved) == (600, 400)
        assert self.currency.reservation(rid).status is ReservationStatus.HELD

    def test_commit(self):
        rid = self.reserve("A", 400, self.alice)
        assert self.settle(rid, "Commit", self.alice, "B") is ReservationStatus.COMMITTED
        assert self.currency.balance("B", "EUR") == 400
        assert self.currency.account("A", "EUR").reserved == 0

    def test_abort_returns(self):
        rid = self.reserve("A", 400, self.alice)
        assert self.settle(rid, "Abort", self.alice) is ReservationStatus.RETURNED
        assert self.currency.balance("A", "EUR") == 1000

    def test_repeat_is_idempotent(self):
        rid = self.reserve("A", 400, self.alice)
        self.settle(rid, "Commit", self.alice, "B")
        before = len(self.currency.ledger)
        assert self.settle(rid, "Commit", self.alice, "B") is ReservationStatus.COMMITTED
        assert len(self.currency.ledger) == before
        with pytest.raises(AlreadyTerminal):
            self.settle(rid, "Abort", self.alice)

    def test_commit_to_another_beneficiary_conflicts(self):
        rid = self.reserve("A", 400, self.alice)
        self.settle(rid, "Commit", self.alice, "B")
        with pytest.raises(AlreadyTerminal):
            self.settle(rid, "Commit", self.alice, "CB")
        assert self.currency.reservation(rid).settled_to == "B"
        assert self.currency.balance("CB", "EUR") == 0

    def test_reserve_by_reference_is_idempotent(self):
        body = {"owner": "A", "resource": "EUR", "amount": 300, "client_ref": "trading:o1"}
        first = self.currency.reserve(self.request("Reserve", body, self.alice))
        again = self.currency.reserve(self.request("Reserve", body, self.alice))
        assert first == again
        assert self.currency.account("A", "EUR").reserved == 300
        with pytest.raises(InvalidParams):
            self.currency.reserve(self.request("Reserve", dict(body, amount=1), self.alice))

    def test_settle_by_reference(self):
        body = {"owner": "A", "resource": "EUR", "amount": 300, "client_ref": "trading:o1"}
        rid = self.currency.reserve(self.request("Reserve", body, self.alice))
        status = self.currency.settle_reservation(self.request(
            "Settle", {"client_ref": "trading:o1", "decision": "Abort"}, self.operator
        ))
        assert status is ReservationStatus.RETURNED
        assert self.currency.reservation(rid).status is ReservationStatus.RETURNED
        assert self.currency.balance("A", "EUR") == 1000

    def test_abort_of_unknown_reference_fences_it(self):
        abort = {"client_ref": "trading:o7", "decision": "Abort"}
        assert self.currency.settle_reservation(self.request("Settle", abort, self.operator)) \
            is ReservationStatus.RETURNED
        before = len(self.currency.ledger)
        self.currency.settle_reservation(self.request("Settle", abort, self.operator))
        assert len(self.currency.ledger) == before
        late = {"owner": "A", "resource": "EUR", "amount": 5, "client_ref": "trading:o7"}
        with pytest.raises(AlreadyTerminal):
            self.currency.reserve(self.request("Reserve", late, self.alice))
        with pytest.raises(Unauthorized):
            self.currency.settle_reservation(self.request(
                "Settle", {"client_ref": "trading:o8", "decision": "Abort"}, self.bob
            ))
        with pytest.raises(UnknownReservation):
            self.currency.settle_reservation(self.request(
                "Settle", {"client_ref": "trading:o9", "decision": "Commit",
                           "beneficiary": "B"}, self.operator
            ))

    def test_reserve_beyond_balance(self):
        self.reserve("A", 900, self.alice)
        with pytest.raises(InsufficientBalance):
            self.reserve("A", 200, self.alice)

    def test_settle_rejections(self):
        rid = self.reserve("A", 100, self.alice)
        with pytest.raises(InvalidParams):
            self.settle(rid, "Commit", self.alice)
        with pytest.raises(Unauthorized):
            self.settle(rid, "Commit", self.bob, "B")
        with pytest.raises(UnknownReservation):
            self.settle("currency:r99", "Abort", self.alice)

    def test_expiry(self):
        manager = ResourceManager("cash", self.identity, self.operator, reservation_ttl=2)
        manager.register_resource("EUR", "CB")
        manager.issue_units(self.request(
            "IssueUnits", {"resource": "EUR", "target": "A", "amount": 50}, self.cb
        ))
        rid = manager.reserve(self.request(
            "Reserve", {"owner": "A", "resource": "EUR", "amount": 20}, self.alice
        ))
        assert manager.expire_reservations() == []
        manager.transfer(TransferInstruction("A", "B", "EUR", 1).sign(self.alice))
        manager.transfer(TransferInstruction("A", "B", "EUR", 1).sign(self.alice))
        assert manager.expire_reservations() == [rid]
        assert manager.balance("A", "EUR") == 48

    def test_no_ttl_never_expires(self):
        self.reserve("A", 10, self.alice)
        assert self.currency.expire_reservations() == []


class TestPledges(ResourceFixture):
    """Test collateral pledged to a beneficiary."""

    def pledge(self):
        return self.reserve("A", 300, self.alice, pledgee="B")

    def _by(self, kind, rid, signer):
        return self.request(kind, {"reservation_id": rid}, signer)

    def test_seize(self):
        rid = self.pledge()
        assert self.currency.seize_pledge(self._by("SeizePledge", rid, self.bob)) \
            is ReservationStatus.COMMITTED
        assert self.currency.balance("B", "EUR") == 300

    def test_release(self):
        rid = self.pledge()
        assert self.currency.release_pledge(self._by("ReleasePledge", rid, self.bob)) \
            is ReservationStatus.RETURNED
        assert self.currency.balance("A", "EUR") == 1000

    def test_owner_cannot_seize(self):
        rid = self.pledge()
        with pytest.raises(Unauthorized):
            self.currency.seize_pledge(self._by("SeizePledge", rid, self.alice))

    def test_commit_only_to_pledgee(self):
        rid = self.pledge()
        with pytest.raises(NotOwner):
            self.settle(rid, "Commit", self.bob, "CB")

    def test_pledge_needs_pledgee(self):
        request = self.request("Pledge", {"owner": "A", "resource": "EUR", "amount": 1},
                               self.alice)
        with pytest.raises(InvalidParams):
            self.currency.pledge(request)

    def test_plain_reservation_is_not_a_pledge(self):
        rid = self.reserve("A", 10, self.alice)
        with pytest.raises(InvalidParams):
            self.currency.seize_pledge(self._by("SeizePledge", rid, self.alice))


class TestRandomWorkloads(ResourceFixture):
    """Seeded transfer workloads over four funded investors."""

    def setup_method(self):
        super().setup_method()
        self.signers = {"A": self.alice, "B": self.bob}
        for party in ("C", "D"):
            self.signers[party] = Signer.from_label(party)
            self.identity.register_party(party, {Role.INVESTOR},
                                         self.signers[party].public_key, party)

    def fresh(self):
        store = MemoryStore()
        manager = ResourceManager("cash", self.identity, self.operator, store=store)
        manager.register_resource("EUR", "CB")
        for party in sorted(self.signers):
            manager.issue_units(self.request(
                "IssueUnits", {"resource": "EUR", "target": party, "amount": 100}, self.cb
            ))
        return manager, store

    def batch(self, rng, pair, size):
        transfers = []
        for _ in range(size):
            source, target = rng.sample(pair, 2)
            amount = rng.randint(1, 60)
            transfers.append(
                TransferInstruction(source, target, "EUR", amount).sign(self.signers[source])
            )
        return transfers

    def apply(self, manager, transfers):
        for request in transfers:
            try:
                manager.transfer(request)
            except InsufficientBalance:
                pass

    @pytest.mark.parametrize("seed", range(10))
    def test_conservation_and_replay(self, seed):
        rng = random.Random(seed)
        manager, store = self.fresh()
        for _ in range(40):
            source, target = rng.sample(sorted(self.signers), 2)
            self.apply(manager, [TransferInstruction(
                source, target, "EUR", rng.randint(1, 150)
            ).sign(self.signers[source])])
            assert manager.total_holdings("EUR") == manager.total_supply("EUR") == 400
            assert all(manager.balance(p, "EUR") >= 0 for p in self.signers)
        reopened = ResourceManager.open("cash", self.identity, self.operator, store)
        assert reopened.state.encode() == manager.state.encode()

    @pytest.mark.parametrize("seed", range(10))
    def test_disjoint_batches_commute(self, seed):
        rng = random.Random(seed)
        left = self.batch(rng, ["A", "B"], 15)
        right = self.batch(rng, ["C", "D"], 15)
        first, _ = self.fresh()
        self.apply(first, left)
        self.apply(first, right)
        second, _ = self.fresh()
        self.apply(second, right)
        self.apply(second, left)
        assert first.holders("EUR") == second.holders("EUR")


class TestRecovery(ResourceFixture):
    """Test replay and the node interface."""

    def test_open_replays(self):
        rid = self.reserve("A", 100, self.alice)
        self.settle(rid, "Commit", self.alice, "B")
        self.currency.transfer(TransferInstruction("A", "B", "EUR", 5).sign(self.alice))
        reopened = ResourceManager.open("currency", self.identity, self.operator, self.store)
        assert reopened.state.encode() == self.currency.state.encode()
        assert reopened.balance("B", "EUR") == 105

    def test_ledger_verifies(self):
        self.reserve("A", 100, self.alice)
        assert verify_chain(self.currency.ledger, self.identity.key_at)

    def test_handle(self):
        transfer = TransferInstruction("A", "B", "EUR", 7).sign(self.alice, 99)
        assert isinstance(self.currency.handle(transfer), int)
        balance = self.currency.handle(
            self.request("Balance", {"owner": "B", "resource": "EUR"}, self.bob)
        )
        assert balance["available"] == 7
        assert self.currency.handle(
            self.request("Balance", {"owner": "CB", "resource": "EUR"}, self.cb)
        ) is None
        assert self.currency.handle(self.request("TotalSupply", {"resource": "EUR"}, self.bob)) \
            == 1000
        with pytest.raises(InvalidParams):
            self.currency.handle(self.request("Teleport", {}, self.bob))
