"""Tests for two-phase commit across resource managers."""

import pytest

from green_bond_engine.core import Role, Unauthorized, UnknownTxn
from green_bond_engine.crypto import Signer
from green_bond_engine.identity import IdentityManager
from green_bond_engine.messages import SignedRequest, TransferAction, TxnKind, TxnMessage
from green_bond_engine.resource import ResourceManager
from green_bond_engine.runtime import LocalDriver
from green_bond_engine.txn import Coordinator, NOT_PREPARED, TxnStatus, atomic_request


class DvpFixture:
    """Issuer ``GB`` with 1000 XS1, investor ``A`` with 500 EUR, one coordinator."""

    def setup_method(self):
        self.operator = Signer.from_label("operator")
        self.identity = IdentityManager.genesis(self.operator)
        self.issuer = Signer.from_label("GB")
        self.alice = Signer.from_label("A")
        self.identity.register_party("Green Issuer", {Role.ISSUER}, self.issuer.public_key, "GB")
        self.identity.register_party("Alice", {Role.INVESTOR}, self.alice.public_key, "A")

        self.securities = ResourceManager("securities", self.identity, self.operator)
        self.currency = ResourceManager("currency", self.identity, self.operator)
        self.securities.register_resource("XS1", "GB")
        self.currency.register_resource("EUR", "GB", decimals=2)
        self.nonce = 0
        self._mint(self.securities, "XS1", "GB", 1000)
        self._mint(self.currency, "EUR", "A", 500)

        self.driver = LocalDriver({"securities": self.securities, "currency": self.currency})
        self.tm = Coordinator("tm-0", self.identity, self.operator,
                              known_managers=["securities", "currency"], driver=self.driver)
        self.driver.register("tm-0", self.tm)

    def _mint(self, manager, resource, target, amount):
        self.nonce += 1
        manager.issue_units(SignedRequest.create(
            "IssueUnits", {"resource": resource, "target": target, "amount": amount},
            self.issuer, self.nonce,
        ))

    def dvp(self, qty=100, price=2):
        self.nonce += 1
        return atomic_request([
            TransferAction("securities", "GB", "A", "XS1", qty),
            TransferAction("currency", "A", "GB", "EUR", qty * price),
        ], self.operator, self.nonce)

    def balances(self):
        return (
            self.securities.balance("GB", "XS1"), self.securities.balance("A", "XS1"),
            self.currency.balance("A", "EUR"), self.currency.balance("GB", "EUR"),
        )

    def statuses(self, txn_id):
        return [m.txn_record(txn_id).status for m in (self.securities, self.currency)]


class TestTwoPhaseCommit(DvpFixture):
    """Test delivery versus payment between a securities and a cash ledger."""

    def test_commit(self):
        outcome = self.tm.execute_atomic(self.dvp())
        assert outcome
        assert set(outcome.seqs) == {"securities", "currency"}
        assert self.balances() == (900, 100, 300, 200)
        assert self.statuses(outcome.txn_id) == [TxnStatus.COMMITTED] * 2
        assert self.tm.active == {}

    def test_vote_no_aborts_everywhere(self):
        outcome = self.tm.execute_atomic(self.dvp(price=10))
        assert not outcome
        assert outcome.reason == "InsufficientBalance"
        assert self.balances() == (1000, 0, 500, 0)
        assert self.securities.txn_record(outcome.txn_id).status is TxnStatus.ABORTED
        assert self.currency.txn_record(outcome.txn_id) is None

    def test_unreachable_participant_aborts(self):
        self.driver.down.add("currency")
        outcome = self.tm.execute_atomic(self.dvp())
        assert not outcome
        assert outcome.reason == "Timeout"
        assert outcome.unacknowledged == ["currency"]
        assert self.balances() == (1000, 0, 500, 0)

    def test_single_participant_applies_in_one_entry(self):
        self.nonce += 1
        request = atomic_request(
            [TransferAction("currency", "A", "GB", "EUR", 50)], self.operator, self.nonce
        )
        before = len(self.currency.ledger)
        outcome = self.tm.execute_atomic(request)
        assert outcome
        assert len(self.currency.ledger) == before + 1
        assert self.currency.ledger[outcome.seqs["currency"]].payload_kind == "TxnApplied"

    def test_unknown_participant(self):
        self.nonce += 1
        request = atomic_request(
            [TransferAction("elsewhere", "A", "GB", "EUR", 1)], self.operator, self.nonce
        )
        outcome = self.tm.execute_atomic(request)
        assert outcome.reason == "ParticipantUnreachable"

    def test_initiator_needs_authority(self):
        self.nonce += 1
        request = atomic_request([
            TransferAction("securities", "GB", "A", "XS1", 1),
            TransferAction("currency", "A", "GB", "EUR", 1),
        ], self.alice, self.nonce)
        outcome = self.tm.execute_atomic(request)
        assert outcome.reason == "Unauthorized"
        assert self.balances() == (1000, 0, 500, 0)

    def test_duplicate_request_is_idempotent(self):
        request = self.dvp()
        first = self.tm.execute_atomic(request)
        second = self.tm.execute_atomic(request)
        assert first and second
        assert first.seqs == second.seqs
        assert self.balances() == (900, 100, 300, 200)


class TestParticipant(DvpFixture):
    """Test the participant side of the protocol."""

    def message(self, kind, txn_id, body=None, sender=None):
        return TxnMessage.create(kind, txn_id, sender or self.operator, body or {})

    def test_commit_without_prepare(self):
        with pytest.raises(UnknownTxn):
            self.currency.participant_handle(self.message(TxnKind.COMMIT, "tx-x"))

    def test_sender_must_be_operator(self):
        with pytest.raises(Unauthorized):
            self.currency.participant_handle(
                self.message(TxnKind.DECISION_QUERY, "tx-x", sender=self.alice)
            )

    def test_query_fences_unknown_txn(self):
        reply = self.currency.participant_handle(self.message(TxnKind.DECISION_QUERY, "tx-x"))
        assert reply.body["status"] == NOT_PREPARED
        assert self.currency.txn_record("tx-x").status is TxnStatus.FENCED

    def test_presumed_abort_fences(self):
        reply = self.currency.participant_handle(
            self.message(TxnKind.ABORT, "tx-x", {"presumed": True})
        )
        assert reply.kind is TxnKind.ABORT
        assert self.currency.txn_record("tx-x").status is TxnStatus.FENCED

    def test_fenced_txn_votes_no(self):
        request = self.dvp()
        txn_id = "tx-" + request.request_id
        self.currency.txn_status(txn_id)
        outcome = self.tm.execute_atomic(request)
        assert not outcome
        assert outcome.reason == "Fenced"
        assert self.balances() == (1000, 0, 500, 0)


class TestCoordinatorCrash(DvpFixture):
    """Test recovery after the coordinator fails at each phase."""

    def crash(self, phase):
        request = self.dvp()
        self.tm.crash_at = phase
        assert self.driver.dispatch("tm-0", request) is None
        assert "tm-0" in self.driver.down
        self.tm.restart()
        self.driver.down.discard("tm-0")
        return "tx-" + request.request_id

    def recover(self, manager):
        return self.driver.run(manager.recover())

    def test_before_prepare(self):
        txn_id = self.crash("before_prepare")
        assert self.securities.txn_record(txn_id) is None
        assert self.currency.txn_record(txn_id) is None
        assert self.balances() == (1000, 0, 500, 0)

    def test_after_votes_blocks(self):
        txn_id = self.crash("after_votes")
        assert self.statuses(txn_id) == [TxnStatus.PREPARED] * 2
        assert self.recover(self.currency) == {txn_id: "Blocked"}
        assert [a.txn_id for a in self.currency.alerts] == [txn_id]
        # holds stay in place while blocked
        assert self.currency.account("A", "EUR").available == 300

        self.securities.force_decision(txn_id, commit=False)
        assert self.recover(self.currency) == {txn_id: "Aborted"}
        assert self.balances() == (1000, 0, 500, 0)
        assert self.currency.alerts == []

    def test_after_votes_operator_commit(self):
        txn_id = self.crash("after_votes")
        self.currency.force_decision(txn_id, commit=True)
        assert self.recover(self.securities) == {txn_id: "Committed"}
        assert self.balances() == (900, 100, 300, 200)

    def test_after_first_commit(self):
        txn_id = self.crash("after_first_commit")
        assert self.statuses(txn_id) == [TxnStatus.COMMITTED, TxnStatus.PREPARED]
        assert self.recover(self.currency) == {txn_id: "Committed"}
        assert self.balances() == (900, 100, 300, 200)

    def test_unreachable_peer_is_unresolved(self):
        txn_id = self.crash("after_votes")
        self.driver.down.add("securities")
        assert self.recover(self.currency) == {txn_id: "Unresolved"}
        assert self.currency.in_doubt()[0].txn_id == txn_id
