"""
Two-phase commit across state managers.

The coordinator (transaction manager) is stateless: it keeps a transaction in
memory only while running it. Decision durability lives in the participants'
ledgers; an in-doubt participant reconstructs the outcome by asking the
coordinator and then its peers:

- any peer Committed -> commit
- any peer Aborted or NotPrepared -> abort (NotPrepared fences the txn at that
  peer, so a late Prepare there votes No)
- every peer Prepared and the coordinator silent -> blocked; an
  :class:`OperatorAlert` is raised and an operator resolves it with
  :meth:`Participant.force_decision`.

A transaction with a single participant runs in one phase: the participant
validates and applies in a single ledger entry.
"""

from __future__ import annotations
import logging
from abc import abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Set

from .core import (
    Action, AlreadyTerminal, EngineError, InvalidParams, ManagerId, Unauthorized, UnknownTxn,
)
from .crypto import Signer
from .ledger import EventEnvelope
from .messages import (
    Reply, SignedRequest, TxnAction, TxnKind, TxnMessage, Vote, action_from_value, split_actions,
)
from .runtime import Call, Gather, LocalDriver, NodeCrashed, Process, Sleep


__all__ = [
    'TxnStatus',
    'TxnRecord',
    'TxnOutcome',
    'OperatorAlert',
    'PrepareContext',
    'Participant',
    'Coordinator',
    'atomic_request',
    'recover_participant',
    'apply_txn_record',
    'CRASH_PHASES',
]

logger = logging.getLogger(__name__)

TXN_PREPARED = "TxnPrepared"
TXN_COMMITTED = "TxnCommitted"
TXN_ABORTED = "TxnAborted"
TXN_FENCED = "TxnFenced"
TXN_APPLIED = "TxnApplied"
TXN_KINDS = frozenset({TXN_PREPARED, TXN_COMMITTED, TXN_ABORTED, TXN_FENCED, TXN_APPLIED})

NOT_PREPARED = "NotPrepared"
CRASH_PHASES = ("before_prepare", "after_votes", "after_first_commit")


class TxnStatus(Enum):
    PREPARED = "Prepared"
    COMMITTED = "Committed"
    ABORTED = "Aborted"
    FENCED = "Fenced"

    @property
    def terminal(self) -> bool:
        return self is not TxnStatus.PREPARED


@dataclass
class TxnRecord:
    """A participant's durable view of one transaction."""

    txn_id: str
    status: TxnStatus
    actions: List[Dict[str, Any]] = field(default_factory=list)
    participants: List[ManagerId] = field(default_factory=list)
    coordinator: str = ""
    prepared_seq: int = -1
    decided_seq: Optional[int] = None

    def to_value(self) -> Dict[str, Any]:
        return {
            "txn_id": self.txn_id,
            "status": self.status.value,
            "actions": self.actions,
            "participants": self.participants,
            "coordinator": self.coordinator,
            "prepared_seq": self.prepared_seq,
            "decided_seq": self.decided_seq,
        }


def apply_txn_record(txns: Dict[str, TxnRecord], envelope: EventEnvelope) -> Optional[TxnRecord]:
    """
    Update the transaction table for a txn ledger entry.

    Returns the record, or ``None`` when the entry is not a txn entry. Manager
    reducers call this first and then apply their own effects.
    """
    kind = envelope.payload_kind
    if kind not in TXN_KINDS:
        return None
    body = envelope.body()
    txn_id = body["txn_id"]
    if kind in (TXN_PREPARED, TXN_APPLIED):
        record = TxnRecord(
            txn_id,
            TxnStatus.COMMITTED if kind == TXN_APPLIED else TxnStatus.PREPARED,
            actions=list(body["actions"]),
            participants=list(body.get("participants", [])),
            coordinator=body.get("coordinator", ""),
            prepared_seq=envelope.seq,
            decided_seq=envelope.seq if kind == TXN_APPLIED else None,
        )
        txns[txn_id] = record
        return record
    if kind == TXN_FENCED:
        record = TxnRecord(txn_id, TxnStatus.FENCED, decided_seq=envelope.seq)
        txns[txn_id] = record
        return record
    record = txns[txn_id]
    record.status = TxnStatus.COMMITTED if kind == TXN_COMMITTED else TxnStatus.ABORTED
    record.decided_seq = envelope.seq
    return record


@dataclass
class TxnOutcome:
    """Result of :meth:`Coordinator.execute_atomic`. Truthy iff committed."""

    txn_id: str
    committed: bool
    seqs: Dict[ManagerId, int] = field(default_factory=dict)
    reason: str = ""
    unacknowledged: List[ManagerId] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.committed

    def to_value(self) -> Dict[str, Any]:
        return {
            "txn_id": self.txn_id,
            "committed": self.committed,
            "seqs": self.seqs,
            "reason": self.reason,
            "unacknowledged": self.unacknowledged,
        }

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> TxnOutcome:
        return cls(
            value["txn_id"], value["committed"], dict(value["seqs"]), value["reason"],
            list(value["unacknowledged"]),
        )


@dataclass
class OperatorAlert:
    """A blocked in-doubt transaction that needs an operator decision."""

    txn_id: str
    manager_id: ManagerId
    participants: List[ManagerId]
    reason: str

    def to_value(self) -> Dict[str, Any]:
        return {
            "txn_id": self.txn_id,
            "manager_id": self.manager_id,
            "participants": self.participants,
            "reason": self.reason,
        }


@dataclass
class PrepareContext:
    """What a participant sees besides its own actions."""

    txn_id: str
    request: Optional[SignedRequest]
    all_actions: List[TxnAction]
    participants: List[ManagerId]

    def actions_for(self, manager_id: ManagerId) -> List[TxnAction]:
        return [a for a in self.all_actions if a.manager == manager_id]


def atomic_request(actions: Sequence[TxnAction], signer: Any, nonce: int = 0) -> SignedRequest:
    """The initiator's signed request to run ``actions`` atomically."""
    return SignedRequest.create(
        "ExecuteAtomic", {"actions": [a.to_value() for a in actions]}, signer, nonce
    )


# =========================================================================
# Participant
# =========================================================================


class Participant:
    """
    2PC participant behaviour shared by resource and contract managers.

    Subclasses provide ``manager_id``, ``identity``, ``operator``, ``ledger``,
    a ``state`` with a ``txns`` table, and implement :meth:`validate_prepare`
    and :meth:`_append`. Holds, commits and aborts are applied by the
    subclass reducer when it sees the txn ledger entries.
    """

    manager_id: ManagerId
    operator: Signer
    alerts: List[OperatorAlert]

    @abstractmethod
    def validate_prepare(self, actions: List[TxnAction], context: PrepareContext) -> None:
        """Raise an EngineError if this participant must vote No."""

    @abstractmethod
    def _append(self, kind: str, body: Dict[str, Any]) -> EventEnvelope:
        """Sign, append and apply one entry."""

    # =========================================================================
    # Operations
    # =========================================================================

    def txn_record(self, txn_id: str) -> Optional[TxnRecord]:
        return self.state.txns.get(txn_id)  # type: ignore[attr-defined]

    def in_doubt(self) -> List[TxnRecord]:
        """Prepared transactions without a logged decision, in prepare order."""
        records = [r for r in self.state.txns.values()  # type: ignore[attr-defined]
                   if r.status is TxnStatus.PREPARED]
        return sorted(records, key=lambda r: r.prepared_seq)

    def prepare(
        self,
        txn_id: str,
        actions: List[TxnAction],
        context: PrepareContext,
        coordinator: str = "",
        one_phase: bool = False,
    ) -> Vote:
        """
        Validate, take holds and durably log Prepared; or vote No with no state change.

        With ``one_phase`` the actions are applied in the same single entry.
        """
        record = self.txn_record(txn_id)
        if record is not None:
            if record.status in (TxnStatus.PREPARED, TxnStatus.COMMITTED):
                return Vote(True)
            return Vote(False, record.status.value)
        try:
            self._check_request(context)
            self.validate_prepare(actions, context)
        except EngineError as exc:
            logger.debug("%s votes No on %s: %s", self.manager_id, txn_id, exc.code)
            return Vote(False, exc.code)
        body = {
            "txn_id": txn_id,
            "actions": [a.to_value() for a in actions],
            "participants": list(context.participants),
            "coordinator": coordinator,
            "request": context.request.to_value() if context.request else None,
        }
        self._append(TXN_APPLIED if one_phase else TXN_PREPARED, body)
        logger.debug("%s %s %s", self.manager_id, "applied" if one_phase else "prepared", txn_id)
        return Vote(True)

    def _check_request(self, context: PrepareContext) -> None:
        request = context.request
        if request is None:
            raise Unauthorized("transaction carries no initiator request")
        self.identity.verify_request(request)  # type: ignore[attr-defined]
        if request.body.get("actions") != [a.to_value() for a in context.all_actions]:
            raise Unauthorized("prepared actions differ from the signed request")

    def authorize_principal(
        self, context: PrepareContext, principal: str, action: Action
    ) -> None:
        """
        The initiator must be the principal itself (holding ``action``) or an
        operator acting as agent.
        """
        author = context.request.author if context.request else ""
        if author == principal:
            allowed = self.identity.authorize(author, action)  # type: ignore[attr-defined]
        else:
            allowed = self.identity.authorize(author, Action.ACT_AS_AGENT)  # type: ignore
        if not allowed:
            raise Unauthorized(f"{author or 'nobody'} may not {action.value} for {principal}")

    def commit_txn(self, txn_id: str) -> int:
        """Apply a prepared transaction. Idempotent; returns the decision seq."""
        record = self.txn_record(txn_id)
        if record is None:
            logger.error("%s: Commit for unknown txn %s", self.manager_id, txn_id)
            raise UnknownTxn(f"commit of {txn_id} without prepare")
        if record.status is TxnStatus.COMMITTED:
            return record.decided_seq  # type: ignore[return-value]
        if record.status is not TxnStatus.PREPARED:
            logger.error("%s: Commit for %s txn %s", self.manager_id, record.status.value, txn_id)
            raise AlreadyTerminal(f"{txn_id} is {record.status.value}")
        return self._append(TXN_COMMITTED, {"txn_id": txn_id}).seq

    def abort_txn(self, txn_id: str, presumed: bool = False) -> int:
        """
        Release a prepared transaction's holds. Idempotent.

        ``presumed`` marks an abort sent to a participant whose vote never
        arrived; without a prepare record it fences the txn instead of failing.
        """
        record = self.txn_record(txn_id)
        if record is None:
            if presumed:
                return self.fence_txn(txn_id)
            logger.error("%s: Abort for unknown txn %s", self.manager_id, txn_id)
            raise UnknownTxn(f"abort of {txn_id} without prepare")
        if record.status in (TxnStatus.ABORTED, TxnStatus.FENCED):
            return record.decided_seq  # type: ignore[return-value]
        if record.status is TxnStatus.COMMITTED:
            logger.error("%s: Abort for committed txn %s", self.manager_id, txn_id)
            raise AlreadyTerminal(f"{txn_id} is Committed")
        return self._append(TXN_ABORTED, {"txn_id": txn_id}).seq

    def fence_txn(self, txn_id: str) -> int:
        record = self.txn_record(txn_id)
        if record is not None:
            return record.decided_seq if record.decided_seq is not None else record.prepared_seq
        return self._append(TXN_FENCED, {"txn_id": txn_id}).seq

    def txn_status(self, txn_id: str, fence: bool = True) -> str:
        """Answer a decision query; an unknown txn is fenced and reported NotPrepared."""
        record = self.txn_record(txn_id)
        if record is None:
            if fence:
                self.fence_txn(txn_id)
            return NOT_PREPARED
        if record.status is TxnStatus.FENCED:
            return NOT_PREPARED
        return record.status.value

    def force_decision(self, txn_id: str, commit: bool) -> int:
        """Operator resolution of a blocked transaction."""
        logger.warning("%s: operator %s %s", self.manager_id,
                       "commits" if commit else "aborts", txn_id)
        self.alerts = [a for a in self.alerts if a.txn_id != txn_id]
        return self.commit_txn(txn_id) if commit else self.abort_txn(txn_id)

    # =========================================================================
    # Message handling
    # =========================================================================

    def participant_handle(self, msg: TxnMessage) -> TxnMessage:
        """
        Handle one 2PC message and return the signed reply.

        Raises:
            BadSignature, Unauthorized: if the sender is not a node operator.
            UnknownTxn: on Commit (or non-presumed Abort) without prior Prepare.
        """
        self.identity.verify_txn_sender(  # type: ignore[attr-defined]
            msg.sender, msg.message(), msg.signature
        )
        if msg.kind is TxnKind.PREPARE:
            request = msg.body.get("request")
            all_actions = msg.actions
            context = PrepareContext(
                msg.txn_id,
                SignedRequest.from_value(request) if request else None,
                all_actions,
                msg.participants,
            )
            one_phase = bool(msg.body.get("one_phase"))
            vote = self.prepare(
                msg.txn_id,
                context.actions_for(self.manager_id),
                context,
                coordinator=msg.body.get("coordinator", ""),
                one_phase=one_phase,
            )
            body: Dict[str, Any] = {"reason": vote.reason}
            record = self.txn_record(msg.txn_id)
            if vote and record is not None and one_phase:
                body["seq"] = record.decided_seq
            kind = TxnKind.VOTE_YES if vote else TxnKind.VOTE_NO
            return TxnMessage.create(kind, msg.txn_id, self.operator, body)
        if msg.kind is TxnKind.COMMIT:
            seq = self.commit_txn(msg.txn_id)
            return TxnMessage.create(TxnKind.COMMIT, msg.txn_id, self.operator, {"seq": seq})
        if msg.kind is TxnKind.ABORT:
            seq = self.abort_txn(msg.txn_id, presumed=bool(msg.body.get("presumed")))
            return TxnMessage.create(TxnKind.ABORT, msg.txn_id, self.operator, {"seq": seq})
        if msg.kind is TxnKind.DECISION_QUERY:
            status = self.txn_status(msg.txn_id)
            return TxnMessage.create(
                TxnKind.DECISION_QUERY, msg.txn_id, self.operator, {"status": status}
            )
        raise InvalidParams(f"participant cannot handle {msg.kind.value}")

    def recover(self, t_resolve: float = 10.0) -> Process:
        return recover_participant(self, t_resolve)


def _reply_status(reply: Optional[Reply]) -> Optional[str]:
    if reply is None or not reply.ok or not isinstance(reply.value, TxnMessage):
        return None
    return reply.value.body.get("status")


def recover_participant(manager: Participant, t_resolve: float = 10.0) -> Process:
    """
    Resolve every in-doubt transaction of a restarted (or waiting) participant.

    Returns:
        txn_id -> "Committed" | "Aborted" | "Blocked" | "Unresolved"
        ("Unresolved" when a peer was unreachable; retry later).
    """
    resolved: Dict[str, str] = {}
    for record in manager.in_doubt():
        outcome = yield from resolve_txn(manager, record, t_resolve)
        resolved[record.txn_id] = outcome
    return resolved


def resolve_txn(manager: Participant, record: TxnRecord, t_resolve: float) -> Process:
    txn_id = record.txn_id
    query = TxnMessage.create(TxnKind.DECISION_QUERY, txn_id, manager.operator)
    if record.coordinator:
        status = _reply_status((yield Call(record.coordinator, query, t_resolve)))
        outcome = _apply_decision(manager, txn_id, status)
        if outcome:
            return outcome
    peers = [p for p in record.participants if p != manager.manager_id]
    replies = yield Gather(tuple(Call(p, query, t_resolve) for p in peers))
    statuses = [_reply_status(r) for r in replies]
    if TxnStatus.COMMITTED.value in statuses:
        return _apply_decision(manager, txn_id, TxnStatus.COMMITTED.value)
    if any(s in (TxnStatus.ABORTED.value, NOT_PREPARED) for s in statuses):
        return _apply_decision(manager, txn_id, TxnStatus.ABORTED.value)
    current = manager.txn_record(txn_id)
    if current is not None and current.status.terminal:
        return current.status.value
    if None in statuses:
        logger.warning("%s: %s unresolved, peer unreachable", manager.manager_id, txn_id)
        return "Unresolved"
    alert = OperatorAlert(txn_id, manager.manager_id, list(record.participants),
                          "all participants prepared and the coordinator has no decision")
    if all(a.txn_id != txn_id for a in manager.alerts):
        manager.alerts.append(alert)
        logger.error("operator alert: %s blocked at %s", txn_id, manager.manager_id)
    return "Blocked"


def _apply_decision(manager: Participant, txn_id: str, status: Optional[str]) -> str:
    record = manager.txn_record(txn_id)
    if record is not None and record.status.terminal:
        return record.status.value
    if status in (TxnStatus.COMMITTED.value, TxnStatus.ABORTED.value):
        manager.alerts = [a for a in manager.alerts if a.txn_id != txn_id]
    if status == TxnStatus.COMMITTED.value:
        manager.commit_txn(txn_id)
        logger.info("%s: recovered %s as Committed", manager.manager_id, txn_id)
        return status
    if status == TxnStatus.ABORTED.value:
        manager.abort_txn(txn_id)
        logger.info("%s: recovered %s as Aborted", manager.manager_id, txn_id)
        return status
    return ""


# =========================================================================
# Coordinator
# =========================================================================


class Coordinator:
    """
    Stateless two-phase commit coordinator.

    Args:
        node_id: Address of this coordinator.
        identity: Identity manager (signature checks).
        operator: Node operator signing 2PC messages.
        t_prep: Prepare-phase timeout (simulated seconds).
        known_managers: Valid participant ids; others abort as unreachable.
        driver: Used by the synchronous :meth:`execute_atomic`.

    Attributes:
        outbox: Every decision message ever sent, as (txn_id, kind, dst). Kept
            outside the protocol for the test oracle; nothing reads it back.
        crash_at: Phase at which to simulate a crash once (fault injection).
    """

    concurrent = True

    def __init__(
        self,
        node_id: str,
        identity: Any,
        operator: Signer,
        t_prep: float = 2.0,
        known_managers: Optional[Sequence[ManagerId]] = None,
        driver: Optional[LocalDriver] = None,
        decision_retries: int = 3,
    ):
        self.node_id = node_id
        self.identity = identity
        self.operator = operator
        self.t_prep = t_prep
        self.known_managers: Optional[Set[ManagerId]] = (
            set(known_managers) if known_managers is not None else None
        )
        self.driver = driver
        self.decision_retries = decision_retries
        self.outbox: List[tuple] = []
        self.crash_at: Optional[str] = None
        self._active: Dict[str, str] = {}

    @property
    def active(self) -> Dict[str, str]:
        """In-flight transactions; empty between transactions."""
        return dict(self._active)

    def restart(self) -> None:
        """Crash recovery for a stateless node: forget everything in flight."""
        self._active.clear()

    def _crash_point(self, phase: str, txn_id: str) -> None:
        if self.crash_at == phase:
            self.crash_at = None
            self._active.clear()
            raise NodeCrashed(self.node_id, f"{phase} of {txn_id}")

    def execute_atomic(self, request: SignedRequest) -> TxnOutcome:
        """Run :meth:`execute` on the configured driver and return the outcome."""
        if self.driver is None:
            raise InvalidParams("coordinator has no driver")
        return self.driver.run(self.execute(request))

    def execute(self, request: SignedRequest) -> Process:
        """
        All-or-nothing application of ``request.body["actions"]``.

        Returns:
            TxnOutcome: Committed with per-manager decision seqs, or Aborted
            with a reason (a vote's error code, ``Timeout`` or
            ``ParticipantUnreachable``).
        """
        self.identity.verify_request(request)
        actions = [action_from_value(v) for v in request.body.get("actions", [])]
        if not actions:
            raise InvalidParams("a transaction needs at least one action")
        txn_id = request.body.get("txn_id") or "tx-" + request.request_id
        participants, _ = split_actions(actions)
        if self.known_managers is not None:
            unknown = [p for p in participants if p not in self.known_managers]
            if unknown:
                return TxnOutcome(txn_id, False, reason="ParticipantUnreachable")
        self._active[txn_id] = "Collecting"
        self._crash_point("before_prepare", txn_id)
        one_phase = len(participants) == 1
        prepare = TxnMessage.create(TxnKind.PREPARE, txn_id, self.operator, {
            "actions": [a.to_value() for a in actions],
            "participants": participants,
            "coordinator": self.node_id,
            "request": request.to_value(),
            "one_phase": one_phase,
        })
        logger.debug("%s: prepare %s -> %s", self.node_id, txn_id, participants)
        replies = yield Gather(tuple(Call(p, prepare, self.t_prep) for p in participants))
        votes: Dict[ManagerId, Optional[TxnMessage]] = {}
        reason = ""
        for participant, reply in zip(participants, replies):
            message = reply.value if reply is not None and reply.ok else None
            votes[participant] = message
            if message is None and not reason:
                reason = "Timeout" if reply is None else (reply.error or "Error")
            elif message is not None and message.kind is TxnKind.VOTE_NO and not reason:
                reason = message.body.get("reason", "VoteNo")
        yes = [p for p, m in votes.items() if m is not None and m.kind is TxnKind.VOTE_YES]
        missing = [p for p, m in votes.items() if m is None]

        if one_phase:
            self._active.pop(txn_id, None)
            vote = votes[participants[0]]
            if vote is not None and vote.kind is TxnKind.VOTE_YES:
                return TxnOutcome(txn_id, True, {participants[0]: vote.body.get("seq", -1)})
            return TxnOutcome(txn_id, False, reason=reason)

        commit = len(yes) == len(participants)
        decision = TxnKind.COMMIT if commit else TxnKind.ABORT
        self._active[txn_id] = (TxnStatus.COMMITTED if commit else TxnStatus.ABORTED).value
        logger.debug("%s: %s decided %s", self.node_id, txn_id, decision.value)
        self._crash_point("after_votes", txn_id)

        targets = participants if commit else yes + missing
        seqs: Dict[ManagerId, int] = {}
        unacked: List[ManagerId] = []
        for participant in targets:
            message = TxnMessage.create(
                decision, txn_id, self.operator, {"presumed": participant in missing}
            )
            self.outbox.append((txn_id, decision.value, participant))
            ack = yield from self._deliver(participant, message)
            if ack is None:
                unacked.append(participant)
            else:
                seqs[participant] = ack.body.get("seq", -1)
            if commit:
                self._crash_point("after_first_commit", txn_id)
        self._active.pop(txn_id, None)
        if unacked:
            logger.warning("%s: %s unacknowledged by %s", self.node_id, txn_id, unacked)
        return TxnOutcome(txn_id, commit, seqs, "" if commit else reason, unacked)

    def _deliver(self, participant: ManagerId, message: TxnMessage) -> Process:
        for attempt in range(self.decision_retries):
            reply = yield Call(participant, message, self.t_prep)
            if reply is not None and reply.ok:
                return reply.value
            if reply is not None and reply.error in (UnknownTxn.code, AlreadyTerminal.code):
                logger.error("%s: %s rejected by %s: %s", self.node_id, message.kind.value,
                             participant, reply.message)
                return None
            yield Sleep(self.t_prep * (attempt + 1))
        return None

    def handle(self, message: Any) -> Any:
        if isinstance(message, SignedRequest) and message.kind == "ExecuteAtomic":
            return self._execute_value(message)
        if isinstance(message, TxnMessage) and message.kind is TxnKind.DECISION_QUERY:
            status = self._active.get(message.txn_id, "Unknown")
            return TxnMessage.create(
                TxnKind.DECISION_QUERY, message.txn_id, self.operator, {"status": status}
            )
        raise InvalidParams(f"coordinator cannot handle {type(message).__name__}")

    def _execute_value(self, request: SignedRequest) -> Process:
        outcome = yield from self.execute(request)
        return outcome.to_value()
