"""
Contract manager: live instrument instances and their lifecycle.

Each instance holds the original specification, the current residual, the
variable bindings and a ``state_version`` that counts accepted lifecycle
events. An event is accepted only if it matches the residual
(:func:`~green_bond_engine.calculus.residuate`); rejected events never touch
the ledger.

Events reach the manager two ways:

- directly, as a signed ``LifecycleEvent`` request (observations without a
  record-date snapshot, issuer notices, time advances): one ledger entry;
- inside an atomic transaction as a :class:`ContractAction`, when the event
  must commit together with effects on other managers: issuance together
  with the security registration, coupon payments together with their
  currency transfers, and record-date observations together with an
  ``AssertHolders`` check on the security manager.

While a transaction is prepared on an ISIN the instance is locked; other
events for it are refused until the decision.
"""

from __future__ import annotations
import hashlib
import logging
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Union

from .calculus import (
    Done, Fail, IssuerNotice, LifecycleEvent, Match, ObservationMade, Payment,
    PaymentSettled, ProRata, Spec, TimeAdvanced, Transfer, active_atoms, bind_parties,
    check_spec, event_from_value, payment_amount, residuate, resolve_payment,
)
from .codec import pack
from .core import (
    Action, DeadlineExpired, EngineError, InvalidParams, ManagerId, NoMatch, PartyId,
    StaleStateVersion, Unauthorized, UnknownInstrument,
)
from .crypto import Signer, digest
from .ledger import EventEnvelope, Ledger, LedgerStore, Reducer, replay
from .messages import (
    AssertHolders, ContractAction, RegisterResource, SignedRequest, TransferAction, TxnAction,
    TxnMessage, action_from_value,
)
from .runtime import Directory, Send
from .sexpr import format_spec, parse_spec
from .txn import (
    TXN_ABORTED, TXN_APPLIED, TXN_COMMITTED, TXN_PREPARED, Participant, PrepareContext,
    TxnRecord, apply_txn_record,
)


__all__ = [
    'InstanceStatus',
    'ContractInstance',
    'ContractState',
    'ContractManager',
    'CONTRACT_REDUCER',
    'allocate_isin',
    'isin_check_digit',
    'is_valid_isin',
    'issue_event',
    'lifecycle_event',
]

logger = logging.getLogger(__name__)

INSTRUMENT_ISSUED = "InstrumentIssued"
LIFECYCLE_APPLIED = "LifecycleApplied"

ISSUE = "Issue"
LIFECYCLE = "Lifecycle"

_ISIN = re.compile(r"[A-Z]{2}[A-Z0-9]{9}[0-9]\Z")
_BASE36 = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"

EVENT_ACTIONS: Dict[str, Action] = {
    ObservationMade.kind: Action.SUBMIT_OBSERVATION,
    PaymentSettled.kind: Action.INSTRUCT_PAYMENT,
    TimeAdvanced.kind: Action.ADVANCE_TIME,
    IssuerNotice.kind: Action.ISSUER_NOTICE,
}


# =========================================================================
# ISINs
# =========================================================================


def isin_check_digit(body: str) -> str:
    """
    ISO 6166 check digit for the first 11 characters of an ISIN.

    Letters become two digits (A=10 ... Z=35); then the Luhn rule applies.

    Examples:
        >>> isin_check_digit("US037833100")
        '5'
    """
    digits = "".join(str(int(c, 36)) for c in body)
    total = 0
    for i, ch in enumerate(reversed(digits)):
        n = int(ch)
        if i % 2 == 0:
            n *= 2
            if n > 9:
                n -= 9
        total += n
    return str((10 - total % 10) % 10)


def is_valid_isin(isin: str, checksum: bool = True) -> bool:
    if not _ISIN.match(isin):
        return False
    return not checksum or isin[-1] == isin_check_digit(isin[:11])


def allocate_isin(issuer: PartyId, nonce: int, prefix: str = "XS") -> str:
    """Deterministic ISIN for an issuer's ``nonce``-th issuance (clients can precompute it)."""
    number = int.from_bytes(hashlib.sha256(f"{issuer}|{nonce}".encode("utf-8")).digest(), "big")
    chars = []
    for _ in range(9):
        number, rem = divmod(number, 36)
        chars.append(_BASE36[rem])
    body = prefix + "".join(chars)
    return body + isin_check_digit(body)


# =========================================================================
# State
# =========================================================================


class InstanceStatus(Enum):
    LIVE = "Live"
    TERMINATED = "Terminated"
    DEFAULT = "Default"


@dataclass
class ContractInstance:
    isin: str
    issuer: PartyId
    spec: Spec
    residual: Spec
    docs_hash: bytes = b""
    state_version: int = 0
    bindings: Dict[str, Any] = field(default_factory=dict)
    clock: int = 0
    status: InstanceStatus = InstanceStatus.LIVE

    def to_value(self) -> Dict[str, Any]:
        return {
            "isin": self.isin,
            "issuer": self.issuer,
            "spec": format_spec(self.spec),
            "residual": format_spec(self.residual),
            "docs_hash": self.docs_hash,
            "state_version": self.state_version,
            "bindings": self.bindings,
            "clock": self.clock,
            "status": self.status.value,
        }


@dataclass
class ContractState:
    instances: Dict[str, ContractInstance] = field(default_factory=dict)
    txns: Dict[str, TxnRecord] = field(default_factory=dict)
    locks: Dict[str, str] = field(default_factory=dict)
    length: int = 0

    def encode(self) -> bytes:
        """Canonical encoding, used to compare live and replayed state."""
        return pack({
            "instances": {k: v.to_value() for k, v in self.instances.items()},
            "txns": {k: v.to_value() for k, v in self.txns.items()},
            "locks": self.locks,
            "length": self.length,
        })


def issue_event(
    isin: str, issuer: PartyId, spec: Union[Spec, str], docs: bytes = b""
) -> Dict[str, Any]:
    """Contract action body for an atomic issuance."""
    text = spec if isinstance(spec, str) else format_spec(spec)
    return {"kind": ISSUE, "isin": isin, "issuer": issuer, "spec": text, "docs": docs}


def lifecycle_event(event: LifecycleEvent) -> Dict[str, Any]:
    """Contract action body for a lifecycle event inside a transaction."""
    return {"kind": LIFECYCLE, "event": event.to_value()}


# =========================================================================
# Reducer
# =========================================================================


def _new_instance(isin: str, issuer: PartyId, spec_text: str, docs_hash: bytes) -> ContractInstance:
    spec = parse_spec(spec_text)
    instance = ContractInstance(isin, issuer, spec, spec, docs_hash)
    _set_status(instance)
    return instance


def _set_status(instance: ContractInstance) -> None:
    if isinstance(instance.residual, Fail):
        instance.status = InstanceStatus.DEFAULT
    elif isinstance(instance.residual, Done):
        instance.status = InstanceStatus.TERMINATED


def _apply_lifecycle(state: ContractState, isin: str, value: Dict[str, Any]) -> None:
    instance = state.instances[isin]
    event = event_from_value(value)
    result = residuate(instance.residual, event, instance.bindings)
    if not result:
        logger.error("%s: logged event %s does not match the residual", isin, event.kind)
        return
    if isinstance(event, TimeAdvanced):
        instance.clock = event.to
    instance.residual = result.spec
    instance.bindings = result.bindings
    instance.state_version += 1
    _set_status(instance)


def _apply_action(state: ContractState, action: ContractAction) -> None:
    event = action.event
    if event["kind"] == ISSUE:
        state.instances[action.isin] = _new_instance(
            action.isin, event["issuer"], event["spec"], digest(event.get("docs") or b"")
        )
    else:
        _apply_lifecycle(state, action.isin, event["event"])


def apply_contract_event(state: ContractState, envelope: EventEnvelope) -> ContractState:
    """Reducer step for contract ledgers."""
    state.length = envelope.seq + 1
    record = apply_txn_record(state.txns, envelope)
    if record is not None:
        kind = envelope.payload_kind
        actions = [a for a in map(action_from_value, record.actions)
                   if isinstance(a, ContractAction)]
        if kind == TXN_PREPARED:
            for action in actions:
                state.locks[action.isin] = record.txn_id
        elif kind in (TXN_COMMITTED, TXN_ABORTED, TXN_APPLIED):
            for action in actions:
                if state.locks.get(action.isin) == record.txn_id:
                    del state.locks[action.isin]
                if kind != TXN_ABORTED:
                    _apply_action(state, action)
        return state

    body = envelope.body()
    if envelope.payload_kind == INSTRUMENT_ISSUED:
        state.instances[body["isin"]] = _new_instance(
            body["isin"], body["issuer"], body["spec"], body["docs_hash"]
        )
    elif envelope.payload_kind == LIFECYCLE_APPLIED:
        _apply_lifecycle(state, body["isin"], body["event"])
    return state


CONTRACT_REDUCER: Reducer[ContractState] = Reducer(ContractState, apply_contract_event)


# =========================================================================
# Manager
# =========================================================================


Approver = Callable[[Spec, PartyId, bytes], bool]


def _approve_all(spec: Spec, issuer: PartyId, docs: bytes) -> bool:
    return True


class ContractManager(Participant):
    """
    State manager for a set of instruments (sharded by issuer / ISIN).

    Args:
        manager_id: Ledger / node id.
        identity: Identity manager.
        operator: Node operator signing this ledger.
        store: Durable ledger storage.
        approver: ``(spec, issuer, docs) -> bool`` called before issuance;
            auto-approves by default.
        docs_dir: Directory for content-addressed documents; in memory when None.
        validate_isin_checksum: Enforce the ISO 6166 check digit on supplied ISINs.
        directory: Routing table; when set, version changes are sent to the
            instrument's trade manager.

    Examples:
        >>> cm = ContractManager("contracts", identity, operator)
        >>> request = SignedRequest.create("IssueInstrument", {
        ...     "spec": "(done)", "docs": b"prospectus", "parties": {}, "nonce": 1}, issuer)
        >>> isin = cm.issue_instrument(request)
        >>> cm.query_state(isin)["status"]
        'Terminated'
    """

    def __init__(
        self,
        manager_id: ManagerId,
        identity: Any,
        operator: Signer,
        store: Optional[LedgerStore] = None,
        approver: Optional[Approver] = None,
        docs_dir: Optional[Union[str, Path]] = None,
        validate_isin_checksum: bool = False,
        directory: Optional[Directory] = None,
        **ledger_options,
    ):
        self.manager_id = manager_id
        self.identity = identity
        self.operator = operator
        self.approver = approver or _approve_all
        self.docs_dir = Path(docs_dir) if docs_dir is not None else None
        self.validate_isin_checksum = validate_isin_checksum
        self.directory = directory
        self.state = ContractState()
        self.alerts = []
        self.ledger = Ledger(manager_id, authority=identity, store=store, **ledger_options)
        self._documents: Dict[bytes, bytes] = {}
        self._changed: List[str] = []
        self._lock = threading.RLock()

    _OPTIONS = ("approver", "docs_dir", "validate_isin_checksum", "directory")

    @classmethod
    def open(
        cls,
        manager_id: ManagerId,
        identity: Any,
        operator: Signer,
        store: LedgerStore,
        **options,
    ) -> ContractManager:
        """Recover from durable storage: the state is a replay of the persisted prefix."""
        ledger_options = {k: v for k, v in options.items() if k not in cls._OPTIONS}
        manager = cls(manager_id, identity, operator, **options)
        manager.ledger = Ledger.open(manager_id, store, authority=identity, **ledger_options)
        manager.state = replay(manager.ledger, CONTRACT_REDUCER, identity.key_at)
        for envelope in manager.ledger.entries:
            manager._remember_documents(envelope)
        if manager.in_doubt():
            logger.warning("%s recovered with %d in-doubt txns", manager_id,
                           len(manager.in_doubt()))
        return manager

    def reducer(self) -> Reducer[ContractState]:
        return CONTRACT_REDUCER

    def _append(self, kind: str, body: Dict[str, Any]) -> EventEnvelope:
        envelope = self.ledger.append_signed(kind, body, self.operator)
        apply_contract_event(self.state, envelope)
        self._remember_documents(envelope)
        self._changed.extend(self._touched(envelope))
        return envelope

    def _touched(self, envelope: EventEnvelope) -> List[str]:
        if envelope.payload_kind in (INSTRUMENT_ISSUED, LIFECYCLE_APPLIED):
            return [envelope.body()["isin"]]
        if envelope.payload_kind in (TXN_COMMITTED, TXN_APPLIED):
            record = self.txn_record(envelope.body()["txn_id"])
            if record is not None:
                return [v["isin"] for v in record.actions
                        if v.get("type") == ContractAction.type_name]
        return []

    # =========================================================================
    # Documents
    # =========================================================================

    def _remember_documents(self, envelope: EventEnvelope) -> None:
        blobs: List[bytes] = []
        if envelope.payload_kind == INSTRUMENT_ISSUED:
            blobs.append(envelope.body()["request"]["body"].get("docs") or b"")
        elif envelope.payload_kind in (TXN_COMMITTED, TXN_APPLIED):
            record = self.txn_record(envelope.body()["txn_id"])
            for value in record.actions if record else []:
                event = value.get("event") or {}
                if value.get("type") == ContractAction.type_name and event.get("kind") == ISSUE:
                    blobs.append(event.get("docs") or b"")
        for blob in blobs:
            self.store_document(blob)

    def store_document(self, blob: bytes) -> bytes:
        """Store ``blob`` under its SHA-256 digest; returns the digest."""
        key = digest(blob)
        self._documents[key] = blob
        if self.docs_dir is not None:
            path = self.docs_dir / key.hex()
            if not path.exists():
                self.docs_dir.mkdir(parents=True, exist_ok=True)
                path.write_bytes(blob)
        return key

    def document(self, docs_hash: bytes) -> bytes:
        if docs_hash in self._documents:
            return self._documents[docs_hash]
        if self.docs_dir is not None:
            path = self.docs_dir / docs_hash.hex()
            if path.exists():
                return path.read_bytes()
        raise UnknownInstrument(f"no document {docs_hash.hex()}")

    # =========================================================================
    # Queries
    # =========================================================================

    def instance(self, isin: str) -> ContractInstance:
        try:
            return self.state.instances[isin]
        except KeyError:
            raise UnknownInstrument(isin) from None

    def query_state(self, isin: str) -> Dict[str, Any]:
        """
        Authoritative snapshot of an instrument.

        Returns:
            ``state_version``, ``residual`` (canonical text), ``bindings``,
            ``status``, ``clock``, ``issuer``, ``docs_hash`` and ``seq`` (the
            ledger prefix the snapshot reflects).

        Raises:
            UnknownInstrument
        """
        with self._lock:
            value = self.instance(isin).to_value()
            value["seq"] = len(self.ledger)
        del value["spec"]
        return value

    def pending_payments(self, isin: str) -> List[Dict[str, Any]]:
        """
        Payments the residual expects next, with their transfers when computable.

        ``transfers`` is ``None`` for a pro-rata payment that settles over a
        holder snapshot carried by the event (the caller asserts it).
        """
        instance = self.instance(isin)
        pending = []
        for atom in active_atoms(instance.residual):
            if not isinstance(atom, Payment):
                continue
            needs_snapshot = isinstance(atom.target, ProRata) and atom.target.basis is None
            transfers = None if needs_snapshot else resolve_payment(atom, instance.bindings)
            pending.append({
                "payer": atom.payer,
                "resource": atom.resource,
                "deadline": atom.deadline,
                "needs_snapshot": needs_snapshot,
                "transfers": None if transfers is None else [t.to_value() for t in transfers],
                "amount": (payment_amount(atom, instance.bindings) if transfers is None
                           else sum(t.amount for t in transfers)),
            })
        return pending

    def instruments(self) -> List[str]:
        return sorted(self.state.instances)

    # =========================================================================
    # Issuance
    # =========================================================================

    def _isin_for(self, body: Dict[str, Any], issuer: PartyId) -> str:
        isin = body.get("isin")
        if isin is None:
            return allocate_isin(issuer, body.get("nonce", 0))
        if not is_valid_isin(isin, checksum=self.validate_isin_checksum):
            raise InvalidParams(f"malformed ISIN {isin!r}")
        return isin

    def _check_issue(self, isin: str, issuer: PartyId, spec_text: str, docs: bytes) -> Spec:
        if isin in self.state.instances or isin in self.state.locks:
            raise InvalidParams(f"ISIN {isin} already issued")
        spec = parse_spec(spec_text)
        check_spec(spec)
        if not self.approver(spec, issuer, docs):
            logger.warning("%s: issuance of %s by %s not approved", self.manager_id, isin, issuer)
            raise Unauthorized(f"issuance of {isin} was not approved")
        return spec

    def prepare_issue(self, request: SignedRequest) -> Dict[str, Any]:
        """
        Bind parties and allocate the ISIN for an issuance request without logging.

        Returns:
            The :class:`ContractAction` event body for an atomic issuance.
        """
        body = request.body
        spec = bind_parties(parse_spec(body["spec"]), body.get("parties", {}))
        isin = self._isin_for(body, request.author)
        return issue_event(isin, request.author, spec, body.get("docs") or b"")

    def issue_instrument(self, request: SignedRequest) -> str:
        """
        Launch an instrument so it is live.

        Body: ``spec`` (canonical text, may use ``@name`` party symbols),
        ``parties`` (name -> party id), ``docs`` (prospectus blob), and either
        ``isin`` or ``nonce`` (ISIN allocated from issuer and nonce).

        This logs the instance only; the cluster issues atomically together
        with the security registration (see :func:`issue_event`).

        Returns:
            The ISIN.

        Raises:
            MalformedSpec, Unauthorized, InvalidParams
        """
        with self._lock:
            self.identity.verify_request(request, Action.ISSUE_INSTRUMENT)
            event = self.prepare_issue(request)
            spec = self._check_issue(event["isin"], request.author, event["spec"], event["docs"])
            self._append(INSTRUMENT_ISSUED, {
                "isin": event["isin"],
                "issuer": request.author,
                "spec": format_spec(spec),
                "docs_hash": digest(event["docs"]),
                "request": request.to_value(),
            })
        logger.info("%s issued %s for %s", self.manager_id, event["isin"], request.author)
        return event["isin"]

    # =========================================================================
    # Lifecycle events
    # =========================================================================

    def _admit(self, isin: str, event: LifecycleEvent, txn_id: Optional[str] = None) -> Match:
        instance = self.instance(isin)
        lock = self.state.locks.get(isin)
        if lock is not None and lock != txn_id:
            raise InvalidParams(f"{isin} has transaction {lock} in flight")
        if instance.status is InstanceStatus.DEFAULT:
            raise DeadlineExpired(f"{isin} is in default")
        if instance.status is InstanceStatus.TERMINATED:
            raise NoMatch(f"{isin} is terminated")
        if isinstance(event, TimeAdvanced) and event.to <= instance.clock:
            raise NoMatch(f"time {event.to} is not after the instance clock {instance.clock}")
        result = residuate(instance.residual, event, instance.bindings)
        if not result:
            raise NoMatch(f"{event.kind} does not match the residual of {isin}")
        return result

    def apply_event(self, request: SignedRequest) -> int:
        """
        Apply one lifecycle event outside a transaction.

        Body: ``isin``, ``event`` (value form, authored by the request author)
        and optionally ``state_version`` (the version the author saw).

        Returns:
            The new state_version.

        Raises:
            NoMatch: if the event is not admissible for the residual.
            DeadlineExpired: if the instrument is in default.
            UnknownInstrument, Unauthorized, BadSignature, StaleStateVersion
            InvalidParams: for events that must commit atomically (payments
                and record-date snapshots).
        """
        body = request.body
        isin = body["isin"]
        event = event_from_value(body["event"])
        with self._lock:
            self.identity.verify_request(request)
            self._authorize_event(request.author, event, agent_ok=False)
            if isinstance(event, PaymentSettled) and event.transfers:
                raise InvalidParams("payments settle atomically with their transfers")
            if getattr(event, "snapshot", None) is not None:
                raise InvalidParams("holder snapshots are asserted atomically")
            expected = body.get("state_version")
            if expected is not None and expected != self.instance(isin).state_version:
                raise StaleStateVersion(
                    f"{isin} is at version {self.instance(isin).state_version}, not {expected}"
                )
            self._admit(isin, event)
            self._append(LIFECYCLE_APPLIED, {
                "isin": isin, "event": event.to_value(), "request": request.to_value(),
            })
            version = self.state.instances[isin].state_version
        logger.debug("%s: %s %s -> version %d", self.manager_id, isin, event.kind, version)
        return version

    def try_apply(self, request: SignedRequest) -> Optional[int]:
        """:meth:`apply_event`, returning None instead of raising NoMatch / DeadlineExpired."""
        try:
            return self.apply_event(request)
        except (NoMatch, DeadlineExpired) as exc:
            logger.info("%s: rejected %s: %s", self.manager_id, request.kind, exc)
            return None

    def _authorize_event(self, author: PartyId, event: LifecycleEvent, agent_ok: bool) -> None:
        action = EVENT_ACTIONS[event.kind]
        if event.author == author:
            allowed = self.identity.authorize(author, action)
        else:
            allowed = agent_ok and self.identity.authorize(author, Action.ACT_AS_AGENT)
        if not allowed:
            raise Unauthorized(f"{author} may not submit {event.kind} as {event.author}")

    # =========================================================================
    # Two-phase commit
    # =========================================================================

    def validate_prepare(self, actions: List[TxnAction], context: PrepareContext) -> None:
        author = context.request.author if context.request else ""
        for action in actions:
            if not isinstance(action, ContractAction):
                raise InvalidParams(f"{self.manager_id} cannot prepare {action.type_name}")
            if action.event.get("kind") == ISSUE:
                self._validate_issue(action, context)
                continue
            event = event_from_value(action.event.get("event") or {})
            self._authorize_event(author, event, agent_ok=True)
            self._admit(action.isin, event, context.txn_id)
            if isinstance(event, PaymentSettled):
                legs = sorted(
                    Transfer(a.source, a.target, a.resource, a.amount)
                    for a in context.all_actions if isinstance(a, TransferAction)
                )
                if legs != sorted(event.transfers):
                    raise NoMatch("payment event does not match the transaction's transfers")
            snapshot = getattr(event, "snapshot", None)
            if snapshot is not None and not any(
                isinstance(a, AssertHolders) and a.resource == action.isin
                and dict(a.snapshot) == dict(snapshot)
                for a in context.all_actions
            ):
                raise NoMatch("holder snapshot is not asserted in the transaction")

    def _validate_issue(self, action: ContractAction, context: PrepareContext) -> None:
        event = action.event
        issuer = event["issuer"]
        self.authorize_principal(context, issuer, Action.ISSUE_INSTRUMENT)
        if not is_valid_isin(action.isin, checksum=self.validate_isin_checksum):
            raise InvalidParams(f"malformed ISIN {action.isin!r}")
        self._check_issue(action.isin, issuer, event["spec"], event.get("docs") or b"")
        if not any(isinstance(a, RegisterResource) and a.resource == action.isin
                   and a.issuer == issuer for a in context.all_actions):
            raise InvalidParams(f"issuance of {action.isin} must register its security")

    # =========================================================================
    # Node interface
    # =========================================================================

    def _notifications(self, result: Any) -> Any:
        changed, self._changed = self._changed, []
        if self.directory is None or not changed:
            return result
        return self._notify(result, list(dict.fromkeys(changed)))

    def _notify(self, result: Any, isins: Iterable[str]) -> Any:
        for isin in isins:
            try:
                dst = self.directory.trade_manager(isin)
            except EngineError:
                continue
            instance = self.state.instances[isin]
            message = SignedRequest.create("InstrumentVersion", {
                "isin": isin,
                "state_version": instance.state_version,
                "status": instance.status.value,
            }, self.operator)
            yield Send(dst, message)
        return result

    def handle(self, message: Any) -> Any:
        if isinstance(message, TxnMessage):
            return self._notifications(self.participant_handle(message))
        if not isinstance(message, SignedRequest):
            raise InvalidParams(f"unexpected {type(message).__name__}")
        kind, body = message.kind, message.body
        if kind == "IssueInstrument":
            return self._notifications(self.issue_instrument(message))
        if kind == "PrepareIssue":
            return self.prepare_issue(message)
        if kind == "LifecycleEvent":
            return self._notifications(self.apply_event(message))
        if kind == "QueryState":
            return self.query_state(body["isin"])
        if kind == "PendingPayments":
            return self.pending_payments(body["isin"])
        if kind == "Instruments":
            return self.instruments()
        raise InvalidParams(f"unknown contract request {kind}")
