"""
Resource manager: balances, reservations and transfers for any resource type.

Instantiated as the security manager (instrument units, one resource per
ISIN) and as the currency manager (a fiat mock). Amounts are integers in minor
units.

Conservation:
    For every resource, the sum over accounts of ``available + reserved`` only
    changes through ``Issued`` entries (and committed ``Issue`` actions).

Reservations:
    A reservation holds part of an account (``available`` -> ``reserved``).
    It can be consumed in parts; each part goes either to a beneficiary
    (commit) or back to the owner (abort). It turns terminal when nothing
    remains: ``Committed`` if the last part went to a beneficiary, else
    ``Returned``. Amounts pinned by a prepared transaction cannot be settled
    outside that transaction.
"""

from __future__ import annotations
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from .codec import pack
from .core import (
    Action, AlreadyTerminal, AssertionFailed, InsufficientBalance, InvalidParams, ManagerId,
    NotOwner, PartyId, Unauthorized, UnknownAccount, UnknownReservation, UnknownResource,
)
from .crypto import Signer
from .ledger import EventEnvelope, Ledger, LedgerStore, Reducer, replay
from .messages import (
    AssertHolders, IssueAction, RegisterResource, ReleaseAction, SignedRequest, TransferAction,
    TxnAction, TxnMessage, action_from_value,
)
from .txn import (
    TXN_ABORTED, TXN_APPLIED, TXN_COMMITTED, TXN_PREPARED, Participant, PrepareContext,
    TxnRecord, apply_txn_record,
)


__all__ = [
    'ReservationStatus',
    'ResourceType',
    'ResourceAccount',
    'Reservation',
    'TransferInstruction',
    'ResourceState',
    'ResourceManager',
    'RESOURCE_REDUCER',
]

logger = logging.getLogger(__name__)

RESOURCE_REGISTERED = "ResourceRegistered"
CREDIT_LIMIT_SET = "CreditLimitSet"
ISSUED = "Issued"
TRANSFERRED = "Transferred"
RESERVED = "Reserved"
RESERVATION_SETTLED = "ReservationSettled"
REFERENCE_FENCED = "ReferenceFenced"

COMMIT = "Commit"
ABORT = "Abort"


class ReservationStatus(Enum):
    HELD = "Held"
    COMMITTED = "Committed"
    RETURNED = "Returned"


@dataclass
class ResourceType:
    resource: str
    decimals: int = 0
    issuer: Optional[PartyId] = None
    supply: int = 0

    def to_value(self) -> Dict[str, Any]:
        return {
            "resource": self.resource,
            "decimals": self.decimals,
            "issuer": self.issuer,
            "supply": self.supply,
        }


@dataclass
class ResourceAccount:
    owner: PartyId
    resource: str
    available: int = 0
    reserved: int = 0
    credit_limit: int = 0

    @property
    def total(self) -> int:
        return self.available + self.reserved

    def to_value(self) -> Dict[str, Any]:
        return {
            "owner": self.owner,
            "resource": self.resource,
            "available": self.available,
            "reserved": self.reserved,
            "credit_limit": self.credit_limit,
        }


@dataclass
class Reservation:
    reservation_id: str
    owner: PartyId
    resource: str
    amount: int
    remaining: int
    beneficiary: Optional[PartyId] = None
    pledge: bool = False
    status: ReservationStatus = ReservationStatus.HELD
    pinned: int = 0
    created_seq: int = 0
    txn_id: Optional[str] = None
    settled_to: Optional[PartyId] = None

    @property
    def free(self) -> int:
        """Remaining amount not pinned by a prepared transaction."""
        return self.remaining - self.pinned

    def to_value(self) -> Dict[str, Any]:
        return {
            "reservation_id": self.reservation_id,
            "owner": self.owner,
            "resource": self.resource,
            "amount": self.amount,
            "remaining": self.remaining,
            "beneficiary": self.beneficiary,
            "pledge": self.pledge,
            "status": self.status.value,
            "pinned": self.pinned,
            "created_seq": self.created_seq,
            "txn_id": self.txn_id,
            "settled_to": self.settled_to,
        }


@dataclass(frozen=True)
class TransferInstruction:
    """
    Client-side transfer draft; :meth:`sign` turns it into the request
    :meth:`ResourceManager.transfer` accepts.
    """

    source: PartyId
    target: PartyId
    resource: str
    amount: int
    ref: Optional[str] = None

    def to_value(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "target": self.target,
            "resource": self.resource,
            "amount": self.amount,
            "ref": self.ref,
        }

    def sign(self, signer: Signer, nonce: int = 0) -> SignedRequest:
        return SignedRequest.create("Transfer", self.to_value(), signer, nonce)


@dataclass
class ResourceState:
    resources: Dict[str, ResourceType] = field(default_factory=dict)
    accounts: Dict[Tuple[PartyId, str], ResourceAccount] = field(default_factory=dict)
    reservations: Dict[str, Reservation] = field(default_factory=dict)
    txns: Dict[str, TxnRecord] = field(default_factory=dict)
    pending_resources: Dict[str, str] = field(default_factory=dict)
    frozen: Dict[str, str] = field(default_factory=dict)
    # client reference -> reservation id; None once the reference is fenced
    refs: Dict[str, Optional[str]] = field(default_factory=dict)
    next_reservation: int = 0
    length: int = 0

    def account(self, owner: PartyId, resource: str) -> ResourceAccount:
        """The account, created empty on first use."""
        key = (owner, resource)
        if key not in self.accounts:
            self.accounts[key] = ResourceAccount(owner, resource)
        return self.accounts[key]

    def holders(self, resource: str) -> Dict[PartyId, int]:
        return {
            owner: acct.total
            for (owner, res), acct in sorted(self.accounts.items())
            if res == resource and acct.total != 0
        }

    def encode(self) -> bytes:
        """Canonical encoding, used to compare live and replayed state."""
        return pack({
            "resources": {k: v.to_value() for k, v in self.resources.items()},
            "accounts": {f"{o}/{r}": a.to_value() for (o, r), a in self.accounts.items()},
            "reservations": {k: v.to_value() for k, v in self.reservations.items()},
            "txns": {k: v.to_value() for k, v in self.txns.items()},
            "pending_resources": self.pending_resources,
            "frozen": self.frozen,
            "refs": self.refs,
            "next_reservation": self.next_reservation,
            "length": self.length,
        })


# =========================================================================
# Reducer
# =========================================================================


def _consume(state: ResourceState, reservation: Reservation, amount: int,
             beneficiary: Optional[PartyId]) -> None:
    owner = state.account(reservation.owner, reservation.resource)
    owner.reserved -= amount
    if beneficiary is None:
        owner.available += amount
    else:
        state.account(beneficiary, reservation.resource).available += amount
    reservation.remaining -= amount
    if reservation.remaining == 0:
        reservation.status = (
            ReservationStatus.COMMITTED if beneficiary is not None else ReservationStatus.RETURNED
        )
        reservation.settled_to = beneficiary


def _hold(state: ResourceState, txn_id: str, actions: List[TxnAction], seq: int) -> None:
    for index, action in enumerate(actions):
        if isinstance(action, TransferAction):
            account = state.account(action.source, action.resource)
            account.available -= action.amount
            account.reserved += action.amount
            rid = f"{txn_id}#{index}"
            state.reservations[rid] = Reservation(
                rid, action.source, action.resource, action.amount, action.amount,
                beneficiary=action.target, pinned=action.amount, created_seq=seq, txn_id=txn_id,
            )
        elif isinstance(action, ReleaseAction):
            state.reservations[action.reservation_id].pinned += action.amount
        elif isinstance(action, RegisterResource):
            state.pending_resources[action.resource] = txn_id
        elif isinstance(action, AssertHolders):
            state.frozen[action.resource] = txn_id


def _settle_txn(state: ResourceState, txn_id: str, actions: List[TxnAction], commit: bool) -> None:
    for index, action in enumerate(actions):
        if isinstance(action, TransferAction):
            reservation = state.reservations[f"{txn_id}#{index}"]
            reservation.pinned = 0
            _consume(state, reservation, action.amount, action.target if commit else None)
        elif isinstance(action, ReleaseAction):
            reservation = state.reservations[action.reservation_id]
            reservation.pinned -= action.amount
            if commit:
                _consume(state, reservation, action.amount, action.beneficiary)
        elif isinstance(action, AssertHolders):
            state.frozen.pop(action.resource, None)
        elif isinstance(action, RegisterResource):
            state.pending_resources.pop(action.resource, None)
            if commit:
                state.resources[action.resource] = ResourceType(
                    action.resource, action.decimals, action.issuer
                )
        elif isinstance(action, IssueAction) and commit:
            state.account(action.target, action.resource).available += action.amount
            state.resources[action.resource].supply += action.amount


def apply_resource_event(state: ResourceState, envelope: EventEnvelope) -> ResourceState:
    """Reducer step for resource ledgers."""
    state.length = envelope.seq + 1
    record = apply_txn_record(state.txns, envelope)
    if record is not None:
        actions = [action_from_value(v) for v in record.actions]
        kind = envelope.payload_kind
        if kind == TXN_PREPARED:
            _hold(state, record.txn_id, actions, envelope.seq)
        elif kind == TXN_APPLIED:
            _hold(state, record.txn_id, actions, envelope.seq)
            _settle_txn(state, record.txn_id, actions, commit=True)
        elif kind in (TXN_COMMITTED, TXN_ABORTED):
            _settle_txn(state, record.txn_id, actions, commit=kind == TXN_COMMITTED)
        return state

    body = envelope.body()
    kind = envelope.payload_kind
    if kind == RESOURCE_REGISTERED:
        state.resources[body["resource"]] = ResourceType(
            body["resource"], body["decimals"], body["issuer"]
        )
    elif kind == CREDIT_LIMIT_SET:
        state.account(body["owner"], body["resource"]).credit_limit = body["credit_limit"]
    elif kind == ISSUED:
        state.account(body["target"], body["resource"]).available += body["amount"]
        state.resources[body["resource"]].supply += body["amount"]
    elif kind == TRANSFERRED:
        state.account(body["source"], body["resource"]).available -= body["amount"]
        state.account(body["target"], body["resource"]).available += body["amount"]
    elif kind == RESERVED:
        account = state.account(body["owner"], body["resource"])
        account.available -= body["amount"]
        account.reserved += body["amount"]
        rid = body["reservation_id"]
        state.reservations[rid] = Reservation(
            rid, body["owner"], body["resource"], body["amount"], body["amount"],
            beneficiary=body.get("pledgee"), pledge=body.get("pledgee") is not None,
            created_seq=envelope.seq,
        )
        state.next_reservation += 1
        if body.get("client_ref") is not None:
            state.refs[body["client_ref"]] = rid
    elif kind == REFERENCE_FENCED:
        state.refs[body["client_ref"]] = None
    elif kind == RESERVATION_SETTLED:
        reservation = state.reservations[body["reservation_id"]]
        beneficiary = body["beneficiary"] if body["decision"] == COMMIT else None
        _consume(state, reservation, body["amount"], beneficiary)
    return state


RESOURCE_REDUCER: Reducer[ResourceState] = Reducer(ResourceState, apply_resource_event)


# =========================================================================
# Manager
# =========================================================================


class ResourceManager(Participant):
    """
    State manager for one or more resource types.

    Args:
        manager_id: Ledger / node id (e.g. ``"currency"``, ``"securities"``).
        identity: Identity manager (key authority and authorization).
        operator: Node operator that signs this ledger's entries.
        store: Durable storage for the ledger.
        reservation_ttl: If set, Held reservations older than this many ledger
            entries are returned by :meth:`expire_reservations`. Off by default.

    Examples:
        >>> currency = ResourceManager("currency", identity, operator)
        >>> currency.register_resource("EUR", issuer=central_bank, decimals=2)
        >>> currency.issue_units(SignedRequest.create("IssueUnits", {...}, cb_signer))
        >>> currency.transfer(TransferInstruction("A", "B", "EUR", 100).sign(alice))
    """

    def __init__(
        self,
        manager_id: ManagerId,
        identity: Any,
        operator: Signer,
        store: Optional[LedgerStore] = None,
        reservation_ttl: Optional[int] = None,
        **ledger_options,
    ):
        self.manager_id = manager_id
        self.identity = identity
        self.operator = operator
        self.reservation_ttl = reservation_ttl
        self.state = ResourceState()
        self.alerts = []
        self.ledger = Ledger(manager_id, authority=identity, store=store, **ledger_options)
        self._lock = threading.RLock()

    @classmethod
    def open(
        cls,
        manager_id: ManagerId,
        identity: Any,
        operator: Signer,
        store: LedgerStore,
        **options,
    ) -> ResourceManager:
        """Recover from durable storage: the state is a replay of the persisted prefix."""
        ledger_options = {k: v for k, v in options.items() if k != "reservation_ttl"}
        manager = cls(manager_id, identity, operator, **options)
        manager.ledger = Ledger.open(manager_id, store, authority=identity, **ledger_options)
        manager.state = replay(manager.ledger, RESOURCE_REDUCER, identity.key_at)
        in_doubt = manager.in_doubt()
        if in_doubt:
            logger.warning("%s recovered with %d in-doubt txns", manager_id, len(in_doubt))
        return manager

    def reducer(self) -> Reducer[ResourceState]:
        return RESOURCE_REDUCER

    def _append(self, kind: str, body: Dict[str, Any]) -> EventEnvelope:
        envelope = self.ledger.append_signed(kind, body, self.operator)
        apply_resource_event(self.state, envelope)
        return envelope

    # =========================================================================
    # Queries
    # =========================================================================

    def account(self, owner: PartyId, resource: str) -> ResourceAccount:
        """
        Raises:
            UnknownAccount: if the account never existed.
        """
        acct = self.state.accounts.get((owner, resource))
        if acct is None:
            raise UnknownAccount(f"{owner}/{resource}")
        return acct

    def balance(self, owner: PartyId, resource: str) -> int:
        """Available balance, 0 for an account that never existed."""
        acct = self.state.accounts.get((owner, resource))
        return acct.available if acct else 0

    def holders(self, resource: str) -> Dict[PartyId, int]:
        """Owner -> available + reserved, for every non-zero holding."""
        return self.state.holders(resource)

    def total_supply(self, resource: str) -> int:
        return self._resource(resource).supply

    def total_holdings(self, resource: str) -> int:
        return sum(a.total for (_, r), a in self.state.accounts.items() if r == resource)

    def reservation(self, reservation_id: str) -> Reservation:
        try:
            return self.state.reservations[reservation_id]
        except KeyError:
            raise UnknownReservation(reservation_id) from None

    def _resource(self, resource: str) -> ResourceType:
        try:
            return self.state.resources[resource]
        except KeyError:
            raise UnknownResource(resource) from None

    # =========================================================================
    # Operator actions
    # =========================================================================

    def register_resource(
        self, resource: str, issuer: Optional[PartyId], decimals: int = 0
    ) -> None:
        """Register a resource type (operator bootstrap, e.g. a currency)."""
        if decimals < 0:
            raise InvalidParams("decimals must be non-negative")
        with self._lock:
            if resource in self.state.resources or resource in self.state.pending_resources:
                raise InvalidParams(f"resource {resource} already registered")
            self._append(RESOURCE_REGISTERED, {
                "resource": resource, "decimals": decimals, "issuer": issuer,
            })

    def set_credit_limit(self, owner: PartyId, resource: str, credit_limit: int) -> None:
        """Credit limits are zero or negative; ordinary users keep 0."""
        if credit_limit > 0:
            raise InvalidParams("credit limit must be <= 0")
        with self._lock:
            self._resource(resource)
            self._append(CREDIT_LIMIT_SET, {
                "owner": owner, "resource": resource, "credit_limit": credit_limit,
            })

    # =========================================================================
    # Client operations
    # =========================================================================

    def _authorize(self, request: SignedRequest, principal: PartyId, action: Action) -> None:
        self.identity.verify_request(request)
        if request.author == principal:
            allowed = self.identity.authorize(principal, action)
        else:
            allowed = self.identity.authorize(request.author, Action.ACT_AS_AGENT)
        if not allowed:
            logger.warning("%s: %s by %s for %s refused", self.manager_id, request.kind,
                           request.author, principal)
            raise Unauthorized(f"{request.author} may not {action.value} for {principal}")

    def _check_unfrozen(self, resource: str) -> None:
        txn_id = self.state.frozen.get(resource)
        if txn_id is not None:
            raise AssertionFailed(f"{resource} holders are frozen by {txn_id}")

    def _check_debit(self, owner: PartyId, resource: str, amount: int, pending: int = 0) -> None:
        self._resource(resource)
        self._check_unfrozen(resource)
        acct = self.state.accounts.get((owner, resource))
        if acct is None:
            raise UnknownAccount(f"{owner}/{resource}")
        if acct.available - pending - amount < acct.credit_limit:
            raise InsufficientBalance(
                f"{owner} has {acct.available - pending} {resource}, needs {amount}"
            )

    def _check_party(self, party: PartyId) -> None:
        if party not in self.identity.state.parties:
            raise UnknownAccount(f"no registered party {party}")

    def transfer(self, request: SignedRequest) -> int:
        """
        Apply a signed :class:`TransferInstruction`.

        Returns:
            The ledger seq of the ``Transferred`` entry.

        Raises:
            InsufficientBalance: if ``available - amount < credit_limit``.
            Unauthorized: if the author is neither the source nor an agent.
            UnknownAccount, UnknownResource
        """
        body = request.body
        source, target, resource, amount = (
            body["source"], body["target"], body["resource"], body["amount"]
        )
        if amount <= 0 or source == target:
            raise InvalidParams("transfer needs amount > 0 and distinct parties")
        with self._lock:
            self._authorize(request, source, Action.TRANSFER)
            self._check_debit(source, resource, amount)
            self._check_party(target)
            envelope = self._append(TRANSFERRED, {
                "source": source, "target": target, "resource": resource, "amount": amount,
                "ref": body.get("ref"), "request": request.to_value(),
            })
        return envelope.seq

    def reserve(self, request: SignedRequest) -> str:
        """
        Hold ``amount`` of the owner's resource.

        The body may name a ``pledgee``: the reservation is then a collateral
        pledge that can only be committed to the pledgee. It may also carry a
        ``client_ref``: repeating a Reserve with the same reference returns the
        reservation already made, and a reference fenced by
        :meth:`settle_reservation` can no longer reserve anything.

        Returns:
            The reservation id.

        Raises:
            InsufficientBalance, Unauthorized, UnknownAccount, UnknownResource
            AlreadyTerminal: the ``client_ref`` was fenced.
            InvalidParams: the ``client_ref`` names a different reservation.
        """
        body = request.body
        owner, resource, amount = body["owner"], body["resource"], body["amount"]
        pledgee = body.get("pledgee")
        client_ref = body.get("client_ref")
        if amount <= 0:
            raise InvalidParams("reservation amount must be positive")
        with self._lock:
            self._authorize(request, owner, Action.RESERVE)
            if client_ref is not None and client_ref in self.state.refs:
                return self._known_reference(client_ref, owner, resource, amount)
            self._check_debit(owner, resource, amount)
            if pledgee is not None:
                self._check_party(pledgee)
            reservation_id = f"{self.manager_id}:r{self.state.next_reservation}"
            self._append(RESERVED, {
                "reservation_id": reservation_id, "owner": owner, "resource": resource,
                "amount": amount, "pledgee": pledgee, "client_ref": client_ref,
                "request": request.to_value(),
            })
        return reservation_id

    def _known_reference(self, client_ref: str, owner: PartyId, resource: str,
                         amount: int) -> str:
        reservation_id = self.state.refs[client_ref]
        if reservation_id is None:
            raise AlreadyTerminal(f"reference {client_ref} is fenced")
        reservation = self.state.reservations[reservation_id]
        if (reservation.owner, reservation.resource, reservation.amount) != (
                owner, resource, amount):
            raise InvalidParams(f"reference {client_ref} names another reservation")
        return reservation_id

    def settle_reservation(self, request: SignedRequest) -> ReservationStatus:
        """
        Commit the unpinned remainder to a beneficiary, or return it to the owner.

        Body: ``reservation_id`` or the ``client_ref`` it was reserved under,
        ``decision`` ("Commit" or "Abort"), ``beneficiary`` (for Commit).
        Repeating the decision that made the reservation terminal, with the
        same beneficiary, is a no-op returning the same status. Aborting a
        ``client_ref`` that never reserved anything fences it: a Reserve
        arriving later under that reference is refused.

        Raises:
            AlreadyTerminal: on a conflicting decision for a terminal reservation.
            UnknownReservation, Unauthorized, NotOwner
        """
        body = request.body
        decision = body["decision"]
        beneficiary = body.get("beneficiary")
        if decision not in (COMMIT, ABORT) or (decision == COMMIT and not beneficiary):
            raise InvalidParams("decision must be Abort or Commit with a beneficiary")
        with self._lock:
            reservation_id = body.get("reservation_id")
            if reservation_id is None:
                client_ref = body.get("client_ref")
                if client_ref is None:
                    raise InvalidParams("settle needs a reservation_id or a client_ref")
                reservation_id = self.state.refs.get(client_ref)
                if reservation_id is None:
                    return self._fence_reference(request, client_ref, decision)
            reservation = self.reservation(reservation_id)
            if reservation.pledge:
                if decision == COMMIT and beneficiary != reservation.beneficiary:
                    raise NotOwner("a pledge can only be committed to its pledgee")
                principal = reservation.beneficiary or reservation.owner
            else:
                principal = reservation.owner
            self._authorize(request, principal, Action.TRANSFER)
            return self._settle(reservation, decision, beneficiary)

    def _fence_reference(self, request: SignedRequest, client_ref: str,
                         decision: str) -> ReservationStatus:
        if decision != ABORT:
            raise UnknownReservation(f"no reservation under reference {client_ref}")
        self.identity.verify_request(request)
        if not self.identity.authorize(request.author, Action.ACT_AS_AGENT):
            raise Unauthorized(f"{request.author} may not fence {client_ref}")
        if client_ref not in self.state.refs:
            self._append(REFERENCE_FENCED, {
                "client_ref": client_ref, "request": request.to_value(),
            })
            logger.info("%s: fenced reference %s", self.manager_id, client_ref)
        return ReservationStatus.RETURNED

    def _settle(self, reservation: Reservation, decision: str,
                beneficiary: Optional[PartyId], reason: str = "") -> ReservationStatus:
        if reservation.status is not ReservationStatus.HELD:
            same = (
                (decision == COMMIT and reservation.status is ReservationStatus.COMMITTED
                 and beneficiary == reservation.settled_to)
                or (decision == ABORT and reservation.status is ReservationStatus.RETURNED)
            )
            if same:
                return reservation.status
            logger.error("%s: conflicting %s for %s reservation %s", self.manager_id, decision,
                         reservation.status.value, reservation.reservation_id)
            raise AlreadyTerminal(
                f"{reservation.reservation_id} is {reservation.status.value}"
            )
        if reservation.free <= 0:
            raise AlreadyTerminal(f"{reservation.reservation_id} is pinned by a transaction")
        if beneficiary is not None:
            self._check_party(beneficiary)
            self._check_unfrozen(reservation.resource)
        self._append(RESERVATION_SETTLED, {
            "reservation_id": reservation.reservation_id,
            "decision": decision,
            "beneficiary": beneficiary if decision == COMMIT else None,
            "amount": reservation.free,
            "reason": reason,
        })
        return reservation.status

    def issue_units(self, request: SignedRequest) -> int:
        """
        Mint units: the only operation that changes total supply.

        Raises:
            Unauthorized: unless the author is the resource's registered issuer
                holding the Issuer role.
            UnknownResource
        """
        body = request.body
        resource, target, amount = body["resource"], body["target"], body["amount"]
        if amount <= 0:
            raise InvalidParams("issued amount must be positive")
        with self._lock:
            rtype = self._resource(resource)
            self.identity.verify_request(request)
            if request.author != rtype.issuer or not self.identity.authorize(
                request.author, Action.ISSUE_UNITS
            ):
                raise Unauthorized(f"{request.author} may not issue {resource}")
            self._check_party(target)
            envelope = self._append(ISSUED, {
                "resource": resource, "target": target, "amount": amount,
                "request": request.to_value(),
            })
        return envelope.seq

    def pledge(self, request: SignedRequest) -> str:
        """Reserve collateral for ``pledgee``; see :meth:`reserve`."""
        if not request.body.get("pledgee"):
            raise InvalidParams("a pledge needs a pledgee")
        return self.reserve(request)

    def release_pledge(self, request: SignedRequest) -> ReservationStatus:
        """Return pledged collateral to its owner (by the pledgee or an agent)."""
        reservation = self.reservation(request.body["reservation_id"])
        if not reservation.pledge:
            raise InvalidParams(f"{reservation.reservation_id} is not a pledge")
        with self._lock:
            self._authorize(request, reservation.beneficiary, Action.TRANSFER)
            return self._settle(reservation, ABORT, None, reason="released")

    def seize_pledge(self, request: SignedRequest) -> ReservationStatus:
        """Commit pledged collateral to the pledgee."""
        reservation = self.reservation(request.body["reservation_id"])
        if not reservation.pledge:
            raise InvalidParams(f"{reservation.reservation_id} is not a pledge")
        with self._lock:
            self._authorize(request, reservation.beneficiary, Action.TRANSFER)
            return self._settle(reservation, COMMIT, reservation.beneficiary, reason="seized")

    def expire_reservations(self) -> List[str]:
        """Return Held, unpinned, non-pledge reservations older than the TTL."""
        if self.reservation_ttl is None:
            return []
        expired: List[str] = []
        with self._lock:
            now = len(self.ledger)
            for reservation in list(self.state.reservations.values()):
                if (reservation.status is ReservationStatus.HELD and not reservation.pledge
                        and reservation.txn_id is None and reservation.pinned == 0
                        and reservation.created_seq + self.reservation_ttl <= now):
                    self._settle(reservation, ABORT, None, reason="expired")
                    expired.append(reservation.reservation_id)
        if expired:
            logger.info("%s expired %d reservations", self.manager_id, len(expired))
        return expired

    # =========================================================================
    # Two-phase commit
    # =========================================================================

    def validate_prepare(self, actions: List[TxnAction], context: PrepareContext) -> None:
        debits: Dict[Tuple[PartyId, str], int] = {}
        pins: Dict[str, int] = {}
        new_resources: Dict[str, PartyId] = {}
        for action in actions:
            if isinstance(action, TransferAction):
                if action.amount <= 0 or action.source == action.target:
                    raise InvalidParams("transfer needs amount > 0 and distinct parties")
                self.authorize_principal(context, action.source, Action.TRANSFER)
                key = (action.source, action.resource)
                self._check_debit(action.source, action.resource, action.amount,
                                  debits.get(key, 0))
                self._check_party(action.target)
                debits[key] = debits.get(key, 0) + action.amount
            elif isinstance(action, ReleaseAction):
                reservation = self.reservation(action.reservation_id)
                if reservation.status is not ReservationStatus.HELD:
                    raise AlreadyTerminal(f"{reservation.reservation_id} is terminal")
                if action.amount <= 0:
                    raise InvalidParams("release amount must be positive")
                if reservation.free - pins.get(reservation.reservation_id, 0) < action.amount:
                    raise InsufficientBalance(
                        f"{reservation.reservation_id} has {reservation.free} unpinned"
                    )
                if reservation.pledge and action.beneficiary not in (None, reservation.beneficiary):
                    raise NotOwner("a pledge can only be committed to its pledgee")
                if action.beneficiary is not None:
                    self._check_party(action.beneficiary)
                    self._check_unfrozen(reservation.resource)
                self.authorize_principal(context, reservation.owner, Action.TRANSFER)
                pins[reservation.reservation_id] = (
                    pins.get(reservation.reservation_id, 0) + action.amount
                )
            elif isinstance(action, AssertHolders):
                self._resource(action.resource)
                self._check_unfrozen(action.resource)
                current = self.holders(action.resource)
                if current != dict(action.snapshot):
                    raise AssertionFailed(f"holders of {action.resource} changed")
            elif isinstance(action, RegisterResource):
                if (action.resource in self.state.resources
                        or action.resource in self.state.pending_resources
                        or action.resource in new_resources):
                    raise InvalidParams(f"resource {action.resource} already registered")
                self.authorize_principal(context, action.issuer, Action.ISSUE_INSTRUMENT)
                new_resources[action.resource] = action.issuer
            elif isinstance(action, IssueAction):
                if action.amount <= 0:
                    raise InvalidParams("issued amount must be positive")
                issuer = new_resources.get(action.resource)
                if issuer is None:
                    issuer = self._resource(action.resource).issuer
                self.authorize_principal(context, issuer, Action.ISSUE_UNITS)
                self._check_party(action.target)
            else:
                raise InvalidParams(f"{self.manager_id} cannot prepare {action.type_name}")

    # =========================================================================
    # Node interface
    # =========================================================================

    def handle(self, message: Any) -> Any:
        if isinstance(message, TxnMessage):
            return self.participant_handle(message)
        if not isinstance(message, SignedRequest):
            raise InvalidParams(f"unexpected {type(message).__name__}")
        kind, body = message.kind, message.body
        if kind == "Transfer":
            return self.transfer(message)
        if kind == "Reserve":
            return self.reserve(message)
        if kind == "Settle":
            return self.settle_reservation(message).value
        if kind == "IssueUnits":
            return self.issue_units(message)
        if kind == "Pledge":
            return self.pledge(message)
        if kind == "ReleasePledge":
            return self.release_pledge(message).value
        if kind == "SeizePledge":
            return self.seize_pledge(message).value
        if kind == "Balance":
            acct = self.state.accounts.get((body["owner"], body["resource"]))
            return acct.to_value() if acct else None
        if kind == "Holders":
            return self.holders(body["resource"])
        if kind == "TotalSupply":
            return self.total_supply(body["resource"])
        if kind == "Reservation":
            return self.reservation(body["reservation_id"]).to_value()
        raise InvalidParams(f"unknown resource request {kind}")
