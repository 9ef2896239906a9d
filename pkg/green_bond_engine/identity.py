"""
Identity manager: parties, roles and time-indexed public keys.

The identity manager is itself a state manager. Its ledger records party
registrations, key rotations and KYC changes; every other ledger asks it
whether an append is allowed and which key verifies an envelope.

Key epochs:
    The identity epoch is the identity ledger length. A key registered or
    rotated in at identity seq ``q`` is active from epoch ``q + 1``; a rotated
    or revoked key stops being active at that same epoch. The bootstrap
    (genesis) operator key is active from epoch 0.
"""

from __future__ import annotations
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence

from .codec import encode_fields, encode_int, pack
from .core import (
    Action, BadSignature, CorruptLedger, InactiveOldKey, InvalidParams, KycStatus,
    PartyId, Role, Unauthorized, UnknownParty, permitted,
)
from .crypto import Signer, check_public_key, digest, verify
from .ledger import ChainStatus, EventEnvelope, Ledger, LedgerStore, Reducer, verify_chain
from .messages import SignedRequest


__all__ = ['KeyRecord', 'Party', 'IdentityState', 'IdentityManager', 'rotation_message']

logger = logging.getLogger(__name__)

PARTY_REGISTERED = "PartyRegistered"
KEY_ROTATED = "KeyRotated"
KYC_CHANGED = "KycChanged"


@dataclass
class KeyRecord:
    public_key: bytes
    registered_at: int
    revoked_at: Optional[int] = None

    def active_at(self, epoch: int) -> bool:
        return self.registered_at <= epoch and (self.revoked_at is None or epoch < self.revoked_at)

    def to_value(self) -> Dict[str, Any]:
        return {
            "public_key": self.public_key,
            "registered_at": self.registered_at,
            "revoked_at": self.revoked_at,
        }


@dataclass
class Party:
    party_id: PartyId
    legal_name: str
    roles: FrozenSet[Role]
    keys: List[KeyRecord] = field(default_factory=list)
    kyc_status: KycStatus = KycStatus.VERIFIED

    def key_at(self, epoch: int) -> Optional[bytes]:
        for record in self.keys:
            if record.active_at(epoch):
                return record.public_key
        return None

    @property
    def active_key(self) -> Optional[KeyRecord]:
        for record in self.keys:
            if record.revoked_at is None:
                return record
        return None

    def to_value(self) -> Dict[str, Any]:
        return {
            "party_id": self.party_id,
            "legal_name": self.legal_name,
            "roles": sorted(role.value for role in self.roles),
            "keys": [k.to_value() for k in self.keys],
            "kyc_status": self.kyc_status.value,
        }


@dataclass
class IdentityState:
    parties: Dict[PartyId, Party] = field(default_factory=dict)
    epoch: int = 0

    def encode(self) -> bytes:
        """Canonical encoding, used to compare live and replayed state."""
        return pack({
            "epoch": self.epoch,
            "parties": {pid: p.to_value() for pid, p in self.parties.items()},
        })


def rotation_message(party_id: PartyId, new_key: bytes, key_index: int) -> bytes:
    """What the old key signs to authorize a rotation to ``new_key``."""
    return encode_fields(b"rotate-key", party_id.encode("utf-8"), new_key, encode_int(key_index))


def apply_identity_event(state: IdentityState, envelope: EventEnvelope) -> IdentityState:
    """Reducer step for the identity ledger."""
    body = envelope.body()
    seq = envelope.seq
    active_from = seq + 1
    if envelope.payload_kind == PARTY_REGISTERED:
        registered_at = 0 if seq == 0 else active_from
        state.parties[body["party_id"]] = Party(
            party_id=body["party_id"],
            legal_name=body["legal_name"],
            roles=frozenset(Role(r) for r in body["roles"]),
            keys=[KeyRecord(body["public_key"], registered_at)],
        )
    elif envelope.payload_kind == KEY_ROTATED:
        party = state.parties[body["party_id"]]
        for record in party.keys:
            if record.revoked_at is None:
                record.revoked_at = active_from
        party.keys.append(KeyRecord(body["new_key"], active_from))
    elif envelope.payload_kind == KYC_CHANGED:
        party = state.parties[body["party_id"]]
        party.kyc_status = KycStatus(body["status"])
        if party.kyc_status is KycStatus.REVOKED:
            for record in party.keys:
                if record.revoked_at is None:
                    record.revoked_at = active_from
    state.epoch = seq + 1
    return state


IDENTITY_REDUCER: Reducer[IdentityState] = Reducer(IdentityState, apply_identity_event)


class IdentityManager:
    """
    Binds parties to roles and keys, and authorizes every action.

    Create one with :meth:`genesis`, which registers the bootstrap operator
    (self-signed), or recover one with :meth:`open`.

    Examples:
        >>> operator = Signer.from_label("op-identity")
        >>> identity = IdentityManager.genesis(operator, "Exchange Operator AG")
        >>> pid = identity.register_party("Farmer A", {Role.ISSUER}, key.public_key)
        >>> identity.authorize(pid, Action.ISSUE_INSTRUMENT)
        True
    """

    def __init__(
        self,
        operator: Signer,
        store: Optional[LedgerStore] = None,
        manager_id: str = "identity",
        **ledger_options,
    ):
        self.manager_id = manager_id
        self.operator = operator
        self.state = IdentityState()
        self.ledger = Ledger(manager_id, authority=self, store=store, **ledger_options)
        self._lock = threading.RLock()

    @classmethod
    def genesis(
        cls,
        operator: Signer,
        legal_name: str = "Market Operator",
        store: Optional[LedgerStore] = None,
        **options,
    ) -> IdentityManager:
        manager = cls(operator, store=store, **options)
        body = {
            "party_id": operator.party_id,
            "legal_name": legal_name,
            "roles": [Role.MARKET_OPERATOR.value],
            "public_key": check_public_key(operator.public_key),
        }
        payload = pack(body)
        message = manager.ledger.next_signing_bytes(PARTY_REGISTERED, payload, operator.party_id, 0)
        manager.ledger.append_trusted(
            PARTY_REGISTERED, payload, operator.party_id, operator.sign(message), 0
        )
        apply_identity_event(manager.state, manager.ledger[0])
        logger.info("identity genesis: operator %s", operator.party_id)
        return manager

    @classmethod
    def open(
        cls, operator: Signer, store: LedgerStore, manager_id: str = "identity", **options
    ) -> IdentityManager:
        """Recover from a store; the state is a replay of the persisted entries."""
        manager = cls(operator, manager_id=manager_id, **options)
        manager.ledger = Ledger.open(manager_id, store, authority=manager, **options)
        manager.state = IDENTITY_REDUCER.fold(manager.ledger.entries)
        status = manager.verify()
        if not status:
            raise CorruptLedger(str(status), seq=status.first_bad_seq or 0)
        return manager

    @classmethod
    def replica(cls, operator: Signer, entries: Sequence[EventEnvelope]) -> IdentityManager:
        """A read replica built from another node's identity entries."""
        manager = cls(operator)
        manager.ingest(entries)
        return manager

    def reducer(self) -> Reducer[IdentityState]:
        return IDENTITY_REDUCER

    # =========================================================================
    # Key authority (used by every ledger)
    # =========================================================================

    def current_epoch(self) -> int:
        return len(self.ledger)

    def now(self) -> int:
        """Logical time of the identity manager."""
        return self.current_epoch()

    def key_at(self, author: PartyId, epoch: int) -> Optional[bytes]:
        party = self.state.parties.get(author)
        if party is None:
            return None
        return party.key_at(epoch)

    def check_append(
        self, author: PartyId, kind: str, key_epoch: int, message: bytes, signature: bytes
    ) -> None:
        if key_epoch != self.current_epoch():
            raise BadSignature(f"stale key epoch {key_epoch} (current {self.current_epoch()})")
        public_key = self.key_at(author, key_epoch)
        if public_key is None or not verify(public_key, message, signature):
            logger.warning("rejected %s append by %s: BadSignature", kind, author)
            raise BadSignature(f"{kind} by {author} does not verify")
        if not self.authorize(author, Action.APPEND_LEDGER):
            logger.warning("rejected %s append by %s: Unauthorized", kind, author)
            raise Unauthorized(f"{author} may not append ledger events")

    # =========================================================================
    # Operations
    # =========================================================================

    def register_party(
        self,
        legal_name: str,
        roles: Iterable[Role],
        initial_key: bytes,
        party_id: Optional[PartyId] = None,
    ) -> PartyId:
        """
        Register a legal person; KYC is auto-approved.

        Args:
            legal_name: Display name.
            roles: Non-empty role set.
            initial_key: 32-byte Ed25519 public key.
            party_id: Requested id; generated from the name and epoch when omitted.

        Returns:
            The party id.

        Raises:
            MalformedKey: if the key is not well-formed.
            InvalidParams: on an empty role set or a taken party id.
        """
        role_set = frozenset(roles)
        if not role_set:
            raise InvalidParams("a party needs at least one role")
        public_key = check_public_key(initial_key)
        with self._lock:
            if party_id is None:
                seed = f"{legal_name}|{self.current_epoch()}".encode("utf-8")
                party_id = "P" + digest(seed).hex()[:15]
            if party_id in self.state.parties:
                raise InvalidParams(f"party id {party_id} already registered")
            self._append(PARTY_REGISTERED, {
                "party_id": party_id,
                "legal_name": legal_name,
                "roles": sorted(role.value for role in role_set),
                "public_key": public_key,
            })
        logger.info("registered party %s roles=%s", party_id, sorted(r.value for r in role_set))
        return party_id

    def rotate_key(self, party_id: PartyId, new_key: bytes, signed_by_old_key: bytes) -> KeyRecord:
        """
        Replace a party's active key.

        ``signed_by_old_key`` is the old key's signature over
        :func:`rotation_message` ``(party_id, new_key, len(keys))``.

        Raises:
            UnknownParty: if ``party_id`` is not registered.
            InactiveOldKey: if the party has no active key or signed with a retired one.
            BadSignature: if the signature is not from any key of the party.
            MalformedKey: if ``new_key`` is not well-formed.
        """
        new_key = check_public_key(new_key)
        with self._lock:
            party = self.state.parties.get(party_id)
            if party is None:
                raise UnknownParty(party_id)
            message = rotation_message(party_id, new_key, len(party.keys))
            active = party.active_key
            if active is None or party.kyc_status is not KycStatus.VERIFIED:
                raise InactiveOldKey(f"{party_id} has no active key")
            if not verify(active.public_key, message, signed_by_old_key):
                if any(verify(k.public_key, message, signed_by_old_key) for k in party.keys):
                    raise InactiveOldKey(f"{party_id} signed with a retired key")
                raise BadSignature(f"rotation for {party_id} does not verify")
            self._append(KEY_ROTATED, {
                "party_id": party_id,
                "new_key": new_key,
                "signature": signed_by_old_key,
            })
            record = party.keys[-1]
        logger.info("rotated key of %s, active from epoch %d", party_id, record.registered_at)
        return record

    def set_kyc_status(self, party_id: PartyId, status: KycStatus) -> None:
        """Change KYC status; revoking also retires the party's active key."""
        with self._lock:
            if party_id not in self.state.parties:
                raise UnknownParty(party_id)
            self._append(KYC_CHANGED, {"party_id": party_id, "status": status.value})

    def authorize(self, party_id: PartyId, action: Action) -> bool:
        """True iff the party is active, KYC-verified and a held role permits ``action``."""
        party = self.state.parties.get(party_id)
        if party is None or party.kyc_status is not KycStatus.VERIFIED:
            return False
        if party.active_key is None:
            return False
        return permitted(party.roles, action)

    def verify_request(self, request: SignedRequest, action: Optional[Action] = None) -> Party:
        """
        Check a client request against the author's current key and, if given, ``action``.

        Raises:
            UnknownParty, BadSignature, Unauthorized
        """
        party = self.state.parties.get(request.author)
        if party is None:
            raise UnknownParty(request.author)
        public_key = party.key_at(self.current_epoch())
        if public_key is None or not verify(public_key, request.message(), request.signature):
            raise BadSignature(f"{request.kind} request by {request.author} does not verify")
        if action is not None and not self.authorize(request.author, action):
            raise Unauthorized(f"{request.author} may not {action.value}")
        return party

    def verify_txn_sender(self, sender: PartyId, message: bytes, signature: bytes) -> None:
        """Node-to-node messages must come from an operator with the current key."""
        public_key = self.key_at(sender, self.current_epoch())
        if public_key is None or not verify(public_key, message, signature):
            raise BadSignature(f"message from {sender} does not verify")
        if not self.authorize(sender, Action.COORDINATE):
            raise Unauthorized(f"{sender} is not a node operator")

    def party(self, party_id: PartyId) -> Party:
        try:
            return self.state.parties[party_id]
        except KeyError:
            raise UnknownParty(party_id) from None

    def has_role(self, party_id: PartyId, role: Role) -> bool:
        party = self.state.parties.get(party_id)
        return party is not None and role in party.roles

    def verify(self) -> ChainStatus:
        """Verify this identity ledger against its own time-indexed keys."""
        return verify_chain(self.ledger, self.key_at)

    # =========================================================================
    # Replication
    # =========================================================================

    def ingest(self, entries: Iterable[EventEnvelope]) -> int:
        """
        Append entries copied from the authoritative identity ledger.

        Entries already present are skipped; each new one must chain onto the
        local head and verify against the local key state.

        Returns:
            Number of entries appended.
        """
        added = 0
        with self._lock:
            for envelope in entries:
                if envelope.seq < len(self.ledger):
                    continue
                if envelope.seq != len(self.ledger) or envelope.prev_hash != self.ledger.head_hash:
                    raise CorruptLedger("identity entries do not chain", seq=envelope.seq)
                if envelope.seq > 0:
                    public_key = self.key_at(envelope.author, envelope.key_epoch)
                    if public_key is None or not verify(
                        public_key, envelope.signing_bytes(), envelope.signature
                    ):
                        raise CorruptLedger("identity entry does not verify", seq=envelope.seq)
                self.ledger.append_trusted(
                    envelope.payload_kind, envelope.payload, envelope.author,
                    envelope.signature, envelope.key_epoch,
                )
                apply_identity_event(self.state, self.ledger[envelope.seq])
                added += 1
        return added

    def _append(self, kind: str, body: Dict[str, Any]) -> EventEnvelope:
        envelope = self.ledger.append_signed(kind, body, self.operator)
        apply_identity_event(self.state, envelope)
        return envelope

    # =========================================================================
    # Node interface
    # =========================================================================

    def handle(self, message: Any) -> Any:
        """Serve signed client requests (register, rotate, authorize, entries)."""
        if not isinstance(message, SignedRequest):
            raise InvalidParams(f"unexpected {type(message).__name__}")
        body = message.body
        if message.kind == "RegisterParty":
            self.verify_request(message, Action.REGISTER_PARTY)
            party_id = self.register_party(
                body["legal_name"],
                [Role(r) for r in body["roles"]],
                body["public_key"],
                body.get("party_id"),
            )
            return party_id
        if message.kind == "RotateKey":
            record = self.rotate_key(body["party_id"], body["new_key"], body["signature"])
            return record.to_value()
        if message.kind == "Authorize":
            return self.authorize(body["party_id"], Action(body["action"]))
        if message.kind == "Entries":
            return [e.encode() for e in self.ledger.entries[body.get("from_seq", 0):]]
        raise InvalidParams(f"unknown identity request {message.kind}")
