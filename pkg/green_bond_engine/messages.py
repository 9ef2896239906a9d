"""
Signed messages exchanged between clients, state managers and coordinators.

- ``SignedRequest``: a client's instruction (order, transfer, observation, ...)
  signed with the client's current key. Managers embed the whole request in
  the ledger event they append, so the client signature stays verifiable.
- ``TxnMessage``: two-phase commit traffic, signed by the sending node.
- ``TxnAction`` subclasses: the effects a participant is asked to prepare.
- ``Reply``: the uniform answer to a call, carrying a value or an error code.

Every type converts to and from a plain value tree (``to_value`` /
``from_value``) so it can travel through :func:`~green_bond_engine.codec.pack`.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, ClassVar, Dict, List, Optional, Tuple, Type

from .codec import encode_fields, encode_int, pack, unpack
from .core import EncodingError, EngineError, ManagerId, PartyId, error_from_code
from .crypto import digest


__all__ = [
    'SignedRequest',
    'TxnKind',
    'TxnMessage',
    'Vote',
    'Reply',
    'TxnAction',
    'TransferAction',
    'ReleaseAction',
    'AssertHolders',
    'RegisterResource',
    'IssueAction',
    'ContractAction',
    'action_from_value',
    'encode_message',
    'decode_message',
    'split_actions',
]


# =========================================================================
# Client requests
# =========================================================================


@dataclass(frozen=True)
class SignedRequest:
    """
    A signed client instruction.

    Examples:
        >>> req = SignedRequest.create("Transfer", {"to": "bob", "amount": 10}, alice, nonce=1)
        >>> identity.verify_request(req, Action.TRANSFER)
    """

    kind: str
    body: Dict[str, Any]
    author: PartyId
    nonce: int = 0
    signature: bytes = b""

    def message(self) -> bytes:
        return encode_fields(
            b"request",
            self.kind.encode("utf-8"),
            pack(self.body),
            self.author.encode("utf-8"),
            encode_int(self.nonce),
        )

    @property
    def request_id(self) -> str:
        """Stable id derived from the signed content."""
        return digest(self.message()).hex()[:20]

    @classmethod
    def create(cls, kind: str, body: Dict[str, Any], signer: Any, nonce: int = 0) -> SignedRequest:
        unsigned = cls(kind, dict(body), signer.party_id, nonce)
        return cls(kind, dict(body), signer.party_id, nonce, signer.sign(unsigned.message()))

    def to_value(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "body": self.body,
            "author": self.author,
            "nonce": self.nonce,
            "signature": self.signature,
        }

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> SignedRequest:
        try:
            return cls(
                value["kind"], value["body"], value["author"], value["nonce"], value["signature"]
            )
        except (KeyError, TypeError) as exc:
            raise EncodingError(f"malformed request: {exc}") from exc


# =========================================================================
# Transaction actions
# =========================================================================


@dataclass(frozen=True)
class TxnAction:
    """One proposed effect on one manager. ``manager`` is the target manager id."""

    manager: ManagerId
    type_name: ClassVar[str] = "Action"

    def to_value(self) -> Dict[str, Any]:
        value = {k: v for k, v in self.__dict__.items()}
        value["type"] = self.type_name
        return value


@dataclass(frozen=True)
class TransferAction(TxnAction):
    """Move ``amount`` of ``resource`` from ``source`` to ``target``; held at prepare."""

    source: PartyId = ""
    target: PartyId = ""
    resource: str = ""
    amount: int = 0
    ref: Optional[str] = None
    type_name: ClassVar[str] = "Transfer"


@dataclass(frozen=True)
class ReleaseAction(TxnAction):
    """
    Consume ``amount`` of an existing reservation: to ``beneficiary`` on commit,
    or back to its owner when ``beneficiary`` is None.
    """

    reservation_id: str = ""
    amount: int = 0
    beneficiary: Optional[PartyId] = None
    type_name: ClassVar[str] = "Release"


@dataclass(frozen=True)
class AssertHolders(TxnAction):
    """Votes Yes iff ``snapshot`` equals the current holdings of ``resource``."""

    resource: str = ""
    snapshot: Dict[str, int] = field(default_factory=dict)
    type_name: ClassVar[str] = "AssertHolders"


@dataclass(frozen=True)
class RegisterResource(TxnAction):
    resource: str = ""
    issuer: PartyId = ""
    decimals: int = 0
    type_name: ClassVar[str] = "RegisterResource"


@dataclass(frozen=True)
class IssueAction(TxnAction):
    resource: str = ""
    target: PartyId = ""
    amount: int = 0
    type_name: ClassVar[str] = "Issue"


@dataclass(frozen=True)
class ContractAction(TxnAction):
    """A lifecycle event for ``isin`` applied by its contract manager on commit."""

    isin: str = ""
    event: Dict[str, Any] = field(default_factory=dict)
    type_name: ClassVar[str] = "Contract"


_ACTION_TYPES: Dict[str, Type[TxnAction]] = {
    cls.type_name: cls
    for cls in (TransferAction, ReleaseAction, AssertHolders, RegisterResource, IssueAction,
                ContractAction)
}


def action_from_value(value: Dict[str, Any]) -> TxnAction:
    data = dict(value)
    cls = _ACTION_TYPES.get(data.pop("type", None))
    if cls is None:
        raise EncodingError(f"unknown action type in {value!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise EncodingError(f"malformed {cls.type_name} action: {exc}") from exc


# =========================================================================
# Two-phase commit
# =========================================================================


class TxnKind(Enum):
    PREPARE = "Prepare"
    VOTE_YES = "VoteYes"
    VOTE_NO = "VoteNo"
    COMMIT = "Commit"
    ABORT = "Abort"
    DECISION_QUERY = "DecisionQuery"


@dataclass(frozen=True)
class TxnMessage:
    """
    Two-phase commit message, signed by ``sender``'s node operator.

    ``body`` for Prepare holds ``actions`` (the whole transaction, as values),
    ``participants`` and ``request`` (the initiator's signed request, if any).
    """

    kind: TxnKind
    txn_id: str
    sender: PartyId
    body: Dict[str, Any] = field(default_factory=dict)
    signature: bytes = b""

    def message(self) -> bytes:
        return encode_fields(
            b"txn",
            self.kind.value.encode("utf-8"),
            self.txn_id.encode("utf-8"),
            self.sender.encode("utf-8"),
            pack(self.body),
        )

    @classmethod
    def create(
        cls, kind: TxnKind, txn_id: str, signer: Any, body: Optional[Dict[str, Any]] = None
    ) -> TxnMessage:
        unsigned = cls(kind, txn_id, signer.party_id, dict(body or {}))
        return cls(kind, txn_id, signer.party_id, unsigned.body, signer.sign(unsigned.message()))

    @property
    def actions(self) -> List[TxnAction]:
        return [action_from_value(v) for v in self.body.get("actions", [])]

    @property
    def participants(self) -> List[ManagerId]:
        return list(self.body.get("participants", []))

    def to_value(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "txn_id": self.txn_id,
            "sender": self.sender,
            "body": self.body,
            "signature": self.signature,
        }

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> TxnMessage:
        try:
            return cls(
                TxnKind(value["kind"]), value["txn_id"], value["sender"], value["body"],
                value["signature"],
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise EncodingError(f"malformed txn message: {exc}") from exc


@dataclass(frozen=True)
class Vote:
    """A participant's prepare vote. ``reason`` is an error code on No."""

    yes: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.yes

    def to_value(self) -> Dict[str, Any]:
        return {"yes": self.yes, "reason": self.reason}

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> Vote:
        return cls(bool(value["yes"]), value.get("reason", ""))


@dataclass(frozen=True)
class Reply:
    """Answer to a call: a value, or an error code and message."""

    value: Any = None
    error: Optional[str] = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.error is None

    def unwrap(self) -> Any:
        if self.error is not None:
            raise error_from_code(self.error, self.message)
        return self.value

    @classmethod
    def failure(cls, exc: EngineError) -> Reply:
        return cls(error=exc.code, message=str(exc))

    def to_value(self) -> Dict[str, Any]:
        # participants answer with a TxnMessage, carried under its own key
        if isinstance(self.value, TxnMessage):
            return {"txn": self.value.to_value(), "error": self.error, "message": self.message}
        return {"value": self.value, "error": self.error, "message": self.message}

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> Reply:
        if "txn" in value:
            payload: Any = TxnMessage.from_value(value["txn"])
        else:
            payload = value.get("value")
        return cls(payload, value.get("error"), value.get("message", ""))


# =========================================================================
# Wire codec
# =========================================================================


_WIRE_TYPES: Dict[str, Any] = {
    "request": SignedRequest,
    "txn": TxnMessage,
    "reply": Reply,
}


def encode_message(message: Any) -> bytes:
    """Canonical bytes for a request, txn message or reply."""
    for tag, cls in _WIRE_TYPES.items():
        if isinstance(message, cls):
            return pack({"tag": tag, "value": message.to_value()})
    raise EncodingError(f"cannot send {type(message).__name__}")


def decode_message(raw: bytes) -> Any:
    value = unpack(raw)
    if not isinstance(value, dict) or value.get("tag") not in _WIRE_TYPES:
        raise EncodingError("unknown message tag")
    return _WIRE_TYPES[value["tag"]].from_value(value["value"])


def split_actions(
    actions: List[TxnAction],
) -> Tuple[List[ManagerId], Dict[ManagerId, List[TxnAction]]]:
    """Participants in first-appearance order, and each participant's actions in list order."""
    order: List[ManagerId] = []
    per: Dict[ManagerId, List[TxnAction]] = {}
    for action in actions:
        if action.manager not in per:
            order.append(action.manager)
            per[action.manager] = []
        per[action.manager].append(action)
    return order, per
