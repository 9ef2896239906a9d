"""
Core types shared by every state manager.

This module provides the enums, the static role-to-action table and the
exception hierarchy. Nothing in here touches a ledger or a network.
"""

from __future__ import annotations
from enum import Enum
from typing import Dict, FrozenSet, Iterable


PartyId = str
ManagerId = str


class Role(Enum):
    """Roles a registered party may hold."""

    INVESTOR = "Investor"
    ISSUER = "Issuer"
    VERIFICATION_AGENT = "VerificationAgent"
    CALCULATION_AGENT = "CalculationAgent"
    MARKET_OPERATOR = "MarketOperator"
    SUPERVISOR = "Supervisor"


class Action(Enum):
    """Action kinds checked by the identity manager before anything is logged."""

    REGISTER_PARTY = "RegisterParty"
    ROTATE_KEY = "RotateKey"
    APPEND_LEDGER = "AppendLedger"
    ACT_AS_AGENT = "ActAsAgent"
    COORDINATE = "Coordinate"
    ADVANCE_TIME = "AdvanceTime"
    ISSUE_INSTRUMENT = "IssueInstrument"
    ISSUE_UNITS = "IssueUnits"
    TRANSFER = "Transfer"
    RESERVE = "Reserve"
    SUBMIT_OBSERVATION = "SubmitObservation"
    ISSUER_NOTICE = "IssuerNotice"
    INSTRUCT_PAYMENT = "InstructPayment"
    SUBMIT_ORDER = "SubmitOrder"
    CANCEL_ORDER = "CancelOrder"
    MONITOR_QUERY = "MonitorQuery"


class KycStatus(Enum):
    PENDING = "Pending"
    VERIFIED = "Verified"
    REVOKED = "Revoked"


def _actions(*items: Action) -> FrozenSet[Action]:
    return frozenset(items + (Action.ROTATE_KEY,))


# Static role -> permitted actions. Documented in README ("Roles and actions").
ROLE_ACTIONS: Dict[Role, FrozenSet[Action]] = {
    Role.INVESTOR: _actions(
        Action.TRANSFER,
        Action.RESERVE,
        Action.SUBMIT_ORDER,
        Action.CANCEL_ORDER,
    ),
    Role.ISSUER: _actions(
        Action.ISSUE_INSTRUMENT,
        Action.ISSUE_UNITS,
        Action.TRANSFER,
        Action.RESERVE,
        Action.INSTRUCT_PAYMENT,
        Action.ISSUER_NOTICE,
        Action.SUBMIT_ORDER,
        Action.CANCEL_ORDER,
    ),
    Role.VERIFICATION_AGENT: _actions(Action.SUBMIT_OBSERVATION),
    Role.CALCULATION_AGENT: _actions(Action.SUBMIT_OBSERVATION),
    Role.MARKET_OPERATOR: _actions(
        Action.REGISTER_PARTY,
        Action.APPEND_LEDGER,
        Action.ACT_AS_AGENT,
        Action.COORDINATE,
        Action.ADVANCE_TIME,
    ),
    Role.SUPERVISOR: _actions(Action.MONITOR_QUERY),
}


def permitted(roles: Iterable[Role], action: Action) -> bool:
    """True if any of ``roles`` permits ``action``."""
    return any(action in ROLE_ACTIONS[role] for role in roles)


# =========================================================================
# Errors
# =========================================================================


class EngineError(Exception):
    """Base class for every rejection raised by the engine."""

    code = "EngineError"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def __repr__(self) -> str:
        return f"{type(self).__name__}({str(self)!r})"


class BadSignature(EngineError):
    """Raised when a signature does not verify against the author's active key."""

    code = "BadSignature"


class Unauthorized(EngineError):
    code = "Unauthorized"


class EncodingError(EngineError):
    """Raised when bytes are not a canonical encoding."""

    code = "EncodingError"


class CorruptLedger(EngineError):
    code = "CorruptLedger"

    def __init__(self, message: str = "", seq: int = -1):
        super().__init__(message or f"ledger corrupt at seq {seq}", seq=seq)
        self.seq = seq


class SeqOutOfRange(EngineError):
    code = "SeqOutOfRange"


class MalformedKey(EngineError):
    code = "MalformedKey"


class UnknownParty(EngineError):
    code = "UnknownParty"


class InactiveOldKey(EngineError):
    code = "InactiveOldKey"


class InsufficientBalance(EngineError):
    code = "InsufficientBalance"


class UnknownAccount(EngineError):
    code = "UnknownAccount"


class UnknownReservation(EngineError):
    code = "UnknownReservation"


class UnknownResource(EngineError):
    code = "UnknownResource"


class AlreadyTerminal(EngineError):
    """Raised on a conflicting decision for a terminal reservation or order."""

    code = "AlreadyTerminal"


class MalformedSpec(EngineError):
    code = "MalformedSpec"


class NoMatch(EngineError):
    code = "NoMatch"


class DeadlineExpired(EngineError):
    code = "DeadlineExpired"


class UnknownInstrument(EngineError):
    code = "UnknownInstrument"


class InstrumentSuspended(EngineError):
    code = "InstrumentSuspended"


class InvalidParams(EngineError):
    code = "InvalidParams"


class UnknownTxn(EngineError):
    """Raised on Commit/Abort without a prior Prepare (protocol violation)."""

    code = "UnknownTxn"


class NotOwner(EngineError):
    code = "NotOwner"


class StaleStateVersion(EngineError):
    code = "StaleStateVersion"


class MalformedQuery(EngineError):
    code = "MalformedQuery"


class ConfigError(EngineError):
    code = "ConfigError"


class AssertionFailed(EngineError):
    code = "AssertionFailed"


ERRORS_BY_CODE: Dict[str, type] = {
    cls.code: cls
    for cls in (
        EngineError, BadSignature, Unauthorized, EncodingError, CorruptLedger, SeqOutOfRange,
        MalformedKey, UnknownParty, InactiveOldKey, InsufficientBalance, UnknownAccount,
        UnknownReservation, UnknownResource, AlreadyTerminal, MalformedSpec, NoMatch,
        DeadlineExpired, UnknownInstrument, InstrumentSuspended, InvalidParams, UnknownTxn,
        NotOwner, StaleStateVersion, MalformedQuery, ConfigError, AssertionFailed,
    )
}


def error_from_code(code: str, message: str = "") -> EngineError:
    """Rebuild an exception from its wire code (used by transports)."""
    cls = ERRORS_BY_CODE.get(code, EngineError)
    if cls is CorruptLedger:
        return CorruptLedger(message)
    return cls(message)
