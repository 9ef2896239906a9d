"""
Contract calculus: instrument specifications and their residuation.

A specification is a small immutable tree:

- atoms ``Done``, ``Fail``, ``Payment``, ``Observation``, ``Notice``
- combinators ``Seq(first, then)``, ``Both(left, right)``, ``Choice(left, right)``

A lifecycle event that matches the specification rewrites it into the
*residual*: what remains to be done. Observations bind variables that later
payment amounts refer to. Every atom carries a deadline in logical time; a
``TimeAdvanced`` event past it turns the atom into ``Fail``.

Residuation is a pure function of (spec, bindings, event), so contract state
is always a replay of the contract ledger.

Examples:
    >>> spec = make_green_bond(1_000_000, "EUR", 1, 1, [10])
    >>> spec = bind_parties(spec, {"issuer": "I", "verifier": "V", "calculator": "C"})
    >>> result = residuate(spec, ObservationMade("V", "co2_tons_1", 5), {})
    >>> result.bindings
    {'co2_tons_1': 5}
"""

from __future__ import annotations
import operator
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

from .core import EncodingError, InvalidParams, MalformedSpec, PartyId


__all__ = [
    'Expr',
    'Lit',
    'Var',
    'BinOp',
    'Pred',
    'PartyTarget',
    'ProRata',
    'Spec',
    'Done',
    'Fail',
    'Payment',
    'Observation',
    'Notice',
    'Seq',
    'Both',
    'Choice',
    'DONE',
    'FAIL',
    'Transfer',
    'LifecycleEvent',
    'ObservationMade',
    'PaymentSettled',
    'TimeAdvanced',
    'IssuerNotice',
    'Match',
    'evaluate',
    'normalize',
    'residuate',
    'expire',
    'active_atoms',
    'check_spec',
    'resolve_payment',
    'distribute',
    'bind_parties',
    'make_green_bond',
    'payment_amount',
    'event_from_value',
    'YIELD_SCALE',
]

YIELD_SCALE = 10_000

Bindings = Dict[str, Any]


class _EvalError(Exception):
    """An expression cannot be evaluated under the current bindings."""


# =========================================================================
# Expressions and predicates
# =========================================================================


@dataclass(frozen=True)
class Lit:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    """Integer arithmetic; ``/`` is floor division."""

    op: str
    left: Expr
    right: Expr


Expr = Union[Lit, Var, BinOp]

_ARITHMETIC: Dict[str, Callable[[int, int], int]] = {
    "+": operator.add,
    "-": operator.sub,
    "*": operator.mul,
    "/": operator.floordiv,
}

_COMPARISONS: Dict[str, Callable[[int, int], bool]] = {
    "==": operator.eq,
    "!=": operator.ne,
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
}


def evaluate(expr: Expr, bindings: Mapping[str, Any]) -> int:
    """
    Evaluate an amount expression.

    Raises:
        _EvalError: on an unbound or non-integer variable, or division by zero.
    """
    if isinstance(expr, Lit):
        return expr.value
    if isinstance(expr, Var):
        value = bindings.get(expr.name)
        if isinstance(value, bool) or not isinstance(value, int):
            raise _EvalError(f"{expr.name} is not bound to an integer")
        return value
    left = evaluate(expr.left, bindings)
    right = evaluate(expr.right, bindings)
    if expr.op == "/" and right == 0:
        raise _EvalError("division by zero")
    return _ARITHMETIC[expr.op](left, right)


def expr_vars(expr: Expr) -> FrozenSet[str]:
    if isinstance(expr, Var):
        return frozenset({expr.name})
    if isinstance(expr, BinOp):
        return expr_vars(expr.left) | expr_vars(expr.right)
    return frozenset()


@dataclass(frozen=True)
class Pred:
    """``observed <op> rhs``."""

    op: str
    rhs: Expr

    def holds(self, value: Any, bindings: Mapping[str, Any]) -> bool:
        if isinstance(value, bool) or not isinstance(value, int):
            return False
        try:
            return _COMPARISONS[self.op](value, evaluate(self.rhs, bindings))
        except _EvalError:
            return False


# =========================================================================
# Specifications
# =========================================================================


@dataclass(frozen=True)
class PartyTarget:
    party: PartyId


@dataclass(frozen=True)
class ProRata:
    """
    Distribute pro rata over a holder snapshot.

    ``basis`` names a snapshot bound by an earlier observation; ``None`` means
    the settling event carries its own (asserted) snapshot.
    """

    basis: Optional[str] = None


Target = Union[PartyTarget, ProRata]


@dataclass(frozen=True)
class Done:
    pass


@dataclass(frozen=True)
class Fail:
    pass


DONE = Done()
FAIL = Fail()


@dataclass(frozen=True)
class Payment:
    payer: PartyId
    target: Target
    resource: str
    amount: Expr
    deadline: int


@dataclass(frozen=True)
class Observation:
    """
    Data from ``agent`` under ``key`` whose value satisfies ``pred``.

    The value is bound to ``key``; when ``snapshot`` is set the event's holder
    snapshot is bound to that name too (a record date).
    """

    agent: PartyId
    key: str
    pred: Pred
    deadline: int
    snapshot: Optional[str] = None


@dataclass(frozen=True)
class Notice:
    """An issuer notice such as a prepayment call."""

    party: PartyId
    tag: str
    deadline: int


@dataclass(frozen=True)
class Seq:
    first: Spec
    then: Spec


@dataclass(frozen=True)
class Both:
    left: Spec
    right: Spec


@dataclass(frozen=True)
class Choice:
    left: Spec
    right: Spec


Spec = Union[Done, Fail, Payment, Observation, Notice, Seq, Both, Choice]
Atom = Union[Payment, Observation, Notice]


# =========================================================================
# Lifecycle events
# =========================================================================


@dataclass(frozen=True, order=True)
class Transfer:
    source: PartyId
    target: PartyId
    resource: str
    amount: int

    def to_value(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "target": self.target,
            "resource": self.resource,
            "amount": self.amount,
        }


@dataclass(frozen=True)
class ObservationMade:
    author: PartyId
    key: str
    value: int
    snapshot: Optional[Dict[PartyId, int]] = None
    kind = "ObservationMade"

    def to_value(self) -> Dict[str, Any]:
        return {
            "kind": self.kind, "author": self.author, "key": self.key, "value": self.value,
            "snapshot": self.snapshot,
        }


@dataclass(frozen=True)
class PaymentSettled:
    """Transfers committed in the same atomic transaction as this event."""

    author: PartyId
    transfers: Tuple[Transfer, ...] = ()
    snapshot: Optional[Dict[PartyId, int]] = None
    ref: str = ""
    kind = "PaymentSettled"

    def to_value(self) -> Dict[str, Any]:
        return {
            "kind": self.kind, "author": self.author,
            "transfers": [t.to_value() for t in self.transfers],
            "snapshot": self.snapshot, "ref": self.ref,
        }


@dataclass(frozen=True)
class TimeAdvanced:
    author: PartyId
    to: int
    kind = "TimeAdvanced"

    def to_value(self) -> Dict[str, Any]:
        return {"kind": self.kind, "author": self.author, "to": self.to}


@dataclass(frozen=True)
class IssuerNotice:
    author: PartyId
    tag: str
    kind = "IssuerNotice"

    def to_value(self) -> Dict[str, Any]:
        return {"kind": self.kind, "author": self.author, "tag": self.tag}


LifecycleEvent = Union[ObservationMade, PaymentSettled, TimeAdvanced, IssuerNotice]


def event_from_value(value: Dict[str, Any]) -> LifecycleEvent:
    """
    Raises:
        EncodingError: on an unknown kind or missing fields.
    """
    try:
        kind = value["kind"]
        if kind == ObservationMade.kind:
            return ObservationMade(value["author"], value["key"], value["value"],
                                   value.get("snapshot"))
        if kind == PaymentSettled.kind:
            transfers = tuple(
                Transfer(t["source"], t["target"], t["resource"], t["amount"])
                for t in value["transfers"]
            )
            return PaymentSettled(value["author"], transfers, value.get("snapshot"),
                                  value.get("ref", ""))
        if kind == TimeAdvanced.kind:
            return TimeAdvanced(value["author"], value["to"])
        if kind == IssuerNotice.kind:
            return IssuerNotice(value["author"], value["tag"])
    except (KeyError, TypeError) as exc:
        raise EncodingError(f"malformed lifecycle event: {exc}") from exc
    raise EncodingError(f"unknown lifecycle event kind {value.get('kind')!r}")


# =========================================================================
# Residuation
# =========================================================================


@dataclass
class Match:
    """Result of :func:`residuate`. Truthy iff the event matched."""

    matched: bool
    spec: Spec = DONE
    bindings: Bindings = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.matched


NO_MATCH = Match(False)


def payment_amount(payment: Payment, bindings: Mapping[str, Any]) -> Optional[int]:
    try:
        return evaluate(payment.amount, bindings)
    except _EvalError:
        return None


def normalize(spec: Spec, bindings: Mapping[str, Any]) -> Spec:
    """
    Simplify the active part of a residual.

    ``Seq(Done, b) -> b``, ``Seq(Fail, _) -> Fail``, ``Both`` drops a ``Done``
    branch and fails with a failed branch, ``Choice`` is ``Done`` with a
    ``Done`` branch and drops a failed one, and a head payment of 0 is ``Done``.
    """
    if isinstance(spec, Payment):
        return DONE if payment_amount(spec, bindings) == 0 else spec
    if isinstance(spec, Seq):
        first = normalize(spec.first, bindings)
        if isinstance(first, Done):
            return normalize(spec.then, bindings)
        if isinstance(first, Fail):
            return FAIL
        return Seq(first, spec.then)
    if isinstance(spec, Both):
        left, right = normalize(spec.left, bindings), normalize(spec.right, bindings)
        if isinstance(left, Fail) or isinstance(right, Fail):
            return FAIL
        if isinstance(left, Done):
            return right
        if isinstance(right, Done):
            return left
        return Both(left, right)
    if isinstance(spec, Choice):
        left, right = normalize(spec.left, bindings), normalize(spec.right, bindings)
        if isinstance(left, Done) or isinstance(right, Done):
            return DONE
        if isinstance(left, Fail):
            return right
        if isinstance(right, Fail):
            return left
        return Choice(left, right)
    return spec


def distribute(
    amount: int, snapshot: Mapping[PartyId, int], payer: PartyId
) -> Dict[PartyId, int]:
    """
    Split ``amount`` pro rata over ``snapshot`` holdings, excluding ``payer``.

    Shares are floored; the remainder goes one unit at a time to holders in
    descending-balance, then ascending party-id order. An empty basis
    distributes nothing.

    Examples:
        >>> distribute(25_000, {"A": 600_000, "B": 400_000}, "I")
        {'A': 15000, 'B': 10000}
    """
    basis = {p: b for p, b in snapshot.items() if p != payer and b > 0}
    total = sum(basis.values())
    if total == 0 or amount <= 0:
        return {}
    shares = {p: amount * b // total for p, b in basis.items()}
    remainder = amount - sum(shares.values())
    for party, _ in sorted(basis.items(), key=lambda item: (-item[1], item[0]))[:remainder]:
        shares[party] += 1
    return {p: s for p, s in sorted(shares.items()) if s > 0}


def resolve_payment(
    payment: Payment,
    bindings: Mapping[str, Any],
    snapshot: Optional[Mapping[PartyId, int]] = None,
) -> Optional[List[Transfer]]:
    """
    The transfers that settle ``payment`` under ``bindings``, sorted.

    ``snapshot`` is the event's own holder snapshot, used by ``ProRata(None)``.
    Returns ``None`` when the amount cannot be evaluated or is negative, or the
    pro-rata basis is missing.
    """
    amount = payment_amount(payment, bindings)
    if amount is None or amount < 0:
        return None
    target = payment.target
    if isinstance(target, PartyTarget):
        if amount == 0:
            return []
        return [Transfer(payment.payer, target.party, payment.resource, amount)]
    basis = bindings.get(target.basis) if target.basis else snapshot
    if not isinstance(basis, Mapping):
        return None
    shares = distribute(amount, basis, payment.payer)
    return sorted(Transfer(payment.payer, p, payment.resource, s) for p, s in shares.items())


def _match_atom(atom: Spec, event: LifecycleEvent, bindings: Bindings) -> Match:
    if isinstance(atom, Observation) and isinstance(event, ObservationMade):
        if event.author != atom.agent or event.key != atom.key:
            return NO_MATCH
        if not atom.pred.holds(event.value, bindings):
            return NO_MATCH
        new = dict(bindings)
        new[atom.key] = event.value
        if atom.snapshot is not None:
            if event.snapshot is None:
                return NO_MATCH
            new[atom.snapshot] = dict(event.snapshot)
        return Match(True, DONE, new)
    if isinstance(atom, Notice) and isinstance(event, IssuerNotice):
        if event.author == atom.party and event.tag == atom.tag:
            return Match(True, DONE, dict(bindings))
        return NO_MATCH
    if isinstance(atom, Payment) and isinstance(event, PaymentSettled):
        expected = resolve_payment(atom, bindings, event.snapshot)
        if expected is not None and expected == sorted(event.transfers):
            return Match(True, DONE, dict(bindings))
    return NO_MATCH


def _step(spec: Spec, event: LifecycleEvent, bindings: Bindings) -> Match:
    if isinstance(spec, Seq):
        head = _step(spec.first, event, bindings)
        if not head:
            return NO_MATCH
        return Match(True, Seq(head.spec, spec.then), head.bindings)
    if isinstance(spec, Both):
        left = _step(spec.left, event, bindings)
        if left:
            return Match(True, Both(left.spec, spec.right), left.bindings)
        right = _step(spec.right, event, bindings)
        if right:
            return Match(True, Both(spec.left, right.spec), right.bindings)
        return NO_MATCH
    if isinstance(spec, Choice):
        left = _step(spec.left, event, bindings)
        if left:
            return left
        return _step(spec.right, event, bindings)
    if isinstance(spec, (Done, Fail)):
        return NO_MATCH
    return _match_atom(spec, event, bindings)


def expire(spec: Spec, now: int) -> Spec:
    """Replace every active atom whose deadline is before ``now`` with ``Fail``."""
    if isinstance(spec, (Payment, Observation, Notice)):
        return FAIL if spec.deadline < now else spec
    if isinstance(spec, Seq):
        return Seq(expire(spec.first, now), spec.then)
    if isinstance(spec, Both):
        return Both(expire(spec.left, now), expire(spec.right, now))
    if isinstance(spec, Choice):
        return Choice(expire(spec.left, now), expire(spec.right, now))
    return spec


def residuate(spec: Spec, event: LifecycleEvent, bindings: Mapping[str, Any]) -> Match:
    """
    Rewrite ``spec`` by ``event``.

    ``Seq`` needs its head to match, ``Both`` tries the left branch first,
    ``Choice`` commits to the leftmost matching branch. ``TimeAdvanced``
    always matches and expires overdue atoms. The result is normalized.

    Returns:
        Match: the residual and new bindings, or a falsy Match (NoMatch).
    """
    current = dict(bindings)
    if isinstance(event, TimeAdvanced):
        return Match(True, normalize(expire(spec, event.to), current), current)
    result = _step(spec, event, current)
    if not result:
        return NO_MATCH
    return Match(True, normalize(result.spec, result.bindings), result.bindings)


def active_atoms(spec: Spec) -> List[Atom]:
    """Atoms that the next event could match, leftmost first."""
    if isinstance(spec, (Payment, Observation, Notice)):
        return [spec]
    if isinstance(spec, Seq):
        return active_atoms(spec.first)
    if isinstance(spec, (Both, Choice)):
        return active_atoms(spec.left) + active_atoms(spec.right)
    return []


# =========================================================================
# Well-formedness and party binding
# =========================================================================


def _deadlines(spec: Spec) -> List[int]:
    if isinstance(spec, (Payment, Observation, Notice)):
        return [spec.deadline]
    if isinstance(spec, Seq):
        return _deadlines(spec.first) + _deadlines(spec.then)
    if isinstance(spec, (Both, Choice)):
        return _deadlines(spec.left) + _deadlines(spec.right)
    return []


def _check(
    spec: Spec, bound: FrozenSet[str], snapshots: FrozenSet[str]
) -> Tuple[FrozenSet[str], FrozenSet[str]]:
    """Check ``spec`` under the names bound so far; return the names bound after it."""
    if isinstance(spec, (Done, Fail)):
        return bound, snapshots
    if isinstance(spec, (Payment, Observation, Notice)):
        if spec.deadline < 0:
            raise MalformedSpec(f"negative deadline {spec.deadline}")
    if isinstance(spec, Payment):
        if _is_symbolic(spec.payer):
            raise MalformedSpec(f"unbound party {spec.payer}")
        if isinstance(spec.target, PartyTarget) and _is_symbolic(spec.target.party):
            raise MalformedSpec(f"unbound party {spec.target.party}")
        if isinstance(spec.target, ProRata) and spec.target.basis is not None:
            if spec.target.basis not in snapshots:
                raise MalformedSpec(f"pro-rata basis {spec.target.basis} is not bound before use")
        _check_expr(spec.amount, bound)
        return bound, snapshots
    if isinstance(spec, Observation):
        if _is_symbolic(spec.agent):
            raise MalformedSpec(f"unbound party {spec.agent}")
        if spec.pred.op not in _COMPARISONS:
            raise MalformedSpec(f"unknown comparison {spec.pred.op}")
        _check_expr(spec.pred.rhs, bound)
        new_snapshots = snapshots | {spec.snapshot} if spec.snapshot else snapshots
        return bound | {spec.key}, new_snapshots
    if isinstance(spec, Notice):
        if _is_symbolic(spec.party):
            raise MalformedSpec(f"unbound party {spec.party}")
        return bound, snapshots
    if isinstance(spec, Seq):
        first, then = _deadlines(spec.first), _deadlines(spec.then)
        if first and then and max(first) >= min(then):
            raise MalformedSpec(
                f"deadlines must increase along a sequence ({max(first)} >= {min(then)})"
            )
        after_first = _check(spec.first, bound, snapshots)
        return _check(spec.then, *after_first)
    if isinstance(spec, Both):
        left = _check(spec.left, bound, snapshots)
        right = _check(spec.right, bound, snapshots)
        return left[0] | right[0], left[1] | right[1]
    if isinstance(spec, Choice):
        left = _check(spec.left, bound, snapshots)
        right = _check(spec.right, bound, snapshots)
        return left[0] & right[0], left[1] & right[1]
    raise MalformedSpec(f"not a contract specification: {spec!r}")


def _check_expr(expr: Expr, bound: FrozenSet[str]) -> None:
    if isinstance(expr, BinOp):
        if expr.op not in _ARITHMETIC:
            raise MalformedSpec(f"unknown operator {expr.op}")
        _check_expr(expr.left, bound)
        _check_expr(expr.right, bound)
    elif isinstance(expr, Var):
        if expr.name not in bound:
            raise MalformedSpec(f"variable {expr.name} is used before it is observed")
    elif not isinstance(expr, Lit) or isinstance(expr.value, bool):
        raise MalformedSpec(f"not an expression: {expr!r}")


def check_spec(spec: Spec) -> None:
    """
    Raise :class:`MalformedSpec` unless ``spec`` is well formed.

    Variables must be bound by an observation on every path before use (a
    ``Both`` branch sees only names bound before the ``Both``; after a
    ``Choice`` only names bound by both branches carry on), deadlines must
    strictly increase along every ``Seq`` and every party must be bound.
    """
    _check(spec, frozenset(), frozenset())


def _is_symbolic(party: str) -> bool:
    return party.startswith("@")


def bind_parties(spec: Spec, parties: Mapping[str, PartyId]) -> Spec:
    """
    Replace symbolic party references (``@issuer``, ``@verifier``, ...) by ids.

    ``parties`` maps the name without ``@`` to a party id; unknown symbols are
    left in place (and rejected by :func:`check_spec`).
    """

    def party(ref: str) -> str:
        if _is_symbolic(ref):
            return parties.get(ref[1:], ref)
        return ref

    if isinstance(spec, Payment):
        target = spec.target
        if isinstance(target, PartyTarget):
            target = PartyTarget(party(target.party))
        return replace(spec, payer=party(spec.payer), target=target)
    if isinstance(spec, Observation):
        return replace(spec, agent=party(spec.agent))
    if isinstance(spec, Notice):
        return replace(spec, party=party(spec.party))
    if isinstance(spec, Seq):
        return Seq(bind_parties(spec.first, parties), bind_parties(spec.then, parties))
    if isinstance(spec, Both):
        return Both(bind_parties(spec.left, parties), bind_parties(spec.right, parties))
    if isinstance(spec, Choice):
        return Choice(bind_parties(spec.left, parties), bind_parties(spec.right, parties))
    return spec


# =========================================================================
# Green bond template
# =========================================================================


def _seq(*parts: Spec) -> Spec:
    spec = parts[-1]
    for part in reversed(parts[:-1]):
        spec = Seq(part, spec)
    return spec


def make_green_bond(
    principal: int,
    currency: str,
    n_coupons: int,
    co2_threshold: int,
    maturity_schedule: Sequence[int],
    callable: bool = False,
    issuer: str = "@issuer",
    verifier: str = "@verifier",
    calculator: str = "@calculator",
) -> Spec:
    """
    Bond whose coupons depend on verified CO2 capture and a calculated yield.

    Period ``i`` with coupon date ``d``:

    1. the verification agent observes ``co2_tons_i >= co2_threshold`` by ``d-2``
    2. the calculation agent observes ``yield_i >= 0`` (basis points) by ``d-1``,
       recording the holder snapshot ``holders_i``
    3. the issuer pays ``yield_i * principal / 10000`` pro rata over
       ``holders_i`` by ``d``

    The principal is redeemed pro rata by ``d_n + 1``. With ``callable`` each
    remaining schedule may instead be cut short by an issuer ``prepay`` notice
    by ``d_i - 2`` followed by redemption by ``d_i``.

    Args:
        principal: Face amount in currency minor units, > 0.
        currency: Currency resource id.
        n_coupons: Number of coupon periods, >= 1.
        co2_threshold: Minimum verified tons of CO2 per period.
        maturity_schedule: Coupon dates, ``d_1 >= 2`` and at least 3 apart.

    Raises:
        InvalidParams: on out-of-range parameters.
    """
    schedule = list(maturity_schedule)
    if n_coupons < 1 or principal <= 0:
        raise InvalidParams("a green bond needs n_coupons >= 1 and principal > 0")
    if len(schedule) != n_coupons:
        raise InvalidParams(f"{n_coupons} coupons need {n_coupons} dates, got {len(schedule)}")
    if schedule[0] < 2 or any(b - a < 3 for a, b in zip(schedule, schedule[1:])):
        raise InvalidParams("coupon dates must start at 2 or later and be at least 3 apart")
    if co2_threshold < 0:
        raise InvalidParams("co2_threshold must be non-negative")

    def period(i: int, date: int) -> Spec:
        coupon = BinOp("/", BinOp("*", Var(f"yield_{i}"), Lit(principal)), Lit(YIELD_SCALE))
        return _seq(
            Observation(verifier, f"co2_tons_{i}", Pred(">=", Lit(co2_threshold)), date - 2),
            Observation(calculator, f"yield_{i}", Pred(">=", Lit(0)), date - 1,
                        snapshot=f"holders_{i}"),
            Payment(issuer, ProRata(f"holders_{i}"), currency, coupon, date),
        )

    def redemption(deadline: int) -> Spec:
        return Payment(issuer, ProRata(None), currency, Lit(principal), deadline)

    spec = redemption(schedule[-1] + 1)
    for i in range(n_coupons, 0, -1):
        date = schedule[i - 1]
        if callable:
            prepay = Seq(Notice(issuer, "prepay", date - 2), redemption(date))
            spec = Choice(Seq(period(i, date), spec), prepay)
        else:
            spec = Seq(period(i, date), spec)
    return spec
