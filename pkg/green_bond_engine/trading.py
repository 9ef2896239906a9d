"""
Trade manager: order intake, price-time-priority matching and DvP settlement.

Orders are funded before they rest: a buy order reserves ``qty * limit_price``
of the manager's currency, a sell order reserves ``qty`` units of the
instrument. Each order is pinned to the instrument's ``state_version`` at
entry; when the contract manager reports a new version, orders pinned to an
older one are expired and their reservations returned, so an offer made
before a coupon never matches one made after it.

A match executes at the resting order's price. Settlement is one atomic
transaction of ``Release`` actions on the two reservations (cash to the
seller, units to the buyer, any price improvement back to the buyer). The
trade ledger records ``TradeSettling`` before the transaction starts, so a
restarted trade manager can find and resolve settlements in flight.

The trade ledger is the feed: :func:`book_from_feed` folds it back into the
books.
"""

from __future__ import annotations
import bisect
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, Iterable, Iterator, List, Optional, Tuple

from .codec import pack
from .core import (
    Action, AlreadyTerminal, EngineError, InstrumentSuspended, InvalidParams, ManagerId,
    NotOwner, PartyId, SeqOutOfRange, StaleStateVersion, UnknownInstrument, error_from_code,
)
from .crypto import Signer
from .ledger import EventEnvelope, Ledger, LedgerStore, Reducer, Subscription, replay
from .messages import Reply, ReleaseAction, SignedRequest, TxnKind, TxnMessage
from .runtime import Call, Directory, Gather, Process, Sleep
from .txn import NOT_PREPARED, TxnOutcome, TxnStatus


__all__ = [
    'Side',
    'OrderStatus',
    'TradeStatus',
    'Order',
    'OrderDraft',
    'Trade',
    'OrderBook',
    'TradeState',
    'TradeManager',
    'TRADE_REDUCER',
    'book_from_feed',
]

logger = logging.getLogger(__name__)

ORDER_ACCEPTED = "OrderAccepted"
ORDER_REJECTED = "OrderRejected"
ORDER_CANCELLED = "OrderCancelled"
ORDER_EXPIRED = "OrderExpired"
TRADE_SETTLING = "TradeSettling"
TRADE_SETTLED = "TradeSettled"
TRADE_FAILED = "TradeFailed"

FEED_KINDS = frozenset({
    ORDER_ACCEPTED, ORDER_REJECTED, ORDER_CANCELLED, ORDER_EXPIRED,
    TRADE_SETTLING, TRADE_SETTLED, TRADE_FAILED,
})

SUSPENDED_STATUSES = ("Default", "Terminated")


class Side(Enum):
    BUY = "Buy"
    SELL = "Sell"


class OrderStatus(Enum):
    OPEN = "Open"
    PARTIALLY_FILLED = "PartiallyFilled"
    FILLED = "Filled"
    CANCELLED = "Cancelled"
    EXPIRED = "Expired"
    REJECTED = "Rejected"

    @property
    def resting(self) -> bool:
        return self in (OrderStatus.OPEN, OrderStatus.PARTIALLY_FILLED)


class TradeStatus(Enum):
    SETTLING = "Settling"
    SETTLED = "Settled"
    FAILED = "Failed"


# =========================================================================
# Orders and trades
# =========================================================================


@dataclass
class Order:
    order_id: str
    side: Side
    isin: str
    qty: int
    limit_price: int
    party: PartyId
    pinned_state_version: int
    reservation_id: Optional[str] = None
    entry_seq: int = -1
    remaining: int = 0
    reserved: int = 0
    status: OrderStatus = OrderStatus.OPEN
    reason: str = ""

    @property
    def exposure(self) -> int:
        """What the reservation must still cover."""
        return self.remaining * self.limit_price if self.side is Side.BUY else self.remaining

    def to_value(self) -> Dict[str, Any]:
        return {
            "order_id": self.order_id,
            "side": self.side.value,
            "isin": self.isin,
            "qty": self.qty,
            "limit_price": self.limit_price,
            "party": self.party,
            "pinned_state_version": self.pinned_state_version,
            "reservation_id": self.reservation_id,
            "entry_seq": self.entry_seq,
            "remaining": self.remaining,
            "reserved": self.reserved,
            "status": self.status.value,
            "reason": self.reason,
        }

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> Order:
        return cls(
            value["order_id"], Side(value["side"]), value["isin"], value["qty"],
            value["limit_price"], value["party"], value["pinned_state_version"],
            value["reservation_id"], value["entry_seq"], value["remaining"], value["reserved"],
            OrderStatus(value["status"]), value.get("reason", ""),
        )


@dataclass(frozen=True)
class OrderDraft:
    """
    Client-side order; :meth:`sign` produces the ``SubmitOrder`` request.

    ``state_version`` pins the order to the instrument version the client
    saw; ``None`` pins it to the current version at entry.
    """

    side: Side
    isin: str
    qty: int
    limit_price: int
    party: PartyId
    state_version: Optional[int] = None

    def to_value(self) -> Dict[str, Any]:
        return {
            "side": self.side.value,
            "isin": self.isin,
            "qty": self.qty,
            "limit_price": self.limit_price,
            "party": self.party,
            "state_version": self.state_version,
        }

    def sign(self, signer: Signer, nonce: int = 0) -> SignedRequest:
        return SignedRequest.create("SubmitOrder", self.to_value(), signer, nonce)


@dataclass
class Trade:
    trade_id: str
    isin: str
    buy_order_id: str
    sell_order_id: str
    buyer: PartyId
    seller: PartyId
    qty: int
    price: int
    settlement_txn_id: str
    state_version: int = 0
    refund: int = 0
    status: TradeStatus = TradeStatus.SETTLING
    reason: str = ""

    @property
    def amount(self) -> int:
        return self.qty * self.price

    def to_value(self) -> Dict[str, Any]:
        return {
            "trade_id": self.trade_id,
            "isin": self.isin,
            "buy_order_id": self.buy_order_id,
            "sell_order_id": self.sell_order_id,
            "buyer": self.buyer,
            "seller": self.seller,
            "qty": self.qty,
            "price": self.price,
            "settlement_txn_id": self.settlement_txn_id,
            "state_version": self.state_version,
            "refund": self.refund,
            "status": self.status.value,
            "reason": self.reason,
        }

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> Trade:
        return cls(
            value["trade_id"], value["isin"], value["buy_order_id"], value["sell_order_id"],
            value["buyer"], value["seller"], value["qty"], value["price"],
            value["settlement_txn_id"], value["state_version"], value["refund"],
            TradeStatus(value["status"]), value.get("reason", ""),
        )


# =========================================================================
# Order book
# =========================================================================


class _BookSide:
    """Price levels kept sorted with bisect; each level is a FIFO of order ids."""

    def __init__(self, descending: bool):
        self.descending = descending
        self.prices: List[int] = []
        self.levels: Dict[int, Deque[str]] = {}

    def add(self, price: int, order_id: str) -> None:
        if price not in self.levels:
            bisect.insort(self.prices, price)
            self.levels[price] = deque()
        self.levels[price].append(order_id)

    def remove(self, price: int, order_id: str) -> None:
        level = self.levels.get(price)
        if level is None or order_id not in level:
            return
        level.remove(order_id)
        if not level:
            del self.levels[price]
            del self.prices[bisect.bisect_left(self.prices, price)]

    def best_price(self) -> Optional[int]:
        if not self.prices:
            return None
        return self.prices[-1] if self.descending else self.prices[0]

    def __iter__(self) -> Iterator[str]:
        prices = reversed(self.prices) if self.descending else iter(self.prices)
        for price in prices:
            yield from self.levels[price]

    def __len__(self) -> int:
        return sum(len(level) for level in self.levels.values())


class OrderBook:
    """
    Resting orders of one ISIN.

    Bids rank by (price desc, entry_seq asc), asks by (price asc, entry_seq asc).

    Examples:
        >>> book = OrderBook("XS0000000001")
        >>> book.add(Order("o1", Side.SELL, "XS0000000001", 10, 95, "A", 0, remaining=10))
        >>> book.best_ask().order_id
        'o1'
    """

    def __init__(self, isin: str):
        self.isin = isin
        self.bids = _BookSide(descending=True)
        self.asks = _BookSide(descending=False)
        self.orders: Dict[str, Order] = {}

    def _side(self, order: Order) -> _BookSide:
        return self.bids if order.side is Side.BUY else self.asks

    def add(self, order: Order) -> None:
        self.orders[order.order_id] = order
        self._side(order).add(order.limit_price, order.order_id)

    def remove(self, order_id: str) -> Optional[Order]:
        order = self.orders.pop(order_id, None)
        if order is not None:
            self._side(order).remove(order.limit_price, order.order_id)
        return order

    def _best(self, side: _BookSide) -> Optional[Order]:
        price = side.best_price()
        if price is None:
            return None
        return self.orders[side.levels[price][0]]

    def best_bid(self) -> Optional[Order]:
        return self._best(self.bids)

    def best_ask(self) -> Optional[Order]:
        return self._best(self.asks)

    def crossed(self) -> bool:
        bid, ask = self.bids.best_price(), self.asks.best_price()
        return bid is not None and ask is not None and bid >= ask

    def resting(self) -> List[Order]:
        """All resting orders, bids then asks, each in priority order."""
        return [self.orders[i] for i in self.bids] + [self.orders[i] for i in self.asks]

    def snapshot(self) -> Dict[str, List[Tuple[int, int, str]]]:
        return {
            "bids": [(self.orders[i].limit_price, self.orders[i].remaining, i) for i in self.bids],
            "asks": [(self.orders[i].limit_price, self.orders[i].remaining, i) for i in self.asks],
        }

    def __len__(self) -> int:
        return len(self.orders)


# =========================================================================
# State and reducer
# =========================================================================


@dataclass
class TradeState:
    orders: Dict[str, Order] = field(default_factory=dict)
    trades: Dict[str, Trade] = field(default_factory=dict)
    books: Dict[str, OrderBook] = field(default_factory=dict)
    next_order: int = 0
    next_trade: int = 0
    length: int = 0

    def book(self, isin: str) -> OrderBook:
        if isin not in self.books:
            self.books[isin] = OrderBook(isin)
        return self.books[isin]

    def settling(self, isin: Optional[str] = None) -> List[Trade]:
        return [t for t in self.trades.values()
                if t.status is TradeStatus.SETTLING and (isin is None or t.isin == isin)]

    def encode(self) -> bytes:
        """Canonical encoding, used to compare live and replayed state."""
        return pack({
            "orders": {k: v.to_value() for k, v in self.orders.items()},
            "trades": {k: v.to_value() for k, v in self.trades.items()},
            "books": {k: [o.order_id for o in v.resting()] for k, v in self.books.items()},
            "next_order": self.next_order,
            "next_trade": self.next_trade,
            "length": self.length,
        })


def _close(state: TradeState, order: Order, status: OrderStatus, reason: str = "") -> None:
    order.status = status
    order.reason = reason
    state.book(order.isin).remove(order.order_id)


def _fill(state: TradeState, order: Order, trade: Trade) -> None:
    order.remaining -= trade.qty
    if order.side is Side.BUY:
        order.reserved -= trade.amount + trade.refund
    else:
        order.reserved -= trade.qty
    if order.remaining == 0:
        _close(state, order, OrderStatus.FILLED)
    else:
        order.status = OrderStatus.PARTIALLY_FILLED


def apply_trade_event(state: TradeState, envelope: EventEnvelope) -> TradeState:
    """Reducer step for trade ledgers."""
    state.length = envelope.seq + 1
    kind = envelope.payload_kind
    body = envelope.body()
    if kind in (ORDER_ACCEPTED, ORDER_REJECTED):
        order = Order.from_value(body["order"])
        order.entry_seq = envelope.seq
        state.orders[order.order_id] = order
        if kind == ORDER_ACCEPTED:
            state.book(order.isin).add(order)
        state.next_order += 1
    elif kind in (ORDER_CANCELLED, ORDER_EXPIRED):
        order = state.orders[body["order_id"]]
        status = OrderStatus.CANCELLED if kind == ORDER_CANCELLED else OrderStatus.EXPIRED
        _close(state, order, status, body.get("reason", ""))
        order.reserved = 0
    elif kind == TRADE_SETTLING:
        trade = Trade.from_value(body["trade"])
        state.trades[trade.trade_id] = trade
        state.next_trade += 1
    elif kind == TRADE_SETTLED:
        trade = state.trades[body["trade_id"]]
        trade.status = TradeStatus.SETTLED
        _fill(state, state.orders[trade.buy_order_id], trade)
        _fill(state, state.orders[trade.sell_order_id], trade)
    elif kind == TRADE_FAILED:
        trade = state.trades[body["trade_id"]]
        trade.status = TradeStatus.FAILED
        trade.reason = body.get("reason", "")
        for order_id in (trade.buy_order_id, trade.sell_order_id):
            order = state.orders[order_id]
            if order.status.resting:
                _close(state, order, OrderStatus.REJECTED, "settlement failed")
    return state


TRADE_REDUCER: Reducer[TradeState] = Reducer(TradeState, apply_trade_event)


def book_from_feed(entries: Iterable[EventEnvelope], isin: Optional[str] = None) -> Any:
    """
    Fold a trade feed back into order books.

    Returns:
        The :class:`OrderBook` of ``isin``, or all books when ``isin`` is None.
    """
    state = TRADE_REDUCER.fold(entries)
    return state.book(isin) if isin is not None else state.books


# =========================================================================
# Manager
# =========================================================================


def _reply_error(reply: Optional[Reply], what: str) -> EngineError:
    if reply is None:
        return EngineError(f"{what}: no reply")
    return error_from_code(reply.error or "EngineError", reply.message or what)


class TradeManager:
    """
    State manager for the order books of a shard of ISINs.

    Every operation that talks to other managers is a process (a generator of
    runtime effects); run it on a driver. The driver delivers one message at a
    time to this node, which keeps each book single-writer while a settlement
    is in flight.

    Args:
        manager_id: Ledger / node id.
        identity: Identity manager.
        operator: Node operator; signs ledger entries and acts as agent towards
            the resource managers and the coordinator.
        directory: Routing table for resource managers, contract managers
            and coordinators.
        currency: Currency resource every order of this shard is priced in.
        reject_stale: Reject orders whose pinned version is not current instead
            of accepting and then expiring them.
        t_settle: Timeout for the settlement transaction (simulated seconds).
        t_resolve: Timeout for decision queries when a settlement is in doubt.
        credit_limits: Party -> maximum cash reserved by its resting buy orders.

    Examples:
        >>> tm = TradeManager("trading", identity, operator, directory)
        >>> order = driver.run(tm.submit_order(OrderDraft(Side.BUY, isin, 10, 100, "A").sign(a)))
        >>> order.status
        <OrderStatus.OPEN: 'Open'>
    """

    def __init__(
        self,
        manager_id: ManagerId,
        identity: Any,
        operator: Signer,
        directory: Directory,
        store: Optional[LedgerStore] = None,
        currency: str = "EUR",
        reject_stale: bool = False,
        t_settle: Optional[float] = 30.0,
        t_resolve: float = 10.0,
        credit_limits: Optional[Dict[PartyId, int]] = None,
        **ledger_options,
    ):
        self.manager_id = manager_id
        self.identity = identity
        self.operator = operator
        self.directory = directory
        self.currency = currency
        self.reject_stale = reject_stale
        self.t_settle = t_settle
        self.t_resolve = t_resolve
        self.credit_limits = dict(credit_limits or {})
        self.state = TradeState()
        self.ledger = Ledger(manager_id, authority=identity, store=store, **ledger_options)
        self.versions: Dict[str, Tuple[int, str]] = {}
        # returns still owed, as (manager, reservation selector) pairs
        self.unreturned: List[Tuple[ManagerId, Dict[str, str]]] = []

    _OPTIONS = ("currency", "reject_stale", "t_settle", "t_resolve", "credit_limits")

    @classmethod
    def open(
        cls,
        manager_id: ManagerId,
        identity: Any,
        operator: Signer,
        directory: Directory,
        store: LedgerStore,
        **options,
    ) -> TradeManager:
        """Recover from durable storage. Settlements in flight stay Settling until resolved."""
        ledger_options = {k: v for k, v in options.items() if k not in cls._OPTIONS}
        manager = cls(manager_id, identity, operator, directory, **options)
        manager.ledger = Ledger.open(manager_id, store, authority=identity, **ledger_options)
        manager.state = replay(manager.ledger, TRADE_REDUCER, identity.key_at)
        pending = manager.state.settling()
        if pending:
            logger.warning("%s recovered with %d settlements in flight", manager_id, len(pending))
        return manager

    def reducer(self) -> Reducer[TradeState]:
        return TRADE_REDUCER

    def _append(self, kind: str, body: Dict[str, Any]) -> EventEnvelope:
        envelope = self.ledger.append_signed(kind, body, self.operator)
        apply_trade_event(self.state, envelope)
        return envelope

    # =========================================================================
    # Queries
    # =========================================================================

    def order(self, order_id: str) -> Order:
        try:
            return self.state.orders[order_id]
        except KeyError:
            raise InvalidParams(f"unknown order {order_id}") from None

    def book(self, isin: str) -> OrderBook:
        return self.state.book(isin)

    def trades(self, isin: Optional[str] = None) -> List[Trade]:
        return [t for t in self.state.trades.values() if isin is None or t.isin == isin]

    def open_exposure(self, party: PartyId) -> int:
        """Cash still reserved by the resting buy orders of ``party``."""
        return sum(o.reserved for o in self.state.orders.values()
                   if o.party == party and o.side is Side.BUY and o.status.resting)

    def trade_feed(self, from_seq: int = 0) -> List[EventEnvelope]:
        """
        The trade ledger from ``from_seq`` on: accepted and rejected orders,
        cancellations, expiries and trades, in ledger order.

        Raises:
            SeqOutOfRange
        """
        if not 0 <= from_seq <= len(self.ledger):
            raise SeqOutOfRange(f"feed has {len(self.ledger)} entries, asked from {from_seq}")
        return list(self.ledger.entries[from_seq:])

    def subscribe_feed(
        self, from_seq: int, callback: Optional[Callable[[EventEnvelope], None]] = None
    ) -> Subscription:
        """Exactly-once delivery of the feed from ``from_seq``, then live entries."""
        return self.ledger.subscribe(from_seq, callback)

    # =========================================================================
    # Helpers talking to other managers
    # =========================================================================

    def _request(self, kind: str, body: Dict[str, Any]) -> SignedRequest:
        return SignedRequest.create(kind, body, self.operator)

    def _instrument(self, isin: str) -> Process:
        """(state_version, status) of ``isin``, from cache or its contract manager."""
        if isin in self.versions:
            return self.versions[isin]
        try:
            manager = self.directory.contract_manager(isin)
        except EngineError:
            raise UnknownInstrument(isin) from None
        reply = yield Call(manager, self._request("QueryState", {"isin": isin}))
        if reply is None or not reply.ok:
            raise _reply_error(reply, f"state of {isin}")
        self.versions[isin] = (reply.value["state_version"], reply.value["status"])
        return self.versions[isin]

    def _funding(self, side: Side, isin: str) -> Tuple[ManagerId, str]:
        resource = self.currency if side is Side.BUY else isin
        return self.directory.resource_manager(resource), resource

    def _return_reservation(self, order: Order) -> Process:
        if order.reservation_id is None or order.reserved <= 0:
            return True
        manager, _ = self._funding(order.side, order.isin)
        reply = yield Call(manager, self._request("Settle", {
            "reservation_id": order.reservation_id, "decision": "Abort",
        }))
        if reply is None or not reply.ok:
            logger.warning("%s: could not return %s: %s", self.manager_id,
                           order.reservation_id, reply.error if reply else "no reply")
            self.unreturned.append((manager, {"reservation_id": order.reservation_id}))
            return False
        return True

    def retry_returns(self) -> Process:
        """Retry reservation returns that failed earlier; returns how many remain."""
        pending, self.unreturned = self.unreturned, []
        for manager, selector in pending:
            reply = yield Call(manager, self._request("Settle", {**selector, "decision": "Abort"}))
            if reply is None or (not reply.ok and reply.error != AlreadyTerminal.code):
                self.unreturned.append((manager, selector))
        return len(self.unreturned)

    # =========================================================================
    # Orders
    # =========================================================================

    def submit_order(self, request: SignedRequest) -> Process:
        """
        Accept, fund and match one order.

        Returns:
            The :class:`Order`; ``REJECTED`` (with ``reason`` set to an error
            code) when funding fails or, with ``reject_stale``, when its pinned
            version is not current. Rejections are logged on the trade ledger.

        Raises:
            Unauthorized, BadSignature: the request is not a valid order.
            InvalidParams: non-positive quantity or price.
            UnknownInstrument
            InstrumentSuspended: the instrument is in default or terminated.
        """
        self.identity.verify_request(request, Action.SUBMIT_ORDER)
        body = request.body
        if body.get("party", request.author) != request.author:
            raise NotOwner("orders are submitted by their own party")
        side = Side(body["side"])
        isin, qty, price = body["isin"], body["qty"], body["limit_price"]
        if qty <= 0 or price <= 0:
            raise InvalidParams("quantity and limit price must be positive")
        version, status = yield from self._instrument(isin)
        if status in SUSPENDED_STATUSES:
            raise InstrumentSuspended(f"{isin} is {status}")
        pinned = body.get("state_version")
        if pinned is None:
            pinned = version
        order = Order(
            f"{self.manager_id}:o{self.state.next_order}", side, isin, qty, price,
            request.author, pinned, remaining=qty,
        )

        if pinned != version and self.reject_stale:
            return self._reject(order, StaleStateVersion.code, request)
        limit = self.credit_limits.get(request.author)
        if (side is Side.BUY and limit is not None
                and self.open_exposure(request.author) + qty * price > limit):
            return self._reject(order, "CreditLimit", request)
        manager, resource = self._funding(side, isin)
        amount = qty * price if side is Side.BUY else qty
        reply = yield Call(manager, self._request("Reserve", {
            "owner": request.author, "resource": resource, "amount": amount,
            "client_ref": order.order_id,
        }))
        if reply is None:
            # the hold may exist; return it by reference once the manager answers
            self.unreturned.append((manager, {"client_ref": order.order_id}))
            yield from self.retry_returns()
            return self._reject(order, "Timeout", request)
        if not reply.ok:
            return self._reject(order, reply.error, request)
        order.reservation_id = reply.value
        order.reserved = amount
        self._append(ORDER_ACCEPTED, {"order": order.to_value(), "request": request.to_value()})
        logger.debug("%s: %s %s %d @ %d by %s", self.manager_id, order.order_id, side.value,
                     qty, price, order.party)
        yield from self.match_and_settle(isin)
        return self.state.orders[order.order_id]

    def _reject(self, order: Order, reason: str, request: SignedRequest) -> Order:
        order.status = OrderStatus.REJECTED
        order.reason = reason
        order.remaining = 0
        self._append(ORDER_REJECTED, {"order": order.to_value(), "request": request.to_value()})
        logger.info("%s: rejected order %s: %s", self.manager_id, order.order_id, reason)
        return self.state.orders[order.order_id]

    def cancel_order(self, request: SignedRequest) -> Process:
        """
        Cancel a resting order and return its remaining reservation.

        Raises:
            NotOwner: if the author does not own the order.
            AlreadyTerminal: if the order is filled, cancelled, expired or rejected.
            InvalidParams: if a settlement involving the order is in flight.
        """
        self.identity.verify_request(request, Action.CANCEL_ORDER)
        order = self.order(request.body["order_id"])
        if order.party != request.author:
            raise NotOwner(f"{request.author} does not own {order.order_id}")
        if not order.status.resting:
            raise AlreadyTerminal(f"{order.order_id} is {order.status.value}")
        if any(order.order_id in (t.buy_order_id, t.sell_order_id)
               for t in self.state.settling(order.isin)):
            raise InvalidParams(f"{order.order_id} has a settlement in flight")
        returned = order.reserved
        manager, _ = self._funding(order.side, order.isin)
        reply = yield Call(manager, self._request("Settle", {
            "reservation_id": order.reservation_id, "decision": "Abort",
        }))
        if reply is None or not reply.ok:
            raise _reply_error(reply, f"return of {order.reservation_id}")
        self._append(ORDER_CANCELLED, {
            "order_id": order.order_id, "returned": returned, "request": request.to_value(),
        })
        return order

    def _expire(self, order: Order, reason: str, version: int) -> Process:
        yield from self._return_reservation(order)
        self._append(ORDER_EXPIRED, {
            "order_id": order.order_id, "reason": reason, "state_version": version,
        })
        logger.info("%s: expired %s (%s)", self.manager_id, order.order_id, reason)

    # =========================================================================
    # Instrument versions
    # =========================================================================

    def on_instrument_version(self, isin: str, version: int, status: str = "Live") -> Process:
        """
        React to a contract state change: expire orders pinned to older
        versions (all resting orders when the instrument is suspended), then match.
        """
        known = self.versions.get(isin)
        if known is not None and known[0] > version:
            return []
        self.versions[isin] = (version, status)
        trades = yield from self.match_and_settle(isin)
        return trades

    def _sweep(self, isin: str, version: int, status: str) -> Process:
        suspended = status in SUSPENDED_STATUSES
        for order in self.state.book(isin).resting():
            if suspended:
                yield from self._expire(order, "suspended", version)
            elif order.pinned_state_version != version:
                yield from self._expire(order, "stale", version)

    # =========================================================================
    # Matching and settlement
    # =========================================================================

    def match_and_settle(self, isin: str) -> Process:
        """
        Match crossing orders of ``isin`` and settle each trade atomically.

        Returns:
            The trades made (Settled or Failed), in execution order.
        """
        if self.state.settling(isin):
            unresolved = yield from self.resolve_pending(isin)
            if unresolved:
                return []
        version, status = yield from self._instrument(isin)
        yield from self._sweep(isin, version, status)
        book = self.state.book(isin)
        trades: List[Trade] = []
        while book.crossed():
            bid, ask = book.best_bid(), book.best_ask()
            resting = bid if bid.entry_seq < ask.entry_seq else ask
            trade = yield from self._settle(bid, ask, min(bid.remaining, ask.remaining),
                                            resting.limit_price, version)
            if trade.status is TradeStatus.SETTLING:
                break
            trades.append(trade)
        return trades

    def _settlement(self, trade: Trade, bid: Order, ask: Order) -> List[ReleaseAction]:
        cash, _ = self._funding(Side.BUY, trade.isin)
        units, _ = self._funding(Side.SELL, trade.isin)
        actions = [
            ReleaseAction(cash, bid.reservation_id, trade.amount, beneficiary=ask.party),
            ReleaseAction(units, ask.reservation_id, trade.qty, beneficiary=bid.party),
        ]
        if trade.refund:
            actions.append(ReleaseAction(cash, bid.reservation_id, trade.refund))
        return actions

    def _settle(self, bid: Order, ask: Order, qty: int, price: int, version: int) -> Process:
        trade_id = f"{self.manager_id}:t{self.state.next_trade}"
        trade = Trade(
            trade_id, bid.isin, bid.order_id, ask.order_id, bid.party, ask.party, qty, price,
            settlement_txn_id=f"dvp-{trade_id}", state_version=version,
            refund=qty * (bid.limit_price - price),
        )
        actions = self._settlement(trade, bid, ask)
        request = self._request("ExecuteAtomic", {
            "actions": [a.to_value() for a in actions], "txn_id": trade.settlement_txn_id,
        })
        self._append(TRADE_SETTLING, {"trade": trade.to_value()})
        coordinator = self.directory.coordinator(trade.settlement_txn_id)
        reply = yield Call(coordinator, request, self.t_settle)
        if reply is not None and reply.ok:
            outcome = TxnOutcome.from_value(reply.value)
            status = TxnStatus.COMMITTED.value if outcome else TxnStatus.ABORTED.value
            reason = outcome.reason
        else:
            logger.warning("%s: settlement of %s has no outcome, querying participants",
                           self.manager_id, trade_id)
            status = yield from self._query_outcome(trade.settlement_txn_id, actions)
            reason = "Unresolved" if status is None else status
        yield from self._record_outcome(trade_id, status, reason)
        return self.state.trades[trade_id]

    def _query_outcome(self, txn_id: str, actions: Iterable[ReleaseAction]) -> Process:
        """
        Decision of a settlement whose coordinator did not answer: Committed if
        any participant committed, Aborted if any aborted or never prepared
        (which fences it there), else None.
        """
        participants = sorted({a.manager for a in actions})
        query = TxnMessage.create(TxnKind.DECISION_QUERY, txn_id, self.operator)
        replies = yield Gather(tuple(Call(p, query, self.t_resolve) for p in participants))
        statuses = [
            r.value.body.get("status") for r in replies
            if r is not None and r.ok and isinstance(r.value, TxnMessage)
        ]
        if TxnStatus.COMMITTED.value in statuses:
            return TxnStatus.COMMITTED.value
        if any(s in (TxnStatus.ABORTED.value, NOT_PREPARED) for s in statuses):
            return TxnStatus.ABORTED.value
        return None

    def _record_outcome(self, trade_id: str, status: Optional[str], reason: str) -> Process:
        trade = self.state.trades[trade_id]
        if status == TxnStatus.COMMITTED.value:
            self._append(TRADE_SETTLED, {"trade_id": trade_id})
            logger.info("%s: %s settled %d @ %d", self.manager_id, trade_id, trade.qty,
                        trade.price)
        elif status == TxnStatus.ABORTED.value:
            self._append(TRADE_FAILED, {"trade_id": trade_id, "reason": reason})
            logger.error("%s: settlement of %s failed: %s", self.manager_id, trade_id, reason)
            for order_id in (trade.buy_order_id, trade.sell_order_id):
                yield from self._return_reservation(self.state.orders[order_id])
        else:
            logger.error("%s: settlement of %s in doubt", self.manager_id, trade_id)

    def resolve_pending(self, isin: Optional[str] = None) -> Process:
        """
        Resolve settlements left in flight (after a timeout or a restart).

        Returns:
            Number of settlements still unresolved.
        """
        unresolved = 0
        for trade in self.state.settling(isin):
            bid = self.state.orders[trade.buy_order_id]
            ask = self.state.orders[trade.sell_order_id]
            actions = self._settlement(trade, bid, ask)
            status = yield from self._query_outcome(trade.settlement_txn_id, actions)
            if status is None:
                unresolved += 1
                yield Sleep(self.t_resolve)
                continue
            yield from self._record_outcome(trade.trade_id, status, status)
        return unresolved

    # =========================================================================
    # Node interface
    # =========================================================================

    def handle(self, message: Any) -> Any:
        if not isinstance(message, SignedRequest):
            raise InvalidParams(f"unexpected {type(message).__name__}")
        kind, body = message.kind, message.body
        if kind == "SubmitOrder":
            return self._value(self.submit_order(message))
        if kind == "CancelOrder":
            return self._value(self.cancel_order(message))
        if kind == "InstrumentVersion":
            self.identity.verify_request(message, Action.COORDINATE)
            return self._trades_value(self.on_instrument_version(
                body["isin"], body["state_version"], body.get("status", "Live")
            ))
        if kind == "Match":
            return self._trades_value(self.match_and_settle(body["isin"]))
        if kind == "ResolvePending":
            return self.resolve_pending(body.get("isin"))
        if kind == "Order":
            return self.order(body["order_id"]).to_value()
        if kind == "Book":
            return self.book(body["isin"]).snapshot()
        if kind == "Feed":
            return [e.encode() for e in self.trade_feed(body.get("from_seq", 0))]
        raise InvalidParams(f"unknown trade request {kind}")

    @staticmethod
    def _value(process: Process) -> Process:
        order = yield from process
        return order.to_value()

    @staticmethod
    def _trades_value(process: Process) -> Process:
        trades = yield from process
        return [t.to_value() for t in trades]
