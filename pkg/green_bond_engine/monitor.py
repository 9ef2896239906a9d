"""
Order and trade monitor: market-abuse rules over the trade feed.

The monitor is a stateless, read-only consumer of a trade ledger. It turns
every feed entry into a flat row (see :data:`~green_bond_engine.query.ROW_FIELDS`),
runs the enabled rules over the settled trades and emits :class:`Alert`
records. Logical time is the trade-ledger seq, so the same feed gives the
same alerts whether it is read live (:class:`Monitor`, :func:`evaluate_stream`)
or from a ledger file afterwards (:func:`expost_scan`).

Rule predicates (``window`` is a span of seqs; an entry at seq ``s`` is
inside the window of the entry at ``now`` when ``now - s <= window``):

    SelfTrade    buyer and seller of a settled trade resolve to the same
                 owner (``owners`` map, default identity) and the two orders
                 entered within ``window`` of each other. Evidence: both
                 order entries and the trade.
    WashTrade    per party and ISIN, fills are paired greedily into round
                 trips (opposite side, equal qty, price within
                 ``price_tolerance_bp`` of the earlier fill). One alert when
                 ``min_round_trips`` trips lie inside the window; the count
                 then restarts.
    PriceSpike   ``|price - p0| * 10000 > threshold_bp * p0`` where ``p0`` is
                 the earliest trade price inside the window. The window
                 restarts after an alert.
    VolumeSurge  ``qty * n > multiple * sum(q)`` over the ``n >= 1`` preceding
                 trades inside the window.

Examples:
    >>> rules = load_rules("data/rules.yaml")
    >>> alerts = list(evaluate_stream(trade_manager.trade_feed(), rules))
    >>> expost = expost_scan("data/run/trading.log", rules, identity.key_at)
    >>> {a.key() for a in alerts} == {a.key() for a in expost}
    True
"""

from __future__ import annotations
import json
import logging
from abc import ABC, abstractmethod
from collections import defaultdict, deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import (
    Any, Callable, Deque, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union,
)

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .core import Action, ConfigError, InvalidParams, MalformedQuery, PartyId
from .ledger import EventEnvelope, KeyLookup, Subscription, read_ledger_file
from .messages import SignedRequest
from .query import QueryEngine, QueryResult
from .trading import (
    ORDER_ACCEPTED, ORDER_CANCELLED, ORDER_EXPIRED, ORDER_REJECTED, TRADE_FAILED,
    TRADE_SETTLED, TRADE_SETTLING,
)


__all__ = [
    'RuleKind',
    'RuleSpec',
    'AlertMode',
    'Alert',
    'FeedReader',
    'SettledTrade',
    'AlertEngine',
    'Monitor',
    'load_rules',
    'parse_rules',
    'evaluate_stream',
    'expost_scan',
]

logger = logging.getLogger(__name__)


# =========================================================================
# Rules
# =========================================================================


class RuleKind(Enum):
    SELF_TRADE = "SelfTrade"
    WASH_TRADE = "WashTrade"
    PRICE_SPIKE = "PriceSpike"
    VOLUME_SURGE = "VolumeSurge"


class RuleSpec(BaseModel):
    """
    One configured detection rule.

    Only the parameters of the rule's kind are read; the others keep their
    defaults.

    Examples:
        >>> RuleSpec(rule_id="wash", kind="WashTrade", window=50, min_round_trips=2)
        >>> RuleSpec(rule_id="spike", kind="PriceSpike", window=20, threshold_bp=500,
        ...          filter={"==": [{"var": "isin"}, "XS0000000001"]})
    """

    model_config = ConfigDict(frozen=True)

    rule_id: str = Field(min_length=1)
    kind: RuleKind
    window: int = Field(gt=0)
    enabled: bool = True
    min_round_trips: int = Field(default=2, ge=1)
    price_tolerance_bp: float = Field(default=0, ge=0)
    threshold_bp: float = Field(default=500, gt=0)
    multiple: float = Field(default=5, gt=0)
    owners: Dict[str, str] = Field(default_factory=dict)
    filter: Optional[Dict[str, Any]] = None

    @field_validator("filter")
    @classmethod
    def _check_filter(cls, value: Optional[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
        if value is not None:
            try:
                QueryEngine().validate(value)
            except MalformedQuery as exc:
                raise ValueError(str(exc)) from None
        return value

    def owner(self, party: PartyId) -> str:
        return self.owners.get(party, party)


def parse_rules(data: Any) -> List[RuleSpec]:
    """
    Rules from a parsed config document: ``{"rules": [...]}`` or a bare list.

    Raises:
        ConfigError: on schema violations or duplicate rule ids.
    """
    items = data.get("rules", []) if isinstance(data, dict) else data
    if not isinstance(items, list):
        raise ConfigError("rules must be a list")
    try:
        rules = [RuleSpec.model_validate(item) for item in items]
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    ids = [rule.rule_id for rule in rules]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ConfigError(f"duplicate rule ids: {', '.join(duplicates)}")
    return rules


def load_rules(path: Union[str, Path]) -> List[RuleSpec]:
    """
    Load monitor rules from a YAML file.

    Raises:
        ConfigError
    """
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read rules {path}: {exc}") from None
    return parse_rules(data or [])


# =========================================================================
# Alerts
# =========================================================================


class AlertMode(Enum):
    REAL_TIME = "RealTime"
    EX_POST = "ExPost"


@dataclass(frozen=True)
class Alert:
    """A rule match. ``evidence`` lists trade-ledger seqs, ascending."""

    alert_id: str
    rule_id: str
    kind: RuleKind
    isin: str
    implicated_parties: Tuple[PartyId, ...]
    evidence: Tuple[int, ...]
    detected_at: int
    mode: AlertMode = AlertMode.REAL_TIME

    @classmethod
    def create(
        cls,
        rule: RuleSpec,
        isin: str,
        parties: Iterable[PartyId],
        evidence: Iterable[int],
        detected_at: int,
    ) -> Alert:
        parties = tuple(sorted(set(parties)))
        return cls(
            alert_id=f"{rule.rule_id}@{detected_at}:{'+'.join(parties)}",
            rule_id=rule.rule_id,
            kind=rule.kind,
            isin=isin,
            implicated_parties=parties,
            evidence=tuple(sorted(set(evidence))),
            detected_at=detected_at,
        )

    def key(self) -> Tuple[Any, ...]:
        """Identity of an alert regardless of how it was found."""
        return (self.alert_id, self.rule_id, self.isin, self.implicated_parties, self.evidence)

    def to_value(self) -> Dict[str, Any]:
        return {
            "alert_id": self.alert_id,
            "rule_id": self.rule_id,
            "kind": self.kind.value,
            "isin": self.isin,
            "implicated_parties": list(self.implicated_parties),
            "evidence": list(self.evidence),
            "detected_at": self.detected_at,
            "mode": self.mode.value,
        }

    @classmethod
    def from_value(cls, value: Dict[str, Any]) -> Alert:
        return cls(
            value["alert_id"], value["rule_id"], RuleKind(value["kind"]), value["isin"],
            tuple(value["implicated_parties"]), tuple(value["evidence"]),
            value["detected_at"], AlertMode(value["mode"]),
        )

    def to_json_line(self) -> str:
        return json.dumps(self.to_value(), sort_keys=True)


# =========================================================================
# Feed rows
# =========================================================================


@dataclass(frozen=True)
class SettledTrade:
    """A settled trade with the entry seqs of its two orders."""

    seq: int
    isin: str
    buyer: PartyId
    seller: PartyId
    qty: int
    price: int
    buy_entry_seq: int
    sell_entry_seq: int
    row: Dict[str, Any]


class FeedReader:
    """
    Turns trade-ledger entries into query rows.

    Cancellations, expiries and trade outcomes carry ids only; the reader
    remembers orders and trades so their rows are complete.
    """

    def __init__(self) -> None:
        self.orders: Dict[str, Dict[str, Any]] = {}
        self.trades: Dict[str, Dict[str, Any]] = {}

    def read(self, envelope: EventEnvelope) -> Tuple[Dict[str, Any], Optional[SettledTrade]]:
        kind = envelope.payload_kind
        body = envelope.body()
        row: Dict[str, Any] = {"seq": envelope.seq, "kind": kind}
        settled = None
        if kind in (ORDER_ACCEPTED, ORDER_REJECTED):
            order = dict(body["order"], entry_seq=envelope.seq)
            self.orders[order["order_id"]] = order
            row.update(self._order_row(order))
        elif kind in (ORDER_CANCELLED, ORDER_EXPIRED):
            order = self.orders.get(body["order_id"], {"order_id": body["order_id"]})
            row.update(self._order_row(order))
            row["status"] = "Cancelled" if kind == ORDER_CANCELLED else "Expired"
        elif kind == TRADE_SETTLING:
            trade = body["trade"]
            self.trades[trade["trade_id"]] = trade
            row.update(self._trade_row(trade, "Settling"))
        elif kind in (TRADE_SETTLED, TRADE_FAILED):
            trade = self.trades.get(body["trade_id"], {"trade_id": body["trade_id"]})
            row.update(self._trade_row(trade, "Settled" if kind == TRADE_SETTLED else "Failed"))
            if kind == TRADE_SETTLED and "isin" in trade:
                settled = SettledTrade(
                    envelope.seq, trade["isin"], trade["buyer"], trade["seller"],
                    trade["qty"], trade["price"],
                    self._entry_seq(trade["buy_order_id"]),
                    self._entry_seq(trade["sell_order_id"]),
                    row,
                )
        return row, settled

    def rows(self, entries: Iterable[EventEnvelope]) -> List[Dict[str, Any]]:
        return [self.read(envelope)[0] for envelope in entries]

    def _entry_seq(self, order_id: str) -> int:
        return self.orders.get(order_id, {}).get("entry_seq", -1)

    @staticmethod
    def _order_row(order: Dict[str, Any]) -> Dict[str, Any]:
        return {
            "order_id": order["order_id"],
            "isin": order.get("isin"),
            "party": order.get("party"),
            "side": order.get("side"),
            "qty": order.get("qty"),
            "price": order.get("limit_price"),
            "state_version": order.get("pinned_state_version"),
            "status": order.get("status"),
        }

    @staticmethod
    def _trade_row(trade: Dict[str, Any], status: str) -> Dict[str, Any]:
        return {
            "trade_id": trade["trade_id"],
            "isin": trade.get("isin"),
            "buyer": trade.get("buyer"),
            "seller": trade.get("seller"),
            "qty": trade.get("qty"),
            "price": trade.get("price"),
            "state_version": trade.get("state_version"),
            "status": status,
        }


# =========================================================================
# Detectors
# =========================================================================


def _inside(now: int, seq: int, window: int) -> bool:
    return now - seq <= window


class Detector(ABC):
    """Incremental evaluation of one rule over settled trades."""

    def __init__(self, rule: RuleSpec):
        self.rule = rule
        self._filter: Optional[Callable[[Dict[str, Any]], bool]] = (
            QueryEngine().compile(rule.filter) if rule.filter is not None else None
        )

    def accepts(self, trade: SettledTrade) -> bool:
        return self._filter is None or self._filter(trade.row)

    @abstractmethod
    def observe(self, trade: SettledTrade) -> List[Alert]:
        """Alerts completed by ``trade``."""


class SelfTradeDetector(Detector):

    def observe(self, trade: SettledTrade) -> List[Alert]:
        rule = self.rule
        if rule.owner(trade.buyer) != rule.owner(trade.seller):
            return []
        if trade.buy_entry_seq < 0 or trade.sell_entry_seq < 0:
            return []
        if abs(trade.buy_entry_seq - trade.sell_entry_seq) > rule.window:
            return []
        evidence = (trade.buy_entry_seq, trade.sell_entry_seq, trade.seq)
        return [Alert.create(rule, trade.isin, (trade.buyer, trade.seller), evidence, trade.seq)]


@dataclass(frozen=True)
class _Fill:
    seq: int
    buy: bool
    qty: int
    price: int


class WashTradeDetector(Detector):

    def __init__(self, rule: RuleSpec):
        super().__init__(rule)
        self._open: Dict[Tuple[PartyId, str], List[_Fill]] = defaultdict(list)
        self._trips: Dict[Tuple[PartyId, str], List[Tuple[_Fill, _Fill]]] = defaultdict(list)

    def observe(self, trade: SettledTrade) -> List[Alert]:
        alerts = []
        for party, buy in ((trade.buyer, True), (trade.seller, False)):
            fill = _Fill(trade.seq, buy, trade.qty, trade.price)
            alert = self._add(party, trade.isin, fill)
            if alert is not None:
                alerts.append(alert)
        return alerts

    def _matches(self, earlier: _Fill, fill: _Fill) -> bool:
        if earlier.buy == fill.buy or earlier.qty != fill.qty:
            return False
        moved = abs(fill.price - earlier.price) * 10000
        return moved <= self.rule.price_tolerance_bp * earlier.price

    def _add(self, party: PartyId, isin: str, fill: _Fill) -> Optional[Alert]:
        key = (party, isin)
        window = self.rule.window
        opened = [f for f in self._open[key] if _inside(fill.seq, f.seq, window)]
        trips = [t for t in self._trips[key] if _inside(fill.seq, t[0].seq, window)]
        match = next((f for f in opened if self._matches(f, fill)), None)
        if match is None:
            opened.append(fill)
        else:
            opened.remove(match)
            trips.append((match, fill))
        if len(trips) >= self.rule.min_round_trips:
            self._open[key], self._trips[key] = [], []
            evidence = [f.seq for trip in trips for f in trip]
            return Alert.create(self.rule, isin, (party,), evidence, fill.seq)
        self._open[key], self._trips[key] = opened, trips
        return None


class PriceSpikeDetector(Detector):

    def __init__(self, rule: RuleSpec):
        super().__init__(rule)
        self._windows: Dict[str, Deque[SettledTrade]] = defaultdict(deque)

    def observe(self, trade: SettledTrade) -> List[Alert]:
        window = self._windows[trade.isin]
        while window and not _inside(trade.seq, window[0].seq, self.rule.window):
            window.popleft()
        alerts = []
        if window:
            first = window[0]
            if abs(trade.price - first.price) * 10000 > self.rule.threshold_bp * first.price:
                parties = (first.buyer, first.seller, trade.buyer, trade.seller)
                alerts.append(Alert.create(
                    self.rule, trade.isin, parties, (first.seq, trade.seq), trade.seq
                ))
                window.clear()
        window.append(trade)
        return alerts


class VolumeSurgeDetector(Detector):

    def __init__(self, rule: RuleSpec):
        super().__init__(rule)
        self._windows: Dict[str, Deque[SettledTrade]] = defaultdict(deque)

    def observe(self, trade: SettledTrade) -> List[Alert]:
        window = self._windows[trade.isin]
        while window and not _inside(trade.seq, window[0].seq, self.rule.window):
            window.popleft()
        alerts = []
        total = sum(t.qty for t in window)
        if window and trade.qty * len(window) > self.rule.multiple * total:
            evidence = [t.seq for t in window] + [trade.seq]
            alerts.append(Alert.create(
                self.rule, trade.isin, (trade.buyer, trade.seller), evidence, trade.seq
            ))
        window.append(trade)
        return alerts


DETECTORS: Dict[RuleKind, Callable[[RuleSpec], Detector]] = {
    RuleKind.SELF_TRADE: SelfTradeDetector,
    RuleKind.WASH_TRADE: WashTradeDetector,
    RuleKind.PRICE_SPIKE: PriceSpikeDetector,
    RuleKind.VOLUME_SURGE: VolumeSurgeDetector,
}


# =========================================================================
# Evaluation
# =========================================================================


class AlertEngine:
    """
    Runs the enabled rules over a feed, one entry at a time.

    Args:
        rules: Rule specs; disabled ones are skipped.
        mode: Stamped on every alert.
        isins: Restrict to these instruments (a monitor shard); None for all.
    """

    def __init__(
        self,
        rules: Sequence[RuleSpec],
        mode: AlertMode = AlertMode.REAL_TIME,
        isins: Optional[Iterable[str]] = None,
    ):
        self.mode = mode
        self.isins = frozenset(isins) if isins is not None else None
        self.reader = FeedReader()
        self.detectors = [DETECTORS[rule.kind](rule) for rule in rules if rule.enabled]

    def process(self, envelope: EventEnvelope) -> List[Alert]:
        _, trade = self.reader.read(envelope)
        if trade is None or (self.isins is not None and trade.isin not in self.isins):
            return []
        alerts = []
        for detector in self.detectors:
            if detector.accepts(trade):
                alerts.extend(replace(a, mode=self.mode) for a in detector.observe(trade))
        return alerts


def evaluate_stream(
    feed: Iterable[EventEnvelope],
    rules: Sequence[RuleSpec],
    isins: Optional[Iterable[str]] = None,
    mode: AlertMode = AlertMode.REAL_TIME,
) -> Iterator[Alert]:
    """Alerts raised by ``feed``, in feed order (rule order within one entry)."""
    engine = AlertEngine(rules, mode, isins)
    for envelope in feed:
        yield from engine.process(envelope)


def expost_scan(
    path: Union[str, Path],
    rules: Sequence[RuleSpec],
    key_lookup: Optional[KeyLookup] = None,
    isins: Optional[Iterable[str]] = None,
) -> List[Alert]:
    """
    Scan a persisted trade ledger.

    Args:
        path: Trade ledger file (its ``.head`` sidecar is checked too).
        key_lookup: Verifies signatures as well as hash links when given.

    Raises:
        CorruptLedger
    """
    entries = read_ledger_file(path, key_lookup)
    alerts = list(evaluate_stream(entries, rules, isins, AlertMode.EX_POST))
    logger.info("ex-post scan of %s: %d entries, %d alerts", path, len(entries), len(alerts))
    return alerts


# =========================================================================
# Monitor node
# =========================================================================


class Monitor:
    """
    A real-time monitor attached to a trade manager.

    The monitor keeps no durable state: on (re)start it reads the feed from
    seq 0, and alerts already written to ``alerts_path`` are not written twice.

    Examples:
        >>> monitor = Monitor("monitor-1", identity, rules, alerts_path="alerts.jsonl")
        >>> monitor.attach(trade_manager)
        >>> monitor.alerts
        [Alert(alert_id='self@12:A', ...)]
    """

    def __init__(
        self,
        monitor_id: str,
        identity: Any,
        rules: Sequence[RuleSpec],
        alerts_path: Optional[Union[str, Path]] = None,
        isins: Optional[Iterable[str]] = None,
    ):
        self.monitor_id = monitor_id
        self.identity = identity
        self.rules = list(rules)
        self.isins = frozenset(isins) if isins is not None else None
        self.alerts_path = Path(alerts_path) if alerts_path is not None else None
        self.alerts: List[Alert] = []
        self.source: Any = None
        self._engine = AlertEngine(self.rules, AlertMode.REAL_TIME, self.isins)
        self._written = self._read_written()
        self._subscription: Optional[Subscription] = None

    def _read_written(self) -> set:
        if self.alerts_path is None or not self.alerts_path.exists():
            return set()
        with open(self.alerts_path) as fh:
            return {json.loads(line)["alert_id"] for line in fh if line.strip()}

    def attach(self, trade_manager: Any) -> None:
        """Subscribe to a trade manager's feed from the start."""
        self.source = trade_manager
        self._engine = AlertEngine(self.rules, AlertMode.REAL_TIME, self.isins)
        self.alerts = []
        self._subscription = trade_manager.subscribe_feed(0, self.on_entry)

    def detach(self) -> None:
        if self._subscription is not None:
            self._subscription.close()
            self._subscription = None

    def on_entry(self, envelope: EventEnvelope) -> List[Alert]:
        alerts = self._engine.process(envelope)
        for alert in alerts:
            self.alerts.append(alert)
            logger.info("%s: alert %s (%s) on %s, evidence %s", self.monitor_id,
                        alert.alert_id, alert.kind.value, alert.isin, list(alert.evidence))
            self._write(alert)
        return alerts

    def _write(self, alert: Alert) -> None:
        if self.alerts_path is None or alert.alert_id in self._written:
            return
        self.alerts_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.alerts_path, "a") as fh:
            fh.write(alert.to_json_line() + "\n")
        self._written.add(alert.alert_id)

    # =========================================================================
    # Supervisor interface
    # =========================================================================

    def supervisor_query(self, request: SignedRequest) -> QueryResult:
        """
        Evaluate a supervisor's filter over the authoritative trade ledger.

        The request body carries ``query`` (a filter-grammar dict). Result rows
        carry their ledger seqs.

        Raises:
            Unauthorized: unless the author holds the Supervisor role.
            MalformedQuery
        """
        self.identity.verify_request(request, Action.MONITOR_QUERY)
        query = request.body.get("query", {})
        engine = QueryEngine()
        engine.validate(query)
        entries = self.source.trade_feed(0) if self.source is not None else []
        rows = engine.filter(query, FeedReader().rows(entries))
        logger.info("%s: supervisor %s query matched %d rows", self.monitor_id,
                    request.author, len(rows))
        return QueryResult(rows, len(entries))

    def handle(self, message: Any) -> Any:
        if not isinstance(message, SignedRequest) or message.kind != "SupervisorQuery":
            raise InvalidParams(f"unexpected {getattr(message, 'kind', type(message).__name__)}")
        result = self.supervisor_query(message)
        return {"rows": result.rows, "seqs": result.seqs, "ledger_length": result.ledger_length}
