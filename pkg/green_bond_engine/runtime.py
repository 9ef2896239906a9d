"""
Effects and drivers.

Cross-node interactions are written once, as generators that yield effects and
receive replies, and then run unchanged in-process, in the simulator or over
TCP:

    def settle(self):
        reply = yield Call("currency", request, timeout=2.0)
        votes = yield Gather((Call("a", m1), Call("b", m2)))
        yield Sleep(0.5)
        return reply

A reply is a :class:`~green_bond_engine.messages.Reply`, or ``None`` when the
destination is unreachable or the call timed out.

``LocalDriver`` is the synchronous in-process driver; the simulation and TCP
drivers live in :mod:`green_bond_engine.harness`.
"""

from __future__ import annotations
import hashlib
import inspect
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, Generator, List, Optional, Protocol, Set, Tuple, Union

from .core import EngineError, ManagerId
from .messages import Reply


__all__ = [
    'Call',
    'Send',
    'Gather',
    'Sleep',
    'Effect',
    'Process',
    'Node',
    'NodeCrashed',
    'Directory',
    'LocalDriver',
    'is_process',
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Call:
    """Send ``message`` to ``dst`` and wait for its reply (``None`` on timeout)."""

    dst: str
    message: Any
    timeout: Optional[float] = None


@dataclass(frozen=True)
class Send:
    """Fire-and-forget delivery; no reply."""

    dst: str
    message: Any


@dataclass(frozen=True)
class Gather:
    """Issue several calls at once; resumes with the replies in call order."""

    calls: Tuple[Call, ...]


@dataclass(frozen=True)
class Sleep:
    span: float


Effect = Union[Call, Send, Gather, Sleep]
Process = Generator[Effect, Any, Any]


class NodeCrashed(Exception):
    """Raised inside a node to simulate a crash at an injected point."""

    def __init__(self, node_id: str, phase: str = ""):
        super().__init__(f"{node_id} crashed at {phase or 'injected point'}")
        self.node_id = node_id
        self.phase = phase


class Node(Protocol):
    """
    Anything that can be addressed by a driver.

    ``handle`` returns a value, or a generator (a process) whose return value
    is the reply. Raising :class:`EngineError` replies with its error code.
    """

    def handle(self, message: Any) -> Any:
        ...


def is_process(obj: Any) -> bool:
    return inspect.isgenerator(obj)


@dataclass
class Directory:
    """
    Routing table for functional sharding.

    Shard keys are exact ids; ``"*"`` is the catch-all shard of a kind.

    Attributes:
        identity: Identity manager node id.
        coordinators: Transaction manager node ids.
        resources: resource id (or ``"*"``) -> resource manager id.
        contracts: issuer party id (or ``"*"``) -> contract manager id.
        trading: ISIN (or ``"*"``) -> trade manager id.
    """

    identity: ManagerId = "identity"
    coordinators: List[ManagerId] = field(default_factory=lambda: ["tm-0"])
    resources: Dict[str, ManagerId] = field(default_factory=dict)
    contracts: Dict[str, ManagerId] = field(default_factory=dict)
    trading: Dict[str, ManagerId] = field(default_factory=dict)
    isins: Dict[str, ManagerId] = field(default_factory=dict)

    @staticmethod
    def _route(table: Dict[str, ManagerId], key: str, kind: str) -> ManagerId:
        if key in table:
            return table[key]
        if "*" in table:
            return table["*"]
        raise EngineError(f"no {kind} manager for {key!r}")

    def resource_manager(self, resource: str) -> ManagerId:
        return self._route(self.resources, resource, "resource")

    def contract_manager_for_issuer(self, issuer: str) -> ManagerId:
        return self._route(self.contracts, issuer, "contract")

    def contract_manager(self, isin: str) -> ManagerId:
        """Owner of an issued ISIN (recorded at issuance)."""
        return self._route(self.isins, isin, "contract")

    def trade_manager(self, isin: str) -> ManagerId:
        return self._route(self.trading, isin, "trade")

    def coordinator(self, key: str) -> ManagerId:
        """Pick a coordinator for a transaction key; stable across runs."""
        index = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "big")
        return self.coordinators[index % len(self.coordinators)]

    def all_managers(self) -> List[ManagerId]:
        ids = {self.identity}
        ids.update(self.resources.values())
        ids.update(self.contracts.values())
        ids.update(self.trading.values())
        return sorted(ids)


class LocalDriver:
    """
    Synchronous in-process driver.

    Calls are dispatched directly to the destination's ``handle``; ``Send``
    deliveries are queued and flushed when the outermost ``run`` finishes so
    a handler never re-enters a node that is mid-operation. Nodes listed in
    ``down`` are unreachable.

    Examples:
        >>> driver = LocalDriver()
        >>> driver.register("currency", currency_manager)
        >>> driver.call("currency", request).unwrap()
    """

    def __init__(self, nodes: Optional[Dict[str, Any]] = None):
        self.nodes: Dict[str, Any] = dict(nodes or {})
        self.down: Set[str] = set()
        self.clock = 0.0
        self._depth = 0
        self._outbox: Deque[Tuple[str, Any]] = deque()

    def register(self, node_id: str, node: Any) -> None:
        self.nodes[node_id] = node

    def call(self, dst: str, message: Any) -> Optional[Reply]:
        return self.run(self._dispatch_effect(Call(dst, message)))

    def _dispatch_effect(self, call: Call) -> Process:
        reply = yield call
        return reply

    def run(self, process: Any) -> Any:
        """Drive ``process`` to completion and return its result."""
        if not is_process(process):
            return process
        self._depth += 1
        try:
            result = self._drive(process)
        finally:
            self._depth -= 1
        if self._depth == 0:
            self._flush()
        return result

    def _drive(self, process: Process) -> Any:
        value: Any = None
        while True:
            try:
                effect = process.send(value)
            except StopIteration as stop:
                return stop.value
            if isinstance(effect, Call):
                value = self.dispatch(effect.dst, effect.message)
            elif isinstance(effect, Gather):
                value = [self.dispatch(c.dst, c.message) for c in effect.calls]
            elif isinstance(effect, Send):
                self._outbox.append((effect.dst, effect.message))
                value = None
            elif isinstance(effect, Sleep):
                self.clock += effect.span
                value = None
            else:
                raise TypeError(f"unknown effect {effect!r}")

    def dispatch(self, dst: str, message: Any) -> Optional[Reply]:
        node = self.nodes.get(dst)
        if node is None or dst in self.down:
            return None
        try:
            result = node.handle(message)
            if is_process(result):
                result = self._drive(result)
        except NodeCrashed as crash:
            logger.info("%s", crash)
            self.down.add(crash.node_id)
            return None
        except EngineError as exc:
            return Reply.failure(exc)
        return result if isinstance(result, Reply) else Reply(value=result)

    def _flush(self) -> None:
        while self._outbox:
            dst, message = self._outbox.popleft()
            self.run(self._dispatch_send(dst, message))

    def _dispatch_send(self, dst: str, message: Any) -> Process:
        yield Call(dst, message)
