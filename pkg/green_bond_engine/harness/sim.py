"""
Deterministic multi-node simulation on simpy.

:class:`SimDriver` runs the same processes as
:class:`~green_bond_engine.runtime.LocalDriver`, but every message takes
simulated time (``latency`` per hop), calls can time out, and nodes can
crash, restart and see their traffic delayed, duplicated or reordered. Given
the same nodes, faults and seed, a run is event-for-event identical.

Each node handles one message at a time unless it declares
``concurrent = True`` (the stateless coordinators).
"""

from __future__ import annotations
import logging
import random
from typing import Any, Callable, Dict, List, Optional, Set

import simpy

from ..core import EngineError
from ..messages import Reply, TxnMessage
from ..runtime import Call, Gather, NodeCrashed, Process, Send, Sleep, is_process
from .config import FaultPlan, FaultSpec


__all__ = ['SimDriver']

logger = logging.getLogger(__name__)


class _Abandoned(Exception):
    """The node running a process crashed; the process is dropped."""


class SimDriver:
    """
    Simulated network of nodes.

    Args:
        latency: One-way delivery time of a message (simulated seconds).
        seed: Seeds the randomness of reordering faults.

    Attributes:
        on_crash: ``node_id -> None``, called when a node crashes (drop its
            unsynced storage).
        on_restart: ``node_id -> Optional[Process]``, called to rebuild a
            node; a returned process (its recovery) runs in the background.

    Examples:
        >>> driver = SimDriver(latency=0.001, seed=7)
        >>> driver.register("currency", currency_manager)
        >>> driver.run(trade_manager.submit_order(request))
        >>> driver.clock
        0.004
    """

    def __init__(self, latency: float = 0.001, seed: int = 0):
        self.env = simpy.Environment()
        self.latency = latency
        self.rng = random.Random(seed)
        self.nodes: Dict[str, Any] = {}
        self.down: Set[str] = set()
        self.on_crash: Optional[Callable[[str], None]] = None
        self.on_restart: Optional[Callable[[str], Optional[Process]]] = None
        self.messages = 0
        self.faults: List[str] = []
        self._locks: Dict[str, simpy.Resource] = {}
        self._epochs: Dict[str, int] = {}
        self._delays: Dict[str, tuple] = {}
        self._duplicate: Set[str] = set()
        self._reorder: Dict[str, List[int]] = {}

    @property
    def clock(self) -> float:
        return self.env.now

    def register(self, node_id: str, node: Any) -> None:
        self.nodes[node_id] = node
        self._locks[node_id] = simpy.Resource(self.env, capacity=1)
        self._epochs.setdefault(node_id, 0)

    # =========================================================================
    # Running processes
    # =========================================================================

    def run(self, process: Any) -> Any:
        """Drive ``process`` to completion in simulated time and return its result."""
        if not is_process(process):
            return process
        proc = self.env.process(self._drive(process))
        return self.env.run(until=proc)

    def call(self, dst: str, message: Any) -> Optional[Reply]:
        return self.run(self._single(Call(dst, message)))

    @staticmethod
    def _single(call: Call) -> Process:
        reply = yield call
        return reply

    def settle(self, until: Optional[float] = None) -> None:
        """Run background deliveries (and faults) until nothing is left, or ``until``."""
        if until is None:
            self.env.run()
        elif until > self.env.now:
            self.env.run(until=until)

    def spawn(self, process: Process, owner: Optional[str] = None) -> simpy.Process:
        return self.env.process(self._drive(process, owner))

    def _drive(self, process: Process, owner: Optional[str] = None):
        epoch = self._epochs.get(owner) if owner else None
        value: Any = None
        while True:
            if owner is not None and (owner in self.down or self._epochs.get(owner) != epoch):
                process.close()
                raise _Abandoned(owner)
            try:
                effect = process.send(value)
            except StopIteration as stop:
                return stop.value
            if isinstance(effect, Call):
                value = yield from self._call(effect)
            elif isinstance(effect, Gather):
                calls = [self.env.process(self._call(c)) for c in effect.calls]
                if calls:
                    yield self.env.all_of(calls)
                value = [c.value for c in calls]
            elif isinstance(effect, Send):
                self.env.process(self._deliver(effect.dst, effect.message))
                value = None
            elif isinstance(effect, Sleep):
                yield self.env.timeout(effect.span)
                value = None
            else:
                raise TypeError(f"unknown effect {effect!r}")

    def _call(self, call: Call):
        request = self.env.process(self._deliver(call.dst, call.message))
        if call.timeout is None:
            reply = yield request
            return reply
        result = yield request | self.env.timeout(call.timeout)
        if request in result:
            return result[request]
        return None

    # =========================================================================
    # Delivery
    # =========================================================================

    def _delay(self, dst: str) -> float:
        delay = self.latency
        if dst in self._delays:
            until, span = self._delays[dst]
            if self.env.now < until:
                delay += span
            else:
                del self._delays[dst]
        window = self._reorder.get(dst)
        if window:
            window[0] -= 1
            delay += self.rng.uniform(0, window[1] * self.latency)
            if window[0] <= 0:
                del self._reorder[dst]
        return delay

    def _deliver(self, dst: str, message: Any):
        yield self.env.timeout(self._delay(dst))
        self.messages += 1
        if dst in self.down or dst not in self.nodes:
            return None
        if dst in self._duplicate and isinstance(message, TxnMessage):
            self._duplicate.discard(dst)
            logger.info("sim t=%.4f: duplicating %s to %s", self.env.now, message.kind.value, dst)
            self.env.process(self._handle(dst, message))
        reply = yield from self._handle(dst, message)
        if reply is not None:
            yield self.env.timeout(self.latency)
        return reply

    def _handle(self, dst: str, message: Any):
        node = self.nodes.get(dst)
        if node is None:
            return None
        if getattr(node, "concurrent", False):
            reply = yield from self._invoke(dst, node, message)
            return reply
        with self._locks[dst].request() as slot:
            yield slot
            reply = yield from self._invoke(dst, node, message)
        return reply

    def _invoke(self, dst: str, node: Any, message: Any):
        if dst in self.down or self.nodes.get(dst) is not node:
            return None
        epoch = self._epochs[dst]
        try:
            result = node.handle(message)
            if is_process(result):
                result = yield from self._drive(result, dst)
        except NodeCrashed as crash:
            logger.info("sim t=%.4f: %s", self.env.now, crash)
            self.crash(crash.node_id)
            return None
        except _Abandoned:
            return None
        except EngineError as exc:
            return Reply.failure(exc)
        if dst in self.down or self._epochs[dst] != epoch:
            return None
        return result if isinstance(result, Reply) else Reply(value=result)

    # =========================================================================
    # Faults
    # =========================================================================

    def crash(self, node_id: str) -> None:
        if node_id in self.down:
            return
        self.down.add(node_id)
        self._epochs[node_id] = self._epochs.get(node_id, 0) + 1
        self.faults.append(f"t={self.env.now:.4f} Crash {node_id}")
        logger.info("sim t=%.4f: crash %s", self.env.now, node_id)
        if self.on_crash is not None:
            self.on_crash(node_id)

    def restart(self, node_id: str) -> None:
        if node_id not in self.down:
            return
        self.down.discard(node_id)
        self._epochs[node_id] = self._epochs.get(node_id, 0) + 1
        self.faults.append(f"t={self.env.now:.4f} Restart {node_id}")
        logger.info("sim t=%.4f: restart %s", self.env.now, node_id)
        recovery = self.on_restart(node_id) if self.on_restart is not None else None
        if node_id in self.nodes:
            self._locks[node_id] = simpy.Resource(self.env, capacity=1)
        if recovery is not None:
            self.env.process(self._recover(node_id, recovery))

    def _recover(self, node_id: str, recovery: Process):
        try:
            result = yield from self._drive(recovery, node_id)
        except _Abandoned:
            return None
        except EngineError as exc:
            logger.warning("sim: recovery of %s failed: %s", node_id, exc)
            return None
        logger.info("sim t=%.4f: %s recovered: %s", self.env.now, node_id, result)
        return result

    def schedule(self, plan: FaultPlan) -> None:
        """Arm phase faults now and schedule timed ones."""
        self.rng.seed(plan.seed)
        for fault in plan.faults:
            if fault.phase is not None:
                node = self.nodes.get(fault.target)
                if node is None or not hasattr(node, "crash_at"):
                    raise EngineError(f"{fault.target} has no 2PC crash points")
                node.crash_at = fault.phase
                self.faults.append(f"armed Crash {fault.target} at {fault.phase}")
            else:
                self.env.process(self._inject(fault))

    def _inject(self, fault: FaultSpec):
        yield self.env.timeout(max(0.0, (fault.at or 0.0) - self.env.now))
        self.apply(fault)

    def apply(self, fault: FaultSpec) -> None:
        target = fault.target
        if fault.fault == "Crash":
            self.crash(target)
        elif fault.fault == "Restart":
            self.restart(target)
        elif fault.fault == "DelayMessages":
            self._delays[target] = (self.env.now + fault.span, fault.span)
            self.faults.append(f"t={self.env.now:.4f} Delay {target} {fault.span}")
        elif fault.fault == "DuplicateNext":
            self._duplicate.add(target)
            self.faults.append(f"t={self.env.now:.4f} DuplicateNext {target}")
        elif fault.fault == "ReorderWindow":
            self._reorder[target] = [fault.k, fault.k]
            self.faults.append(f"t={self.env.now:.4f} ReorderWindow {target} {fault.k}")
