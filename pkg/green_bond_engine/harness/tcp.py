"""
TCP transport: every node behind its own asyncio server.

Messages travel as length-prefixed frames holding
:func:`~green_bond_engine.messages.encode_message` bytes; each request gets
exactly one reply frame. :class:`TcpDriver` has the same surface as the
in-process drivers (``register``, ``call``, ``run``, ``settle``, ``down``),
so a :class:`~.cluster.Cluster` runs over it unchanged. It runs in real time
and is not byte-deterministic.

Examples:
    >>> driver = TcpDriver({"identity": "127.0.0.1:0", "currency": "127.0.0.1:0"})
    >>> cluster = Cluster(topology, driver=driver)
    >>> driver.close()
"""

from __future__ import annotations
import asyncio
import logging
import struct
import threading
import time
from typing import Any, Dict, Optional, Set, Tuple

from ..codec import frame
from ..core import EncodingError, EngineError, InvalidParams
from ..messages import Reply, decode_message, encode_message
from ..runtime import Call, Gather, NodeCrashed, Process, Send, Sleep, is_process


__all__ = [
    'TcpDriver',
    'read_message',
    'write_message',
    'parse_address',
]

logger = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024


def parse_address(address: str) -> Tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise InvalidParams(f"address must be host:port, got {address!r}")
    return host, int(port)


async def read_message(reader: asyncio.StreamReader) -> Any:
    """
    Raises:
        asyncio.IncompleteReadError: if the peer closed the connection.
        EncodingError: on an oversized or undecodable frame.
    """
    header = await reader.readexactly(4)
    (size,) = struct.unpack(">I", header)
    if size > MAX_FRAME:
        raise EncodingError(f"frame of {size} bytes exceeds {MAX_FRAME}")
    return decode_message(await reader.readexactly(size))


async def write_message(writer: asyncio.StreamWriter, message: Any) -> None:
    writer.write(frame(encode_message(message)))
    await writer.drain()


class TcpDriver:
    """
    Hosts node servers and drives processes over TCP.

    The asyncio loop runs in a background thread; the synchronous methods
    block the caller until the loop has finished the work.

    Args:
        addresses: node id -> ``host:port``; port 0 binds an ephemeral port
            (the map is updated with the bound one).
        call_timeout: Used for calls that carry no timeout of their own.
    """

    def __init__(self, addresses: Dict[str, str], call_timeout: float = 30.0):
        self.addresses = dict(addresses)
        self.call_timeout = call_timeout
        self.nodes: Dict[str, Any] = {}
        self.down: Set[str] = set()
        self._started = time.monotonic()
        self._locks: Dict[str, asyncio.Lock] = {}
        self._servers: Dict[str, asyncio.AbstractServer] = {}
        self._background: Set[asyncio.Future] = set()
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="tcp-driver",
                                        daemon=True)
        self._thread.start()

    @property
    def clock(self) -> float:
        return time.monotonic() - self._started

    def _wait(self, coro: Any, timeout: Optional[float] = None) -> Any:
        return asyncio.run_coroutine_threadsafe(coro, self._loop).result(timeout)

    # =========================================================================
    # Servers
    # =========================================================================

    def register(self, node_id: str, node: Any) -> None:
        """Start serving ``node`` at its configured address."""
        if node_id not in self.addresses:
            raise InvalidParams(f"no address for node {node_id}")
        self.nodes[node_id] = node
        self._wait(self._serve(node_id))

    async def _serve(self, node_id: str) -> None:
        self._locks[node_id] = asyncio.Lock()
        host, port = parse_address(self.addresses[node_id])

        async def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
            await self._connection(node_id, reader, writer)

        server = await asyncio.start_server(on_connect, host, port)
        bound = server.sockets[0].getsockname()[1]
        self.addresses[node_id] = f"{host}:{bound}"
        self._servers[node_id] = server
        logger.info("tcp: %s listening on %s", node_id, self.addresses[node_id])

    async def _connection(self, node_id: str, reader: asyncio.StreamReader,
                          writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                try:
                    message = await read_message(reader)
                except asyncio.IncompleteReadError:
                    return
                except EncodingError as exc:
                    await write_message(writer, Reply.failure(exc))
                    continue
                reply = await self._handle(node_id, message)
                await write_message(writer, reply or Reply(error="Unavailable"))
        finally:
            writer.close()

    async def _handle(self, node_id: str, message: Any) -> Optional[Reply]:
        node = self.nodes.get(node_id)
        if node is None or node_id in self.down:
            return None
        if getattr(node, "concurrent", False):
            return await self._invoke(node_id, node, message)
        async with self._locks[node_id]:
            return await self._invoke(node_id, node, message)

    async def _invoke(self, node_id: str, node: Any, message: Any) -> Optional[Reply]:
        try:
            result = node.handle(message)
            if is_process(result):
                result = await self._drive(result)
        except NodeCrashed as crash:
            logger.info("tcp: %s", crash)
            self.down.add(crash.node_id)
            return None
        except EngineError as exc:
            return Reply.failure(exc)
        return result if isinstance(result, Reply) else Reply(value=result)

    # =========================================================================
    # Effects
    # =========================================================================

    async def _drive(self, process: Process) -> Any:
        value: Any = None
        while True:
            try:
                effect = process.send(value)
            except StopIteration as stop:
                return stop.value
            if isinstance(effect, Call):
                value = await self._call(effect.dst, effect.message, effect.timeout)
            elif isinstance(effect, Gather):
                value = list(await asyncio.gather(
                    *(self._call(c.dst, c.message, c.timeout) for c in effect.calls)
                ))
            elif isinstance(effect, Send):
                task = asyncio.ensure_future(self._call(effect.dst, effect.message, None))
                self._background.add(task)
                task.add_done_callback(self._background.discard)
                value = None
            elif isinstance(effect, Sleep):
                await asyncio.sleep(effect.span)
                value = None
            else:
                raise TypeError(f"unknown effect {effect!r}")

    async def _call(self, dst: str, message: Any, timeout: Optional[float]) -> Optional[Reply]:
        address = self.addresses.get(dst)
        if address is None or dst in self.down:
            return None
        host, port = parse_address(address)
        try:
            return await asyncio.wait_for(
                self._exchange(host, port, message), timeout or self.call_timeout
            )
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
            logger.warning("tcp: call to %s failed: %s", dst, exc or type(exc).__name__)
            return None

    async def _exchange(self, host: str, port: int, message: Any) -> Optional[Reply]:
        reader, writer = await asyncio.open_connection(host, port)
        try:
            await write_message(writer, message)
            reply = await read_message(reader)
        finally:
            writer.close()
        if isinstance(reply, Reply) and reply.error == "Unavailable":
            return None
        return reply

    # =========================================================================
    # Synchronous surface
    # =========================================================================

    def call(self, dst: str, message: Any) -> Optional[Reply]:
        return self._wait(self._call(dst, message, None))

    def run(self, process: Any) -> Any:
        if not is_process(process):
            return process
        return self._wait(self._drive(process))

    def settle(self) -> None:
        """Wait for background sends to be delivered."""

        async def drain() -> None:
            while self._background:
                await asyncio.gather(*list(self._background), return_exceptions=True)

        self._wait(drain())

    def close(self) -> None:
        async def shutdown() -> None:
            for server in self._servers.values():
                server.close()
                await server.wait_closed()

        self._wait(shutdown())
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=5)
