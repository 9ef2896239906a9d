"""
Tamper-evident, append-only event ledger shared by every state manager.

A ledger is a hash chain of signed envelopes. State is never stored, only
recomputed: ``replay(ledger, reducer)`` folds the reducer over the entries and
must equal the state the owning manager maintained incrementally.

Examples:
    >>> ledger = Ledger("currency")
    >>> seq, head = ledger.append("Transfer", pack({"amount": 10}), "op", sig, key_epoch=3)
    >>> status = verify_chain(ledger, identity.key_at)
    >>> bool(status)
    True
"""

from __future__ import annotations
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any, Callable, Generic, Iterable, Iterator, List, Optional, Protocol, Sequence, Tuple,
    TypeVar, Union,
)

from .codec import (
    decode_fields, decode_int, encode_fields, encode_int, frame, pack, read_frames, unpack,
)
from .core import CorruptLedger, EncodingError, PartyId, SeqOutOfRange
from .crypto import ZERO_HASH, digest, verify


__all__ = [
    'EventEnvelope',
    'Ledger',
    'LedgerStore',
    'MemoryStore',
    'FileStore',
    'ChainStatus',
    'Reducer',
    'Subscription',
    'KeyAuthority',
    'signing_bytes',
    'verify_chain',
    'verify_records',
    'verify_file',
    'read_ledger_file',
    'replay',
]

logger = logging.getLogger(__name__)

S = TypeVar("S")
KeyLookup = Callable[[PartyId, int], Optional[bytes]]


def signing_bytes(
    seq: int, prev_hash: bytes, kind: str, payload: bytes, author: PartyId, key_epoch: int
) -> bytes:
    """The region covered by an envelope signature, in fixed field order."""
    return encode_fields(
        encode_int(seq),
        prev_hash,
        kind.encode("utf-8"),
        payload,
        author.encode("utf-8"),
        encode_int(key_epoch),
    )


@dataclass(frozen=True)
class EventEnvelope:
    """
    One validated event. Immutable once appended and safe to share across threads.

    ``received_at`` is advisory wall-clock metadata: it is not encoded, not
    persisted and not compared.
    """

    seq: int
    prev_hash: bytes
    payload_kind: str
    payload: bytes
    author: PartyId
    key_epoch: int
    signature: bytes
    received_at: Optional[float] = field(default=None, compare=False, repr=False)

    @property
    def logical_time(self) -> int:
        return self.seq

    def signing_bytes(self) -> bytes:
        return signing_bytes(
            self.seq, self.prev_hash, self.payload_kind, self.payload, self.author, self.key_epoch
        )

    def encode(self) -> bytes:
        return encode_fields(
            encode_int(self.seq),
            self.prev_hash,
            self.payload_kind.encode("utf-8"),
            self.payload,
            self.author.encode("utf-8"),
            encode_int(self.key_epoch),
            self.signature,
        )

    def digest(self) -> bytes:
        return digest(self.encode())

    def body(self) -> Any:
        """The decoded payload."""
        return unpack(self.payload)

    @classmethod
    def decode(cls, raw: bytes) -> EventEnvelope:
        seq, prev, kind, payload, author, epoch, sig = decode_fields(raw, 7)
        if len(prev) != 32:
            raise EncodingError("prev_hash must be 32 bytes")
        try:
            return cls(
                seq=decode_int(seq),
                prev_hash=prev,
                payload_kind=kind.decode("utf-8"),
                payload=payload,
                author=author.decode("utf-8"),
                key_epoch=decode_int(epoch),
                signature=sig,
            )
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid utf-8 in envelope") from exc


class KeyAuthority(Protocol):
    """What a ledger needs from the identity manager to accept an append."""

    def current_epoch(self) -> int:
        ...

    def check_append(
        self, author: PartyId, kind: str, key_epoch: int, message: bytes, signature: bytes
    ) -> None:
        """Raise BadSignature or Unauthorized if the append must be refused."""
        ...

    def key_at(self, author: PartyId, epoch: int) -> Optional[bytes]:
        ...


@dataclass
class ChainStatus:
    """Result of chain verification. Truthy iff the chain verified."""

    ok: bool
    length: int
    first_bad_seq: Optional[int] = None
    reason: str = ""
    truncated: bool = False

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            suffix = " (truncated: file shorter than its head record)" if self.truncated else ""
            return f"Ok({self.length} entries){suffix}"
        return f"Corrupt({self.first_bad_seq}): {self.reason}"


@dataclass
class Reducer(Generic[S]):
    """
    A pure state function: ``init`` builds the empty state, ``step`` folds one envelope.

    ``step`` may mutate and return the state it is given; ``init`` must return a
    fresh object each call.
    """

    init: Callable[[], S]
    step: Callable[[S, EventEnvelope], S]

    def fold(self, entries: Iterable[EventEnvelope]) -> S:
        state = self.init()
        for envelope in entries:
            state = self.step(state, envelope)
        return state


# =========================================================================
# Storage
# =========================================================================


class LedgerStore(ABC):
    """Durable record storage behind a ledger. ``sync`` is the durability barrier."""

    @abstractmethod
    def load(self) -> Tuple[List[bytes], int]:
        """Return (durable records, trailing partial bytes)."""

    @abstractmethod
    def write(self, record: bytes) -> None:
        ...

    @abstractmethod
    def sync(self, length: int, head_hash: bytes) -> None:
        ...

    @abstractmethod
    def read_head(self) -> Optional[Tuple[int, bytes]]:
        ...

    def truncate(self, length: int) -> None:
        """Drop everything after the first ``length`` whole records."""

    def close(self) -> None:
        pass


class MemoryStore(LedgerStore):
    """
    In-memory "disk" used by the simulator. Records written but not yet synced
    are lost by :meth:`crash`, the way an unflushed page cache would be.
    """

    def __init__(self) -> None:
        self._durable: List[bytes] = []
        self._pending: List[bytes] = []
        self._head: Optional[Tuple[int, bytes]] = None

    def load(self) -> Tuple[List[bytes], int]:
        return list(self._durable), 0

    def write(self, record: bytes) -> None:
        self._pending.append(record)

    def sync(self, length: int, head_hash: bytes) -> None:
        self._durable.extend(self._pending)
        self._pending.clear()
        self._head = (length, head_hash)

    def read_head(self) -> Optional[Tuple[int, bytes]]:
        return self._head

    def crash(self) -> None:
        self._pending.clear()

    def dump(self) -> bytes:
        """The durable content in ledger-file format."""
        return b"".join(frame(r) for r in self._durable)

    def head_bytes(self) -> Optional[bytes]:
        if self._head is None:
            return None
        return encode_fields(encode_int(self._head[0]), self._head[1])


class FileStore(LedgerStore):
    """
    Ledger file: a sequence of canonical envelope encodings, each preceded by a
    4-byte big-endian length, plus a ``.head`` sidecar rewritten at each barrier.
    """

    def __init__(self, path: Union[str, Path], fsync: bool = True):
        self.path = Path(path)
        self.head_path = self.path.with_name(self.path.name + ".head")
        self._fsync = fsync
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    def load(self) -> Tuple[List[bytes], int]:
        return read_frames(self.path.read_bytes())

    def write(self, record: bytes) -> None:
        self._fh.write(frame(record))

    def sync(self, length: int, head_hash: bytes) -> None:
        self._fh.flush()
        if self._fsync:
            os.fsync(self._fh.fileno())
        tmp = self.head_path.with_name(self.head_path.name + ".tmp")
        tmp.write_bytes(encode_fields(encode_int(length), head_hash))
        os.replace(tmp, self.head_path)

    def read_head(self) -> Optional[Tuple[int, bytes]]:
        return read_head_file(self.head_path)

    def truncate(self, length: int) -> None:
        records, _ = self.load()
        size = sum(4 + len(r) for r in records[:length])
        self._fh.flush()
        with open(self.path, "r+b") as fh:
            fh.truncate(size)

    def close(self) -> None:
        self._fh.close()


def read_head_file(path: Path) -> Optional[Tuple[int, bytes]]:
    if not path.exists():
        return None
    try:
        length, head = decode_fields(path.read_bytes(), 2)
        return decode_int(length), head
    except EncodingError:
        logger.warning("unreadable head file %s", path)
        return None


# =========================================================================
# Ledger
# =========================================================================


class Ledger:
    """
    Append-only, per-manager event log with a single writer.

    Reads (``entries``, ``verify_chain``, ``replay``, subscription backlog) may run
    while the writer appends; they observe a consistent prefix.

    Args:
        ledger_id: One per state manager.
        authority: Identity checks for appends; ``None`` skips them (benchmarks).
        store: Durable storage; ``None`` keeps the ledger in memory only.
        durability: ``"each"`` syncs after every append; ``"batch"`` syncs every
            ``batch_size`` appends, which relaxes crash guarantees to the last barrier.
    """

    def __init__(
        self,
        ledger_id: str,
        authority: Optional[KeyAuthority] = None,
        store: Optional[LedgerStore] = None,
        durability: str = "each",
        batch_size: int = 64,
    ):
        if durability not in ("each", "batch"):
            raise ValueError("durability must be 'each' or 'batch'")
        self.ledger_id = ledger_id
        self.authority = authority
        self.store = store
        self.durability = durability
        self.batch_size = max(1, batch_size)
        self._entries: List[EventEnvelope] = []
        self._head = ZERO_HASH
        self._unsynced = 0
        self._lock = threading.RLock()
        self._subscribers: List[Subscription] = []

    @classmethod
    def open(
        cls,
        ledger_id: str,
        store: LedgerStore,
        authority: Optional[KeyAuthority] = None,
        **options,
    ) -> Ledger:
        """
        Recover a ledger from its store.

        Hash links are always checked; a partial trailing record (torn write) is
        dropped with a warning.

        Raises:
            CorruptLedger: if a durable record does not decode or does not chain.
        """
        ledger = cls(ledger_id, authority=authority, store=store, **options)
        records, leftover = store.load()
        if leftover:
            logger.warning(
                "ledger %s: dropping %d bytes of partial trailing record", ledger_id, leftover
            )
            store.truncate(len(records))
        head = ZERO_HASH
        for i, raw in enumerate(records):
            try:
                envelope = EventEnvelope.decode(raw)
            except EncodingError as exc:
                raise CorruptLedger(f"{ledger_id}: undecodable record {i}: {exc}", seq=i)
            if envelope.seq != i or envelope.prev_hash != head:
                raise CorruptLedger(f"{ledger_id}: broken chain at {i}", seq=i)
            head = digest(raw)
            ledger._entries.append(envelope)
        ledger._head = head
        if records:
            logger.info("ledger %s recovered %d entries", ledger_id, len(records))
        return ledger

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, seq: int) -> EventEnvelope:
        return self._entries[seq]

    def __iter__(self) -> Iterator[EventEnvelope]:
        return iter(self.entries)

    @property
    def entries(self) -> Tuple[EventEnvelope, ...]:
        """Consistent snapshot of the current prefix."""
        with self._lock:
            return tuple(self._entries)

    @property
    def head_hash(self) -> bytes:
        return self._head

    def next_signing_bytes(
        self, kind: str, payload: bytes, author: PartyId, key_epoch: int
    ) -> bytes:
        """What the writer must sign for its next append."""
        return signing_bytes(len(self._entries), self._head, kind, payload, author, key_epoch)

    def append(
        self,
        kind: str,
        payload: bytes,
        author: PartyId,
        signature: bytes,
        key_epoch: Optional[int] = None,
    ) -> Tuple[int, bytes]:
        """
        Validate and append one event.

        Args:
            kind: Short payload tag.
            payload: Canonically encoded domain event.
            author: Signing party (the owning manager's node operator).
            signature: Signature over :func:`signing_bytes` for the next seq.
            key_epoch: Identity epoch the signature was made at; defaults to the
                authority's current epoch.

        Returns:
            (seq, head_hash) after the append.

        Raises:
            BadSignature, Unauthorized: from the authority; nothing is written.
            EncodingError: if ``payload`` is not canonical.
        """
        unpack(payload)
        with self._lock:
            if key_epoch is None:
                key_epoch = self.authority.current_epoch() if self.authority else 0
            seq = len(self._entries)
            message = signing_bytes(seq, self._head, kind, payload, author, key_epoch)
            if self.authority is not None:
                self.authority.check_append(author, kind, key_epoch, message, signature)
            envelope = EventEnvelope(
                seq, self._head, kind, payload, author, key_epoch, signature,
                received_at=time.time(),
            )
            self._commit(envelope)
            return seq, self._head

    def append_signed(self, kind: str, body: Any, signer: Any) -> EventEnvelope:
        """
        Encode ``body``, sign the next entry as ``signer`` and append it.

        ``signer`` is anything with ``party_id`` and ``sign(message)``
        (see :class:`~green_bond_engine.crypto.Signer`).
        """
        payload = pack(body)
        with self._lock:
            epoch = self.authority.current_epoch() if self.authority else 0
            message = self.next_signing_bytes(kind, payload, signer.party_id, epoch)
            seq, _ = self.append(kind, payload, signer.party_id, signer.sign(message), epoch)
            return self._entries[seq]

    def append_trusted(self, kind: str, payload: bytes, author: PartyId, signature: bytes,
                       key_epoch: int = 0) -> Tuple[int, bytes]:
        """Append without authority checks (signatures verified upstream, e.g. by batch)."""
        with self._lock:
            envelope = EventEnvelope(
                len(self._entries), self._head, kind, payload, author, key_epoch, signature
            )
            self._commit(envelope)
            return envelope.seq, self._head

    def _commit(self, envelope: EventEnvelope) -> None:
        raw = envelope.encode()
        if self.store is not None:
            self.store.write(raw)
        self._entries.append(envelope)
        self._head = digest(raw)
        self._unsynced += 1
        if self.durability == "each" or self._unsynced >= self.batch_size:
            self.sync()
        for subscriber in list(self._subscribers):
            subscriber._push()

    def sync(self) -> None:
        """Durability barrier."""
        if self.store is not None and self._unsynced:
            self.store.sync(len(self._entries), self._head)
        self._unsynced = 0

    def subscribe(
        self, from_seq: int = 0, callback: Optional[Callable[[EventEnvelope], None]] = None
    ) -> Subscription:
        """
        Subscribe to entries ``>= from_seq``.

        With a ``callback`` the backlog is delivered immediately and every later
        append is pushed as it happens; without one, call ``poll()``.

        Raises:
            SeqOutOfRange: if ``from_seq`` is negative or beyond the current length.
        """
        if from_seq < 0 or from_seq > len(self._entries):
            raise SeqOutOfRange(f"from_seq {from_seq} outside 0..{len(self._entries)}")
        subscription = Subscription(self, from_seq, callback)
        with self._lock:
            self._subscribers.append(subscription)
        if callback is not None:
            subscription._push()
        return subscription

    def _unsubscribe(self, subscription: Subscription) -> None:
        with self._lock:
            if subscription in self._subscribers:
                self._subscribers.remove(subscription)

    def close(self) -> None:
        self.sync()
        if self.store is not None:
            self.store.close()

    def __repr__(self) -> str:
        return f"Ledger({self.ledger_id!r}, {len(self)} entries)"


class Subscription:
    """Exactly-once, in-order delivery of a ledger's entries from ``next_seq`` on."""

    def __init__(
        self,
        ledger: Ledger,
        from_seq: int,
        callback: Optional[Callable[[EventEnvelope], None]] = None,
    ):
        self.ledger = ledger
        self.next_seq = from_seq
        self._callback = callback
        self._delivering = False

    def poll(self) -> List[EventEnvelope]:
        """Everything appended since the last poll (backlog on first call)."""
        with self.ledger._lock:
            batch = self.ledger._entries[self.next_seq:]
            self.next_seq += len(batch)
        return list(batch)

    def _push(self) -> None:
        if self._callback is None or self._delivering:
            return
        self._delivering = True
        try:
            while True:
                batch = self.poll()
                if not batch:
                    break
                for envelope in batch:
                    self._callback(envelope)
        finally:
            self._delivering = False

    def close(self) -> None:
        self.ledger._unsubscribe(self)

    def __iter__(self) -> Iterator[EventEnvelope]:
        return iter(self.poll())


# =========================================================================
# Verification and replay
# =========================================================================


def verify_records(
    records: Sequence[Union[bytes, EventEnvelope]],
    key_lookup: Optional[KeyLookup],
    head: Optional[Tuple[int, bytes]] = None,
) -> ChainStatus:
    """
    Verify hash links and signatures over raw records or envelopes.

    Args:
        records: Encoded envelopes (as read from a file) or envelopes.
        key_lookup: ``(author, epoch) -> public key`` (time-indexed); ``None``
            checks hash links only.
        head: Optional (length, head_hash) from a head record; used to detect
            truncation and tampering of the final entry.
    """
    prev = ZERO_HASH
    for i, item in enumerate(records):
        if isinstance(item, EventEnvelope):
            envelope, raw = item, item.encode()
        else:
            raw = item
            try:
                envelope = EventEnvelope.decode(raw)
            except EncodingError as exc:
                return ChainStatus(False, i, i, f"undecodable record: {exc}")
        if envelope.seq != i:
            return ChainStatus(False, i, i, f"seq {envelope.seq} where {i} expected")
        if envelope.prev_hash != prev:
            return ChainStatus(False, i, i, "prev_hash does not match previous digest")
        if key_lookup is not None:
            public_key = key_lookup(envelope.author, envelope.key_epoch)
            if public_key is None:
                return ChainStatus(False, i, i, f"no active key for {envelope.author}")
            if not verify(public_key, envelope.signing_bytes(), envelope.signature):
                return ChainStatus(False, i, i, "signature does not verify")
        prev = digest(raw)
    length = len(records)
    truncated = False
    if head is not None:
        head_length, head_hash = head
        if head_length == length and head_hash != prev and length:
            return ChainStatus(False, length, length - 1, "head hash mismatch")
        if head_length < length:
            logger.info("head record lags the file (%d < %d)", head_length, length)
        elif head_length > length:
            truncated = True
    return ChainStatus(True, length, truncated=truncated)


def verify_chain(
    ledger: Union[Ledger, Sequence[EventEnvelope]], key_lookup: Optional[KeyLookup]
) -> ChainStatus:
    """
    Check every hash link and every signature.

    Returns:
        ChainStatus: ``Ok`` or ``Corrupt(first_bad_seq)``; corruption is a value,
        never an exception.
    """
    entries = ledger.entries if isinstance(ledger, Ledger) else ledger
    return verify_records(entries, key_lookup)


def replay(
    ledger: Union[Ledger, Sequence[EventEnvelope]],
    reducer: Reducer[S],
    key_lookup: Optional[KeyLookup] = None,
) -> S:
    """
    Recompute state from the log.

    Raises:
        CorruptLedger: if the chain does not verify.
    """
    entries = ledger.entries if isinstance(ledger, Ledger) else tuple(ledger)
    status = verify_records(entries, key_lookup)
    if not status:
        raise CorruptLedger(str(status), seq=status.first_bad_seq or 0)
    return reducer.fold(entries)


def verify_file(path: Union[str, Path], key_lookup: Optional[KeyLookup] = None) -> ChainStatus:
    """
    Verify a ledger file and its head record.

    A partial trailing record (a torn final write) is reported as corruption
    at the seq it would have had.
    """
    path = Path(path)
    records, leftover = read_frames(path.read_bytes())
    head = read_head_file(path.with_name(path.name + ".head"))
    status = verify_records(records, key_lookup, head)
    if status and leftover:
        return ChainStatus(False, len(records), len(records), f"{leftover} trailing bytes")
    return status


def read_ledger_file(
    path: Union[str, Path], key_lookup: Optional[KeyLookup] = None
) -> List[EventEnvelope]:
    """
    Entries of a verified ledger file.

    Raises:
        CorruptLedger
    """
    status = verify_file(path, key_lookup)
    if not status:
        raise CorruptLedger(str(status), seq=status.first_bad_seq or 0)
    records, _ = read_frames(Path(path).read_bytes())
    return [EventEnvelope.decode(raw) for raw in records]
