"""
Throughput benchmark for event processing on independent shards.

Each shard runs in its own process with its own ledger. Its workload is
generated from a seed: mostly price observations with interspersed payments,
spread over a handful of instruments, every event signed by its submitter.
Processing one event means checking its signature (depending on the mode),
decoding it, folding it into the shard state and appending it to the hash
chained ledger.

Signature modes:

- ``none``: no signature checks (replay of an already verified log)
- ``each``: one Ed25519 verification per event
- ``batch``: one verification per batch; the submitter signs the digest over
  the batch's event digests (see :func:`~green_bond_engine.crypto.sign_batch`)

Aggregate throughput is total events / (last shard finish - first shard start).
"""

from __future__ import annotations
import logging
import multiprocessing
import os
import platform
import random
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..codec import pack, unpack
from ..crypto import KeyPair, seed_from, sign_batch, verify, verify_batch
from ..ledger import Ledger


__all__ = [
    'SIG_MODES',
    'ITCH_REFERENCE',
    'Workload',
    'ShardResult',
    'BenchRow',
    'BenchReport',
    'make_events',
    'process_events',
    'run_bench',
]

logger = logging.getLogger(__name__)

SIG_MODES = ("none", "each", "batch")

ITCH_REFERENCE = (
    "For comparison: the Nasdaq ITCH market data feed carries up to 200,000 messages per second."
)

PRICE = "PriceObserved"
PAYMENT = "PaymentSettled"


@dataclass(frozen=True)
class Workload:
    """
    Args:
        events: Events per shard.
        payment_ratio: Share of payments; the rest are price observations.
        instruments: Instruments per shard.
        batch_size: Events covered by one signature in ``batch`` mode.
        seed: Workload seed; shard ``i`` uses ``seed + i``.
    """

    events: int = 100_000
    payment_ratio: float = 0.1
    instruments: int = 8
    batch_size: int = 256
    seed: int = 0


@dataclass
class _ShardState:
    prices: Dict[str, int] = field(default_factory=dict)
    paid: Dict[str, int] = field(default_factory=dict)

    def apply(self, kind: str, body: Dict[str, Any]) -> None:
        if kind == PRICE:
            self.prices[body["isin"]] = body["price"]
        else:
            self.paid[body["isin"]] = self.paid.get(body["isin"], 0) + body["amount"]


def make_events(workload: Workload, shard: int) -> Tuple[bytes, List[Tuple[str, bytes, bytes]]]:
    """
    The signed events of one shard.

    Returns:
        (submitter public key, [(kind, payload, signature)]). In batch mode the
        signature of the last event of each batch covers the whole batch and
        the others are empty.
    """
    rng = random.Random(workload.seed + shard)
    pair = KeyPair.from_seed(seed_from(f"bench-{shard}"))
    isins = [f"XS{shard:02d}{i:07d}0" for i in range(workload.instruments)]
    events = []
    for n in range(workload.events):
        isin = rng.choice(isins)
        if rng.random() < workload.payment_ratio:
            events.append((PAYMENT, pack({"isin": isin, "amount": rng.randint(1, 50_000),
                                          "n": n})))
        else:
            events.append((PRICE, pack({"isin": isin, "price": rng.randint(9_000, 11_000),
                                        "n": n})))
    return pair.public_key, [(kind, payload, pair.sign(payload)) for kind, payload in events]


def _batch_signed(pair: KeyPair, events: Sequence[Tuple[str, bytes, bytes]],
                  batch_size: int) -> List[Tuple[str, bytes, bytes]]:
    out = []
    for start in range(0, len(events), batch_size):
        chunk = events[start:start + batch_size]
        signature = sign_batch(pair, [payload for _, payload, _ in chunk])
        out.extend((kind, payload, b"") for kind, payload, _ in chunk[:-1])
        out.append((chunk[-1][0], chunk[-1][1], signature))
    return out


def process_events(
    events: Sequence[Tuple[str, bytes, bytes]],
    public_key: bytes,
    mode: str,
    batch_size: int = 256,
    author: str = "bench",
) -> Tuple[Ledger, int]:
    """
    Check, decode, fold and append ``events``.

    Returns:
        (ledger, events rejected for a bad signature).
    """
    ledger = Ledger(author, authority=None, durability="batch", batch_size=max(batch_size, 1))
    state = _ShardState()
    rejected = 0
    if mode == "batch":
        for start in range(0, len(events), batch_size):
            chunk = events[start:start + batch_size]
            if not verify_batch(public_key, [p for _, p, _ in chunk], chunk[-1][2]):
                rejected += len(chunk)
                continue
            for kind, payload, signature in chunk:
                state.apply(kind, unpack(payload))
                ledger.append_trusted(kind, payload, author, signature)
        return ledger, rejected
    check = mode == "each"
    for kind, payload, signature in events:
        if check and not verify(public_key, payload, signature):
            rejected += 1
            continue
        state.apply(kind, unpack(payload))
        ledger.append_trusted(kind, payload, author, signature)
    return ledger, rejected


# =========================================================================
# Shards
# =========================================================================


@dataclass
class ShardResult:
    shard: int
    events: int
    rejected: int
    started: float
    finished: float

    @property
    def seconds(self) -> float:
        return max(self.finished - self.started, 1e-9)


def _shard_worker(shard: int, workload: Workload, mode: str, barrier: Any, results: Any) -> None:
    public_key, events = make_events(workload, shard)
    if mode == "batch":
        pair = KeyPair.from_seed(seed_from(f"bench-{shard}"))
        events = _batch_signed(pair, events, workload.batch_size)
    barrier.wait()
    started = time.time()
    ledger, rejected = process_events(events, public_key, mode, workload.batch_size,
                                      author=f"shard-{shard}")
    finished = time.time()
    results.put((shard, len(ledger), rejected, started, finished))


def run_shards(workload: Workload, mode: str, shards: int) -> List[ShardResult]:
    """Run ``shards`` processes in parallel, started together."""
    if mode not in SIG_MODES:
        raise ValueError(f"mode must be one of {', '.join(SIG_MODES)}")
    context = multiprocessing.get_context("spawn")
    barrier = context.Barrier(shards)
    results = context.Queue()
    workers = [context.Process(target=_shard_worker, args=(i, workload, mode, barrier, results))
               for i in range(shards)]
    for worker in workers:
        worker.start()
    collected = [ShardResult(*results.get()) for _ in workers]
    for worker in workers:
        worker.join()
    return sorted(collected, key=lambda r: r.shard)


# =========================================================================
# Report
# =========================================================================


@dataclass
class BenchRow:
    mode: str
    shards: int
    events: int
    seconds: float
    per_shard: List[float] = field(default_factory=list)

    @property
    def events_per_sec(self) -> float:
        return self.events / self.seconds if self.seconds > 0 else 0.0

    def to_value(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "shards": self.shards,
            "events": self.events,
            "seconds": round(self.seconds, 6),
            "events_per_sec": round(self.events_per_sec, 1),
            "per_shard_events_per_sec": [round(x, 1) for x in self.per_shard],
        }


@dataclass
class BenchReport:
    workload: Workload
    rows: List[BenchRow] = field(default_factory=list)
    conditions: Dict[str, Any] = field(default_factory=dict)

    def row(self, mode: str, shards: int) -> Optional[BenchRow]:
        for row in self.rows:
            if row.mode == mode and row.shards == shards:
                return row
        return None

    def to_value(self) -> Dict[str, Any]:
        return {
            "workload": self.workload.__dict__,
            "conditions": self.conditions,
            "rows": [r.to_value() for r in self.rows],
            "reference": ITCH_REFERENCE,
        }

    def format(self) -> str:
        lines = [
            f"{'mode':<6} {'shards':>6} {'events':>10} {'seconds':>9} {'events/s':>14}",
        ]
        for r in self.rows:
            lines.append(f"{r.mode:<6} {r.shards:>6} {r.events:>10} {r.seconds:>9.3f} "
                         f"{r.events_per_sec:>14,.0f}")
        lines.append("")
        lines.append("conditions: " + ", ".join(f"{k}={v}" for k, v in self.conditions.items()))
        lines.append(ITCH_REFERENCE)
        return "\n".join(lines)


def _conditions(workload: Workload) -> Dict[str, Any]:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "cpus": os.cpu_count(),
        "payment_ratio": workload.payment_ratio,
        "batch_size": workload.batch_size,
        "durability": "memory, batch barrier",
    }


def run_bench(
    workload: Workload,
    modes: Sequence[str] = SIG_MODES,
    shard_counts: Sequence[int] = (1, 2, 4),
) -> BenchReport:
    """Measure every (mode, shard count) pair."""
    report = BenchReport(workload, conditions=_conditions(workload))
    for mode in modes:
        for shards in shard_counts:
            results = run_shards(workload, mode, shards)
            first = min(r.started for r in results)
            last = max(r.finished for r in results)
            row = BenchRow(mode, shards, sum(r.events for r in results), last - first,
                           [r.events / r.seconds for r in results])
            report.rows.append(row)
            logger.info("bench %s x%d: %.0f events/s", mode, shards, row.events_per_sec)
    return report
