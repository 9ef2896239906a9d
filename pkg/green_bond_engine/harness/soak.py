"""
Fault soak: seeded random DvP workloads under random fault plans.

Each run builds a fresh simulated cluster, issues one instrument, places it
with the investors and then mixes operator DvPs with order flow while the
fault plan crashes, restarts, delays, duplicates and reorders traffic. At the
end every node is restarted and the cluster quiesced; the run then checks:

- conservation: every resource's supply equals its holdings
- atomicity: no transaction is committed at one participant and aborted at
  another
- finality: every transaction reported Committed is still committed at
  every participant it touched, and every commit seen mid-run survives
"""

from __future__ import annotations
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Set, Tuple

from ..calculus import make_green_bond
from ..core import ConfigError, EngineError, Role
from ..sexpr import format_spec
from ..trading import Side
from ..txn import TxnOutcome, TxnStatus
from .cluster import Cluster
from .config import CRASH_PHASES, FaultPlan, FaultSpec, Topology


__all__ = ['SoakRun', 'SoakReport', 'random_fault_plan', 'soak_once', 'run_soak']

logger = logging.getLogger(__name__)


@dataclass
class SoakRun:
    seed: int
    operations: int = 0
    committed: int = 0
    aborted: int = 0
    blocked: int = 0
    faults: List[str] = field(default_factory=list)
    violations: List[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return not self.violations

    def to_value(self) -> Dict[str, Any]:
        return {
            "seed": self.seed, "operations": self.operations, "committed": self.committed,
            "aborted": self.aborted, "blocked": self.blocked, "faults": self.faults,
            "violations": self.violations,
        }


@dataclass
class SoakReport:
    runs: List[SoakRun] = field(default_factory=list)

    def __bool__(self) -> bool:
        return all(self.runs)

    @property
    def failed(self) -> List[SoakRun]:
        return [r for r in self.runs if not r]

    def to_value(self) -> Dict[str, Any]:
        return {
            "runs": len(self.runs),
            "passed": bool(self),
            "committed": sum(r.committed for r in self.runs),
            "aborted": sum(r.aborted for r in self.runs),
            "blocked": sum(r.blocked for r in self.runs),
            "failed": [r.to_value() for r in self.failed],
        }


def _parties(topology: Topology) -> Tuple[str, List[str], str, str]:
    """(issuer, investors, verifier, calculator) for the soak instrument."""
    currency_issuers = {c.issuer for c in topology.currencies.values()}
    issuers = [p.id for p in topology.parties
               if Role.ISSUER in p.roles and p.id not in currency_issuers]
    investors = [p.id for p in topology.parties if Role.INVESTOR in p.roles]
    if not issuers or len(investors) < 2:
        raise ConfigError("the soak needs an instrument issuer and at least two investors")

    def first(role: Role) -> str:
        return next((p.id for p in topology.parties if role in p.roles), issuers[0])

    return (issuers[0], investors, first(Role.VERIFICATION_AGENT),
            first(Role.CALCULATION_AGENT))


def random_fault_plan(rng: random.Random, topology: Topology, start: float,
                      horizon: float) -> FaultPlan:
    """One to three faults on managers and coordinators inside ``[start, start + horizon)``."""
    managers = [m.id for m in topology.managers]
    coordinators = topology.coordinator_ids
    faults: List[FaultSpec] = []
    for _ in range(rng.randint(1, 3)):
        kind = rng.choice(["Crash", "PhaseCrash", "DelayMessages", "DuplicateNext",
                           "ReorderWindow"])
        at = start + rng.uniform(0, horizon)
        if kind == "PhaseCrash":
            faults.append(FaultSpec(fault="Crash", target=rng.choice(coordinators),
                                    phase=rng.choice(CRASH_PHASES)))
        elif kind == "Crash":
            target = rng.choice(managers + coordinators)
            faults.append(FaultSpec(fault="Crash", target=target, at=at))
            faults.append(FaultSpec(fault="Restart", target=target,
                                    at=at + rng.uniform(0.01, horizon)))
        elif kind == "DelayMessages":
            faults.append(FaultSpec(fault="DelayMessages", target=rng.choice(managers), at=at,
                                    span=rng.uniform(0.5, 4.0)))
        elif kind == "DuplicateNext":
            faults.append(FaultSpec(fault="DuplicateNext", target=rng.choice(managers), at=at))
        else:
            faults.append(FaultSpec(fault="ReorderWindow", target=rng.choice(managers), at=at,
                                    k=rng.randint(2, 6)))
    return FaultPlan(seed=rng.randrange(2**31), faults=faults)


def _setup(cluster: Cluster, issuer: str, investors: List[str], verifier: str,
           calculator: str, currency: str) -> str:
    spec = format_spec(make_green_bond(1_000_000, currency, 1, 0, [1_000_000]))
    isin, outcome = cluster.issue(issuer, spec, 1_000_000,
                                  parties={"verifier": verifier, "calculator": calculator})
    if not outcome:
        raise ConfigError(f"soak issuance failed: {outcome.reason}")
    share = 1_000_000 // (len(investors) + 1)
    for investor in investors:
        if investor != issuer:
            cluster.dvp(issuer, investor, isin, share, 1, currency)
    cluster.quiesce()
    return isin


def soak_once(topology: Topology, seed: int, operations: Optional[int] = None) -> SoakRun:
    """One seeded workload under one random fault plan."""
    rng = random.Random(seed)
    run = SoakRun(seed)
    issuer, investors, verifier, calculator = _parties(topology)
    currency = next(iter(topology.currencies), "EUR")
    traders = sorted(set(investors + [issuer]))
    cluster = Cluster(topology, seed=seed)
    try:
        isin = _setup(cluster, issuer, investors, verifier, calculator, currency)
        n = operations or rng.randint(10, 30)
        plan = random_fault_plan(rng, topology, cluster.driver.clock, horizon=0.02 * n)
        cluster.driver.schedule(plan)
        reported: List[TxnOutcome] = []
        seen: Set[Tuple[str, str]] = set()
        for _ in range(n):
            buyer, seller = rng.sample(traders, 2)
            qty, price = rng.randint(1, 5_000), rng.randint(95, 105)
            try:
                if rng.random() < 0.5:
                    outcome = cluster.dvp(seller, buyer, isin, qty, price, currency)
                    reported.append(outcome)
                    run.committed += int(outcome.committed)
                    run.aborted += int(not outcome.committed)
                else:
                    party, side = rng.choice([(buyer, Side.BUY), (seller, Side.SELL)])
                    cluster.order(party, side, isin, qty, price)
            except EngineError as exc:
                logger.debug("soak %d: %s", seed, exc)
            run.operations += 1
            seen |= cluster.committed_txns()
        cluster.settle()
        for node_id in sorted(cluster.driver.down):
            cluster.driver.restart(node_id)
        cluster.quiesce()
        run.blocked = len(cluster.resolve_blocked(commit=False))
        cluster.quiesce()
        run.faults = list(cluster.driver.faults)
        run.violations = _violations(cluster, reported, seen)
    finally:
        cluster.close()
    if run.violations:
        logger.error("soak seed %d: %s", seed, "; ".join(run.violations))
    return run


def _violations(cluster: Cluster, reported: List[TxnOutcome],
                seen: Set[Tuple[str, str]]) -> List[str]:
    problems = cluster.check_conservation() + cluster.atomicity_violations()
    final = cluster.committed_txns()
    for node_id, txn_id in sorted(seen - final):
        problems.append(f"finality: {txn_id} no longer committed at {node_id}")
    for outcome in reported:
        if not outcome.committed:
            continue
        for node_id in outcome.seqs:
            record = cluster.participants()[node_id].txn_record(outcome.txn_id)
            if record is None or record.status is not TxnStatus.COMMITTED:
                problems.append(f"finality: reported {outcome.txn_id} not committed at {node_id}")
    for node_id, status in cluster.ledger_status().items():
        if not status:
            problems.append(f"ledger {node_id}: {status}")
    return problems


def run_soak(topology: Topology, runs: int = 1000, seed: int = 0) -> SoakReport:
    report = SoakReport()
    for i in range(runs):
        report.runs.append(soak_once(topology, seed + i))
    logger.info("soak: %d runs, %d failed", runs, len(report.failed))
    return report
