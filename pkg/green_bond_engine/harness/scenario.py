"""
Scripted scenarios: run the steps of a :class:`~.config.ScenarioSpec` on a
:class:`~.cluster.Cluster`, check each step's expectations and report.

Steps refer to values produced by earlier steps with ``$name`` (a step's
``as`` binds the ISIN it issued or the order id it created).

Examples:
    >>> report = run_scenario(load_scenario("data/green_bond.scenario.yaml"),
    ...                       load_topology("data/topology.yaml"))
    >>> bool(report)
    True
"""

from __future__ import annotations
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

from ..calculus import make_green_bond
from ..core import AssertionFailed, ConfigError, EngineError
from ..messages import Reply
from ..monitor import RuleSpec
from ..sexpr import format_spec
from ..txn import TxnOutcome
from .cluster import Cluster
from .config import FaultPlan, ScenarioSpec, StepSpec, Topology


__all__ = [
    'Check',
    'StepReport',
    'ScenarioReport',
    'run_scenario',
    'run_dir',
    'DATA_DIR_ENV',
]

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "GREEN_BOND_DATA_DIR"


def run_dir(command: str, seed: int, base: Optional[Union[str, Path]] = None) -> Path:
    """``<data>/<command>-<UTC yyyymmddThhmmss>-seed<N>/``, created."""
    root = Path(base or os.environ.get(DATA_DIR_ENV) or "data")
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    path = root / f"{command}-{stamp}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# =========================================================================
# Report
# =========================================================================


@dataclass
class Check:
    """One expectation of one step."""

    what: str
    expected: Any
    actual: Any

    @property
    def passed(self) -> bool:
        return self.expected == self.actual

    def to_value(self) -> Dict[str, Any]:
        return {
            "what": self.what, "expected": self.expected, "actual": self.actual,
            "passed": self.passed,
        }


@dataclass
class StepReport:
    index: int
    op: str
    outcome: str
    error: str = ""
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_value(self) -> Dict[str, Any]:
        return {
            "index": self.index, "op": self.op, "outcome": self.outcome, "error": self.error,
            "passed": self.passed, "checks": [c.to_value() for c in self.checks],
        }


@dataclass
class ScenarioReport:
    """
    Everything a run produced. Truthy iff every check passed, every ledger
    verifies and no conservation or atomicity violation was found.

    Operator alerts (blocked transactions) are reported but do not fail a run.
    """

    scenario: str
    seed: int
    steps: List[StepReport] = field(default_factory=list)
    ledgers: Dict[str, str] = field(default_factory=dict)
    conservation: List[str] = field(default_factory=list)
    atomicity: List[str] = field(default_factory=list)
    operator_alerts: List[Dict[str, Any]] = field(default_factory=list)
    alerts: List[Dict[str, Any]] = field(default_factory=list)
    faults: List[str] = field(default_factory=list)
    refs: Dict[str, str] = field(default_factory=dict)
    files: Dict[str, str] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return (all(s.passed for s in self.steps)
                and all(v.startswith("Ok") for v in self.ledgers.values())
                and not self.conservation and not self.atomicity)

    @property
    def failures(self) -> List[str]:
        failed = [f"step {s.index} ({s.op}) {c.what}: expected {c.expected!r}, got {c.actual!r}"
                  for s in self.steps for c in s.checks if not c.passed]
        failed += [f"ledger {k}: {v}" for k, v in self.ledgers.items() if not v.startswith("Ok")]
        return failed + self.conservation + self.atomicity

    def check(self) -> None:
        """
        Raises:
            AssertionFailed: listing every failure.
        """
        if not self:
            raise AssertionFailed("; ".join(self.failures))

    def to_value(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "passed": bool(self),
            "steps": [s.to_value() for s in self.steps],
            "ledgers": self.ledgers,
            "conservation": self.conservation,
            "atomicity": self.atomicity,
            "operator_alerts": self.operator_alerts,
            "alerts": self.alerts,
            "faults": self.faults,
            "refs": self.refs,
            "files": self.files,
        }

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_value(), indent=2, sort_keys=True, default=str))
        return path


# =========================================================================
# Steps
# =========================================================================


def _resolve(value: Any, refs: Dict[str, str]) -> Any:
    if isinstance(value, str) and value.startswith("$"):
        try:
            return refs[value[1:]]
        except KeyError:
            raise ConfigError(f"unknown reference {value}") from None
    if isinstance(value, dict):
        return {_resolve(k, refs): _resolve(v, refs) for k, v in value.items()}
    if isinstance(value, list):
        return [_resolve(v, refs) for v in value]
    return value


def _issue(cluster: Cluster, p: Dict[str, Any]) -> Any:
    if "green_bond" in p:
        spec = format_spec(make_green_bond(**p["green_bond"]))
    elif "spec" in p:
        spec = p["spec"]
    else:
        raise ConfigError("issue needs 'spec' or 'green_bond'")
    docs = p.get("docs", "")
    isin, outcome = cluster.issue(
        p["issuer"], spec, p["units"], parties=p.get("parties"), isin=p.get("isin"),
        docs=docs.encode("utf-8") if isinstance(docs, str) else docs,
    )
    return isin, outcome


_OPS: Dict[str, Callable[[Cluster, Dict[str, Any]], Any]] = {
    "register": lambda c, p: c.register(
        p["party"], p["roles"], p.get("legal_name", ""), p.get("label", "")
    ),
    "issue": _issue,
    "issue_units": lambda c, p: c.issue_units(p["resource"], p["target"], p["amount"]),
    "transfer": lambda c, p: c.transfer(
        p["source"], p["target"], p["resource"], p["amount"], p.get("ref")
    ),
    "dvp": lambda c, p: c.dvp(
        p["seller"], p["buyer"], p["isin"], p["qty"], p["price"], p.get("currency")
    ),
    "observe": lambda c, p: c.observe(
        p["agent"], p["isin"], p["key"], p["value"], p.get("snapshot")
    ),
    "pay_coupon": lambda c, p: c.pay_coupon(p["isin"]),
    "redeem": lambda c, p: c.redeem(p["isin"]),
    "order": lambda c, p: c.order(
        p["party"], p["side"], p["isin"], p["qty"], p["price"], p.get("state_version")
    ),
    "cancel": lambda c, p: c.cancel(p["party"], p["order_id"]),
    "advance_time": lambda c, p: c.advance_time(p["isin"], p["to"]),
    "rotate_key": lambda c, p: c.rotate_key(p["party"], p["label"]),
    "notice": lambda c, p: c.notice(p["issuer"], p["isin"], p["tag"]),
}


def _outcome(result: Any) -> tuple:
    """(outcome, error code) of a step result."""
    if isinstance(result, TxnOutcome):
        return ("Committed", "") if result.committed else ("Aborted", result.reason)
    if isinstance(result, Reply):
        return ("Committed", "") if result.ok else ("Aborted", result.error or "")
    return "Committed", ""


def _run_step(cluster: Cluster, step: StepSpec, refs: Dict[str, str]) -> tuple:
    params = _resolve(step.params, refs)
    try:
        result = _OPS[step.op](cluster, params)
    except ConfigError:
        raise
    except EngineError as exc:
        logger.info("step %s failed: %s", step.op, exc)
        return Reply.failure(exc), params
    except KeyError as exc:
        raise ConfigError(f"step {step.op} is missing parameter {exc}") from None
    if step.op == "issue":
        isin, result = result
        params["isin"] = isin
        if step.name:
            refs[step.name] = isin
    elif step.op == "order" and isinstance(result, Reply) and result.ok:
        params["order_id"] = result.value["order_id"]
        if step.name:
            refs[step.name] = result.value["order_id"]
    return result, params


def _checks(cluster: Cluster, step: StepSpec, result: Any, params: Dict[str, Any],
            refs: Dict[str, str]) -> List[Check]:
    expect = step.expect
    outcome, error = _outcome(result)
    checks = []
    if expect.outcome is not None:
        checks.append(Check("outcome", expect.outcome, outcome))
    if expect.error is not None:
        checks.append(Check("error", expect.error, error))
    for party, resources in _resolve(expect.balances, refs).items():
        for resource, amount in resources.items():
            checks.append(Check(f"balance {party}/{resource}", amount,
                                cluster.balance(party, resource)))
    if expect.state_version is not None or expect.residual is not None or expect.status:
        try:
            state = cluster.state(params["isin"])
        except EngineError as exc:
            state = {"state_version": exc.code, "residual": exc.code, "status": exc.code}
        if expect.state_version is not None:
            checks.append(Check("state_version", expect.state_version, state["state_version"]))
        if expect.residual is not None:
            checks.append(Check("residual", expect.residual, state["residual"]))
        if expect.status is not None:
            checks.append(Check("status", expect.status, state["status"]))
    if expect.order_status is not None:
        order_id = params.get("order_id")
        actual = None
        if order_id is not None:
            actual = cluster.managers[order_id.rsplit(":o", 1)[0]].order(order_id).status.value
        checks.append(Check("order_status", expect.order_status, actual))
    return checks


def run_scenario(
    scenario: ScenarioSpec,
    topology: Topology,
    fault_plan: Optional[FaultPlan] = None,
    data_dir: Optional[Union[str, Path]] = None,
    rules: Optional[Sequence[RuleSpec]] = None,
    seed: Optional[int] = None,
) -> ScenarioReport:
    """
    Execute ``scenario`` deterministically and check every expectation.

    After each step the cluster is quiesced: background deliveries finish and
    in-doubt transactions are resolved. With ``data_dir`` every ledger, the
    monitor alerts and ``report.json`` are written there.

    Raises:
        ConfigError: on an invalid step (unknown reference, missing parameter).
    """
    seed = scenario.seed if seed is None else seed
    data_path = Path(data_dir) if data_dir is not None else None
    alerts_path = data_path / "alerts.jsonl" if data_path is not None else None
    cluster = Cluster(topology, data_dir=data_path, seed=seed, rules=rules,
                      alerts_path=alerts_path)
    report = ScenarioReport(scenario.name, seed)
    refs: Dict[str, str] = {}
    try:
        if fault_plan is not None:
            cluster.driver.schedule(fault_plan)
        for index, step in enumerate(scenario.steps):
            result, params = _run_step(cluster, step, refs)
            cluster.quiesce()
            outcome, error = _outcome(result)
            step_report = StepReport(index, step.op, outcome, error,
                                     _checks(cluster, step, result, params, refs))
            report.steps.append(step_report)
            logger.info("step %d %s: %s%s", index, step.op, outcome,
                        "" if step_report.passed else " (expectation failed)")
        cluster.quiesce()
        report.ledgers = {k: str(v) for k, v in cluster.ledger_status().items()}
        report.conservation = cluster.check_conservation()
        report.atomicity = cluster.atomicity_violations()
        report.operator_alerts = [a.to_value() for a in cluster.operator_alerts()]
        report.alerts = [a.to_value() for m in cluster.monitors.values() for a in m.alerts]
        report.faults = list(getattr(cluster.driver, "faults", []))
        report.refs = dict(refs)
    finally:
        cluster.close()
    if data_path is not None:
        report.files = {k: str(v) for k, v in cluster.ledger_files().items()}
        report.write(data_path / "report.json")
    return report
