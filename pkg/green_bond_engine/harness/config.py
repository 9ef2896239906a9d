"""
Declarative harness configuration: topology, fault plans and scenarios.

All three are YAML documents validated into pydantic models. Any problem
(unreadable file, YAML syntax, schema violation) surfaces as
:class:`~green_bond_engine.core.ConfigError`.

Examples:
    >>> topology = load_topology("data/topology.yaml")
    >>> scenario = load_scenario("data/green_bond.scenario.yaml")
    >>> plan = load_fault_plan("data/faults.yaml")
"""

from __future__ import annotations
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..core import ConfigError, Role


__all__ = [
    'PartySpec',
    'CurrencySpec',
    'ManagerSpec',
    'Timeouts',
    'TransportSpec',
    'Topology',
    'FaultSpec',
    'FaultPlan',
    'ExpectSpec',
    'StepSpec',
    'ScenarioSpec',
    'CRASH_PHASES',
    'STEP_OPS',
    'load_topology',
    'load_fault_plan',
    'load_scenario',
    'read_yaml',
]

M = TypeVar("M", bound=BaseModel)

CRASH_PHASES = ("before_prepare", "after_votes", "after_first_commit")

STEP_OPS = (
    "register", "issue", "issue_units", "transfer", "dvp", "observe", "pay_coupon",
    "redeem", "order", "cancel", "advance_time", "rotate_key", "notice",
)


# =========================================================================
# Topology
# =========================================================================


class PartySpec(BaseModel):
    """A bootstrap party. Keys derive from ``seed`` (the party id by default)."""

    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    legal_name: str = ""
    roles: List[Role]
    seed: Optional[str] = None
    balances: Dict[str, int] = Field(default_factory=dict)
    credit_limits: Dict[str, int] = Field(default_factory=dict)

    @property
    def key_label(self) -> str:
        return self.seed or self.id


class CurrencySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    issuer: str
    decimals: int = Field(default=2, ge=0)


class ManagerSpec(BaseModel):
    """
    One state manager.

    ``shard`` lists what the manager owns: resource ids for a resource
    manager, issuer ids for a contract manager and ISINs for a trade manager;
    ``"*"`` takes everything not assigned elsewhere. ``reservation_ttl`` (resource
    managers only) returns holds older than that many ledger entries each time
    the cluster quiesces.
    """

    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    kind: Literal["resource", "contract", "trade"]
    shard: List[str] = Field(default_factory=lambda: ["*"])
    currency: Optional[str] = None
    reject_stale: bool = False
    reservation_ttl: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check_options(self) -> ManagerSpec:
        if self.reservation_ttl is not None and self.kind != "resource":
            raise ValueError(f"reservation_ttl applies to resource managers, not {self.kind}")
        return self


class Timeouts(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t_prep: float = Field(default=2.0, gt=0)
    t_resolve: float = Field(default=10.0, gt=0)


class TransportSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["inprocess", "tcp"] = "inprocess"
    addresses: Dict[str, str] = Field(default_factory=dict)


class Topology(BaseModel):
    """
    Managers, coordinators and bootstrap parties of a deployment.

    Every resource id and every ISIN must map to exactly one manager; each
    manager kind may have at most one ``"*"`` shard.
    """

    model_config = ConfigDict(extra="forbid")

    operator: str = "operator"
    operator_name: str = "Market Operator"
    managers: List[ManagerSpec]
    coordinators: int = Field(default=1, ge=1)
    parties: List[PartySpec] = Field(default_factory=list)
    currencies: Dict[str, CurrencySpec] = Field(default_factory=dict)
    timeouts: Timeouts = Field(default_factory=Timeouts)
    transport: TransportSpec = Field(default_factory=TransportSpec)
    latency: float = Field(default=0.001, ge=0)
    durability: Literal["each", "batch"] = "each"
    batch_size: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def _check_sharding(self) -> Topology:
        ids = [m.id for m in self.managers]
        ids += [f"tm-{i}" for i in range(self.coordinators)] + ["identity"]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"duplicate node ids: {', '.join(duplicates)}")
        for kind in ("resource", "contract", "trade"):
            owners: Dict[str, str] = {}
            for manager in self.managers:
                if manager.kind != kind:
                    continue
                for key in manager.shard:
                    if key in owners:
                        raise ValueError(
                            f"{kind} shard {key!r} assigned to {owners[key]} and {manager.id}"
                        )
                    owners[key] = manager.id
        if not any(m.kind == "resource" for m in self.managers):
            raise ValueError("a topology needs at least one resource manager")
        party_ids = [p.id for p in self.parties] + [self.operator]
        if len(set(party_ids)) != len(party_ids):
            raise ValueError("party ids must be unique (and differ from the operator)")
        for currency, spec in self.currencies.items():
            if spec.issuer not in party_ids:
                raise ValueError(f"currency {currency} issued by unknown party {spec.issuer}")
        return self

    @property
    def coordinator_ids(self) -> List[str]:
        return [f"tm-{i}" for i in range(self.coordinators)]

    def managers_of(self, kind: str) -> List[ManagerSpec]:
        return [m for m in self.managers if m.kind == kind]

    def party(self, party_id: str) -> PartySpec:
        for party in self.parties:
            if party.id == party_id:
                return party
        raise ConfigError(f"unknown party {party_id}")


# =========================================================================
# Fault plans
# =========================================================================


class FaultSpec(BaseModel):
    """
    One injected fault, at a simulated time or (coordinators only) at a
    2PC phase of the next transaction it coordinates.
    """

    model_config = ConfigDict(extra="forbid")

    fault: Literal["Crash", "Restart", "DelayMessages", "DuplicateNext", "ReorderWindow"]
    target: str
    at: Optional[float] = Field(default=None, ge=0)
    phase: Optional[str] = None
    span: float = Field(default=0.0, ge=0)
    k: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _check_trigger(self) -> FaultSpec:
        if (self.at is None) == (self.phase is None):
            raise ValueError("a fault needs exactly one of 'at' and 'phase'")
        if self.phase is not None:
            if self.phase not in CRASH_PHASES:
                raise ValueError(f"phase must be one of {', '.join(CRASH_PHASES)}")
            if self.fault != "Crash":
                raise ValueError("only Crash faults can be tied to a 2PC phase")
        if self.fault == "DelayMessages" and self.span <= 0:
            raise ValueError("DelayMessages needs span > 0")
        return self


class FaultPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    faults: List[FaultSpec] = Field(default_factory=list)


# =========================================================================
# Scenarios
# =========================================================================


class ExpectSpec(BaseModel):
    """
    Post-conditions of a step.

    ``balances`` maps party -> resource -> available amount; ISIN-valued
    entries may use ``$name`` references.
    """

    model_config = ConfigDict(extra="forbid")

    balances: Dict[str, Dict[str, int]] = Field(default_factory=dict)
    state_version: Optional[int] = None
    residual: Optional[str] = None
    status: Optional[str] = None
    order_status: Optional[str] = None
    outcome: Optional[Literal["Committed", "Aborted"]] = None
    error: Optional[str] = None


class StepSpec(BaseModel):
    """
    One scripted action. Keys other than ``op``, ``as`` and ``expect`` are
    the action's parameters.

    Examples:
        >>> StepSpec.model_validate({"op": "observe", "agent": "V", "isin": "$bond",
        ...                          "key": "co2_tons_1", "value": 5})
    """

    model_config = ConfigDict(populate_by_name=True)

    op: Literal[STEP_OPS]  # type: ignore[valid-type]
    name: Optional[str] = Field(default=None, alias="as")
    params: Dict[str, Any] = Field(default_factory=dict)
    expect: ExpectSpec = Field(default_factory=ExpectSpec)

    @model_validator(mode="before")
    @classmethod
    def _collect_params(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        known = {"op", "as", "name", "params", "expect"}
        params = dict(data.get("params") or {})
        params.update({k: v for k, v in data.items() if k not in known})
        result = {k: v for k, v in data.items() if k in known}
        result["params"] = params
        return result


class ScenarioSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    seed: int = 0
    steps: List[StepSpec] = Field(default_factory=list)


# =========================================================================
# Loading
# =========================================================================


def read_yaml(path: Union[str, Path]) -> Any:
    """
    Raises:
        ConfigError: if the file cannot be read or parsed.
    """
    try:
        return yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _validate(model: Type[M], data: Any, source: str) -> M:
    try:
        return model.model_validate(data if data is not None else {})
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_topology(path: Union[str, Path]) -> Topology:
    return _validate(Topology, read_yaml(path), str(path))


def load_fault_plan(path: Union[str, Path]) -> FaultPlan:
    return _validate(FaultPlan, read_yaml(path), str(path))


def load_scenario(path: Union[str, Path]) -> ScenarioSpec:
    return _validate(ScenarioSpec, read_yaml(path), str(path))
