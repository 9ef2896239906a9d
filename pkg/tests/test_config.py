"""Tests for topology, fault plan and scenario configuration."""

from pathlib import Path

import pytest

import green_bond_engine
from green_bond_engine.core import ConfigError, Role
from green_bond_engine.harness.config import (
    FaultPlan, FaultSpec, StepSpec, Topology, load_fault_plan, load_scenario, load_topology,
    read_yaml,
)
from pydantic import ValidationError


DATA = Path(green_bond_engine.__file__).parent / "data"

MINIMAL = {
    "managers": [
        {"id": "currency", "kind": "resource", "shard": ["EUR"]},
        {"id": "securities", "kind": "resource"},
    ],
    "parties": [{"id": "CB", "roles": ["Issuer"]}],
    "currencies": {"EUR": {"issuer": "CB"}},
}


def topology(**changes):
    data = dict(MINIMAL)
    data.update(changes)
    return Topology.model_validate(data)


class TestTopology:
    """Test topology validation."""

    def test_bundled(self):
        config = load_topology(DATA / "topology.yaml")
        assert config.coordinator_ids == ["tm-0"]
        assert [m.id for m in config.managers_of("resource")] == ["currency", "securities"]
        assert config.party("V").roles == [Role.VERIFICATION_AGENT]
        assert config.party("A").balances == {"EUR": 1_000_000}
        assert config.transport.kind == "inprocess"

    def test_defaults(self):
        config = topology()
        assert config.operator == "operator"
        assert config.timeouts.t_prep == 2.0
        assert config.durability == "each"
        assert config.managers[1].shard == ["*"]
        assert config.party("CB").key_label == "CB"

    def test_unknown_party(self):
        with pytest.raises(ConfigError):
            topology().party("Z")

    @pytest.mark.parametrize("changes", [
        {"managers": [{"id": "contracts", "kind": "contract"}]},
        {"managers": MINIMAL["managers"] + [{"id": "cash", "kind": "resource", "shard": ["EUR"]}]},
        {"managers": MINIMAL["managers"] + [{"id": "currency", "kind": "trade"}]},
        {"managers": MINIMAL["managers"] + [{"id": "tm-0", "kind": "trade"}]},
        {"parties": [{"id": "CB", "roles": ["Issuer"]}, {"id": "CB", "roles": ["Investor"]}]},
        {"parties": [{"id": "operator", "roles": ["Investor"]}]},
        {"currencies": {"EUR": {"issuer": "ECB"}}},
        {"parties": [{"id": "CB", "roles": ["Banker"]}]},
        {"coordinators": 0},
        {"durability": "never"},
        {"managers": MINIMAL["managers"] + [
            {"id": "contracts", "kind": "contract", "reservation_ttl": 5}]},
        {"managers": [{"id": "currency", "kind": "resource", "reservation_ttl": 0}]},
        {"surprise": True},
    ])
    def test_invalid(self, changes):
        with pytest.raises(ValidationError):
            topology(**changes)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_topology(tmp_path / "absent.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("managers: [unclosed")
        with pytest.raises(ConfigError):
            read_yaml(bad)
        bad.write_text("managers: []\n")
        with pytest.raises(ConfigError):
            load_topology(bad)


class TestFaultPlan:
    """Test fault specs."""

    def test_bundled(self):
        plan = load_fault_plan(DATA / "faults.yaml")
        assert plan.seed == 7
        assert [(f.fault, f.phase, f.at) for f in plan.faults] == [
            ("Crash", "after_votes", None), ("Restart", None, 30.0),
        ]

    def test_empty(self):
        assert FaultPlan().faults == []

    @pytest.mark.parametrize("fault", [
        {"fault": "Crash", "target": "tm-0"},
        {"fault": "Crash", "target": "tm-0", "at": 1.0, "phase": "after_votes"},
        {"fault": "Crash", "target": "tm-0", "phase": "during_lunch"},
        {"fault": "Restart", "target": "tm-0", "phase": "after_votes"},
        {"fault": "DelayMessages", "target": "currency", "at": 1.0},
        {"fault": "Partition", "target": "currency", "at": 1.0},
        {"fault": "Crash", "target": "currency", "at": -1.0},
    ])
    def test_invalid(self, fault):
        with pytest.raises(ValidationError):
            FaultSpec.model_validate(fault)


class TestScenario:
    """Test scenario steps."""

    def test_bundled(self):
        scenario = load_scenario(DATA / "green_bond.scenario.yaml")
        assert scenario.name == "green-bond-lifecycle"
        first = scenario.steps[0]
        assert (first.op, first.name) == ("issue", "bond")
        assert first.params["green_bond"]["n_coupons"] == 2
        assert first.expect.balances == {"GB": {"$bond": 1_000_000}}
        assert scenario.steps[-1].expect.residual == "(done)"

    def test_params_are_collected(self):
        step = StepSpec.model_validate({"op": "observe", "agent": "V", "isin": "$bond",
                                        "key": "co2_tons_1", "value": 5,
                                        "expect": {"state_version": 1}})
        assert step.params == {"agent": "V", "isin": "$bond", "key": "co2_tons_1", "value": 5}
        assert step.expect.state_version == 1
        assert step.name is None

    def test_unknown_op(self):
        with pytest.raises(ValidationError):
            StepSpec.model_validate({"op": "teleport"})

    def test_unknown_expectation(self):
        with pytest.raises(ValidationError):
            StepSpec.model_validate({"op": "redeem", "isin": "X", "expect": {"mood": "good"}})

    def test_bad_outcome(self, tmp_path):
        path = tmp_path / "scenario.yaml"
        path.write_text("steps:\n  - op: redeem\n    isin: X\n    expect: {outcome: Maybe}\n")
        with pytest.raises(ConfigError):
            load_scenario(path)
