"""Tests for the fault soak."""

import random
from pathlib import Path

import pytest

import green_bond_engine
from green_bond_engine.core import ConfigError
from green_bond_engine.harness.config import CRASH_PHASES, Topology, load_topology
from green_bond_engine.harness.soak import random_fault_plan, run_soak, soak_once


DATA = Path(green_bond_engine.__file__).parent / "data"


class TestFaultPlans:
    """Test random fault plan generation."""

    def setup_method(self):
        self.topology = load_topology(DATA / "topology.yaml")

    def test_reproducible(self):
        first = random_fault_plan(random.Random(4), self.topology, 1.0, 2.0)
        second = random_fault_plan(random.Random(4), self.topology, 1.0, 2.0)
        assert first == second

    def test_targets_and_times(self):
        nodes = {m.id for m in self.topology.managers} | {"tm-0"}
        for seed in range(30):
            plan = random_fault_plan(random.Random(seed), self.topology, 1.0, 2.0)
            assert 1 <= len(plan.faults) <= 6
            for fault in plan.faults:
                assert fault.target in nodes
                if fault.phase is not None:
                    assert fault.target == "tm-0" and fault.phase in CRASH_PHASES
                elif fault.fault != "Restart":
                    assert 1.0 <= fault.at < 3.0

    def test_every_timed_crash_is_restarted(self):
        for seed in range(30):
            plan = random_fault_plan(random.Random(seed), self.topology, 0.0, 1.0)
            faults = plan.faults
            for i, fault in enumerate(faults):
                if fault.fault == "Crash" and fault.at is not None:
                    restart = faults[i + 1]
                    assert (restart.fault, restart.target) == ("Restart", fault.target)
                    assert restart.at > fault.at

    def test_needs_investors(self):
        topology = Topology.model_validate({
            "managers": [{"id": "currency", "kind": "resource"}],
            "parties": [{"id": "GB", "roles": ["Issuer"]}],
        })
        with pytest.raises(ConfigError):
            soak_once(topology, 0)


@pytest.mark.slow
class TestSoak:
    """Random DvP and order flow under faults keeps every invariant."""

    def setup_method(self):
        self.topology = load_topology(DATA / "topology.yaml")

    def test_deterministic(self):
        first = soak_once(self.topology, 3, operations=12)
        second = soak_once(self.topology, 3, operations=12)
        assert first.to_value() == second.to_value()
        assert first.operations == 12

    def test_runs(self):
        report = run_soak(self.topology, runs=10, seed=100)
        assert report, [r.to_value() for r in report.failed]
        assert [r.seed for r in report.runs] == list(range(100, 110))
        summary = report.to_value()
        assert summary["runs"] == 10 and summary["failed"] == []
        assert summary["committed"] + summary["aborted"] > 0
        assert all(r.faults for r in report.runs)
