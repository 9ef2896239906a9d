"""
Command line entry point: ``green-bond``.

Commands:

- ``run-scenario TOPOLOGY SCENARIO``: run a scripted scenario, optionally under
  a fault plan, and check its expectations
- ``bench TOPOLOGY``: event-processing throughput per signature mode and
  shard count
- ``verify-ledger PATH --identity PATH``: hash-chain and signature check of a
  ledger file
- ``soak TOPOLOGY``: seeded random DvP workloads under random fault plans

Every command exits 0 iff all checks pass and writes its outputs under a
run-stamped folder of the data directory (``$GREEN_BOND_DATA_DIR``, default
``./data``).
"""

from __future__ import annotations
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Tuple

import click

from ..core import EngineError
from ..crypto import Signer
from ..identity import IdentityManager
from ..ledger import read_ledger_file, verify_file
from ..monitor import load_rules
from .bench import SIG_MODES, Workload, run_bench
from .config import load_fault_plan, load_scenario, load_topology
from .scenario import run_dir, run_scenario
from .soak import run_soak


__all__ = ['main']

logger = logging.getLogger(__name__)

LOG_FORMAT = "ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"

_existing = click.Path(exists=True, dir_okay=False, path_type=Path)


def _write_json(path: Path, value: object) -> None:
    path.write_text(json.dumps(value, indent=2, sort_keys=True) + "\n")


@click.group()
@click.option('--log-level', default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def main(log_level: str) -> None:
    """Green bond trading and settlement engine."""
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT, stream=sys.stderr)


@main.command('run-scenario')
@click.argument('topology', type=_existing)
@click.argument('scenario', type=_existing)
@click.option('--faults', type=_existing, default=None, help="Fault plan YAML.")
@click.option('--seed', type=int, default=None, help="Overrides the scenario seed.")
@click.option('--rules', type=_existing, default=None, help="Surveillance rules YAML.")
@click.option('--data-dir', type=click.Path(file_okay=False, path_type=Path), default=None)
def run_scenario_command(topology: Path, scenario: Path, faults: Optional[Path],
                         seed: Optional[int], rules: Optional[Path],
                         data_dir: Optional[Path]) -> None:
    """Run SCENARIO on a cluster built from TOPOLOGY."""
    try:
        spec = load_scenario(scenario)
        seed = spec.seed if seed is None else seed
        out = run_dir("run-scenario", seed, data_dir)
        report = run_scenario(
            spec,
            load_topology(topology),
            fault_plan=load_fault_plan(faults) if faults else None,
            data_dir=out,
            rules=load_rules(rules) if rules else None,
            seed=seed,
        )
    except EngineError as exc:
        raise click.ClickException(f"{exc.code}: {exc}")
    for step in report.steps:
        mark = "ok" if step.passed else "FAIL"
        click.echo(f"[{mark}] step {step.index} {step.op}: {step.outcome}"
                   + (f" ({step.error})" if step.error else ""))
    for failure in report.failures:
        click.echo(f"  {failure}")
    click.echo(f"report: {out / 'report.json'}")
    sys.exit(0 if report else 1)


@main.command('bench')
@click.argument('topology', type=_existing)
@click.option('--events', type=int, default=100_000, show_default=True,
              help="Events per shard.")
@click.option('--sig', 'modes', multiple=True, type=click.Choice(SIG_MODES),
              help="Signature mode; repeat for several (default: all).")
@click.option('--shards', multiple=True, type=click.IntRange(min=1),
              help="Shard count; repeat for several (default: 1, 2, 4).")
@click.option('--payment-ratio', type=click.FloatRange(0, 1), default=0.1, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--data-dir', type=click.Path(file_okay=False, path_type=Path), default=None)
def bench_command(topology: Path, events: int, modes: Tuple[str, ...], shards: Tuple[int, ...],
                  payment_ratio: float, seed: int, data_dir: Optional[Path]) -> None:
    """Measure event-processing throughput with TOPOLOGY's batch size."""
    try:
        config = load_topology(topology)
    except EngineError as exc:
        raise click.ClickException(f"{exc.code}: {exc}")
    workload = Workload(events=events, payment_ratio=payment_ratio,
                        batch_size=config.batch_size, seed=seed)
    report = run_bench(workload, modes or SIG_MODES, shards or (1, 2, 4))
    out = run_dir("bench", seed, data_dir)
    _write_json(out / "bench.json", report.to_value())
    click.echo(report.format())
    click.echo(f"report: {out / 'bench.json'}")


@main.command('verify-ledger')
@click.argument('path', type=_existing)
@click.option('--identity', 'identity_path', type=_existing, required=True,
              help="Identity ledger file holding the signers' keys.")
def verify_ledger_command(path: Path, identity_path: Path) -> None:
    """Check every hash link and signature of the ledger at PATH."""
    try:
        entries = read_ledger_file(identity_path)
        # any operator works for a read replica; it never signs
        identity = IdentityManager.replica(Signer.from_label("verifier"), entries)
    except EngineError as exc:
        click.echo(f"identity ledger {identity_path}: {exc.code}: {exc}")
        sys.exit(1)
    status = verify_file(path, identity.key_at)
    click.echo(f"{path}: {status}")
    sys.exit(0 if status else 1)


@main.command('soak')
@click.argument('topology', type=_existing)
@click.option('--runs', type=click.IntRange(min=1), default=1000, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--data-dir', type=click.Path(file_okay=False, path_type=Path), default=None)
def soak_command(topology: Path, runs: int, seed: int, data_dir: Optional[Path]) -> None:
    """Run seeded random DvP workloads under random fault plans."""
    try:
        report = run_soak(load_topology(topology), runs, seed)
    except EngineError as exc:
        raise click.ClickException(f"{exc.code}: {exc}")
    out = run_dir("soak", seed, data_dir)
    _write_json(out / "soak.json", report.to_value())
    summary = report.to_value()
    click.echo(f"{summary['runs']} runs: {summary['committed']} committed, "
               f"{summary['aborted']} aborted, {summary['blocked']} blocked, "
               f"{len(report.failed)} failed")
    for run in report.failed:
        click.echo(f"  seed {run.seed}: " + "; ".join(run.violations))
    click.echo(f"report: {out / 'soak.json'}")
    sys.exit(0 if report else 1)


if __name__ == "__main__":
    main()
