"""
Green Bond Engine - trading and settlement of formally specified green bonds.

Features:
- Event-sourced state managers on hash-chained, signed ledgers
- Time-indexed party keys held by an identity manager
- Atomic delivery versus payment through two-phase commit
- Contract calculus with residuation for bond lifecycles
- Order matching pinned to the instrument's state version
- Trade surveillance on settled-trade feeds, live and ex post

Quick Start:
    from green_bond_engine.harness import Cluster, load_topology

    cluster = Cluster(load_topology("green_bond_engine/data/topology.yaml"))
    isin, outcome = cluster.issue("GB", spec_text, units=1_000_000,
                                  parties={"verifier": "V", "calculator": "C"})
    cluster.dvp("GB", "A", isin, 600_000, 1)

Command line:
    green-bond run-scenario topology.yaml green_bond.scenario.yaml
"""

__version__ = '0.1.0'
__license__ = 'MIT'


# Errors and roles
from .core import (
    Action,
    EngineError,
    KycStatus,
    Role,
)

# Ledgers and keys
from .crypto import KeyPair, Signer
from .ledger import ChainStatus, FileStore, Ledger, MemoryStore, verify_chain, verify_file
from .identity import IdentityManager

# Settlement
from .messages import Reply, SignedRequest, TxnMessage
from .txn import Coordinator, TxnOutcome
from .resource import ResourceManager

# Instruments and trading
from .calculus import Spec, make_green_bond, residuate
from .sexpr import format_spec, parse_spec
from .contract import ContractManager
from .trading import OrderDraft, Side, TradeManager

# Surveillance
from .monitor import Monitor, RuleSpec


__all__ = [
    # Version
    '__version__',
    '__license__',

    # Errors and roles
    'Action',
    'EngineError',
    'KycStatus',
    'Role',

    # Ledgers and keys
    'KeyPair',
    'Signer',
    'ChainStatus',
    'FileStore',
    'Ledger',
    'MemoryStore',
    'verify_chain',
    'verify_file',
    'IdentityManager',

    # Settlement
    'Reply',
    'SignedRequest',
    'TxnMessage',
    'Coordinator',
    'TxnOutcome',
    'ResourceManager',

    # Instruments and trading
    'Spec',
    'make_green_bond',
    'residuate',
    'format_spec',
    'parse_spec',
    'ContractManager',
    'OrderDraft',
    'Side',
    'TradeManager',

    # Surveillance
    'Monitor',
    'RuleSpec',
]
