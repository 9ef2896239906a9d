"""
A whole deployment built from a :class:`~.config.Topology`.

:class:`Cluster` creates the identity manager, one node per configured
manager, the coordinators and the bootstrap parties, wires them into a
driver (the deterministic :class:`~.sim.SimDriver` by default) and offers
client helpers that sign and send the requests a scenario needs. It also
checks the system-wide properties the soak and the scenario runner assert:
conservation of every resource, atomicity of every transaction and intact
hash chains.
"""

from __future__ import annotations
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from ..calculus import (
    IssuerNotice, Observation, ObservationMade, PaymentSettled, TimeAdvanced, Transfer,
    active_atoms, distribute,
)
from ..contract import ContractManager, lifecycle_event
from ..core import ConfigError, EngineError, InvalidParams, ManagerId, PartyId, Role
from ..crypto import KeyPair, Signer, seed_from
from ..identity import IdentityManager, rotation_message
from ..ledger import ChainStatus, FileStore, LedgerStore, MemoryStore, verify_chain
from ..messages import (
    AssertHolders, ContractAction, IssueAction, RegisterResource, Reply, SignedRequest,
    TransferAction, TxnAction,
)
from ..monitor import Monitor, RuleSpec
from ..resource import ResourceManager, TransferInstruction
from ..runtime import Directory
from ..trading import OrderDraft, Side, TradeManager
from ..txn import Coordinator, OperatorAlert, Participant, TxnOutcome, TxnStatus
from .config import Topology
from .sim import SimDriver
from .tcp import TcpDriver


__all__ = ['Cluster']

logger = logging.getLogger(__name__)


class Cluster:
    """
    Nodes, routing and bootstrap state of one topology.

    Args:
        topology: Validated topology.
        data_dir: Ledgers are written to ``<data_dir>/<node>.ledger`` when
            given; kept in memory otherwise.
        seed: Simulation seed (reordering faults).
        rules: Surveillance rules; one monitor is attached per trade manager.
        alerts_path: JSON Lines file the monitors append alerts to.
        driver: Defaults to a :class:`SimDriver` with the topology latency.

    Examples:
        >>> cluster = Cluster(load_topology("data/topology.yaml"))
        >>> isin, outcome = cluster.issue("GB", spec_text, units=1_000_000,
        ...                               parties={"verifier": "V", "calculator": "C"})
        >>> cluster.dvp("GB", "A", isin, 600_000, 1).committed
        True
    """

    def __init__(
        self,
        topology: Topology,
        data_dir: Optional[Union[str, Path]] = None,
        seed: int = 0,
        rules: Optional[Sequence[RuleSpec]] = None,
        alerts_path: Optional[Union[str, Path]] = None,
        driver: Optional[Any] = None,
    ):
        self.topology = topology
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if driver is None:
            driver = (TcpDriver(self._tcp_addresses(topology)) if topology.transport.kind == "tcp"
                      else SimDriver(topology.latency, seed))
        self.driver = driver
        self.ledger_options = {
            "durability": topology.durability, "batch_size": topology.batch_size,
        }
        self.operator = Signer.from_label(topology.operator)
        self.signers: Dict[PartyId, Signer] = {}
        self.stores: Dict[str, LedgerStore] = {}
        self.managers: Dict[ManagerId, Any] = {}
        self.coordinators: Dict[ManagerId, Coordinator] = {}
        self.monitors: Dict[ManagerId, Monitor] = {}
        self.rules = list(rules or [])
        self.alerts_path = alerts_path
        self._nonce = 0

        self.directory = Directory(coordinators=topology.coordinator_ids)
        for spec in topology.managers:
            table = {
                "resource": self.directory.resources,
                "contract": self.directory.contracts,
                "trade": self.directory.trading,
            }[spec.kind]
            for key in spec.shard:
                table[key] = spec.id

        self.identity = IdentityManager.genesis(
            self.operator, topology.operator_name, store=self._store("identity"),
            **self.ledger_options,
        )
        self.driver.register("identity", self.identity)
        for spec in topology.managers:
            self._add(spec.id, self._build(spec.id, fresh=True))
        known = self.directory.all_managers()
        for node_id in topology.coordinator_ids:
            coordinator = Coordinator(
                node_id, self.identity, self.operator, t_prep=topology.timeouts.t_prep,
                known_managers=known,
            )
            self.coordinators[node_id] = coordinator
            self.driver.register(node_id, coordinator)
        if hasattr(self.driver, "on_crash"):
            self.driver.on_crash = self._on_crash
            self.driver.on_restart = self._on_restart
        self._bootstrap()

    # =========================================================================
    # Construction
    # =========================================================================

    @staticmethod
    def _tcp_addresses(topology: Topology) -> Dict[str, str]:
        """Configured addresses; nodes without one bind an ephemeral loopback port."""
        nodes = ["identity"] + [m.id for m in topology.managers] + topology.coordinator_ids
        return {n: topology.transport.addresses.get(n, "127.0.0.1:0") for n in nodes}

    def _store(self, node_id: str) -> LedgerStore:
        if self.data_dir is None:
            store: LedgerStore = MemoryStore()
        else:
            store = FileStore(self.data_dir / f"{node_id}.ledger", fsync=False)
        self.stores[node_id] = store
        return store

    def _spec(self, node_id: str):
        for spec in self.topology.managers:
            if spec.id == node_id:
                return spec
        raise ConfigError(f"unknown node {node_id}")

    def _trade_options(self, spec) -> Dict[str, Any]:
        currency = spec.currency or next(iter(self.topology.currencies), "EUR")
        limits = {p.id: p.credit_limits[currency] for p in self.topology.parties
                  if currency in p.credit_limits}
        return {
            "currency": currency,
            "reject_stale": spec.reject_stale,
            "t_resolve": self.topology.timeouts.t_resolve,
            "credit_limits": limits,
        }

    def _build(self, node_id: str, fresh: bool) -> Any:
        """A manager node, new or recovered from its store."""
        spec = self._spec(node_id)
        store = self._store(node_id) if fresh or self.data_dir is not None else self.stores[node_id]
        options = dict(self.ledger_options)
        if spec.kind == "resource":
            options["reservation_ttl"] = spec.reservation_ttl
            if fresh:
                return ResourceManager(node_id, self.identity, self.operator, store, **options)
            return ResourceManager.open(node_id, self.identity, self.operator, store, **options)
        if spec.kind == "contract":
            options["directory"] = self.directory
            if self.data_dir is not None:
                options["docs_dir"] = self.data_dir / "docs"
            if fresh:
                return ContractManager(node_id, self.identity, self.operator, store, **options)
            return ContractManager.open(node_id, self.identity, self.operator, store, **options)
        options.update(self._trade_options(spec))
        if fresh:
            return TradeManager(node_id, self.identity, self.operator, self.directory, store,
                                **options)
        return TradeManager.open(node_id, self.identity, self.operator, self.directory, store,
                                 **options)

    def _add(self, node_id: str, manager: Any) -> None:
        self.managers[node_id] = manager
        self.driver.register(node_id, manager)
        if isinstance(manager, TradeManager) and self.rules:
            monitor = self.monitors.get(node_id)
            if monitor is None:
                monitor = Monitor(f"monitor-{node_id}", self.identity, self.rules,
                                  alerts_path=self.alerts_path)
                self.monitors[node_id] = monitor
            monitor.attach(manager)

    def _bootstrap(self) -> None:
        for party in self.topology.parties:
            signer = Signer.from_label(party.id, party.key_label)
            self.identity.register_party(
                party.legal_name or party.id, party.roles, signer.public_key, party_id=party.id
            )
            self.signers[party.id] = signer
        for currency, spec in self.topology.currencies.items():
            manager = self.managers[self.directory.resource_manager(currency)]
            manager.register_resource(currency, spec.issuer, spec.decimals)
        for party in self.topology.parties:
            for resource, amount in party.balances.items():
                if amount <= 0:
                    continue
                if resource not in self.topology.currencies:
                    raise ConfigError(f"opening balance of {party.id} in unknown {resource}")
                reply = self.issue_units(resource, party.id, amount)
                if not reply.ok:
                    raise ConfigError(
                        f"cannot fund {party.id} with {amount} {resource}: {reply.message}"
                    )
        logger.info("cluster up: %d managers, %d coordinators, %d parties",
                    len(self.managers), len(self.coordinators), len(self.topology.parties))

    # =========================================================================
    # Crash and restart
    # =========================================================================

    def _on_crash(self, node_id: str) -> None:
        store = self.stores.get(node_id)
        if isinstance(store, MemoryStore):
            store.crash()
        elif isinstance(store, FileStore):
            store.close()
        if node_id in self.monitors:
            self.monitors[node_id].detach()

    def _on_restart(self, node_id: str) -> Any:
        if node_id in self.coordinators:
            self.coordinators[node_id].restart()
            return None
        if node_id == "identity":
            if isinstance(self.stores["identity"], FileStore):
                self._store("identity")
            self.identity = IdentityManager.open(
                self.operator, self.stores["identity"], **self.ledger_options
            )
            for node in list(self.managers.values()) + list(self.coordinators.values()):
                node.identity = self.identity
            for monitor in self.monitors.values():
                monitor.identity = self.identity
            self.driver.nodes["identity"] = self.identity
            return None
        manager = self._build(node_id, fresh=False)
        self._add(node_id, manager)
        if isinstance(manager, TradeManager):
            return manager.resolve_pending()
        return manager.recover(self.topology.timeouts.t_resolve)

    # =========================================================================
    # Requests
    # =========================================================================

    def signer(self, party: PartyId) -> Signer:
        if party == self.topology.operator:
            return self.operator
        try:
            return self.signers[party]
        except KeyError:
            raise ConfigError(f"no key for party {party}") from None

    def request(self, kind: str, body: Dict[str, Any], party: PartyId) -> SignedRequest:
        self._nonce += 1
        return SignedRequest.create(kind, body, self.signer(party), self._nonce)

    def call(self, dst: str, message: Any) -> Reply:
        """Deliver one message; a lost reply becomes a ``Timeout`` error."""
        reply = self.driver.call(dst, message)
        if reply is None:
            return Reply(error="Timeout", message=f"no reply from {dst}")
        return reply

    def run(self, process: Any) -> Any:
        return self.driver.run(process)

    def settle(self) -> None:
        if hasattr(self.driver, "settle"):
            self.driver.settle()

    def atomic(
        self,
        actions: Sequence[TxnAction],
        initiator: Optional[PartyId] = None,
        txn_id: Optional[str] = None,
    ) -> TxnOutcome:
        """
        Run ``actions`` as one transaction on a coordinator chosen by hash.

        A coordinator that never answers yields an aborted-looking outcome with
        reason ``Timeout``; the participants resolve the real decision on
        recovery (see :meth:`quiesce`).
        """
        body: Dict[str, Any] = {"actions": [a.to_value() for a in actions]}
        if txn_id is not None:
            body["txn_id"] = txn_id
        request = self.request("ExecuteAtomic", body, initiator or self.topology.operator)
        txn_id = txn_id or "tx-" + request.request_id
        reply = self.call(self.directory.coordinator(txn_id), request)
        if not reply.ok:
            return TxnOutcome(txn_id, False, reason=reply.error or "Error")
        return TxnOutcome.from_value(reply.value)

    # =========================================================================
    # Instruments
    # =========================================================================

    def issue(
        self,
        issuer: PartyId,
        spec: str,
        units: int,
        parties: Optional[Dict[str, PartyId]] = None,
        isin: Optional[str] = None,
        docs: bytes = b"",
    ) -> Tuple[str, TxnOutcome]:
        """
        Issue an instrument atomically with its security: the contract instance,
        the security's registration and the minting of ``units`` to the issuer.

        Returns:
            (ISIN, outcome).
        """
        bound = {"issuer": issuer}
        bound.update(parties or {})
        body: Dict[str, Any] = {"spec": spec, "parties": bound, "docs": docs}
        if isin is not None:
            body["isin"] = isin
        else:
            body["nonce"] = self._nonce + 1
        cm = self.directory.contract_manager_for_issuer(issuer)
        event = self.call(cm, self.request("PrepareIssue", body, issuer)).unwrap()
        isin = event["isin"]
        securities = self.directory.resource_manager(isin)
        outcome = self.atomic([
            ContractAction(cm, isin, event),
            RegisterResource(securities, isin, issuer, 0),
            IssueAction(securities, isin, issuer, units),
        ], initiator=issuer)
        if outcome.committed or isin in self.managers[cm].state.instances:
            self.directory.isins[isin] = cm
        logger.info("issued %s for %s: %s", isin, issuer,
                    "Committed" if outcome else outcome.reason)
        return isin, outcome

    def contract_manager(self, isin: str) -> ContractManager:
        return self.managers[self.directory.contract_manager(isin)]

    def state(self, isin: str) -> Dict[str, Any]:
        return self.contract_manager(isin).query_state(isin)

    def holders(self, resource: str) -> Dict[PartyId, int]:
        return self.managers[self.directory.resource_manager(resource)].holders(resource)

    def pending_payments(self, isin: str) -> List[Dict[str, Any]]:
        return self.contract_manager(isin).pending_payments(isin)

    def _expects_snapshot(self, isin: str, key: str) -> bool:
        instance = self.contract_manager(isin).instance(isin)
        return any(isinstance(atom, Observation) and atom.key == key and atom.snapshot
                   for atom in active_atoms(instance.residual))

    def observe(
        self,
        agent: PartyId,
        isin: str,
        key: str,
        value: int,
        snapshot: Optional[bool] = None,
    ) -> Union[Reply, TxnOutcome]:
        """
        Submit an observation.

        An observation that records a holder snapshot commits atomically with
        an assertion of the current holders; any other applies directly on the
        contract manager. ``snapshot=None`` asks the residual which one it is.
        """
        cm = self.directory.contract_manager(isin)
        if snapshot is None:
            snapshot = self._expects_snapshot(isin, key)
        if not snapshot:
            event = ObservationMade(agent, key, value)
            return self.call(cm, self.request("LifecycleEvent", {
                "isin": isin, "event": event.to_value(),
            }, agent))
        holders = self.holders(isin)
        event = ObservationMade(agent, key, value, holders)
        return self.atomic([
            AssertHolders(self.directory.resource_manager(isin), isin, holders),
            ContractAction(cm, isin, lifecycle_event(event)),
        ], initiator=agent)

    def _payment(self, isin: str, snapshot: bool) -> Dict[str, Any]:
        for payment in self.pending_payments(isin):
            if payment["needs_snapshot"] == snapshot and payment["amount"] is not None:
                return payment
        raise InvalidParams(f"{isin} expects no such payment now")

    def _settle_payment(
        self, isin: str, payer: PartyId, transfers: List[Transfer],
        snapshot: Optional[Dict[PartyId, int]],
    ) -> TxnOutcome:
        actions: List[TxnAction] = []
        if snapshot is not None:
            actions.append(AssertHolders(self.directory.resource_manager(isin), isin, snapshot))
        for t in transfers:
            actions.append(TransferAction(
                self.directory.resource_manager(t.resource), t.source, t.target, t.resource,
                t.amount, ref=isin,
            ))
        event = PaymentSettled(payer, tuple(sorted(transfers)), snapshot, ref=isin)
        actions.append(ContractAction(self.directory.contract_manager(isin), isin,
                                      lifecycle_event(event)))
        return self.atomic(actions, initiator=payer)

    def pay_coupon(self, isin: str) -> TxnOutcome:
        """Settle the next computable payment (a coupon) with its contract update."""
        payment = self._payment(isin, snapshot=False)
        transfers = [Transfer(t["source"], t["target"], t["resource"], t["amount"])
                     for t in payment["transfers"]]
        return self._settle_payment(isin, payment["payer"], transfers, None)

    def redeem(self, isin: str) -> TxnOutcome:
        """Settle a pro-rata payment over the current holders (redemption)."""
        payment = self._payment(isin, snapshot=True)
        holders = self.holders(isin)
        shares = distribute(payment["amount"], holders, payment["payer"])
        transfers = [Transfer(payment["payer"], p, payment["resource"], s)
                     for p, s in shares.items()]
        return self._settle_payment(isin, payment["payer"], transfers, holders)

    def advance_time(self, isin: str, to: int) -> Reply:
        event = TimeAdvanced(self.topology.operator, to)
        return self.call(self.directory.contract_manager(isin), self.request(
            "LifecycleEvent", {"isin": isin, "event": event.to_value()}, self.topology.operator
        ))

    def notice(self, issuer: PartyId, isin: str, tag: str) -> Reply:
        event = IssuerNotice(issuer, tag)
        return self.call(self.directory.contract_manager(isin), self.request(
            "LifecycleEvent", {"isin": isin, "event": event.to_value()}, issuer
        ))

    # =========================================================================
    # Resources and trading
    # =========================================================================

    def issue_units(self, resource: str, target: PartyId, amount: int) -> Reply:
        """Mint ``amount`` of a currency to ``target``, signed by its issuer."""
        spec = self.topology.currencies.get(resource)
        if spec is None:
            raise ConfigError(f"{resource} is not a configured currency")
        return self.call(self.directory.resource_manager(resource), self.request(
            "IssueUnits", {"resource": resource, "target": target, "amount": amount}, spec.issuer
        ))

    def transfer(
        self, source: PartyId, target: PartyId, resource: str, amount: int,
        ref: Optional[str] = None,
    ) -> Reply:
        self._nonce += 1
        request = TransferInstruction(source, target, resource, amount, ref).sign(
            self.signer(source), self._nonce
        )
        return self.call(self.directory.resource_manager(resource), request)

    def dvp(
        self, seller: PartyId, buyer: PartyId, isin: str, qty: int, price: int,
        currency: Optional[str] = None,
    ) -> TxnOutcome:
        """Delivery versus payment, initiated by the market operator as agent."""
        currency = currency or next(iter(self.topology.currencies), "EUR")
        return self.atomic([
            TransferAction(self.directory.resource_manager(isin), seller, buyer, isin, qty),
            TransferAction(self.directory.resource_manager(currency), buyer, seller, currency,
                           qty * price),
        ])

    def balance(self, party: PartyId, resource: str) -> int:
        return self.managers[self.directory.resource_manager(resource)].balance(party, resource)

    def order(
        self, party: PartyId, side: Union[Side, str], isin: str, qty: int, price: int,
        state_version: Optional[int] = None,
    ) -> Reply:
        self._nonce += 1
        draft = OrderDraft(Side(side), isin, qty, price, party, state_version)
        return self.call(self.directory.trade_manager(isin),
                         draft.sign(self.signer(party), self._nonce))

    def cancel(self, party: PartyId, order_id: str) -> Reply:
        manager = order_id.rsplit(":o", 1)[0]
        return self.call(manager, self.request("CancelOrder", {"order_id": order_id}, party))

    # =========================================================================
    # Identity
    # =========================================================================

    def register(
        self, party_id: PartyId, roles: Iterable[Union[Role, str]], legal_name: str = "",
        label: str = "",
    ) -> Reply:
        signer = Signer.from_label(party_id, label)
        reply = self.call(self.directory.identity, self.request("RegisterParty", {
            "legal_name": legal_name or party_id,
            "roles": [Role(r).value for r in roles],
            "public_key": signer.public_key,
            "party_id": party_id,
        }, self.topology.operator))
        if reply.ok:
            self.signers[party_id] = signer
        return reply

    def rotate_key(self, party: PartyId, label: str) -> Reply:
        """Rotate ``party`` to the key derived from ``label``, signed by its current key."""
        old = self.signer(party)
        if old is self.operator:
            raise InvalidParams("node operator keys are not rotated by clients")
        pair = KeyPair.from_seed(seed_from(label))
        index = len(self.identity.party(party).keys)
        signature = old.sign(rotation_message(party, pair.public_key, index))
        reply = self.call(self.directory.identity, self.request("RotateKey", {
            "party_id": party, "new_key": pair.public_key, "signature": signature,
        }, party))
        if reply.ok:
            self.signers[party] = old.rotated(pair)
        return reply

    # =========================================================================
    # Recovery and checks
    # =========================================================================

    def participants(self) -> Dict[ManagerId, Participant]:
        return {k: m for k, m in self.managers.items() if isinstance(m, Participant)}

    def quiesce(self, rounds: int = 3) -> None:
        """
        Let background traffic finish, then have every live participant
        resolve its in-doubt transactions, every resource manager return its
        expired holds and every trade manager finish its settlements in flight.
        """
        for _ in range(rounds):
            self.settle()
            busy = False
            for node_id, manager in self.participants().items():
                if node_id in self.driver.down or not manager.in_doubt():
                    continue
                busy = True
                self.run(manager.recover(self.topology.timeouts.t_resolve))
            for node_id, manager in self.managers.items():
                if node_id not in self.driver.down and isinstance(manager, ResourceManager):
                    manager.expire_reservations()
            for node_id, manager in self.managers.items():
                if node_id in self.driver.down or not isinstance(manager, TradeManager):
                    continue
                if manager.state.settling() or manager.unreturned:
                    busy = True
                    self.run(manager.resolve_pending())
                    self.run(manager.retry_returns())
            if not busy:
                break
        self.settle()

    def operator_alerts(self) -> List[OperatorAlert]:
        alerts: List[OperatorAlert] = []
        for manager in self.participants().values():
            alerts.extend(manager.alerts)
        return alerts

    def resolve_blocked(self, commit: bool = False) -> List[str]:
        """Operator decision for every blocked transaction; returns their ids."""
        txn_ids = sorted({a.txn_id for a in self.operator_alerts()})
        for txn_id in txn_ids:
            for node_id, manager in self.participants().items():
                record = manager.txn_record(txn_id)
                if node_id in self.driver.down or record is None or record.status.terminal:
                    continue
                manager.force_decision(txn_id, commit)
        return txn_ids

    def committed_txns(self) -> Set[Tuple[ManagerId, str]]:
        return {
            (node_id, txn_id)
            for node_id, manager in self.participants().items()
            for txn_id, record in manager.state.txns.items()
            if record.status is TxnStatus.COMMITTED
        }

    def check_conservation(self) -> List[str]:
        """Every resource's supply equals the sum of its accounts (available + reserved)."""
        problems = []
        for node_id, manager in self.managers.items():
            if not isinstance(manager, ResourceManager):
                continue
            for resource, rtype in manager.state.resources.items():
                held = manager.total_holdings(resource)
                if held != rtype.supply:
                    problems.append(f"{node_id}/{resource}: supply {rtype.supply}, held {held}")
        return problems

    def atomicity_violations(self) -> List[str]:
        """Transactions committed at one participant and aborted at another."""
        statuses: Dict[str, Dict[ManagerId, TxnStatus]] = {}
        for node_id, manager in self.participants().items():
            for txn_id, record in manager.state.txns.items():
                statuses.setdefault(txn_id, {})[node_id] = record.status
        violations = []
        for txn_id, seen in sorted(statuses.items()):
            values = set(seen.values())
            if TxnStatus.COMMITTED in values and TxnStatus.ABORTED in values:
                violations.append(f"{txn_id}: " + ", ".join(
                    f"{k}={v.value}" for k, v in sorted(seen.items())
                ))
        return violations

    def ledger_status(self) -> Dict[str, ChainStatus]:
        """Hash-chain and signature check of every ledger against time-indexed keys."""
        result = {"identity": self.identity.verify()}
        for node_id, manager in sorted(self.managers.items()):
            result[node_id] = verify_chain(manager.ledger, self.identity.key_at)
        return result

    def ledger_files(self) -> Dict[str, Path]:
        return {k: s.path for k, s in self.stores.items() if isinstance(s, FileStore)}

    def close(self) -> None:
        for store in self.stores.values():
            try:
                store.close()
            except (OSError, ValueError, EngineError) as exc:
                logger.warning("closing store: %s", exc)
        if hasattr(self.driver, "close"):
            self.driver.close()
