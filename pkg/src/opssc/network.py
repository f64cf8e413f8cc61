"""In-process multi-organization network: endorse, order, commit.

Two scheduler modes share the same core. In ``deterministic`` mode nothing
happens until the caller drives the network (``flush``/``run_until_quiescent``)
and every choice is derived from the seed. In ``threads`` mode an orderer
thread cuts blocks on a batch timeout and each subscription consumes its
events on its own thread.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .ledger import (
    VALID,
    Block,
    Endorsement,
    LedgerReplica,
    RWSet,
    SignedTransaction,
    TxKind,
    WorldState,
)

log = logging.getLogger(__name__)

ROLES = frozenset({"endorser", "committer", "orderer"})
DEFAULT_MAX_TXS_PER_BLOCK = 10

ENDORSEMENT_POLICY = "endorsement_policy"
NON_DETERMINISTIC = "non_deterministic"
NO_SUCH_SC = "no_such_sc"


class ConfigError(ValueError):
    """Invalid network topology."""


class ChaincodeError(Exception):
    """Raised by SC code; ``reason`` becomes the rejection reason."""

    def __init__(self, reason: str, message: str = ""):
        super().__init__(f"{reason}: {message}" if message else reason)
        self.reason = reason
        self.message = message


class EndorsementRefused(Exception):
    def __init__(self, node_id: str, reason: str, message: str = ""):
        super().__init__(f"{node_id} refused: {reason} {message}".rstrip())
        self.node_id = node_id
        self.reason = reason
        self.message = message


@dataclass(frozen=True)
class ConsensusPolicy:
    """m-of-n over a set of required organizations."""

    required_orgs: frozenset[str]
    quorum: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "required_orgs", frozenset(self.required_orgs))
        if not self.required_orgs:
            raise ValueError("consensus policy needs at least one org")
        if not 1 <= self.quorum <= len(self.required_orgs):
            raise ValueError(
                f"quorum {self.quorum} outside 1..{len(self.required_orgs)}")

    @classmethod
    def all_of(cls, orgs: Iterable[str]) -> "ConsensusPolicy":
        orgs = frozenset(orgs)
        return cls(orgs, len(orgs))

    @classmethod
    def m_of(cls, m: int, orgs: Iterable[str]) -> "ConsensusPolicy":
        return cls(frozenset(orgs), m)

    def to_dict(self) -> dict:
        return {"orgs": sorted(self.required_orgs), "quorum": self.quorum}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConsensusPolicy":
        return cls(frozenset(d["orgs"]), int(d["quorum"]))


@dataclass
class Node:
    node_id: str
    org_id: str
    roles: frozenset[str]
    workdir: Path
    installed_scs: set[tuple[str, str]] = field(default_factory=set)
    online: bool = True

    def __post_init__(self) -> None:
        self.roles = frozenset(self.roles)
        if not self.roles or not self.roles <= ROLES:
            raise ConfigError(f"node {self.node_id}: roles must be a non-empty subset of {sorted(ROLES)}")
        self.workdir = Path(self.workdir)

    def has_role(self, role: str) -> bool:
        return role in self.roles


@dataclass
class Organization:
    org_id: str
    nodes: list[str]
    agent: Optional[str] = None


@dataclass(frozen=True)
class ChannelInfo:
    """Static membership view handed to SC code (org -> ordered node ids)."""

    orgs: Mapping[str, tuple[str, ...]]
    roles: Mapping[str, frozenset[str]]
    default_policy: ConsensusPolicy


def validate_endorsements(policy: ConsensusPolicy, endorsements: Iterable[Endorsement]) -> bool:
    """True iff at least ``quorum`` distinct required orgs endorsed and all
    counted endorsements carry the same rw digest."""
    by_org: dict[str, set[bytes]] = {}
    for e in endorsements:
        if e.org_id in policy.required_orgs:
            by_org.setdefault(e.org_id, set()).add(e.rw_digest)
    digests = set().union(*by_org.values()) if by_org else set()
    return len(digests) <= 1 and len(by_org) >= policy.quorum


class TxContext:
    """State stub for one SC simulation against a snapshot.

    Reads record the version seen, writes are buffered, nothing touches the
    snapshot.
    """

    def __init__(self, state: WorldState, node: Node, channel: ChannelInfo,
                 proposer_org: str, logical_time: int):
        self._state = state
        self.node = node
        self.channel = channel
        self.proposer_org = proposer_org
        self.logical_time = logical_time
        self._reads: dict[str, int] = {}
        self._writes: dict[str, bytes] = {}
        self._events: list[tuple[str, bytes]] = []

    def get_state(self, key: str) -> Optional[bytes]:
        if key in self._writes:
            return self._writes[key]
        self._reads.setdefault(key, self._state.version(key))
        return self._state.get(key)

    def put_state(self, key: str, value: bytes) -> None:
        self._writes[key] = bytes(value)

    def scan(self, prefix: str) -> list[tuple[str, bytes]]:
        # range reads are not MVCC-checked
        merged = dict(self._state.scan(prefix))
        merged.update((k, v) for k, v in self._writes.items() if k.startswith(prefix))
        return sorted(merged.items())

    def emit(self, name: str, payload: bytes) -> None:
        self._events.append((name, bytes(payload)))

    def rw_set(self, response: bytes) -> RWSet:
        return RWSet(
            reads=tuple(self._reads.items()),
            writes=tuple(self._writes.items()),
            events=tuple(self._events),
            response=response,
        )


class Chaincode:
    """Base for native SC handlers; functions are ``fn_<name>`` methods."""

    name = ""
    system = False

    def invoke(self, ctx: TxContext, function: str, args: Sequence[str]) -> bytes:
        handler = getattr(self, "fn_" + function.replace("-", "_"), None)
        if handler is None:
            raise ChaincodeError("no_such_function", f"{self.name}.{function}")
        out = handler(ctx, list(args))
        return b"" if out is None else out

    def endorsement_policy(self, function: str, args: Sequence[str],
                           state: WorldState) -> Optional[ConsensusPolicy]:
        """Policy this call must satisfy; None means the network default."""
        return None


class LifecycleChaincode(Chaincode):
    """Deploy/upgrade of user SCs. Active versions live under ``lscc/``."""

    name = "lscc"
    system = True

    def fn_deploy(self, ctx: TxContext, args: list[str]) -> bytes:
        name, version = args
        if (name, version) not in ctx.node.installed_scs:
            raise ChaincodeError("not_installed", f"{name} {version} on {ctx.node.node_id}")
        current = ctx.get_state(f"lscc/{name}")
        if current is not None and current.decode() == version:
            raise ChaincodeError("same_version", f"{name} is already at {version}")
        ctx.put_state(f"lscc/{name}", version.encode())
        return version.encode()

    def fn_active(self, ctx: TxContext, args: list[str]) -> bytes:
        return ctx.get_state(f"lscc/{args[0]}") or b""


class KeyValueChaincode(Chaincode):
    """Stand-in body for user SCs deployed through the lifecycle."""

    def __init__(self, name: str):
        self.name = name

    def fn_put(self, ctx: TxContext, args: list[str]) -> bytes:
        key, value = args
        ctx.put_state(f"{self.name}/{key}", value.encode())
        return b""

    def fn_get(self, ctx: TxContext, args: list[str]) -> bytes:
        return ctx.get_state(f"{self.name}/{args[0]}") or b""


@dataclass(frozen=True)
class TxResult:
    status: str  # "committed" | "rejected"
    reason: str = ""
    block_index: int = -1
    tx_id: bytes = b""
    events: tuple[tuple[str, bytes], ...] = ()
    response: bytes = b""
    message: str = ""

    @property
    def committed(self) -> bool:
        return self.status == "committed"

    @classmethod
    def rejected(cls, reason: str, message: str = "", tx_id: bytes = b"") -> "TxResult":
        return cls("rejected", reason=reason, message=message, tx_id=tx_id)


@dataclass(frozen=True)
class DeliveredEvent:
    org_id: str
    block_index: int
    tx_id: bytes
    name: str
    payload: bytes


class Subscription:
    def __init__(self, org_id: str, callback: Callable[[DeliveredEvent], None],
                 accept: Optional[Callable[[DeliveredEvent], bool]] = None):
        self.org_id = org_id
        self.callback = callback
        self.accept = accept or (lambda ev: True)
        self.queue: deque[DeliveredEvent] = deque()
        self.cond = threading.Condition()
        self.busy = False
        self.thread: Optional[threading.Thread] = None
        self.active = True


@dataclass
class _Pending:
    tx: SignedTransaction
    future: Future


class Network:
    def __init__(
        self,
        orgs: Sequence[Organization],
        nodes: Sequence[Node],
        default_policy: ConsensusPolicy,
        *,
        max_txs_per_block: int = DEFAULT_MAX_TXS_PER_BLOCK,
        mode: str = "deterministic",
        seed: int = 0,
        batch_timeout: float = 0.002,
    ):
        self.orgs = {o.org_id: o for o in orgs}
        self.nodes = {n.node_id: n for n in nodes}
        self.default_policy = default_policy
        self.max_txs_per_block = max_txs_per_block
        self.mode = mode
        self.seed = seed
        self.batch_timeout = batch_timeout
        self._check_topology()

        self.channel = ChannelInfo(
            orgs={o.org_id: tuple(o.nodes) for o in orgs},
            roles={n.node_id: n.roles for n in nodes},
            default_policy=default_policy,
        )
        self.replicas: dict[str, LedgerReplica] = {
            n.node_id: LedgerReplica(n.node_id) for n in nodes if n.has_role("committer")
        }
        self._replica_locks = {nid: threading.RLock() for nid in self.replicas}
        self.chaincodes: dict[str, Chaincode] = {}
        self.register_chaincode(LifecycleChaincode())

        self.clock = 0
        self.rng = random.Random(seed)
        # test hook: probability of delivering an event a second time
        self.redelivery_rate = 0.0
        self.delivery_log: list[tuple[str, bytes]] = []

        self._lock = threading.RLock()
        self._pending: deque[_Pending] = deque()
        self._order_cond = threading.Condition(self._lock)
        self._subs: dict[str, Subscription] = {}
        self._orderer_thread: Optional[threading.Thread] = None
        self._running = False

    # ---- topology -------------------------------------------------------

    def _check_topology(self) -> None:
        if not self.orgs:
            raise ConfigError("network needs at least one organization")
        if not any(n.has_role("orderer") for n in self.nodes.values()):
            raise ConfigError("network needs at least one orderer node")
        for org in self.orgs.values():
            if not org.nodes:
                raise ConfigError(f"org {org.org_id} has no nodes")
            for nid in org.nodes:
                node = self.nodes.get(nid)
                if node is None or node.org_id != org.org_id:
                    raise ConfigError(f"org {org.org_id} lists unknown node {nid}")
        for node in self.nodes.values():
            if node.org_id not in self.orgs:
                raise ConfigError(f"node {node.node_id} belongs to unknown org {node.org_id}")
        dirs = sorted((n.workdir.resolve(), n.node_id) for n in self.nodes.values())
        for (a, na), (b, nb) in zip(dirs, dirs[1:]):
            if a == b or a in b.parents:
                raise ConfigError(f"workdirs of {na} and {nb} overlap")
        for p in self.default_policy.required_orgs:
            if p not in self.orgs:
                raise ConfigError(f"consensus policy names unknown org {p}")

    def register_chaincode(self, cc: Chaincode) -> None:
        self.chaincodes[cc.name] = cc

    def org_nodes(self, org_id: str) -> list[Node]:
        return [self.nodes[nid] for nid in self.orgs[org_id].nodes]

    def anchor_replica(self, org_id: str) -> LedgerReplica:
        """The replica an org's clients and agent talk to."""
        for node in self.org_nodes(org_id):
            if node.node_id in self.replicas:
                return self.replicas[node.node_id]
        raise ConfigError(f"org {org_id} has no committing node")

    def set_online(self, target: str, online: bool) -> None:
        """Take a node, or every node of an org, on/offline."""
        ids = self.orgs[target].nodes if target in self.orgs else [target]
        for nid in ids:
            self.nodes[nid].online = online

    def query(self, org_id: str, sc_name: str, function: str, args: Sequence[str]) -> bytes:
        """Evaluate an SC function on the org's anchor replica without a tx."""
        replica = self.anchor_replica(org_id)
        node = self.nodes[replica.owner_node]
        with self._replica_locks[replica.owner_node]:
            ctx = TxContext(replica.state, node, self.channel, org_id, self.clock)
            return self._resolve_chaincode(sc_name, replica.state).invoke(ctx, function, args)

    def _resolve_chaincode(self, sc_name: str, state: WorldState) -> Chaincode:
        cc = self.chaincodes.get(sc_name)
        if cc is not None and cc.system:
            return cc
        if state.get(f"lscc/{sc_name}") is None:
            raise ChaincodeError(NO_SUCH_SC, sc_name)
        return cc if cc is not None else KeyValueChaincode(sc_name)

    def _tick(self) -> int:
        with self._lock:
            self.clock += 1
            return self.clock

    # ---- endorse --------------------------------------------------------

    def endorse(self, node_id: str, sc_name: str, function: str, args: Sequence[str],
                proposer_org: str, logical_time: int) -> tuple[Endorsement, RWSet]:
        node = self.nodes[node_id]
        if not node.has_role("endorser"):
            raise EndorsementRefused(node_id, "not_endorser")
        if not node.online:
            raise EndorsementRefused(node_id, "offline")
        replica = self.replicas.get(node_id)
        if replica is None:
            raise EndorsementRefused(node_id, "no_ledger")
        with self._replica_locks[node_id]:
            state = replica.state.copy()
        try:
            cc = self._resolve_chaincode(sc_name, state)
            if not cc.system:
                active = state.get(f"lscc/{sc_name}").decode()
                if (sc_name, active) not in node.installed_scs:
                    raise ChaincodeError(NO_SUCH_SC, f"{sc_name} {active} not installed on {node_id}")
            ctx = TxContext(state, node, self.channel, proposer_org, logical_time)
            response = cc.invoke(ctx, function, args)
        except ChaincodeError as exc:
            raise EndorsementRefused(node_id, exc.reason, exc.message) from exc
        except Exception as exc:  # SC bug: wrap, never crash the peer
            raise EndorsementRefused(node_id, "sc_error", repr(exc)) from exc
        rw = ctx.rw_set(response)
        return Endorsement(node.org_id, rw.digest()), rw

    def _pick_endorser(self, org_id: str) -> Optional[str]:
        for node in self.org_nodes(org_id):
            if node.has_role("endorser") and node.online:
                return node.node_id
        return None

    def policy_for(self, sc_name: str, function: str, args: Sequence[str],
                   state: WorldState) -> ConsensusPolicy:
        cc = self.chaincodes.get(sc_name)
        policy = cc.endorsement_policy(function, args, state) if cc else None
        return policy or self.default_policy

    # ---- submit ---------------------------------------------------------

    def submit(self, client_org: str, sc_name: str, function: str, args: Sequence[str],
               policy: Optional[ConsensusPolicy] = None,
               kind: TxKind = TxKind.INVOKE) -> Future:
        """Collect endorsements and hand the tx to the orderer.

        Returns a future resolving to a :class:`TxResult`. Endorsement-stage
        rejections resolve immediately.
        """
        fut: Future = Future()
        args = [str(a) for a in args]
        if client_org not in self.orgs:
            fut.set_result(TxResult.rejected("no_such_org", client_org))
            return fut
        logical_time = self._tick()
        anchor = self.anchor_replica(client_org)
        if policy is None:
            with self._replica_locks[anchor.owner_node]:
                try:
                    policy = self.policy_for(sc_name, function, args, anchor.state)
                except ChaincodeError as exc:
                    fut.set_result(TxResult.rejected(exc.reason, exc.message))
                    return fut
        missing = policy.required_orgs - self.orgs.keys()
        if missing:
            fut.set_result(TxResult.rejected("no_such_org", ",".join(sorted(missing))))
            return fut

        endorsements: list[Endorsement] = []
        rw_sets: list[RWSet] = []
        refusals: list[EndorsementRefused] = []
        for org_id in sorted(policy.required_orgs):
            node_id = self._pick_endorser(org_id)
            if node_id is None:
                continue
            try:
                e, rw = self.endorse(node_id, sc_name, function, args, client_org, logical_time)
            except EndorsementRefused as exc:
                refusals.append(exc)
                continue
            endorsements.append(e)
            rw_sets.append(rw)

        sc_refusals = [r for r in refusals if r.reason not in ("offline", "not_endorser", "no_ledger")]
        if len({e.rw_digest for e in endorsements}) > 1:
            fut.set_result(TxResult.rejected(NON_DETERMINISTIC))
            return fut
        if not validate_endorsements(policy, endorsements):
            if sc_refusals and not endorsements:
                r = sc_refusals[0]
                fut.set_result(TxResult.rejected(r.reason, r.message))
            else:
                fut.set_result(TxResult.rejected(ENDORSEMENT_POLICY))
            return fut

        tx = SignedTransaction.create(kind, sc_name, function, args, client_org,
                                      logical_time, rw_sets[0], endorsements)
        with self._order_cond:
            self._pending.append(_Pending(tx, fut))
            self._order_cond.notify()
        return fut

    def enqueue_raw(self, tx: SignedTransaction) -> Future:
        """Hand a pre-built tx straight to the orderer (bypasses endorsement)."""
        fut: Future = Future()
        with self._order_cond:
            self._pending.append(_Pending(tx, fut))
            self._order_cond.notify()
        return fut

    def submit_tx(self, client_org: str, sc_name: str, function: str, args: Sequence[str],
                  policy: Optional[ConsensusPolicy] = None, kind: TxKind = TxKind.INVOKE,
                  timeout: float = 30.0) -> TxResult:
        """Submit and wait for the outcome.

        In deterministic mode the network is driven to quiescence first.
        """
        fut = self.submit(client_org, sc_name, function, args, policy, kind)
        if self.mode == "deterministic":
            if not fut.done():
                self.flush()
            if not fut.done():
                self.run_until_quiescent()
        return fut.result(timeout=timeout)

    # ---- order & commit -------------------------------------------------

    @property
    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def _commit_validator(self, tx: SignedTransaction, state: WorldState) -> Optional[str]:
        if tx.sc_name not in self.chaincodes and state.get(f"lscc/{tx.sc_name}") is None:
            return NO_SUCH_SC
        try:
            policy = self.policy_for(tx.sc_name, tx.function, tx.args, state)
        except ChaincodeError as exc:
            return exc.reason
        if not validate_endorsements(policy, tx.endorsements):
            return ENDORSEMENT_POLICY
        return None

    def order_and_commit(self, flush: bool = True) -> list[Block]:
        """Cut pending txs into blocks FIFO and commit them on every replica.

        Without ``flush`` only full blocks are cut.
        """
        blocks = []
        while True:
            with self._lock:
                if not self._pending:
                    break
                if not flush and len(self._pending) < self.max_txs_per_block:
                    break
                batch = [self._pending.popleft()
                         for _ in range(min(self.max_txs_per_block, len(self._pending)))]
            blocks.append(self._commit_batch(batch))
        return blocks

    def flush(self) -> list[Block]:
        return self.order_and_commit(flush=True)

    def _commit_batch(self, batch: list[_Pending]) -> Block:
        some = next(iter(self.replicas.values()))
        block = Block.make(some.tip.index + 1, some.tip.block_hash, [p.tx for p in batch])
        committed: dict[str, Block] = {}
        for node_id in sorted(self.replicas):
            with self._replica_locks[node_id]:
                committed[node_id] = self.replicas[node_id].append_block(block, self._commit_validator)
        final = committed[some.owner_node]
        for org_id in sorted(self.orgs):
            anchor = self.anchor_replica(org_id)
            self._emit_block_events(org_id, committed[anchor.owner_node])
        for p, code in zip(batch, final.validation):
            if code == VALID:
                p.future.set_result(TxResult(
                    "committed", block_index=final.index, tx_id=p.tx.tx_id,
                    events=p.tx.rw_set.events, response=p.tx.rw_set.response))
            else:
                p.future.set_result(TxResult.rejected(code, tx_id=p.tx.tx_id))
        return final

    # ---- events ---------------------------------------------------------

    def _events_of(self, org_id: str, block: Block) -> list[DeliveredEvent]:
        return [
            DeliveredEvent(org_id, block.index, tx.tx_id, name, payload)
            for tx in block.valid_txs()
            for name, payload in tx.rw_set.events
        ]

    def _emit_block_events(self, org_id: str, block: Block) -> None:
        sub = self._subs.get(org_id)
        if sub is None:
            return
        for ev in self._events_of(org_id, block):
            self._deliver(sub, ev)

    def _deliver(self, sub: Subscription, ev: DeliveredEvent) -> None:
        if not sub.accept(ev):
            return
        copies = 2 if self.redelivery_rate and self.rng.random() < self.redelivery_rate else 1
        with sub.cond:
            for _ in range(copies):
                sub.queue.append(ev)
            sub.cond.notify()

    def subscribe(self, org_id: str, callback: Callable[[DeliveredEvent], None],
                  accept: Optional[Callable[[DeliveredEvent], bool]] = None,
                  catch_up: bool = True) -> Subscription:
        """Subscribe an org's agent. A later subscription for the same org
        replaces the earlier one. With ``catch_up`` the committed backlog on
        the org's anchor replica is delivered first."""
        if org_id not in self.orgs:
            raise ConfigError(f"unknown org {org_id}")
        old = self._subs.get(org_id)
        if old is not None:
            self._stop_sub(old)
        sub = Subscription(org_id, callback, accept)
        self._subs[org_id] = sub
        if catch_up:
            anchor = self.anchor_replica(org_id)
            with self._replica_locks[anchor.owner_node]:
                backlog = [ev for b in anchor.chain for ev in self._events_of(org_id, b)]
            for ev in backlog:
                self._deliver(sub, ev)
        if self._running:
            self._start_sub(sub)
        return sub

    def _dispatch(self, sub: Subscription, ev: DeliveredEvent) -> None:
        self.delivery_log.append((sub.org_id, ev.tx_id))
        try:
            sub.callback(ev)
        except Exception:
            log.exception("subscriber for %s failed on event in block %d", sub.org_id, ev.block_index)

    # ---- deterministic driver ------------------------------------------

    def deliver_pending_events(self) -> int:
        """Hand queued events to subscribers (deterministic mode)."""
        delivered = 0
        for org_id in sorted(self._subs):
            sub = self._subs[org_id]
            while sub.queue:
                ev = sub.queue.popleft()
                self._dispatch(sub, ev)
                delivered += 1
        return delivered

    def run_until_quiescent(self, max_rounds: int = 10_000) -> int:
        """Alternate ordering and event delivery until nothing is left."""
        if self.mode != "deterministic":
            raise RuntimeError("run_until_quiescent is only available in deterministic mode")
        rounds = 0
        while rounds < max_rounds:
            rounds += 1
            blocks = self.flush()
            delivered = self.deliver_pending_events()
            if not blocks and not delivered and not self._pending:
                return rounds
        raise RuntimeError("network did not quiesce")

    # ---- threaded driver ------------------------------------------------

    def start(self) -> None:
        if self.mode != "threads":
            raise RuntimeError("start() requires threads mode")
        if self._running:
            return
        self._running = True
        self._orderer_thread = threading.Thread(target=self._orderer_loop, name="orderer", daemon=True)
        self._orderer_thread.start()
        for sub in self._subs.values():
            self._start_sub(sub)

    def stop(self) -> None:
        if not self._running:
            return
        self._running = False
        with self._order_cond:
            self._order_cond.notify_all()
        if self._orderer_thread is not None:
            self._orderer_thread.join()
        for sub in list(self._subs.values()):
            self._stop_sub(sub)

    def __enter__(self) -> "Network":
        if self.mode == "threads":
            self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def _orderer_loop(self) -> None:
        while True:
            with self._order_cond:
                while self._running and not self._pending:
                    self._order_cond.wait()
                if not self._running and not self._pending:
                    return
                deadline = time.monotonic() + self.batch_timeout
                while len(self._pending) < self.max_txs_per_block:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._running:
                        break
                    self._order_cond.wait(remaining)
            self.order_and_commit(flush=True)

    def _start_sub(self, sub: Subscription) -> None:
        def loop() -> None:
            while True:
                with sub.cond:
                    while sub.active and not sub.queue:
                        sub.cond.wait()
                    if not sub.active:
                        return
                    ev = sub.queue.popleft()
                    sub.busy = True
                try:
                    self._dispatch(sub, ev)
                finally:
                    with sub.cond:
                        sub.busy = False
                        sub.cond.notify_all()

        sub.thread = threading.Thread(target=loop, name=f"agent-{sub.org_id}", daemon=True)
        sub.thread.start()

    def _stop_sub(self, sub: Subscription) -> None:
        with sub.cond:
            sub.active = False
            sub.cond.notify_all()
        if sub.thread is not None and sub.thread is not threading.current_thread():
            sub.thread.join()

    # ---- inspection -----------------------------------------------------

    def replicas_agree(self) -> bool:
        snaps = set()
        chains = set()
        for nid, replica in self.replicas.items():
            with self._replica_locks[nid]:
                snaps.add(replica.state.snapshot())
                chains.add(replica.dump())
        return len(snaps) == 1 and len(chains) == 1

    def state_snapshots(self) -> dict[str, bytes]:
        return {nid: r.state.snapshot() for nid, r in self.replicas.items()}

