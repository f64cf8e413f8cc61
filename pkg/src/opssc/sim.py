"""Assembles a running simulation from a topology and persists it in a state
directory so separate CLI invocations can continue the same network.

State directory layout::

    topology.yaml                 copy of the config used at init
    repo/                         shared artifact repository (default)
    nodes/<node_id>/work/         node sandbox (workdir)
    nodes/<node_id>/installed_scs.json
    ledger/<node_id>.chain        binary chain dump per committing node
    agents/<org_id>.json          event ids already processed by the agent
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .agent import AgentObserver, OpsAgent, start_agents
from .catalog import SharedRepo
from .config import TopologyConfig, parse_topology
from .engine import COMPLETE, FAILED, ExecutionStatus, OpsChaincode, OpsClient
from .ledger import read_dump, replica_from_chain, write_dump
from .network import Network, Node, Organization

TOPOLOGY_FILE = "topology.yaml"


class StateError(RuntimeError):
    pass


def build_network(config: TopologyConfig, root: Path) -> Network:
    root = Path(root)
    nodes, orgs = [], []
    for org in config.orgs:
        orgs.append(Organization(org.org_id, [n.node_id for n in org.nodes], agent=f"agent-{org.org_id}"))
        for spec in org.nodes:
            workdir = root / "nodes" / spec.node_id / "work"
            workdir.mkdir(parents=True, exist_ok=True)
            nodes.append(Node(spec.node_id, org.org_id, spec.roles, workdir))
    net = Network(orgs, nodes, config.consensus_policy,
                  max_txs_per_block=config.max_txs_per_block, mode=config.mode,
                  seed=config.seed or 0, batch_timeout=config.batch_timeout)
    net.register_chaincode(OpsChaincode())
    return net


@dataclass
class Simulation:
    config: TopologyConfig
    root: Path
    network: Network
    repo: SharedRepo
    agents: dict[str, OpsAgent]

    def client(self, org_id: Optional[str] = None) -> OpsClient:
        return OpsClient(self.network, org_id or sorted(self.network.orgs)[0])

    def settle(self, exec_id: Optional[str] = None, timeout: float = 60.0) -> None:
        """Wait until nothing is in flight (deterministic) or, in threads
        mode, until every expected org has a history outcome for ``exec_id``."""
        if self.network.mode == "deterministic":
            self.network.run_until_quiescent()
            return
        if exec_id is None:
            deadline = time.monotonic() + timeout
            while self.network.pending_count and time.monotonic() < deadline:
                time.sleep(0.005)
            return
        status = self.client().get_execution_status(exec_id)
        expected = status.expected_orgs if status else frozenset()
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            done = {o for o in expected if exec_id in self.agents[o].history_results}
            if done >= expected:
                return
            time.sleep(0.002)
        raise TimeoutError(f"execution {exec_id} did not settle within {timeout}s")

    def run_operation(self, op_id: str, params: dict, org_id: Optional[str] = None,
                      timeout: float = 60.0):
        """Issue an operation, wait for the agents, return (ExecResult, status)."""
        client = self.client(org_id)
        res = client.execute_operation(op_id, params)
        if not res.committed:
            return res, None
        self.settle(res.exec_id, timeout)
        return res, client.get_execution_status(res.exec_id)

    def close(self) -> None:
        self.network.stop()


def create(config: TopologyConfig, root: Path, observer: Optional[AgentObserver] = None,
           start: bool = True) -> Simulation:
    """Fresh simulation rooted at ``root`` (not persisted)."""
    root = Path(root)
    net = build_network(config, root)
    repo = SharedRepo(_repo_root(config, root))
    repo.root.mkdir(parents=True, exist_ok=True)
    agents = start_agents(net, repo, config.agent, observer=observer)
    if start and net.mode == "threads":
        net.start()
    return Simulation(config, root, net, repo, agents)


def _repo_root(config: TopologyConfig, root: Path) -> Path:
    p = Path(config.shared_repo)
    return p if p.is_absolute() else root / p


# ---- persistence ----------------------------------------------------------

def init_state(root: Path, config_text: str, source: str = "<topology>",
               force: bool = False) -> Simulation:
    root = Path(root)
    config = parse_topology(config_text, source)
    if (root / TOPOLOGY_FILE).exists() and not force:
        raise StateError(f"{root} already holds a network (use --force to re-initialize)")
    root.mkdir(parents=True, exist_ok=True)
    if force:
        for sub in ("nodes", "ledger", "agents"):
            shutil.rmtree(root / sub, ignore_errors=True)
    (root / TOPOLOGY_FILE).write_text(config_text)
    sim = create(config, root, start=False)
    save_state(sim)
    return sim


def open_state(root: Path, observer: Optional[AgentObserver] = None,
               start: bool = True) -> Simulation:
    root = Path(root)
    cfg_path = root / TOPOLOGY_FILE
    if not cfg_path.exists():
        raise StateError(f"no network in {root}; run 'network init' first")
    config = parse_topology(cfg_path.read_text(), str(cfg_path))
    net = build_network(config, root)
    max_time = 0
    for node_id in list(net.replicas):
        chain = read_dump(root / "ledger" / f"{node_id}.chain")
        net.replicas[node_id] = replica_from_chain(node_id, chain)
        for block in chain:
            for tx in block.txs:
                max_time = max(max_time, tx.logical_time)
    net.clock = max_time
    for node in net.nodes.values():
        reg = root / "nodes" / node.node_id / "installed_scs.json"
        if reg.exists():
            node.installed_scs = {tuple(p) for p in json.loads(reg.read_text())}
    processed = {}
    for org_id in net.orgs:
        f = root / "agents" / f"{org_id}.json"
        if f.exists():
            processed[org_id] = json.loads(f.read_text())
    repo = SharedRepo(_repo_root(config, root))
    repo.root.mkdir(parents=True, exist_ok=True)
    agents = start_agents(net, repo, config.agent, processed, observer)
    if start and net.mode == "threads":
        net.start()
    return Simulation(config, root, net, repo, agents)


def save_state(sim: Simulation) -> None:
    root = sim.root
    (root / "ledger").mkdir(parents=True, exist_ok=True)
    (root / "agents").mkdir(parents=True, exist_ok=True)
    for node_id, replica in sim.network.replicas.items():
        write_dump(root / "ledger" / f"{node_id}.chain", replica.chain)
    for node in sim.network.nodes.values():
        reg = root / "nodes" / node.node_id / "installed_scs.json"
        reg.parent.mkdir(parents=True, exist_ok=True)
        reg.write_text(json.dumps(sorted(node.installed_scs)) + "\n")
    for org_id, agent in sim.agents.items():
        (root / "agents" / f"{org_id}.json").write_text(json.dumps(sorted(agent.processed)) + "\n")


def phase_is_final(status: Optional[ExecutionStatus]) -> bool:
    return status is not None and status.phase in (COMPLETE, FAILED)
