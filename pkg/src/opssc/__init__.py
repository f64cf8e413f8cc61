"""Simulator for smart-contract-driven system operations on a permissioned
blockchain, plus the manual-vs-automated operations cost model."""

from .ledger import Block, LedgerReplica, SignedTransaction, WorldState, verify_chain
from .network import ConsensusPolicy, Network, TxResult
from .engine import OperationalPolicy, OpsClient, resolve_template
from .catalog import SharedRepo, build_sc_install_policy, deploy_or_upgrade
from .cost import CostParams, total_cost

__version__ = "0.1.0"

__all__ = [
    "Block", "LedgerReplica", "SignedTransaction", "WorldState", "verify_chain",
    "ConsensusPolicy", "Network", "TxResult",
    "OperationalPolicy", "OpsClient", "resolve_template",
    "SharedRepo", "build_sc_install_policy", "deploy_or_upgrade",
    "CostParams", "total_cost",
]
