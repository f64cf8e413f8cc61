"""Declarative file formats: topology, operational policies, cost parameters.

All three are YAML documents starting with ``format_version: 1``. Schema
errors carry the file name and line of the offending entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .agent import AgentSettings
from .cost import CostParamError, CostParams
from .engine import OperationalPolicy, PolicyValidationError
from .network import DEFAULT_MAX_TXS_PER_BLOCK, ROLES, ConsensusPolicy

FORMAT_VERSION = 1
CONFIG_ENV = "OPSSC_CONFIG"


class SchemaError(ValueError):
    def __init__(self, source: str, line: Optional[int], message: str):
        loc = f"{source}:{line}" if line else source
        super().__init__(f"{loc}: {message}")
        self.source = source
        self.line = line


class LineDict(dict):
    """dict that remembers the 1-based line of itself and of each key."""

    line: int = 0
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _Loader, node: yaml.MappingNode) -> LineDict:
    loader.flatten_mapping(node)
    out = LineDict()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        out[key] = loader.construct_object(value_node, deep=True)
        out.key_lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


class _Doc:
    """Helper carrying the source name for error messages."""

    def __init__(self, source: str):
        self.source = source

    def fail(self, where: Any, message: str, key: Optional[str] = None) -> SchemaError:
        line = None
        if isinstance(where, LineDict):
            line = where.key_lines.get(key, where.line) if key else where.line
        elif isinstance(where, int):
            line = where
        return SchemaError(self.source, line, message)

    def require(self, d: Any, key: str, kind: type | tuple, ctx: str) -> Any:
        if not isinstance(d, dict):
            raise self.fail(d, f"{ctx} must be a mapping")
        if key not in d:
            raise self.fail(d, f"{ctx}: missing required key '{key}'")
        value = d[key]
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise self.fail(d, f"{ctx}.{key} must be {names}", key)
        return value

    def check_keys(self, d: LineDict, allowed: set[str], ctx: str) -> None:
        for k in d:
            if k not in allowed:
                raise self.fail(d, f"{ctx}: unknown key '{k}'", k)


def load_yaml(text: str, source: str = "<string>") -> Any:
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise SchemaError(source, mark.line + 1 if mark else None, str(exc.problem)) from None


def _check_version(doc: _Doc, data: Any) -> None:
    if not isinstance(data, dict):
        raise doc.fail(None, "document must be a mapping")
    version = doc.require(data, "format_version", int, "document")
    if version != FORMAT_VERSION:
        raise doc.fail(data, f"unsupported format_version {version}", "format_version")


# ---- topology -----------------------------------------------------------

@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    roles: frozenset[str]


@dataclass(frozen=True)
class OrgSpec:
    org_id: str
    nodes: tuple[NodeSpec, ...]


@dataclass
class TopologyConfig:
    orgs: list[OrgSpec]
    consensus_policy: ConsensusPolicy
    max_txs_per_block: int = DEFAULT_MAX_TXS_PER_BLOCK
    mode: str = "deterministic"
    seed: Optional[int] = 0
    batch_timeout: float = 0.002
    agent: AgentSettings = field(default_factory=AgentSettings)
    shared_repo: str = "repo"

    @property
    def node_count(self) -> int:
        return sum(len(o.nodes) for o in self.orgs)


def parse_topology(text: str, source: str = "<topology>") -> TopologyConfig:
    doc = _Doc(source)
    data = load_yaml(text, source)
    _check_version(doc, data)
    doc.check_keys(data, {"format_version", "orgs", "consensus_policy", "max_txs_per_block",
                          "scheduler", "agent", "shared_repo"}, "topology")
    orgs_raw = doc.require(data, "orgs", list, "topology")
    if not orgs_raw:
        raise doc.fail(data, "topology.orgs must not be empty", "orgs")
    orgs, seen_orgs, seen_nodes = [], set(), set()
    for o in orgs_raw:
        org_id = doc.require(o, "id", str, "org")
        doc.check_keys(o, {"id", "nodes"}, f"org {org_id}")
        if org_id in seen_orgs:
            raise doc.fail(o, f"duplicate org id '{org_id}'", "id")
        seen_orgs.add(org_id)
        nodes_raw = doc.require(o, "nodes", list, f"org {org_id}")
        if not nodes_raw:
            raise doc.fail(o, f"org {org_id} needs at least one node", "nodes")
        nodes = []
        for n in nodes_raw:
            node_id = doc.require(n, "id", str, "node")
            doc.check_keys(n, {"id", "roles"}, f"node {node_id}")
            if node_id in seen_nodes:
                raise doc.fail(n, f"duplicate node id '{node_id}'", "id")
            if "/" in node_id or node_id in (".", ".."):
                raise doc.fail(n, f"node id '{node_id}' is not a valid directory name", "id")
            seen_nodes.add(node_id)
            roles = doc.require(n, "roles", list, f"node {node_id}")
            bad = [r for r in roles if r not in ROLES]
            if not roles or bad:
                raise doc.fail(n, f"node {node_id}: roles must be a non-empty subset of "
                                  f"{sorted(ROLES)}", "roles")
            nodes.append(NodeSpec(node_id, frozenset(roles)))
        orgs.append(OrgSpec(org_id, tuple(nodes)))
    if not any("orderer" in n.roles for o in orgs for n in o.nodes):
        raise doc.fail(data, "topology needs at least one node with the orderer role", "orgs")

    cp = data.get("consensus_policy", {"orgs": "all", "quorum": "all"})
    if not isinstance(cp, dict):
        raise doc.fail(data, "consensus_policy must be a mapping", "consensus_policy")
    policy = _parse_consensus(doc, cp, seen_orgs, "consensus_policy")

    cfg = TopologyConfig(orgs=orgs, consensus_policy=policy)
    if "max_txs_per_block" in data:
        v = doc.require(data, "max_txs_per_block", int, "topology")
        if v < 1:
            raise doc.fail(data, "max_txs_per_block must be >= 1", "max_txs_per_block")
        cfg.max_txs_per_block = v
    sched = data.get("scheduler", {"mode": "deterministic", "seed": 0})
    if not isinstance(sched, dict):
        raise doc.fail(data, "scheduler must be a mapping", "scheduler")
    doc.check_keys(sched, {"mode", "seed", "batch_timeout"}, "scheduler")
    mode = doc.require(sched, "mode", str, "scheduler")
    if mode not in ("deterministic", "threads"):
        raise doc.fail(sched, f"scheduler.mode must be deterministic or threads, not '{mode}'", "mode")
    cfg.mode = mode
    if mode == "deterministic":
        cfg.seed = doc.require(sched, "seed", int, "scheduler (deterministic mode)")
    else:
        cfg.seed = sched.get("seed")
    if "batch_timeout" in sched:
        cfg.batch_timeout = float(doc.require(sched, "batch_timeout", (int, float), "scheduler"))

    agent = data.get("agent", {})
    if not isinstance(agent, dict):
        raise doc.fail(data, "agent must be a mapping", "agent")
    doc.check_keys(agent, {"runner", "timeout", "retry_budget", "parallel_nodes", "shell_allowlist"}, "agent")
    settings = AgentSettings()
    if "runner" in agent:
        settings.runner = doc.require(agent, "runner", str, "agent")
        if settings.runner not in ("builtin_verbs", "real_shell"):
            raise doc.fail(agent, "agent.runner must be builtin_verbs or real_shell", "runner")
    if "timeout" in agent:
        settings.timeout = float(doc.require(agent, "timeout", (int, float), "agent"))
    if "retry_budget" in agent:
        settings.retry_budget = doc.require(agent, "retry_budget", int, "agent")
        if settings.retry_budget < 1:
            raise doc.fail(agent, "agent.retry_budget must be >= 1", "retry_budget")
    if "parallel_nodes" in agent:
        settings.parallel_nodes = doc.require(agent, "parallel_nodes", bool, "agent")
    if "shell_allowlist" in agent:
        settings.shell_allowlist = tuple(doc.require(agent, "shell_allowlist", list, "agent"))
    cfg.agent = settings
    if "shared_repo" in data:
        cfg.shared_repo = doc.require(data, "shared_repo", str, "topology")
    return cfg


def _parse_consensus(doc: _Doc, cp: LineDict, known_orgs: set[str], ctx: str) -> ConsensusPolicy:
    doc.check_keys(cp, {"orgs", "quorum"}, ctx)
    orgs = cp.get("orgs", "all")
    if orgs == "all":
        orgs = sorted(known_orgs)
    elif not isinstance(orgs, list) or not orgs:
        raise doc.fail(cp, f"{ctx}.orgs must be 'all' or a non-empty list", "orgs")
    unknown = [o for o in orgs if known_orgs and o not in known_orgs]
    if unknown:
        raise doc.fail(cp, f"{ctx} names unknown orgs {unknown}", "orgs")
    quorum = cp.get("quorum", "all")
    if quorum == "all":
        quorum = len(set(orgs))
    if not isinstance(quorum, int) or isinstance(quorum, bool) or not 1 <= quorum <= len(set(orgs)):
        raise doc.fail(cp, f"{ctx}.quorum must be 'all' or an integer in 1..{len(set(orgs))}", "quorum")
    return ConsensusPolicy(frozenset(orgs), quorum)


def load_topology(path: Path) -> TopologyConfig:
    path = Path(path)
    return parse_topology(path.read_text(), str(path))


def topology_yaml(n_orgs: int, n_nodes: int, *, mode: str = "deterministic", seed: int = 0,
                  max_txs_per_block: int = DEFAULT_MAX_TXS_PER_BLOCK,
                  parallel_nodes: bool = False) -> str:
    """Generate an ``n_orgs`` x ``n_nodes`` topology; peer0 of Org1 also orders."""
    lines = [f"format_version: {FORMAT_VERSION}", "orgs:"]
    for o in range(1, n_orgs + 1):
        lines.append(f"  - id: Org{o}")
        lines.append("    nodes:")
        for n in range(n_nodes):
            roles = ["endorser", "committer"] + (["orderer"] if o == 1 and n == 0 else [])
            lines.append(f"      - id: peer{n}.org{o}")
            lines.append(f"        roles: [{', '.join(roles)}]")
    lines += [
        "consensus_policy: {orgs: all, quorum: all}",
        f"max_txs_per_block: {max_txs_per_block}",
        f"scheduler: {{mode: {mode}, seed: {seed}}}",
        "agent:",
        "  runner: builtin_verbs",
        "  timeout: 30",
        "  retry_budget: 3",
        f"  parallel_nodes: {'true' if parallel_nodes else 'false'}",
        "shared_repo: repo",
    ]
    return "\n".join(lines) + "\n"


# ---- policy files -------------------------------------------------------

def parse_policy(text: str, source: str = "<policy>") -> OperationalPolicy:
    doc = _Doc(source)
    data = load_yaml(text, source)
    _check_version(doc, data)
    doc.check_keys(data, {"format_version", "op_id", "name", "steps", "params", "timing",
                          "target", "consensus_policy", "runner", "payload"}, "policy")
    doc.require(data, "op_id", str, "policy")
    steps = doc.require(data, "steps", list, "policy")
    norm = []
    for s in steps:
        if isinstance(s, str):
            verb, *args = s.split()
            norm.append({"verb": verb, "args": args})
            continue
        doc.require(s, "verb", str, "step")
        doc.check_keys(s, {"verb", "args", "on_failure"}, "step")
        norm.append({"verb": s["verb"], "args": [str(a) for a in s.get("args") or []],
                     "on_failure": s.get("on_failure", "abort")})
    payload = {}
    base = Path(source).parent if source and not source.startswith("<") else Path(".")
    for name, rel in (data.get("payload") or {}).items():
        p = base / str(rel)
        if not p.is_file():
            raise doc.fail(data.get("payload"), f"payload file {p} not found", name)
        payload[str(name)] = p.read_bytes().hex()
    cp = data.get("consensus_policy", "network")
    if isinstance(cp, dict):
        known = set(cp.get("orgs") or []) if isinstance(cp.get("orgs"), list) else set()
        cp = _parse_consensus(doc, cp, known, "consensus_policy").to_dict()
    params = data.get("params") or {}
    if not isinstance(params, dict):
        raise doc.fail(data, "params must be a mapping", "params")
    try:
        return OperationalPolicy.from_dict({
            "op_id": data["op_id"],
            "name": data.get("name", data["op_id"]),
            "steps": norm,
            "params": {"required": list(params.get("required") or []),
                       "defaults": {str(k): str(v) for k, v in (params.get("defaults") or {}).items()}},
            "timing": data.get("timing", "on_demand"),
            "target": data.get("target", "all_nodes"),
            "consensus_policy": cp,
            "runner": data.get("runner", "builtin_verbs"),
            "payload": payload,
        })
    except PolicyValidationError as exc:
        raise doc.fail(data, str(exc), "steps") from None


def load_policy(path: Path) -> OperationalPolicy:
    path = Path(path)
    return parse_policy(path.read_text(), str(path))


# ---- cost parameters ----------------------------------------------------

def parse_cost_params(text: str, source: str = "<params>") -> CostParams:
    doc = _Doc(source)
    data = load_yaml(text, source)
    _check_version(doc, data)
    values = {k: v for k, v in data.items() if k != "format_version"}
    for k, v in values.items():
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise doc.fail(data, f"{k} must be a number", k)
    try:
        return CostParams.from_mapping(values)
    except CostParamError as exc:
        raise doc.fail(data, str(exc)) from None


def load_cost_params(path: Path) -> CostParams:
    path = Path(path)
    return parse_cost_params(path.read_text(), str(path))


def data_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name
