"""The operations SC: policy registry, templating, execution events and
history registration.

All state lives under three key namespaces:

* ``policy/<op_id>``          registered operational policies
* ``exec/<exec_id>``          one entry per issued execution
* ``hist/<exec_id>/<org_id>`` write-once report of one org's nodes
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .encoding import digest, enc_int, enc_list, enc_str, enc_str_list
from .ledger import WorldState
from .network import Chaincode, ChaincodeError, ConsensusPolicy, Network, TxContext, TxResult

SC_NAME = "opssc"
EVENT_NAME = "opssc.operation"

PLACEHOLDER = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")

ISSUED = "issued"
PARTIALLY_REPORTED = "partially_reported"
COMPLETE = "complete"
FAILED = "failed"


class PolicyValidationError(ValueError):
    pass


class TemplateError(KeyError):
    def __init__(self, placeholder: str):
        super().__init__(placeholder)
        self.placeholder = placeholder

    def __str__(self) -> str:
        return f"unresolved placeholder {{{{{self.placeholder}}}}}"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class CommandStep:
    verb: str
    args: tuple[str, ...] = ()
    on_failure: str = "abort"

    def __post_init__(self) -> None:
        object.__setattr__(self, "args", tuple(str(a) for a in self.args))
        if not self.verb or any(c.isspace() for c in self.verb):
            raise PolicyValidationError(f"bad verb {self.verb!r}")
        if self.on_failure not in ("abort", "continue"):
            raise PolicyValidationError(f"on_failure must be abort or continue, not {self.on_failure!r}")

    def render(self) -> str:
        return " ".join((self.verb, *self.args))

    def encode(self) -> bytes:
        return enc_str(self.verb) + enc_str_list(self.args) + enc_str(self.on_failure)

    def to_dict(self) -> dict:
        d: dict = {"verb": self.verb, "args": list(self.args)}
        if self.on_failure != "abort":
            d["on_failure"] = self.on_failure
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CommandStep":
        return cls(d["verb"], tuple(d.get("args", ())), d.get("on_failure", "abort"))

    @classmethod
    def parse(cls, text: str, on_failure: str = "abort") -> "CommandStep":
        verb, *args = text.split()
        return cls(verb, tuple(args), on_failure)


def placeholders(template: Sequence[CommandStep]) -> set[str]:
    names = set()
    for step in template:
        for part in (step.verb, *step.args):
            names.update(PLACEHOLDER.findall(part))
    return names


def _substitute(text: str, params: Mapping[str, str]) -> str:
    def repl(m: re.Match) -> str:
        name = m.group(1)
        if name not in params:
            raise TemplateError(name)
        return str(params[name])
    return PLACEHOLDER.sub(repl, text)


def resolve_template(command_template: Sequence[CommandStep],
                     params: Mapping[str, str]) -> list[CommandStep]:
    """Single-pass ``{{name}}`` substitution; substituted values are never
    re-expanded."""
    return [
        CommandStep(_substitute(s.verb, params),
                    tuple(_substitute(a, params) for a in s.args),
                    s.on_failure)
        for s in command_template
    ]


@dataclass(frozen=True)
class Timing:
    kind: str = "on_demand"
    interval: int = 0

    def __post_init__(self) -> None:
        if self.kind == "on_demand" and self.interval:
            raise PolicyValidationError("on_demand timing takes no interval")
        if self.kind == "periodic" and self.interval < 1:
            raise PolicyValidationError("periodic timing needs an interval >= 1 tick")
        if self.kind not in ("on_demand", "periodic"):
            raise PolicyValidationError(f"unknown timing {self.kind!r}")

    def to_dict(self):
        return "on_demand" if self.kind == "on_demand" else {"periodic": self.interval}

    @classmethod
    def from_dict(cls, d) -> "Timing":
        if d in (None, "on_demand"):
            return cls()
        if isinstance(d, Mapping) and "periodic" in d:
            return cls("periodic", int(d["periodic"]))
        raise PolicyValidationError(f"unknown timing {d!r}")


@dataclass(frozen=True)
class Target:
    """Which nodes run an operation. Empty filters match everything."""

    kind: str = "all_nodes"
    orgs: tuple[str, ...] = ()
    roles: tuple[str, ...] = ()
    nodes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("all_nodes", "per_org"):
            raise PolicyValidationError(f"unknown target {self.kind!r}")
        for name in ("orgs", "roles", "nodes"):
            object.__setattr__(self, name, tuple(sorted(getattr(self, name))))

    def select(self, orgs: Mapping[str, Sequence[str]],
               roles: Mapping[str, frozenset[str]]) -> dict[str, list[str]]:
        out = {}
        for org_id in sorted(orgs):
            if self.kind == "per_org" and self.orgs and org_id not in self.orgs:
                continue
            picked = [
                nid for nid in orgs[org_id]
                if self.kind == "all_nodes"
                or ((not self.roles or roles[nid] & set(self.roles))
                    and (not self.nodes or nid in self.nodes))
            ]
            if picked:
                out[org_id] = picked
        return out

    def to_dict(self):
        if self.kind == "all_nodes":
            return "all_nodes"
        d = {}
        for name in ("orgs", "roles", "nodes"):
            if getattr(self, name):
                d[name] = list(getattr(self, name))
        return {"per_org": d}

    @classmethod
    def from_dict(cls, d) -> "Target":
        if d in (None, "all_nodes"):
            return cls()
        if isinstance(d, Mapping) and "per_org" in d:
            f = d["per_org"] or {}
            return cls("per_org", tuple(f.get("orgs", ())), tuple(f.get("roles", ())),
                       tuple(f.get("nodes", ())))
        raise PolicyValidationError(f"unknown target {d!r}")


@dataclass(frozen=True)
class OperationalPolicy:
    op_id: str
    name: str
    command_template: tuple[CommandStep, ...]
    required_params: frozenset[str] = frozenset()
    default_params: Mapping[str, str] = field(default_factory=dict)
    timing: Timing = Timing()
    target: Target = Target()
    consensus_policy: Optional[ConsensusPolicy] = None
    runner: str = "builtin_verbs"
    # bundled scripts: file name -> bytes, pinned by digest in the event
    payload: Mapping[str, bytes] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "command_template", tuple(self.command_template))
        object.__setattr__(self, "required_params", frozenset(self.required_params))
        object.__setattr__(self, "default_params",
                           {str(k): str(v) for k, v in dict(self.default_params).items()})
        object.__setattr__(self, "payload", dict(self.payload))
        if not self.op_id or "/" in self.op_id:
            raise PolicyValidationError(f"bad op_id {self.op_id!r}")
        if not self.command_template:
            raise PolicyValidationError(f"{self.op_id}: command template is empty")
        known = self.required_params | set(self.default_params)
        missing = placeholders(self.command_template) - known
        if missing:
            raise PolicyValidationError(
                f"{self.op_id}: placeholders not covered by params: {sorted(missing)}")
        for step in self.command_template:
            for part in (step.verb, *step.args):
                if "{{" in PLACEHOLDER.sub("", part) or "}}" in PLACEHOLDER.sub("", part):
                    raise PolicyValidationError(f"{self.op_id}: malformed placeholder in {part!r}")
        if self.runner not in ("builtin_verbs", "real_shell"):
            raise PolicyValidationError(f"unknown runner {self.runner!r}")

    def to_dict(self) -> dict:
        return {
            "op_id": self.op_id,
            "name": self.name,
            "steps": [s.to_dict() for s in self.command_template],
            "params": {
                "required": sorted(self.required_params),
                "defaults": dict(sorted(self.default_params.items())),
            },
            "timing": self.timing.to_dict(),
            "target": self.target.to_dict(),
            "consensus_policy": self.consensus_policy.to_dict() if self.consensus_policy else "network",
            "runner": self.runner,
            "payload": {k: v.hex() for k, v in sorted(self.payload.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OperationalPolicy":
        params = d.get("params") or {}
        cp = d.get("consensus_policy", "network")
        return cls(
            op_id=str(d["op_id"]),
            name=str(d.get("name", d["op_id"])),
            command_template=tuple(CommandStep.from_dict(s) for s in d["steps"]),
            required_params=frozenset(params.get("required", ())),
            default_params=dict(params.get("defaults") or {}),
            timing=Timing.from_dict(d.get("timing")),
            target=Target.from_dict(d.get("target")),
            consensus_policy=None if cp in (None, "network") else ConsensusPolicy.from_dict(cp),
            runner=d.get("runner", "builtin_verbs"),
            payload={k: bytes.fromhex(v) for k, v in (d.get("payload") or {}).items()},
        )

    def to_json(self) -> bytes:
        return _canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, data: bytes) -> "OperationalPolicy":
        return cls.from_dict(json.loads(data))


@dataclass(frozen=True)
class OperationalEvent:
    exec_id: str
    op_id: str
    resolved_commands: tuple[CommandStep, ...]
    targets: Mapping[str, tuple[str, ...]]
    runner: str = "builtin_verbs"
    payload_digests: Mapping[str, str] = field(default_factory=dict)
    event_id: str = ""

    @property
    def target_orgs(self) -> list[str]:
        return sorted(self.targets)

    def compute_id(self) -> str:
        return digest(
            enc_str(self.exec_id)
            + enc_str(self.op_id)
            + enc_list(s.encode() for s in self.resolved_commands)
            + enc_list(enc_str(o) + enc_str_list(self.targets[o]) for o in sorted(self.targets))
            + enc_str(self.runner)
            + enc_list(enc_str(k) + enc_str(v) for k, v in sorted(self.payload_digests.items()))
        ).hex()

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "exec_id": self.exec_id,
            "op_id": self.op_id,
            "resolved_commands": [s.to_dict() for s in self.resolved_commands],
            "targets": {o: list(n) for o, n in sorted(self.targets.items())},
            "runner": self.runner,
            "payload_digests": dict(sorted(self.payload_digests.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OperationalEvent":
        return cls(
            exec_id=d["exec_id"],
            op_id=d["op_id"],
            resolved_commands=tuple(CommandStep.from_dict(s) for s in d["resolved_commands"]),
            targets={o: tuple(n) for o, n in d["targets"].items()},
            runner=d.get("runner", "builtin_verbs"),
            payload_digests=dict(d.get("payload_digests") or {}),
            event_id=d["event_id"],
        )

    @classmethod
    def from_json(cls, data: bytes) -> "OperationalEvent":
        return cls.from_dict(json.loads(data))


@dataclass(frozen=True)
class StepResult:
    index: int  # 1-based
    exit_code: int
    output_digest: str


def evidence_digest(results: Sequence[StepResult]) -> str:
    return digest(b"".join(bytes.fromhex(r.output_digest) for r in results)).hex()


@dataclass(frozen=True)
class ExecutionRecord:
    exec_id: str
    org_id: str
    node_id: str
    results: tuple[StepResult, ...]
    evidence_digest: str = ""

    @classmethod
    def build(cls, exec_id: str, org_id: str, node_id: str,
              results: Sequence[StepResult]) -> "ExecutionRecord":
        results = tuple(results)
        return cls(exec_id, org_id, node_id, results, evidence_digest(results))

    @property
    def failed_step(self) -> Optional[int]:
        for r in self.results:
            if r.exit_code != 0:
                return r.index
        return None

    @property
    def succeeded(self) -> bool:
        return self.failed_step is None

    @property
    def overall(self) -> str:
        step = self.failed_step
        return "success" if step is None else f"failed({step})"

    def to_dict(self) -> dict:
        return {
            "exec_id": self.exec_id,
            "org_id": self.org_id,
            "node_id": self.node_id,
            "results": [[r.index, r.exit_code, r.output_digest] for r in self.results],
            "overall": self.overall,
            "evidence_digest": self.evidence_digest,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecutionRecord":
        return cls(d["exec_id"], d["org_id"], d["node_id"],
                   tuple(StepResult(int(i), int(c), str(o)) for i, c, o in d["results"]),
                   d["evidence_digest"])


@dataclass(frozen=True)
class HistoryReport:
    """One org's batch of per-node records for an execution."""

    exec_id: str
    org_id: str
    records: tuple[ExecutionRecord, ...]

    @property
    def succeeded(self) -> bool:
        return all(r.succeeded for r in self.records)

    def to_json(self) -> bytes:
        return _canonical_json({
            "exec_id": self.exec_id,
            "org_id": self.org_id,
            "records": [r.to_dict() for r in self.records],
        })

    @classmethod
    def from_json(cls, data: bytes) -> "HistoryReport":
        d = json.loads(data)
        return cls(d["exec_id"], d["org_id"],
                   tuple(ExecutionRecord.from_dict(r) for r in d["records"]))


@dataclass(frozen=True)
class ExecutionStatus:
    exec_id: str
    op_id: str
    issued_at: int
    expected_orgs: frozenset[str]
    reported: Mapping[str, tuple[str, ...]]  # org -> per-node overall strings
    phase: str

    def to_dict(self) -> dict:
        return {
            "exec_id": self.exec_id,
            "op_id": self.op_id,
            "issued_at": self.issued_at,
            "expected_orgs": sorted(self.expected_orgs),
            "reported": {o: list(v) for o, v in sorted(self.reported.items())},
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecutionStatus":
        return cls(d["exec_id"], d["op_id"], d["issued_at"], frozenset(d["expected_orgs"]),
                   {o: tuple(v) for o, v in d["reported"].items()}, d["phase"])


def compute_phase(expected_orgs: frozenset[str], reports: Mapping[str, HistoryReport]) -> str:
    if any(not r.succeeded for r in reports.values()):
        return FAILED
    if expected_orgs <= reports.keys():
        return COMPLETE
    return PARTIALLY_REPORTED if reports else ISSUED


def _check_record(rec: ExecutionRecord, n_steps: int) -> Optional[str]:
    indices = [r.index for r in rec.results]
    if indices != list(range(1, len(indices) + 1)) or len(indices) > n_steps:
        return "results are not a prefix of the command list"
    if rec.evidence_digest != evidence_digest(rec.results):
        return "evidence digest does not recompute"
    return None


class OpsChaincode(Chaincode):
    name = SC_NAME
    system = True

    # -- endorsement policy ---------------------------------------------

    def endorsement_policy(self, function: str, args: Sequence[str],
                           state: WorldState) -> Optional[ConsensusPolicy]:
        op_id = None
        if function == "execute_operation" and args:
            op_id = args[0]
        elif function == "register_history" and args:
            raw = state.get(f"exec/{args[0]}")
            if raw is not None:
                op_id = json.loads(raw)["op_id"]
        if op_id is None:
            return None
        raw = state.get(f"policy/{op_id}")
        if raw is None:
            return None
        return OperationalPolicy.from_json(raw).consensus_policy

    # -- functions -------------------------------------------------------

    def fn_register_policy(self, ctx: TxContext, args: list[str]) -> bytes:
        try:
            policy = OperationalPolicy.from_json(args[0].encode())
        except (PolicyValidationError, KeyError, ValueError, TypeError) as exc:
            raise ChaincodeError("invalid_policy", str(exc)) from None
        if policy.consensus_policy is not None:
            unknown = policy.consensus_policy.required_orgs - ctx.channel.orgs.keys()
            if unknown:
                raise ChaincodeError("invalid_policy", f"unknown orgs {sorted(unknown)}")
        key = f"policy/{policy.op_id}"
        if ctx.get_state(key) is not None:
            raise ChaincodeError("duplicate_policy", policy.op_id)
        ctx.put_state(key, policy.to_json())
        return policy.op_id.encode()

    def fn_get_policy(self, ctx: TxContext, args: list[str]) -> bytes:
        return ctx.get_state(f"policy/{args[0]}") or b""

    def fn_list_policies(self, ctx: TxContext, args: list[str]) -> bytes:
        return _canonical_json([k.split("/", 1)[1] for k, _ in ctx.scan("policy/")])

    def fn_execute_operation(self, ctx: TxContext, args: list[str]) -> bytes:
        op_id = args[0]
        dynamic = json.loads(args[1]) if len(args) > 1 and args[1] else {}
        raw = ctx.get_state(f"policy/{op_id}")
        if raw is None:
            raise ChaincodeError("no_such_policy", op_id)
        policy = OperationalPolicy.from_json(raw)
        known = policy.required_params | set(policy.default_params)
        unknown = set(dynamic) - known
        if unknown:
            raise ChaincodeError("unknown_param", ",".join(sorted(unknown)))
        params = {**policy.default_params, **{k: str(v) for k, v in dynamic.items()}}
        missing = policy.required_params - params.keys()
        if missing:
            raise ChaincodeError("missing_param", ",".join(sorted(missing)))
        for k, v in params.items():
            if "{{" in v or "}}" in v:
                raise ChaincodeError("invalid_param", f"{k} contains template braces")
        resolved = tuple(resolve_template(policy.command_template, params))
        exec_id = digest(
            enc_str(op_id)
            + enc_list(s.encode() for s in resolved)
            + enc_int(ctx.logical_time)
        ).hex()
        targets = policy.target.select(ctx.channel.orgs, ctx.channel.roles)
        if not targets:
            raise ChaincodeError("no_targets", op_id)
        event = OperationalEvent(
            exec_id=exec_id,
            op_id=op_id,
            resolved_commands=resolved,
            targets={o: tuple(n) for o, n in targets.items()},
            runner=policy.runner,
            payload_digests={k: digest(v).hex() for k, v in policy.payload.items()},
        )
        event = OperationalEvent(**{**event.__dict__, "event_id": event.compute_id()})
        ctx.put_state(f"exec/{exec_id}", _canonical_json({
            "exec_id": exec_id,
            "op_id": op_id,
            "issued_at": ctx.logical_time,
            "issuer": ctx.proposer_org,
            "params": dict(sorted(params.items())),
            "event_id": event.event_id,
            "expected_orgs": event.target_orgs,
            "targets": {o: list(n) for o, n in sorted(event.targets.items())},
            "n_steps": len(resolved),
        }))
        ctx.emit(EVENT_NAME, _canonical_json(event.to_dict()))
        return exec_id.encode()

    def fn_register_history(self, ctx: TxContext, args: list[str]) -> bytes:
        exec_id = args[0]
        raw = ctx.get_state(f"exec/{exec_id}")
        if raw is None:
            raise ChaincodeError("no_such_execution", exec_id)
        info = json.loads(raw)
        try:
            report = HistoryReport.from_json(args[1].encode())
        except (KeyError, ValueError, TypeError) as exc:
            raise ChaincodeError("invalid_report", str(exc)) from None
        org = report.org_id
        if report.exec_id != exec_id or org not in info["expected_orgs"]:
            raise ChaincodeError("not_target_org", org)
        if ctx.proposer_org != org:
            raise ChaincodeError("not_target_org", f"{ctx.proposer_org} cannot report for {org}")
        key = f"hist/{exec_id}/{org}"
        if ctx.get_state(key) is not None:
            raise ChaincodeError("duplicate_report", f"{exec_id} {org}")
        if sorted(r.node_id for r in report.records) != sorted(info["targets"][org]):
            raise ChaincodeError("incomplete_report", f"{org} must report {info['targets'][org]}")
        for rec in report.records:
            if rec.exec_id != exec_id or rec.org_id != org:
                raise ChaincodeError("invalid_report", f"record for {rec.exec_id}/{rec.org_id}")
            problem = _check_record(rec, info["n_steps"])
            if problem:
                raise ChaincodeError("bad_evidence", f"{rec.node_id}: {problem}")
        ctx.put_state(key, report.to_json())
        status = self._status(ctx, info)
        return status.phase.encode()

    def fn_get_execution_status(self, ctx: TxContext, args: list[str]) -> bytes:
        raw = ctx.get_state(f"exec/{args[0]}")
        if raw is None:
            return b""
        return _canonical_json(self._status(ctx, json.loads(raw)).to_dict())

    def fn_get_history(self, ctx: TxContext, args: list[str]) -> bytes:
        return _canonical_json([
            json.loads(v) for _, v in ctx.scan(f"hist/{args[0]}/")
        ])

    def fn_list_executions(self, ctx: TxContext, args: list[str]) -> bytes:
        rows = [json.loads(v) for _, v in ctx.scan("exec/")]
        rows.sort(key=lambda r: r["issued_at"])
        return _canonical_json(rows)

    @staticmethod
    def _status(ctx: TxContext, info: Mapping) -> ExecutionStatus:
        exec_id = info["exec_id"]
        reports = {
            k.rsplit("/", 1)[1]: HistoryReport.from_json(v)
            for k, v in ctx.scan(f"hist/{exec_id}/")
        }
        expected = frozenset(info["expected_orgs"])
        return ExecutionStatus(
            exec_id=exec_id,
            op_id=info["op_id"],
            issued_at=info["issued_at"],
            expected_orgs=expected,
            reported={o: tuple(r.overall for r in rep.records) for o, rep in sorted(reports.items())},
            phase=compute_phase(expected, reports),
        )


@dataclass
class ExecResult:
    tx: TxResult
    exec_id: Optional[str] = None

    @property
    def committed(self) -> bool:
        return self.tx.committed

    @property
    def reason(self) -> str:
        return self.tx.reason


class OpsClient:
    """Client-side helpers an org uses to talk to the OpsSC."""

    def __init__(self, network: Network, org_id: str):
        self.network = network
        self.org_id = org_id
        if SC_NAME not in network.chaincodes:
            network.register_chaincode(OpsChaincode())

    def register_policy(self, policy: OperationalPolicy,
                        consensus: Optional[ConsensusPolicy] = None) -> TxResult:
        # validation already ran in OperationalPolicy.__post_init__
        return self.network.submit_tx(self.org_id, SC_NAME, "register_policy",
                                      [policy.to_json().decode()], consensus)

    def submit_execute(self, op_id: str, params: Optional[Mapping[str, str]] = None,
                       consensus: Optional[ConsensusPolicy] = None):
        return self.network.submit(self.org_id, SC_NAME, "execute_operation",
                                   [op_id, _canonical_json(dict(params or {})).decode()], consensus)

    def execute_operation(self, op_id: str, params: Optional[Mapping[str, str]] = None,
                          consensus: Optional[ConsensusPolicy] = None) -> ExecResult:
        res = self.network.submit_tx(self.org_id, SC_NAME, "execute_operation",
                                     [op_id, _canonical_json(dict(params or {})).decode()],
                                     consensus)
        return ExecResult(res, res.response.decode() if res.committed else None)

    def _query(self, function: str, *args: str) -> bytes:
        return self.network.query(self.org_id, SC_NAME, function, list(args))

    def get_execution_status(self, exec_id: str) -> Optional[ExecutionStatus]:
        raw = self._query("get_execution_status", exec_id)
        return ExecutionStatus.from_dict(json.loads(raw)) if raw else None

    def get_policy(self, op_id: str) -> Optional[OperationalPolicy]:
        raw = self._query("get_policy", op_id)
        return OperationalPolicy.from_json(raw) if raw else None

    def list_policies(self) -> list[str]:
        return json.loads(self._query("list_policies"))

    def history(self, exec_id: str) -> list[HistoryReport]:
        return [HistoryReport.from_json(_canonical_json(d))
                for d in json.loads(self._query("get_history", exec_id))]

    def executions(self) -> list[dict]:
        return json.loads(self._query("list_executions"))


def due_periodic(policies: Sequence[OperationalPolicy], tick: int) -> list[OperationalPolicy]:
    """Periodic policies whose interval divides ``tick``; the OpsSC itself
    never self-triggers, so a driver calls this once per logical tick."""
    return [p for p in policies
            if p.timing.kind == "periodic" and tick > 0 and tick % p.timing.interval == 0]
