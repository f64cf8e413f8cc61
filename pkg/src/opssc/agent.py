"""Per-organization agent: consumes operational events, runs the resolved
commands on the org's nodes and registers the evidence on-ledger."""

from __future__ import annotations

import logging
import subprocess
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Protocol

from .catalog import (
    BUILTIN_VERBS,
    EXIT_FAIL,
    EXIT_SANDBOX_ESCAPE,
    EXIT_TIMEOUT,
    EXIT_UNKNOWN_VERB,
    SandboxEscape,
    SharedRepo,
    VerbContext,
    VerbFailed,
)
from .encoding import digest
from .engine import (
    EVENT_NAME,
    SC_NAME,
    CommandStep,
    ExecutionRecord,
    HistoryReport,
    OperationalEvent,
    OpsClient,
    StepResult,
)
from .network import DeliveredEvent, Network, Node, TxResult

log = logging.getLogger(__name__)

NON_RETRYABLE = frozenset({
    "duplicate_report", "not_target_org", "invalid_report", "bad_evidence",
    "incomplete_report",
})


@dataclass(frozen=True)
class StepOutcome:
    exit_code: int
    output: str
    reason: str = ""

    @property
    def output_digest(self) -> str:
        return digest(self.output.encode()).hex()


class CommandRunner(Protocol):
    mode: str

    def run(self, node: Node, step: CommandStep, ctx: VerbContext) -> StepOutcome: ...


class BuiltinRunner:
    """Dispatches to the builtin verbs; every path stays inside the workdir."""

    mode = "builtin_verbs"

    def __init__(self, verbs=None):
        self.verbs = dict(BUILTIN_VERBS if verbs is None else verbs)

    def run(self, node: Node, step: CommandStep, ctx: VerbContext) -> StepOutcome:
        fn = self.verbs.get(step.verb)
        if fn is None:
            return StepOutcome(EXIT_UNKNOWN_VERB, f"{step.verb}: command not found\n", "unknown_verb")
        try:
            return StepOutcome(0, fn(ctx, list(step.args)))
        except SandboxEscape as exc:
            return StepOutcome(EXIT_SANDBOX_ESCAPE, f"refused: {exc}\n", "sandbox_escape")
        except subprocess.TimeoutExpired:
            return StepOutcome(EXIT_TIMEOUT, f"{step.verb}: timed out\n", "timeout")
        except VerbFailed as exc:
            return StepOutcome(exc.code or EXIT_FAIL, f"{step.verb}: {exc}\n", "failed")
        except OSError as exc:
            return StepOutcome(EXIT_FAIL, f"{step.verb}: {exc.strerror or exc}\n", "failed")


class ShellRunner:
    """Runs each step as an OS process with cwd = node workdir.

    Only verbs named in ``allowlist`` are executed.
    """

    mode = "real_shell"

    def __init__(self, allowlist: Iterable[str], timeout: float = 30.0):
        self.allowlist = frozenset(allowlist)
        self.timeout = timeout

    def run(self, node: Node, step: CommandStep, ctx: VerbContext) -> StepOutcome:
        if step.verb not in self.allowlist:
            return StepOutcome(EXIT_SANDBOX_ESCAPE, f"refused: {step.verb} not in allowlist\n", "not_allowed")
        try:
            proc = subprocess.run([step.verb, *step.args], cwd=node.workdir, capture_output=True,
                                  text=True, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            return StepOutcome(EXIT_TIMEOUT, f"{step.verb}: timed out\n", "timeout")
        except FileNotFoundError:
            return StepOutcome(EXIT_UNKNOWN_VERB, f"{step.verb}: command not found\n", "unknown_verb")
        return StepOutcome(proc.returncode, proc.stdout + proc.stderr)


def run_step(runner: CommandRunner, node: Node, step: CommandStep,
             ctx: Optional[VerbContext] = None) -> tuple[int, str]:
    """Run one step; returns (exit code, output digest)."""
    if not node.workdir.is_dir():
        raise FileNotFoundError(f"workdir of {node.node_id} does not exist: {node.workdir}")
    outcome = runner.run(node, step, ctx or VerbContext(node))
    return outcome.exit_code, outcome.output_digest


@dataclass
class AgentSettings:
    runner: str = "builtin_verbs"
    timeout: float = 30.0
    retry_budget: int = 3
    parallel_nodes: bool = False
    shell_allowlist: tuple[str, ...] = ()


class AgentObserver(Protocol):
    def event_received(self, org_id: str, exec_id: str, at: float) -> None: ...
    def node_done(self, org_id: str, node_id: str, exec_id: str, at: float) -> None: ...
    def history_committed(self, org_id: str, exec_id: str, at: float) -> None: ...


class OpsAgent:
    """One agent per organization."""

    def __init__(self, network: Network, org_id: str, repo: Optional[SharedRepo] = None,
                 settings: Optional[AgentSettings] = None,
                 processed: Optional[Iterable[str]] = None,
                 observer: Optional[AgentObserver] = None):
        self.network = network
        self.org_id = org_id
        self.repo = repo
        self.settings = settings or AgentSettings()
        self.processed: set[str] = set(processed or ())
        self.observer = observer
        self.client = OpsClient(network, org_id)
        self.responsible_nodes = list(network.orgs[org_id].nodes)
        self.builtin = BuiltinRunner()
        self.shell = (ShellRunner(self.settings.shell_allowlist, self.settings.timeout)
                      if self.settings.runner == "real_shell" else None)
        self.executions: Counter[tuple[str, str]] = Counter()  # (event_id, node_id)
        self.errors: list[str] = []
        self.history_results: dict[str, TxResult] = {}
        self.subscription = None
        self._lock = threading.Lock()

    # -- subscription ----------------------------------------------------

    def _accept(self, ev: DeliveredEvent) -> bool:
        if ev.name != EVENT_NAME:
            return False
        return self.org_id in OperationalEvent.from_json(ev.payload).targets

    def subscribe(self, catch_up: bool = True):
        self.subscription = self.network.subscribe(self.org_id, self._on_delivered,
                                                   self._accept, catch_up)
        return self.subscription

    def _on_delivered(self, ev: DeliveredEvent) -> None:
        self.on_event(OperationalEvent.from_json(ev.payload))

    # -- execution -------------------------------------------------------

    def _already_reported(self, exec_id: str) -> bool:
        state = self.network.anchor_replica(self.org_id).state
        return state.get(f"hist/{exec_id}/{self.org_id}") is not None

    def on_event(self, event: OperationalEvent) -> Optional[list[ExecutionRecord]]:
        """Execute the event on this org's target nodes and submit the report.

        Returns None when the event was already handled or is not for us.
        """
        with self._lock:
            if event.event_id in self.processed or self.org_id not in event.targets:
                return None
            if event.event_id != event.compute_id():
                self.errors.append(f"event {event.event_id}: id does not recompute")
                return None
            self.processed.add(event.event_id)
            if self._already_reported(event.exec_id):
                return None
        if self.observer:
            self.observer.event_received(self.org_id, event.exec_id, time.perf_counter())

        nodes = [self.network.nodes[n] for n in event.targets[self.org_id]
                 if n in self.responsible_nodes]
        payload = self._payload_for(event)
        if self.settings.parallel_nodes and len(nodes) > 1:
            with ThreadPoolExecutor(max_workers=len(nodes)) as pool:
                records = list(pool.map(lambda n: self.execute_on_node(n, event, payload), nodes))
        else:
            records = [self.execute_on_node(n, event, payload) for n in nodes]

        report = HistoryReport(event.exec_id, self.org_id, tuple(records))
        self._submit_history(report, attempt=1)
        return records

    def _payload_for(self, event: OperationalEvent) -> Mapping[str, bytes]:
        if not event.payload_digests:
            return {}
        policy = self.client.get_policy(event.op_id)
        files = dict(policy.payload) if policy else {}
        # only bundled files whose bytes match the pinned digest are usable
        return {name: data for name, data in files.items()
                if event.payload_digests.get(name) == digest(data).hex()}

    def _runner_for(self, event: OperationalEvent) -> CommandRunner:
        if event.runner == "real_shell":
            if self.shell is None:
                return ShellRunner((), self.settings.timeout)
            return self.shell
        return self.builtin

    def execute_on_node(self, node: Node, event: OperationalEvent,
                        payload: Mapping[str, bytes] = {}) -> ExecutionRecord:
        runner = self._runner_for(event)
        ctx = VerbContext(node, self.repo, payload, self.settings.timeout)
        node.workdir.mkdir(parents=True, exist_ok=True)
        results = []
        for index, step in enumerate(event.resolved_commands, start=1):
            code, out_digest = run_step(runner, node, step, ctx)
            results.append(StepResult(index, code, out_digest))
            if code != 0 and step.on_failure == "abort":
                break
        with self._lock:
            self.executions[(event.event_id, node.node_id)] += 1
        if self.observer:
            self.observer.node_done(self.org_id, node.node_id, event.exec_id, time.perf_counter())
        return ExecutionRecord.build(event.exec_id, self.org_id, node.node_id, results)

    # -- history ---------------------------------------------------------

    def _submit_history(self, report: HistoryReport, attempt: int) -> None:
        fut = self.network.submit(self.org_id, SC_NAME, "register_history",
                                  [report.exec_id, report.to_json().decode()])
        fut.add_done_callback(lambda f: self._on_history_result(report, attempt, f.result()))

    def _on_history_result(self, report: HistoryReport, attempt: int, res: TxResult) -> None:
        if res.committed:
            self.history_results[report.exec_id] = res
            if self.observer:
                self.observer.history_committed(self.org_id, report.exec_id, time.perf_counter())
            return
        if res.reason in NON_RETRYABLE or attempt >= self.settings.retry_budget:
            self.history_results[report.exec_id] = res
            msg = f"{self.org_id}: history for {report.exec_id} rejected ({res.reason}) after {attempt} attempt(s)"
            self.errors.append(msg)
            log.warning(msg)
            return
        self._submit_history(report, attempt + 1)


def start_agents(network: Network, repo: Optional[SharedRepo] = None,
                 settings: Optional[AgentSettings] = None,
                 processed: Optional[Mapping[str, Iterable[str]]] = None,
                 observer: Optional[AgentObserver] = None,
                 catch_up: bool = True) -> dict[str, OpsAgent]:
    """Create and subscribe one agent per org."""
    agents = {}
    for org_id in sorted(network.orgs):
        agent = OpsAgent(network, org_id, repo, settings,
                         (processed or {}).get(org_id), observer)
        agent.subscribe(catch_up=catch_up)
        agents[org_id] = agent
    return agents
