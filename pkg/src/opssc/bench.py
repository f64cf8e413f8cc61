"""Wall-clock benchmark of the install operation in threads mode.

CSV columns (one row per repetition and org)::

    rep, exec_id, org_id, submit_to_commit_ms, event_to_history_commit_ms,
    completion_gap_ms

``submit_to_commit_ms`` is the execute-operation tx latency from submission
until it is committed on every replica. ``event_to_history_commit_ms`` is
the time from the org's agent receiving the event until its history tx
commits. ``completion_gap_ms`` is max - min of the per-node completion times
across all nodes of the execution.
"""

from __future__ import annotations

import csv
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, TextIO

from . import sim as simmod
from .catalog import build_sc_install_policy, sample_sc_source
from .config import TopologyConfig

BENCH_COLUMNS = ("rep", "exec_id", "org_id", "submit_to_commit_ms",
                 "event_to_history_commit_ms", "completion_gap_ms")
BENCH_SC = ("benchcc", "1.0")


class BenchError(RuntimeError):
    pass


@dataclass
class _ExecTimes:
    received: dict[str, float] = field(default_factory=dict)
    node_done: dict[str, float] = field(default_factory=dict)
    history: dict[str, float] = field(default_factory=dict)


class Collector:
    """Agent observer gathering per-execution timestamps."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._times: dict[str, _ExecTimes] = {}

    def _get(self, exec_id: str) -> _ExecTimes:
        return self._times.setdefault(exec_id, _ExecTimes())

    def event_received(self, org_id: str, exec_id: str, at: float) -> None:
        with self._cond:
            self._get(exec_id).received[org_id] = at

    def node_done(self, org_id: str, node_id: str, exec_id: str, at: float) -> None:
        with self._cond:
            self._get(exec_id).node_done[node_id] = at

    def history_committed(self, org_id: str, exec_id: str, at: float) -> None:
        with self._cond:
            self._get(exec_id).history[org_id] = at
            self._cond.notify_all()

    def wait(self, exec_id: str, n_orgs: int, timeout: float) -> _ExecTimes:
        deadline = time.monotonic() + timeout
        with self._cond:
            while len(self._get(exec_id).history) < n_orgs:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise BenchError(f"execution {exec_id} did not complete within {timeout}s")
                self._cond.wait(remaining)
            return self._times.pop(exec_id)


@dataclass
class BenchSummary:
    repetitions: int
    max_submit_to_commit_ms: float
    max_completion_gap_ms: float
    min_completion_gap_ms: float


def run_bench(config: TopologyConfig, repetitions: int, out: TextIO, warmup: int = 3,
              root: Optional[Path] = None, timeout: float = 60.0) -> BenchSummary:
    if config.mode != "threads":
        raise BenchError("bench needs scheduler mode 'threads'; wall-clock metrics are "
                         "meaningless under the deterministic scheduler")
    if repetitions < 1 or warmup < 0:
        raise BenchError("repetitions must be >= 1 and warmup >= 0")
    with tempfile.TemporaryDirectory(prefix="opssc-bench-") as tmp:
        collector = Collector()
        sim = simmod.create(config, Path(root or tmp), observer=collector)
        try:
            return _run(sim, collector, repetitions, warmup, out, timeout)
        finally:
            sim.close()


def _run(sim: simmod.Simulation, collector: Collector, repetitions: int, warmup: int,
         out: TextIO, timeout: float) -> BenchSummary:
    name, version = BENCH_SC
    sim.repo.publish(name, version, sample_sc_source(name, version))
    client = sim.client()
    reg = client.register_policy(build_sc_install_policy())
    if not reg.committed:
        raise BenchError(f"policy registration rejected: {reg.reason}")
    n_orgs = len(sim.network.orgs)

    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    worst_latency, worst_gap, best_gap = 0.0, 0.0, float("inf")
    for rep in range(-warmup, repetitions):
        t_submit = time.perf_counter()
        committed_at = []
        fut = client.submit_execute("sc-install", {"name": name, "version": version})
        fut.add_done_callback(lambda f: committed_at.append(time.perf_counter()))
        res = fut.result(timeout=timeout)
        if not res.committed:
            raise BenchError(f"repetition {rep}: execute rejected ({res.reason})")
        exec_id = res.response.decode()
        times = collector.wait(exec_id, n_orgs, timeout)
        # the callback may lag the waiter by a few instructions
        t_commit = committed_at[0] if committed_at else time.perf_counter()
        latency = (t_commit - t_submit) * 1000.0
        done = list(times.node_done.values())
        gap = (max(done) - min(done)) * 1000.0
        if rep < 0:
            continue
        worst_latency = max(worst_latency, latency)
        worst_gap, best_gap = max(worst_gap, gap), min(best_gap, gap)
        for org_id in sorted(times.history):
            per_org = (times.history[org_id] - times.received[org_id]) * 1000.0
            writer.writerow([rep, exec_id, org_id, f"{latency:.3f}", f"{per_org:.3f}", f"{gap:.3f}"])
        out.flush()
    return BenchSummary(repetitions, worst_latency, worst_gap, best_gap)
