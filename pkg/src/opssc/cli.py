"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 tx rejected, 4 ledger integrity
failure, 5 operation executed but failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import bench as benchmod
from . import cost as costmod
from . import sim as simmod
from .catalog import deploy_or_upgrade, sample_sc_source
from .config import (
    CONFIG_ENV,
    SchemaError,
    data_path,
    load_cost_params,
    load_policy,
    load_topology,
)
from .encoding import EncodingError
from .engine import COMPLETE, FAILED, HistoryReport, PolicyValidationError
from .ledger import (
    ChainIntegrityError,
    load_chain,
    replay_state,
    verify_chain,
)
from .network import ConfigError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_REJECTED = 3
EXIT_INTEGRITY = 4
EXIT_OP_FAILED = 5

STATE_ENV = "OPSSC_STATE"
DEFAULT_STATE = ".opssc"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _state_dir(args) -> Path:
    return Path(args.state or os.environ.get(STATE_ENV) or DEFAULT_STATE)


def _config_path(value: Optional[str]) -> Path:
    value = value or os.environ.get(CONFIG_ENV)
    if not value:
        raise CliError(f"no config file given and ${CONFIG_ENV} is not set", EXIT_VALIDATION)
    return Path(value)


def _parse_params(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        key, sep, value = p.partition("=")
        if not sep or not key:
            raise CliError(f"--param expects key=value, got {p!r}", EXIT_VALIDATION)
        out[key] = value
    return out


def _open(args) -> simmod.Simulation:
    try:
        return simmod.open_state(_state_dir(args))
    except (ChainIntegrityError, EncodingError) as exc:
        raise CliError(f"ledger integrity failure: {exc}", EXIT_INTEGRITY) from None


# ---- network / policy -----------------------------------------------------

def cmd_network_init(args) -> int:
    path = _config_path(args.config)
    sim = simmod.init_state(_state_dir(args), path.read_text(), str(path), force=args.force)
    net = sim.network
    genesis = next(iter(net.replicas.values())).chain[0].block_hash.hex()
    print(f"initialized {len(net.orgs)} orgs, {len(net.nodes)} node sandboxes in {sim.root}")
    print(f"genesis {genesis}")
    return EXIT_OK


def cmd_policy_register(args) -> int:
    policy = load_policy(Path(args.file))
    sim = _open(args)
    try:
        res = sim.client(args.org).register_policy(policy)
        simmod.save_state(sim)
    finally:
        sim.close()
    if not res.committed:
        _err(f"rejected: {res.reason} {res.message}".rstrip())
        return EXIT_REJECTED
    print(f"registered {policy.op_id} in block {res.block_index}")
    return EXIT_OK


def cmd_policy_list(args) -> int:
    sim = _open(args)
    try:
        client = sim.client(args.org)
        for op_id in client.list_policies():
            p = client.get_policy(op_id)
            print(f"{op_id}\t{p.name}\t{len(p.command_template)} steps\t{p.timing.to_dict()}")
    finally:
        sim.close()
    return EXIT_OK


def cmd_repo_publish(args) -> int:
    sim = _open(args)
    sim.close()
    if args.source:
        src = Path(args.source)
        files = {p.relative_to(src).as_posix(): p.read_bytes()
                 for p in sorted(src.rglob("*")) if p.is_file()}
    else:
        files = sample_sc_source(args.name, args.version)
    dig = sim.repo.publish(args.name, args.version, files)
    print(f"published {args.name}-{args.version}.tgz {dig}")
    return EXIT_OK


def cmd_op_run(args) -> int:
    params = _parse_params(args.param)
    sim = _open(args)
    try:
        res, status = sim.run_operation(args.op_id, params, args.org, timeout=args.timeout)
        simmod.save_state(sim)
        if not res.committed:
            _err(f"rejected: {res.reason} {res.tx.message}".rstrip())
            return EXIT_REJECTED
        print(f"exec_id {res.exec_id}")
        print(f"phase {status.phase}")
        client = sim.client(args.org)
        for report in client.history(res.exec_id):
            for rec in report.records:
                print(f"  {report.org_id}\t{rec.node_id}\t{rec.overall}")
        for agent in sim.agents.values():
            for e in agent.errors:
                _err(e)
        if status.phase == FAILED:
            return EXIT_OP_FAILED
        return EXIT_OK if status.phase == COMPLETE else EXIT_REJECTED
    finally:
        sim.close()


def cmd_op_tick(args) -> int:
    """Drive periodic policies for a number of logical ticks."""
    from .engine import due_periodic
    sim = _open(args)
    try:
        client = sim.client(args.org)
        policies = [client.get_policy(op) for op in client.list_policies()]
        issued = 0
        for tick in range(1, args.ticks + 1):
            for p in due_periodic(policies, tick):
                params = {**_parse_params(args.param), "tick": str(tick)}
                params = {k: v for k, v in params.items()
                          if k in p.required_params | set(p.default_params)}
                res, status = sim.run_operation(p.op_id, params, args.org)
                phase = status.phase if status else f"rejected({res.reason})"
                print(f"tick {tick}\t{p.op_id}\t{res.exec_id or '-'}\t{phase}")
                issued += bool(res.committed)
        simmod.save_state(sim)
        print(f"{issued} executions issued over {args.ticks} ticks")
    finally:
        sim.close()
    return EXIT_OK


def cmd_status(args) -> int:
    sim = _open(args)
    try:
        client = sim.client(args.org)
        if args.exec_id:
            status = client.get_execution_status(args.exec_id)
            if status is None:
                _err(f"not found: {args.exec_id}")
                return EXIT_VALIDATION
            print(json.dumps(status.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        for row in client.executions():
            st = client.get_execution_status(row["exec_id"])
            print(f"{row['exec_id']}\t{row['op_id']}\tt={row['issued_at']}\t{st.phase}")
    finally:
        sim.close()
    return EXIT_OK


def cmd_sc_deploy(args) -> int:
    sim = _open(args)
    try:
        org = args.org or sorted(sim.network.orgs)[0]
        res = deploy_or_upgrade(sim.network, org, args.name, args.version)
        simmod.save_state(sim)
    finally:
        sim.close()
    if not res.committed:
        _err(f"rejected: {res.reason} {res.message}".rstrip())
        return EXIT_REJECTED
    print(f"{args.name} active at {args.version} (block {res.block_index})")
    return EXIT_OK


# ---- ledger ---------------------------------------------------------------

def _load_dump(path: Path):
    try:
        return load_chain(path.read_bytes())
    except (EncodingError, OSError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_INTEGRITY) from None


def cmd_ledger_verify(args) -> int:
    if args.dump:
        paths = [Path(p) for p in args.dump]
    else:
        root = _state_dir(args)
        paths = sorted((root / "ledger").glob("*.chain"))
        if not paths:
            raise CliError(f"no chain dumps under {root / 'ledger'}", EXIT_VALIDATION)
    chains = {}
    for p in paths:
        chain = _load_dump(p)
        if not verify_chain(chain):
            raise CliError(f"{p}: chain verification failed", EXIT_INTEGRITY)
        chains[p] = chain
    snapshots = {p: replay_state(c).snapshot() for p, c in chains.items()}
    tips = {p: c[-1].block_hash for p, c in chains.items()}
    if len(set(snapshots.values())) > 1 or len(set(tips.values())) > 1:
        raise CliError("replicas disagree on chain tip or world state", EXIT_INTEGRITY)
    height = len(next(iter(chains.values())))
    print(f"ok: {len(chains)} replica(s), height {height}, tip {next(iter(tips.values())).hex()}")
    return EXIT_OK


def _audit(chain, exec_id: str):
    """Scan committed txs for one execution: (execute tx, history reports)."""
    issue, reports = None, []
    for block in chain:
        for tx in block.valid_txs():
            if tx.sc_name != "opssc":
                continue
            if tx.function == "execute_operation" and tx.rw_set.response.decode() == exec_id:
                issue = (block.index, tx)
            elif tx.function == "register_history" and tx.args and tx.args[0] == exec_id:
                reports.append((block.index, tx, HistoryReport.from_json(tx.args[1].encode())))
    return issue, reports


def cmd_ledger_history(args) -> int:
    root = _state_dir(args)
    path = Path(args.dump) if args.dump else sorted((root / "ledger").glob("*.chain"))[0]
    chain = _load_dump(path)
    if not verify_chain(chain):
        raise CliError(f"{path}: chain verification failed", EXIT_INTEGRITY)
    issue, reports = _audit(chain, args.exec_id)
    if issue is None:
        _err(f"no execution {args.exec_id} on the ledger")
        return EXIT_VALIDATION
    block_index, tx = issue
    print(f"exec {args.exec_id}: op {tx.args[0]} issued by {tx.proposer_org} "
          f"at t={tx.logical_time} in block {block_index} params {tx.args[1]}")
    for block_index, tx, rep in reports:
        for rec in rep.records:
            print(f"block {block_index}\t{rep.org_id}\t{rec.node_id}\t{rec.overall}\t"
                  f"evidence {rec.evidence_digest}")
    return EXIT_OK


def cmd_ledger_dump(args) -> int:
    root = _state_dir(args)
    if args.node:
        path = root / "ledger" / f"{args.node}.chain"
    else:
        path = sorted((root / "ledger").glob("*.chain"))[0]
    data = path.read_bytes()
    if args.format == "binary":
        if args.out:
            Path(args.out).write_bytes(data)
        else:
            sys.stdout.buffer.write(data)
        return EXIT_OK
    chain = _load_dump(path)
    lines = []
    for b in chain:
        lines.append(f"block {b.index} hash {b.block_hash.hex()} prev {b.prev_hash.hex()} txs {len(b.txs)}")
        for tx, code in zip(b.txs, b.validation):
            lines.append(f"  tx {tx.tx_id.hex()} {tx.kind.value} {tx.sc_name}.{tx.function} "
                         f"t={tx.logical_time} by {tx.proposer_org} "
                         f"endorsed [{','.join(e.org_id for e in tx.endorsements)}] {code}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---- bench / cost ---------------------------------------------------------

def cmd_bench(args) -> int:
    config = load_topology(_config_path(args.config))
    try:
        if args.out:
            with open(args.out, "w", newline="") as fh:
                summary = benchmod.run_bench(config, args.repetitions, fh, warmup=args.warmup)
        else:
            summary = benchmod.run_bench(config, args.repetitions, sys.stdout, warmup=args.warmup)
    except benchmod.BenchError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from None
    print(f"{summary.repetitions} repetitions: max submit->commit "
          f"{summary.max_submit_to_commit_ms:.1f} ms, completion gap "
          f"{summary.min_completion_gap_ms:.1f}..{summary.max_completion_gap_ms:.1f} ms",
          file=sys.stderr)
    return EXIT_OK


def _n_range(args, default_n: int) -> list[int]:
    if args.n_range:
        lo, sep, hi = args.n_range.partition(":")
        try:
            lo_i, hi_i = int(lo), int(hi if sep else lo)
        except ValueError:
            raise CliError(f"--n-range expects A:B, got {args.n_range!r}", EXIT_VALIDATION) from None
        if lo_i < 0 or hi_i < lo_i:
            raise CliError(f"bad --n-range {args.n_range!r}", EXIT_VALIDATION)
        return list(range(lo_i, hi_i + 1))
    return [args.n if args.n is not None else default_n]


def cmd_cost_estimate(args) -> int:
    params = load_cost_params(Path(args.params) if args.params else data_path("defaults.params"))
    overrides = _parse_params(args.set)
    if overrides:
        merged = {**params.to_dict(), **{k: float(v) for k, v in overrides.items()}}
        params = costmod.CostParams.from_mapping(merged)
    model = {"model1": costmod.MODEL1, "model2": costmod.MODEL2}[args.model]
    methods = costmod.METHODS if args.method == "both" else (args.method,)
    rows = costmod.sweep(params, _n_range(args, params.n), model)
    text = costmod.rows_to_csv(rows, methods)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.summary and len(methods) == 2:
        for r in rows:
            print(f"n={r.n}: conventional {r.conventional_h} man-hours, proposed "
                  f"{r.proposed_h} man-hours, reduction {r.reduction_pct}%", file=sys.stderr)
    return EXIT_OK


# ---- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opssc", description="Blockchain operations simulator and cost estimator.")
    ap.add_argument("--state", help=f"state directory (default ${STATE_ENV} or {DEFAULT_STATE})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="group", required=True)

    net = sub.add_parser("network").add_subparsers(dest="cmd", required=True)
    p = net.add_parser("init", help="create replicas, sandboxes and agents")
    p.add_argument("config", nargs="?", help=f"topology file (default ${CONFIG_ENV})")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_network_init)

    pol = sub.add_parser("policy").add_subparsers(dest="cmd", required=True)
    p = pol.add_parser("register")
    p.add_argument("file")
    p.add_argument("--org")
    p.set_defaults(func=cmd_policy_register)
    p = pol.add_parser("list")
    p.add_argument("--org")
    p.set_defaults(func=cmd_policy_list)

    repo = sub.add_parser("repo").add_subparsers(dest="cmd", required=True)
    p = repo.add_parser("publish", help="publish an SC source tree to the shared repository")
    p.add_argument("name")
    p.add_argument("version")
    p.add_argument("--source", help="directory to pack (default: a generated sample)")
    p.set_defaults(func=cmd_repo_publish)

    op = sub.add_parser("op").add_subparsers(dest="cmd", required=True)
    p = op.add_parser("run")
    p.add_argument("op_id")
    p.add_argument("--param", "-p", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--org")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_op_run)
    p = op.add_parser("tick", help="advance logical time, issuing due periodic operations")
    p.add_argument("ticks", type=int)
    p.add_argument("--param", "-p", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--org")
    p.set_defaults(func=cmd_op_tick)

    p = sub.add_parser("status")
    p.add_argument("exec_id", nargs="?")
    p.add_argument("--org")
    p.set_defaults(func=cmd_status)

    sc = sub.add_parser("sc").add_subparsers(dest="cmd", required=True)
    p = sc.add_parser("deploy", help="deploy or upgrade an installed SC")
    p.add_argument("name")
    p.add_argument("version")
    p.add_argument("--org")
    p.set_defaults(func=cmd_sc_deploy)

    led = sub.add_parser("ledger").add_subparsers(dest="cmd", required=True)
    p = led.add_parser("verify")
    p.add_argument("--dump", action="append", help="verify these dump files instead of the state dir")
    p.set_defaults(func=cmd_ledger_verify)
    p = led.add_parser("history")
    p.add_argument("exec_id")
    p.add_argument("--dump")
    p.set_defaults(func=cmd_ledger_history)
    p = led.add_parser("dump")
    p.add_argument("--node")
    p.add_argument("--out")
    p.add_argument("--format", choices=("binary", "text"), default="binary")
    p.set_defaults(func=cmd_ledger_dump)

    p = sub.add_parser("bench", help="threads-mode latency benchmark, CSV output")
    p.add_argument("config", nargs="?", help=f"topology file (default ${CONFIG_ENV})")
    p.add_argument("--repetitions", "-n", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    cost = sub.add_parser("cost").add_subparsers(dest="cmd", required=True)
    p = cost.add_parser("estimate")
    p.add_argument("--params", help="parameter file (default: bundled defaults.params)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one parameter")
    p.add_argument("--method", choices=("both", "conventional", "proposed"), default="both")
    p.add_argument("--model", choices=("model1", "model2"), default="model2")
    p.add_argument("--n", type=int)
    p.add_argument("--n-range", metavar="A:B")
    p.add_argument("--out")
    p.add_argument("--summary", action="store_true", help="also print man-hour headline to stderr")
    p.set_defaults(func=cmd_cost_estimate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        import logging
        logging.basicConfig(level=logging.INFO)
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except (SchemaError, PolicyValidationError, ConfigError, costmod.CostParamError,
            simmod.StateError) as exc:
        _err(str(exc))
        return EXIT_VALIDATION
    except (ChainIntegrityError, EncodingError) as exc:
        _err(f"ledger integrity failure: {exc}")
        return EXIT_INTEGRITY
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
