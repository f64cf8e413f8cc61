"""Acceptance criteria, one test per criterion.

Each test prints ``ACCEPTANCE <n> PASS|FAIL <title>``; the lines are also
repeated in the pytest terminal summary.
"""

import contextlib
import csv
import io
import random
import time
from pathlib import Path

from opssc import sim as simmod
from opssc.catalog import build_sc_install_policy, deploy_or_upgrade, sample_sc_source
from opssc.cli import main
from opssc.config import data_path, load_topology, parse_topology, topology_yaml
from opssc.cost import (
    CONVENTIONAL,
    PROPOSED,
    DEFAULT_PARAMS,
    CostParams,
    learning_sum,
    learning_sum_closed,
    total_cost,
)
from opssc.encoding import EncodingError
from opssc.engine import COMPLETE, CommandStep, OperationalPolicy, OpsClient
from opssc.ledger import SignedTransaction, TxKind, load_chain, verify_chain
from opssc.network import ConsensusPolicy

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(n, title):
    try:
        yield
    except BaseException:
        line = f"ACCEPTANCE {n} FAIL {title}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"ACCEPTANCE {n} PASS {title}"
    RESULTS.append(line)
    print(line)


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def brute_total(method, n, p=DEFAULT_PARAMS):
    total = p.C_plc_prop_unit + (p.N_org - 1) * p.C_plc_appr_unit
    if method == PROPOSED:
        total += p.C_dev_sc
    for k in range(1, n + 1):
        if method == CONVENTIONAL:
            unit = p.C_ops_prop_unit + (p.N_org - 1) * p.C_ops_appr_unit + p.N_org * p.N_node * p.C_exec_unit
        else:
            unit = p.C_trigger_unit
        total += unit * p.a ** (k - 1)
    return total


# 1 -------------------------------------------------------------------------

def test_c1_cost_headline():
    with criterion(1, "cost headline 9.4 / 2.5 man-hours, 74% reduction"):
        t0 = time.perf_counter()
        code, out, err = cli("cost", "estimate", "--summary")
        elapsed = time.perf_counter() - t0
        assert code == 0
        row = next(csv.DictReader(io.StringIO(out)))
        assert row["n"] == "4"
        assert row["conventional_h"] == "9.4"
        assert row["proposed_h"] == "2.5"
        assert row["reduction_pct"] == "74"
        conv, prop = float(row["conventional_mm"]), float(row["proposed_mm"])
        assert abs(total_cost(DEFAULT_PARAMS, CONVENTIONAL) / brute_total(CONVENTIONAL, 4) - 1) < 1e-6
        assert abs(total_cost(DEFAULT_PARAMS, PROPOSED) / brute_total(PROPOSED, 4) - 1) < 1e-6
        assert abs(conv - 562.24) < 0.005 and abs(prop - 148.47) < 0.005
        assert elapsed < 1.0


# 2 -------------------------------------------------------------------------

UNITS = ("C_plc_prop_unit", "C_plc_appr_unit", "C_ops_prop_unit", "C_ops_appr_unit",
         "C_exec_unit", "C_trigger_unit", "C_dev_sc")


def test_c2_cost_properties():
    with criterion(2, "geometric sum forms agree; monotone over >=1000 random samples"):
        for a in (0.5, 0.95, 1.0):
            for n in (0, 1, 10, 1000):
                it, cl = learning_sum(a, n), learning_sum_closed(a, n)
                assert abs(it - cl) <= 1e-9 * max(1.0, abs(cl)), (a, n, it, cl)
        rng = random.Random(20240601)
        samples = 0
        for _ in range(1000):
            p = CostParams(n=rng.randrange(0, 100), N_org=rng.randrange(1, 30),
                           N_node=rng.randrange(1, 10), a=rng.uniform(0.01, 1.0),
                           **{u: rng.uniform(0, 500) for u in UNITS})
            for method in (CONVENTIONAL, PROPOSED):
                base = total_cost(p, method)
                assert total_cost(p.with_(n=p.n + 1), method) >= base
                for u in UNITS:
                    bump = rng.uniform(0.001, 100)
                    assert total_cost(p.with_(**{u: getattr(p, u) + bump}), method) >= base
            samples += 1
        assert samples >= 1000


# 3 -------------------------------------------------------------------------

def test_c3_end_to_end_install(tmp_path):
    with criterion(3, "7x2 install: complete, 14 nodes list mycc 1.1, 1+7 txs, ledger verify 0"):
        t0 = time.perf_counter()
        st = tmp_path / "state"
        assert cli("--state", st, "network", "init", data_path("topology-7x2.yaml"))[0] == 0
        assert cli("--state", st, "repo", "publish", "mycc", "1.1")[0] == 0
        assert cli("--state", st, "policy", "register", data_path("policies/sc-install.yaml"))[0] == 0
        code, out, err = cli("--state", st, "op", "run", "sc-install",
                             "--param", "name=mycc", "--param", "version=1.1")
        assert code == 0, err
        exec_id = out.split()[1]
        assert "phase complete" in out
        code, out, err = cli("--state", st, "ledger", "verify")
        assert code == 0, err
        elapsed = time.perf_counter() - t0

        sim = simmod.open_state(st)
        assert OpsClient(sim.network, "Org1").get_execution_status(exec_id).phase == COMPLETE
        assert len(sim.network.nodes) == 14
        for node in sim.network.nodes.values():
            assert ("mycc", "1.1") in node.installed_scs, node.node_id
            assert (node.workdir / "mycc-1.1").is_dir()
        chain = sim.network.replicas["peer0.org1"].chain
        executes = [tx for b in chain for tx in b.valid_txs()
                    if tx.function == "execute_operation" and tx.rw_set.response.decode() == exec_id]
        histories = [tx for b in chain for tx in b.valid_txs()
                     if tx.function == "register_history" and tx.args[0] == exec_id]
        assert len(executes) == 1 and len(histories) == 7
        assert sim.network.replicas_agree()
        assert elapsed < 10.0, elapsed


def test_c3_sc_list_output_on_every_node(tmp_path):
    with criterion("3b", "sc-list step output on all 14 nodes shows mycc 1.1"):
        from opssc.agent import BuiltinRunner
        from opssc.catalog import VerbContext
        sim, *_ = _install(tmp_path, 7)
        runner = BuiltinRunner()
        for node in sim.network.nodes.values():
            out = runner.run(node, CommandStep("sc-list"), VerbContext(node)).output
            assert "mycc 1.1\n" in out, node.node_id
        sim.close()


def _install(root, n_orgs, seed=42):
    config = parse_topology(topology_yaml(n_orgs, 2, seed=seed))
    sim = simmod.create(config, root)
    sim.repo.publish("mycc", "1.1", sample_sc_source("mycc", "1.1"))
    assert sim.client().register_policy(build_sc_install_policy()).committed
    res, status = sim.run_operation("sc-install", {"name": "mycc", "version": "1.1"})
    return sim, res, status


# 4 -------------------------------------------------------------------------

def test_c4_deploy_precondition(tmp_path):
    with criterion(4, "deploy rejected not_installed_everywhere until install completes"):
        config = parse_topology(topology_yaml(7, 2, seed=42))
        sim = simmod.create(config, tmp_path)
        sim.repo.publish("mycc", "1.1", sample_sc_source("mycc", "1.1"))
        net = sim.network
        # Org7's agent is replaced by a subscriber that drops events
        net.subscribe("Org7", lambda ev: None, catch_up=False)
        sim.client().register_policy(build_sc_install_policy())
        res = sim.client().execute_operation("sc-install", {"name": "mycc", "version": "1.1"})
        net.run_until_quiescent()
        assert sim.client().get_execution_status(res.exec_id).phase == "partially_reported"
        rej = deploy_or_upgrade(net, "Org1", "mycc", "1.1")
        assert rej.reason == "not_installed_everywhere"
        assert net.query("Org1", "lscc", "active", ["mycc"]) == b""

        sim.agents["Org7"].subscribe(catch_up=True)
        net.run_until_quiescent()
        assert sim.client().get_execution_status(res.exec_id).phase == COMPLETE
        ok = deploy_or_upgrade(net, "Org1", "mycc", "1.1")
        assert ok.committed, ok
        assert net.query("Org7", "lscc", "active", ["mycc"]) == b"1.1"
        assert net.replicas_agree()


# 5 -------------------------------------------------------------------------

def test_c5_consensus_policy_enforced(tmp_path):
    with criterion(5, "all-of {A,B,C} with C withheld rejected, replicas unchanged"):
        config = parse_topology(topology_yaml(3, 2, seed=5))
        sim = simmod.create(config, tmp_path)
        net = sim.network
        allof = ConsensusPolicy.all_of(["Org1", "Org2", "Org3"])
        pol = OperationalPolicy("op", "op", (CommandStep("sc-list"),), consensus_policy=allof)
        assert sim.client().register_policy(pol).committed
        before = net.state_snapshots()
        heights = {n: r.height for n, r in net.replicas.items()}

        # C's endorsement withheld by taking its peers offline
        net.set_online("Org3", False)
        res = sim.client().execute_operation("op", {})
        assert not res.committed and res.reason == "endorsement_policy"
        net.run_until_quiescent()
        assert net.state_snapshots() == before
        assert {n: r.height for n, r in net.replicas.items()} == heights
        net.set_online("Org3", True)

        # a tx carrying only A and B endorsements handed straight to the orderer
        t = net.clock + 1
        endorsements, rw = [], None
        for node_id in ("peer0.org1", "peer0.org2"):
            e, rw = net.endorse(node_id, "opssc", "execute_operation", ["op", "{}"], "Org1", t)
            endorsements.append(e)
        tx = SignedTransaction.create(TxKind.INVOKE, "opssc", "execute_operation", ["op", "{}"],
                                      "Org1", t, rw, endorsements)
        fut = net.enqueue_raw(tx)
        net.run_until_quiescent()
        assert fut.result().reason == "endorsement_policy"
        assert net.state_snapshots() == before
        assert net.replicas_agree()
        assert all(verify_chain(r) for r in net.replicas.values())


# 6 -------------------------------------------------------------------------

def _scenario_corpus(root: Path):
    """Yield finished simulations covering success, failure and rejection paths."""
    sim, *_ = _install(root / "install", 3)
    yield "install", sim
    deploy_or_upgrade(sim.network, "Org1", "mycc", "1.1")
    yield "install+deploy", sim

    s2, _, st = _install(root / "missing", 3)
    s2.run_operation("sc-install", {"name": "ghost", "version": "0"})
    yield "failed-op", s2

    s3 = simmod.create(parse_topology(topology_yaml(3, 2, seed=1)), root / "rej")
    s3.client().register_policy(build_sc_install_policy())
    s3.client().execute_operation("sc-install", {"name": "x"})
    s3.network.set_online("Org2", False)
    s3.client().execute_operation("sc-install", {"name": "x", "version": "1"})
    s3.network.set_online("Org2", True)
    s3.network.run_until_quiescent()
    yield "rejections", s3

    s4 = simmod.create(parse_topology(topology_yaml(2, 2, seed=9, max_txs_per_block=2)), root / "batch")
    s4.client().register_policy(OperationalPolicy("ls", "ls", (CommandStep("sc-list"),)))
    futs = [s4.client(o).submit_execute("ls", {}) for o in ("Org1", "Org2", "Org1")]
    s4.network.run_until_quiescent()
    assert all(f.done() for f in futs)
    yield "batched", s4


def _verifies(data: bytes) -> bool:
    try:
        return verify_chain(load_chain(data))
    except EncodingError:
        return False


def test_c6_ledger_integrity(tmp_path):
    with criterion(6, ">=100 random single-bit flips all detected; replicas agree in every scenario"):
        dumps = []
        for name, sim in _scenario_corpus(tmp_path):
            assert sim.network.replicas_agree(), name
            snaps = sim.network.state_snapshots()
            assert len(set(snaps.values())) == 1, name
            for r in sim.network.replicas.values():
                assert verify_chain(r), name
            dumps.append(next(iter(sim.network.replicas.values())).dump())
        rng = random.Random(6)
        flips = 0
        for data in dumps:
            assert _verifies(data)
            for _ in range(60):
                buf = bytearray(data)
                bit = rng.randrange(len(buf) * 8)
                buf[bit // 8] ^= 1 << (bit % 8)
                assert not _verifies(bytes(buf)), f"bit {bit} flip undetected"
                flips += 1
        assert flips >= 100

        # and through the CLI, on a state dir
        st = tmp_path / "cli"
        cli("--state", st, "network", "init", data_path("topology-3x2.yaml"))
        cli("--state", st, "policy", "register", data_path("policies/sc-install.yaml"))
        assert cli("--state", st, "ledger", "verify")[0] == 0
        victim = st / "ledger" / "peer1.org2.chain"
        raw = bytearray(victim.read_bytes())
        for _ in range(10):
            buf = bytearray(raw)
            bit = rng.randrange(len(buf) * 8)
            buf[bit // 8] ^= 1 << (bit % 8)
            victim.write_bytes(bytes(buf))
            assert cli("--state", st, "ledger", "verify")[0] == 4


# 7 -------------------------------------------------------------------------

COUNT_SH = b"echo run >> ran.txt\n"


def test_c7_exactly_once_under_redelivery(tmp_path):
    with criterion(7, "redelivered events: one record per (exec, org), one run per node"):
        config = parse_topology(topology_yaml(3, 2, seed=77))
        sim = simmod.create(config, tmp_path)
        net = sim.network
        net.redelivery_rate = 1.0
        pol = OperationalPolicy("count", "count", (CommandStep("exec", ("count.sh",)),),
                                payload={"count.sh": COUNT_SH})
        sim.client().register_policy(pol)
        exec_ids = []
        for _ in range(3):
            res, st = sim.run_operation("count", {})
            assert st.phase == COMPLETE
            exec_ids.append(res.exec_id)
        net.redelivery_rate = 0.5
        for _ in range(3):
            res, st = sim.run_operation("count", {})
            exec_ids.append(res.exec_id)
        # re-subscribing replays the whole backlog once more
        for agent in sim.agents.values():
            agent.subscribe(catch_up=True)
        net.run_until_quiescent()

        delivered = [tx for _, tx in net.delivery_log]
        assert len(delivered) > len(set(delivered)), "harness did not inject duplicates"
        client = sim.client()
        for exec_id in exec_ids:
            reports = client.history(exec_id)
            assert sorted(r.org_id for r in reports) == ["Org1", "Org2", "Org3"]
            for r in reports:
                assert len(r.records) == 2
        for node in net.nodes.values():
            runs = (node.workdir / "ran.txt").read_text().splitlines()
            assert len(runs) == len(exec_ids), node.node_id
        for agent in sim.agents.values():
            assert all(v == 1 for v in agent.executions.values())
            assert not agent.errors


# 8 -------------------------------------------------------------------------

def test_c8_determinism(tmp_path):
    with criterion(8, "same seed, byte-identical chain dumps"):
        dumps = []
        for run in ("a", "b"):
            sim, res, st = _install(tmp_path / run, 7, seed=1234)
            assert st.phase == COMPLETE
            deploy_or_upgrade(sim.network, "Org1", "mycc", "1.1")
            dumps.append({n: r.dump() for n, r in sim.network.replicas.items()})
        assert dumps[0] == dumps[1]
        assert len(set(dumps[0].values())) == 1


# 9 -------------------------------------------------------------------------

def test_c9_bench(tmp_path):
    with criterion(9, "threads bench 3x2, 100 reps, gaps >= 0, submit->commit < 1 s"):
        config = load_topology(data_path("topology-3x2-threads.yaml"))
        assert config.mode == "threads" and len(config.orgs) == 3
        out = tmp_path / "bench.csv"
        code, _, err = cli("bench", data_path("topology-3x2-threads.yaml"),
                           "--repetitions", 100, "--out", out)
        assert code == 0, err
        rows = list(csv.DictReader(out.open()))
        assert {int(r["rep"]) for r in rows} == set(range(100))
        assert len(rows) == 300
        for r in rows:
            gap = float(r["completion_gap_ms"])
            lat = float(r["submit_to_commit_ms"])
            hist = float(r["event_to_history_commit_ms"])
            assert gap >= 0 and hist >= 0
            assert 0 <= lat < 1000.0
