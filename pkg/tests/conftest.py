import pytest

from opssc import sim as simmod
from opssc.catalog import build_sc_install_policy, sample_sc_source
from opssc.config import parse_topology, topology_yaml


def make_sim(root, n_orgs=3, n_nodes=2, **kw):
    config = parse_topology(topology_yaml(n_orgs, n_nodes, **kw))
    return simmod.create(config, root)


def install_scenario(root, n_orgs=7, n_nodes=2, seed=42, name="mycc", version="1.1"):
    """Publish, register the install policy and run it once."""
    sim = make_sim(root, n_orgs, n_nodes, seed=seed)
    sim.repo.publish(name, version, sample_sc_source(name, version))
    reg = sim.client().register_policy(build_sc_install_policy())
    assert reg.committed, reg
    res, status = sim.run_operation("sc-install", {"name": name, "version": version})
    return sim, res, status


@pytest.fixture
def sim3(tmp_path):
    s = make_sim(tmp_path)
    yield s
    s.close()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
