import pytest

from opssc.config import (
    SchemaError,
    data_path,
    load_cost_params,
    load_policy,
    load_topology,
    parse_cost_params,
    parse_policy,
    parse_topology,
    topology_yaml,
)
from opssc.cost import DEFAULT_PARAMS

TOPO = """\
format_version: 1
orgs:
  - id: A
    nodes:
      - id: a0
        roles: [endorser, committer, orderer]
  - id: B
    nodes:
      - id: b0
        roles: [endorser, committer]
consensus_policy: {orgs: all, quorum: 1}
scheduler: {mode: deterministic, seed: 7}
"""


def test_parse_topology():
    cfg = parse_topology(TOPO)
    assert [o.org_id for o in cfg.orgs] == ["A", "B"]
    assert cfg.consensus_policy.quorum == 1
    assert cfg.seed == 7 and cfg.mode == "deterministic"


@pytest.mark.parametrize("old,new,line,needle", [
    ("roles: [endorser, committer]\n", "roles: [endorser, janitor]\n", 10, "roles"),
    ("format_version: 1", "format_version: 2", 1, "format_version"),
    ("seed: 7", "sed: 7", 12, "unknown key 'sed'"),
    ("quorum: 1", "quorum: 5", 11, "quorum"),
    ("      - id: b0", "      - id: a0", 9, "duplicate node"),
])
def test_topology_errors_name_the_line(old, new, line, needle):
    with pytest.raises(SchemaError) as ei:
        parse_topology(TOPO.replace(old, new), "t.yaml")
    assert ei.value.line == line
    assert needle in str(ei.value) and str(ei.value).startswith(f"t.yaml:{line}:")


def test_deterministic_needs_seed():
    with pytest.raises(SchemaError, match="seed"):
        parse_topology(TOPO.replace("seed: 7", "batch_timeout: 1"))


def test_needs_orderer():
    with pytest.raises(SchemaError, match="orderer"):
        parse_topology(TOPO.replace("committer, orderer", "committer"))


def test_yaml_syntax_error_has_line():
    with pytest.raises(SchemaError) as ei:
        parse_topology(TOPO + "  bad: [\n")
    assert ei.value.line is not None


def test_generated_topology():
    cfg = parse_topology(topology_yaml(7, 2, seed=3))
    assert len(cfg.orgs) == 7 and cfg.node_count == 14


@pytest.mark.parametrize("name", ["topology-7x2.yaml", "topology-3x2.yaml", "topology-3x2-threads.yaml"])
def test_bundled_topologies(name):
    load_topology(data_path(name))


def test_bundled_policies():
    p = load_policy(data_path("policies/sc-install.yaml"))
    assert [s.verb for s in p.command_template] == ["clean", "fetch", "unpack", "sc-install", "sc-list"]
    snap = load_policy(data_path("policies/ledger-snapshot.yaml"))
    assert "check-space.sh" in snap.payload
    assert load_policy(data_path("policies/log-collect.yaml")).timing.interval == 24


def test_policy_string_steps_and_errors():
    text = "format_version: 1\nop_id: x\nsteps:\n  - sc-list\n  - fetch {{n}}.tgz\nparams: {required: [n]}\n"
    p = parse_policy(text)
    assert p.command_template[1].args == ("{{n}}.tgz",)
    with pytest.raises(SchemaError, match="placeholders"):
        parse_policy(text.replace("required: [n]", "required: []"))
    with pytest.raises(SchemaError, match="missing required key 'steps'"):
        parse_policy("format_version: 1\nop_id: x\n")


def test_cost_params():
    assert load_cost_params(data_path("defaults.params")) == DEFAULT_PARAMS
    with pytest.raises(SchemaError) as ei:
        parse_cost_params("format_version: 1\nn: 4\nC_exec_unit: lots\n", "p")
    assert ei.value.line == 3
    with pytest.raises(SchemaError):
        parse_cost_params("format_version: 1\nwhat: 1\n")
