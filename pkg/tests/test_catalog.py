import gzip
import io
import tarfile
from dataclasses import replace

import pytest

from opssc.catalog import (
    SharedRepo,
    VerbContext,
    build_sc_install_policy,
    deploy_or_upgrade,
    pack_tree,
    sample_sc_source,
    tree_digest,
    verb_fetch,
    verb_sc_install,
    verb_sc_list,
    verb_unpack,
    VerbFailed,
)
from opssc.engine import COMPLETE, FAILED, Target
from opssc.network import Node

from conftest import install_scenario, make_sim


def test_pack_is_deterministic():
    files = sample_sc_source("cc", "1")
    assert pack_tree("cc-1", files) == pack_tree("cc-1", dict(reversed(list(files.items()))))


def test_publish_is_immutable(tmp_path):
    repo = SharedRepo(tmp_path)
    d = repo.publish("cc", "1", sample_sc_source("cc", "1"))
    assert repo.publish("cc", "1", sample_sc_source("cc", "1")) == d
    with pytest.raises(FileExistsError):
        repo.publish("cc", "1", {"other": b"x"})
    assert repo.artifacts() == ["cc-1"]


@pytest.fixture
def ctx(tmp_path):
    repo = SharedRepo(tmp_path / "repo")
    repo.publish("cc", "1", sample_sc_source("cc", "1"))
    wd = tmp_path / "wd"
    wd.mkdir()
    return VerbContext(Node("n", "Org1", frozenset({"endorser"}), wd), repo)


def test_fetch_unpack_install_list(ctx):
    verb_fetch(ctx, ["cc-1.tgz"])
    verb_unpack(ctx, ["cc-1.tgz"])
    assert verb_sc_install(ctx, ["cc", "1"]) == "installed cc 1\n"
    assert verb_sc_install(ctx, ["cc", "1"]) == "already installed cc 1\n"
    assert verb_sc_list(ctx, []) == "cc 1\n"


def test_fetch_rejects_digest_mismatch(ctx):
    (ctx.repo.root / "cc-1.digest").write_text("00" * 32 + "\n")
    with pytest.raises(VerbFailed, match="digest mismatch"):
        verb_fetch(ctx, ["cc-1.tgz"])
    assert not (ctx.workdir / "cc-1.tgz").exists()


def test_install_rejects_tampered_tree(ctx):
    verb_fetch(ctx, ["cc-1.tgz"])
    verb_unpack(ctx, ["cc-1.tgz"])
    (ctx.workdir / "cc-1" / "chaincode.go").write_text("evil")
    with pytest.raises(VerbFailed, match="digest mismatch"):
        verb_sc_install(ctx, ["cc", "1"])
    assert ctx.node.installed_scs == set()


def test_unpack_refuses_traversal_member(ctx):
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w") as tar:
        info = tarfile.TarInfo("cc-9/../../evil")
        info.size = 1
        tar.addfile(info, io.BytesIO(b"x"))
    (ctx.workdir / "cc-9.tgz").write_bytes(gzip.compress(raw.getvalue()))
    with pytest.raises(VerbFailed):
        verb_unpack(ctx, ["cc-9.tgz"])


def test_tree_digest_order_independent():
    assert tree_digest({"a": b"1", "b": b"2"}) == tree_digest({"b": b"2", "a": b"1"})
    assert tree_digest({"a": b"1"}) != tree_digest({"a": b"2"})


def test_install_policy_shape():
    p = build_sc_install_policy()
    assert [s.verb for s in p.command_template] == ["clean", "fetch", "unpack", "sc-install", "sc-list"]
    assert p.required_params == {"name", "version"}


def test_install_fails_on_missing_artifact(sim3):
    sim3.client().register_policy(build_sc_install_policy())
    res, status = sim3.run_operation("sc-install", {"name": "ghost", "version": "1"})
    assert status.phase == FAILED
    assert {s for v in status.reported.values() for s in v} == {"failed(2)"}


def test_deploy_needs_install_everywhere(tmp_path):
    sim = make_sim(tmp_path, 3, 2)
    sim.repo.publish("mycc", "1.1", sample_sc_source("mycc", "1.1"))
    c = sim.client()
    partial = replace(build_sc_install_policy("install-12"),
                      target=Target("per_org", orgs=("Org1", "Org2")))
    c.register_policy(partial)
    c.register_policy(build_sc_install_policy())
    _, st = sim.run_operation("install-12", {"name": "mycc", "version": "1.1"})
    assert st.phase == COMPLETE
    res = deploy_or_upgrade(sim.network, "Org1", "mycc", "1.1")
    assert res.reason == "not_installed_everywhere"
    _, st = sim.run_operation("sc-install", {"name": "mycc", "version": "1.1"})
    assert st.phase == COMPLETE
    assert deploy_or_upgrade(sim.network, "Org1", "mycc", "1.1").committed
    assert deploy_or_upgrade(sim.network, "Org1", "mycc", "1.1").reason == "same_version"
    # now invokable through the lifecycle
    assert sim.network.submit_tx("Org2", "mycc", "put", ["k", "v"]).committed
    assert sim.network.replicas_agree()


def test_upgrade_path(tmp_path):
    sim, _, st = install_scenario(tmp_path, n_orgs=2)
    assert deploy_or_upgrade(sim.network, "Org1", "mycc", "1.1").committed
    sim.repo.publish("mycc", "1.2", sample_sc_source("mycc", "1.2"))
    _, st = sim.run_operation("sc-install", {"name": "mycc", "version": "1.2"})
    assert st.phase == COMPLETE
    assert deploy_or_upgrade(sim.network, "Org1", "mycc", "1.2").committed
    assert sim.network.query("Org2", "lscc", "active", ["mycc"]) == b"1.2"
