"""Built-in operations: the SC-installation policy, the shared artifact
repository and the builtin command verbs the runner dispatches to."""

from __future__ import annotations

import gzip
import io
import shutil
import subprocess
import sys
import tarfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable, Mapping, Optional

from .encoding import digest, enc_digest, enc_list, enc_str
from .engine import CommandStep, OperationalPolicy, Target, Timing
from .ledger import TxKind
from .network import ConsensusPolicy, Network, Node, TxResult

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_TIMEOUT = 124
EXIT_SANDBOX_ESCAPE = 126
EXIT_UNKNOWN_VERB = 127


class SandboxEscape(Exception):
    """A step tried to reach outside its node's workdir."""


class VerbFailed(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def sandbox_path(workdir: Path, rel: str) -> Path:
    if not rel or PurePosixPath(rel).is_absolute() or Path(rel).is_absolute():
        raise SandboxEscape(f"path {rel!r} must be relative to the node workdir")
    root = workdir.resolve()
    target = (root / rel).resolve()
    if target != root and root not in target.parents:
        raise SandboxEscape(f"path {rel!r} escapes the node workdir")
    return target


def tree_digest(files: Mapping[str, bytes]) -> str:
    """Digest of a file tree: sorted (relative path, content digest) pairs."""
    return digest(enc_list(
        enc_str(path) + enc_digest(digest(data)) for path, data in sorted(files.items())
    )).hex()


def _read_tree(root: Path) -> dict[str, bytes]:
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def _tar_members(payload: bytes, top: str) -> dict[str, bytes]:
    files = {}
    with tarfile.open(fileobj=io.BytesIO(payload), mode="r:gz") as tar:
        for m in tar.getmembers():
            if not m.isfile():
                continue
            name = PurePosixPath(m.name)
            if name.is_absolute() or ".." in name.parts or name.parts[0] != top:
                raise VerbFailed(f"archive member {m.name!r} outside {top}/")
            files[PurePosixPath(*name.parts[1:]).as_posix()] = tar.extractfile(m).read()
    return files


def pack_tree(top: str, files: Mapping[str, bytes]) -> bytes:
    """Deterministic tar.gz of ``files`` under directory ``top``."""
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w", format=tarfile.PAX_FORMAT) as tar:
        for path, data in sorted(files.items()):
            info = tarfile.TarInfo(f"{top}/{path}")
            info.size = len(data)
            info.mode = 0o644
            info.mtime = 0
            tar.addfile(info, io.BytesIO(data))
    out = io.BytesIO()
    with gzip.GzipFile(fileobj=out, mode="wb", mtime=0) as gz:
        gz.write(raw.getvalue())
    return out.getvalue()


@dataclass
class SharedRepo:
    """Directory of ``<name>-<version>.tgz`` plus ``<name>-<version>.digest``.

    The digest file holds the hex tree digest of the unpacked content.
    """

    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    def publish(self, name: str, version: str, files: Mapping[str, bytes]) -> str:
        stem = f"{name}-{version}"
        payload = pack_tree(stem, files)
        tree = tree_digest(files)
        tgz, dig = self.root / f"{stem}.tgz", self.root / f"{stem}.digest"
        if tgz.exists():
            if dig.read_text().strip() != tree:
                raise FileExistsError(f"{stem} already published with different content")
            return tree
        self.root.mkdir(parents=True, exist_ok=True)
        tgz.write_bytes(payload)
        dig.write_text(tree + "\n")
        return tree

    def artifact(self, name: str, version: str) -> tuple[bytes, str]:
        stem = f"{name}-{version}"
        return (self.root / f"{stem}.tgz").read_bytes(), (self.root / f"{stem}.digest").read_text().strip()

    def artifacts(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.tgz"))


def sample_sc_source(name: str, version: str) -> dict[str, bytes]:
    """A small, fixed SC source tree used by demos and benchmarks."""
    return {
        "chaincode.go": (
            f"package main\n\n// {name} {version}\nfunc main() {{}}\n"
        ).encode(),
        "META-INF/manifest.txt": f"name: {name}\nversion: {version}\n".encode(),
    }


# ---- builtin verbs ------------------------------------------------------

@dataclass
class VerbContext:
    node: Node
    repo: Optional[SharedRepo] = None
    payload: Mapping[str, bytes] = field(default_factory=dict)
    timeout: float = 30.0

    @property
    def workdir(self) -> Path:
        return self.node.workdir

    def path(self, rel: str) -> Path:
        return sandbox_path(self.workdir, rel)


def verb_clean(ctx: VerbContext, args: list[str]) -> str:
    if args:
        raise VerbFailed("clean takes no arguments")
    removed = 0
    for entry in sorted(ctx.workdir.iterdir()):
        if entry.is_dir() and not entry.is_symlink():
            shutil.rmtree(entry)
        else:
            entry.unlink()
        removed += 1
    return f"removed {removed} entries\n"


def verb_fetch(ctx: VerbContext, args: list[str]) -> str:
    if len(args) != 1 or not args[0].endswith(".tgz"):
        raise VerbFailed("usage: fetch <name>-<version>.tgz")
    if ctx.repo is None:
        raise VerbFailed("no shared repository configured")
    fname = args[0]
    stem = fname[:-len(".tgz")]
    src = sandbox_path(ctx.repo.root, fname)
    dig_src = sandbox_path(ctx.repo.root, f"{stem}.digest")
    if not src.is_file() or not dig_src.is_file():
        raise VerbFailed(f"{fname}: not found in shared repository")
    payload = src.read_bytes()
    expected = dig_src.read_text().strip()
    if tree_digest(_tar_members(payload, stem)) != expected:
        raise VerbFailed(f"{fname}: digest mismatch")
    ctx.path(fname).write_bytes(payload)
    ctx.path(f"{stem}.digest").write_text(expected + "\n")
    return f"fetched {fname} {expected}\n"


def verb_unpack(ctx: VerbContext, args: list[str]) -> str:
    if len(args) != 1 or not args[0].endswith(".tgz"):
        raise VerbFailed("usage: unpack <name>-<version>.tgz")
    src = ctx.path(args[0])
    if not src.is_file():
        raise VerbFailed(f"{args[0]}: no such file")
    stem = args[0][:-len(".tgz")]
    files = _tar_members(src.read_bytes(), stem)
    dest = ctx.path(stem)
    if dest.exists():
        shutil.rmtree(dest)
    for rel, data in sorted(files.items()):
        out = sandbox_path(dest.parent, f"{stem}/{rel}")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(data)
    return "".join(f"{stem}/{rel}\n" for rel in sorted(files))


def verb_sc_install(ctx: VerbContext, args: list[str]) -> str:
    if len(args) != 2:
        raise VerbFailed("usage: sc-install <name> <version>")
    name, version = args
    stem = f"{name}-{version}"
    src, dig = ctx.path(stem), ctx.path(f"{stem}.digest")
    if not src.is_dir() or not dig.is_file():
        raise VerbFailed(f"{stem}: unpacked payload not found")
    if tree_digest(_read_tree(src)) != dig.read_text().strip():
        raise VerbFailed(f"{stem}: payload digest mismatch")
    if (name, version) in ctx.node.installed_scs:
        return f"already installed {name} {version}\n"
    ctx.node.installed_scs.add((name, version))
    return f"installed {name} {version}\n"


def verb_sc_list(ctx: VerbContext, args: list[str]) -> str:
    return "".join(f"{n} {v}\n" for n, v in sorted(ctx.node.installed_scs))


def verb_snapshot_copy(ctx: VerbContext, args: list[str]) -> str:
    if len(args) != 2:
        raise VerbFailed("usage: snapshot-copy <src> <dst>")
    src, dst = ctx.path(args[0]), ctx.path(args[1])
    if not src.exists():
        raise VerbFailed(f"{args[0]}: no such file or directory")
    if dst.exists():
        raise VerbFailed(f"{args[1]}: already exists")
    if src.is_dir():
        shutil.copytree(src, dst)
        n = sum(1 for p in dst.rglob("*") if p.is_file())
    else:
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(src, dst)
        n = 1
    return f"copied {args[0]} -> {args[1]} ({n} files)\n"


def verb_exec(ctx: VerbContext, args: list[str]) -> str:
    if not args:
        raise VerbFailed("usage: exec <script> [args...]")
    script, *rest = args
    body = ctx.payload.get(script)
    if body is None:
        raise VerbFailed(f"{script}: not bundled with the policy")
    target = ctx.path(f".payload/{script}")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(body)
    interp = [sys.executable] if script.endswith(".py") else ["/bin/sh"]
    proc = subprocess.run(interp + [str(target), *rest], cwd=ctx.workdir,
                          capture_output=True, text=True, timeout=ctx.timeout)
    out = proc.stdout + proc.stderr
    if proc.returncode != 0:
        raise VerbFailed(out or f"{script} exited {proc.returncode}", proc.returncode)
    return out


BUILTIN_VERBS: dict[str, Callable[[VerbContext, list[str]], str]] = {
    "clean": verb_clean,
    "fetch": verb_fetch,
    "unpack": verb_unpack,
    "sc-install": verb_sc_install,
    "sc-list": verb_sc_list,
    "snapshot-copy": verb_snapshot_copy,
    "exec": verb_exec,
}


# ---- policies -----------------------------------------------------------

SC_INSTALL_OP = "sc-install"


def build_sc_install_policy(op_id: str = SC_INSTALL_OP,
                            consensus: Optional[ConsensusPolicy] = None) -> OperationalPolicy:
    """Five sequential steps: clean, fetch, unpack, install, list."""
    archive = "{{name}}-{{version}}.tgz"
    return OperationalPolicy(
        op_id=op_id,
        name="Smart contract installation",
        command_template=(
            CommandStep("clean"),
            CommandStep("fetch", (archive,)),
            CommandStep("unpack", (archive,)),
            CommandStep("sc-install", ("{{name}}", "{{version}}")),
            CommandStep("sc-list"),
        ),
        required_params=frozenset({"name", "version"}),
        timing=Timing(),
        target=Target(),
        consensus_policy=consensus,
    )


def deploy_or_upgrade(network: Network, client_org: str, sc_name: str, version: str,
                      policy: Optional[ConsensusPolicy] = None) -> TxResult:
    """Make ``sc_name`` invokable at ``version``.

    Refused unless every node of every consenting org has that version
    installed.
    """
    policy = policy or network.default_policy
    for org_id in sorted(policy.required_orgs):
        for node in network.org_nodes(org_id):
            if (sc_name, version) not in node.installed_scs:
                return TxResult.rejected("not_installed_everywhere", f"{node.node_id} lacks {sc_name} {version}")
    active = network.query(client_org, "lscc", "active", [sc_name]).decode()
    if active == version:
        return TxResult.rejected("same_version", f"{sc_name} is already at {version}")
    return network.submit_tx(client_org, "lscc", "deploy", [sc_name, version], policy, kind=TxKind.DEPLOY)
