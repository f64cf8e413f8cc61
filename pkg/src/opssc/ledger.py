"""Hash-chained block store with a versioned key-value world state."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

from .encoding import (
    ZERO_DIGEST,
    EncodingError,
    Reader,
    digest,
    enc_bytes,
    enc_digest,
    enc_int,
    enc_list,
    enc_str,
    enc_str_list,
)

DUMP_MAGIC = b"OPSSCCHN"
DUMP_FORMAT_VERSION = 1

VALID = "valid"
MVCC_CONFLICT = "mvcc_conflict"
BAD_ENDORSEMENT = "bad_endorsement"


class ChainIntegrityError(Exception):
    """A block does not extend the chain it is appended to."""


class TxKind(str, enum.Enum):
    INVOKE = "invoke"
    DEPLOY = "deploy"


@dataclass(frozen=True)
class RWSet:
    """Simulation result of one SC call: what it read, wrote and emitted.

    ``reads`` holds ``(key, version)`` pairs where version 0 means the key was
    absent. ``response`` is the SC's return payload.
    """

    reads: tuple[tuple[str, int], ...] = ()
    writes: tuple[tuple[str, bytes], ...] = ()
    events: tuple[tuple[str, bytes], ...] = ()
    response: bytes = b""

    def encode(self) -> bytes:
        return (
            enc_list(enc_str(k) + enc_int(v) for k, v in self.reads)
            + enc_list(enc_str(k) + enc_bytes(v) for k, v in self.writes)
            + enc_list(enc_str(n) + enc_bytes(p) for n, p in self.events)
            + enc_bytes(self.response)
        )

    def digest(self) -> bytes:
        return digest(self.encode())

    @classmethod
    def decode(cls, r: Reader) -> "RWSet":
        reads = tuple((i.str(), i.int()) for i in _closed(r.list()))
        writes = tuple((i.str(), i.field()) for i in _closed(r.list()))
        events = tuple((i.str(), i.field()) for i in _closed(r.list()))
        response = r.field()
        return cls(reads, writes, events, response)


def _closed(items: list[Reader]) -> Iterator[Reader]:
    # yields each item reader, then checks it was fully consumed
    for item in items:
        yield item
        item.expect_end()


@dataclass(frozen=True)
class Endorsement:
    org_id: str
    rw_digest: bytes

    def encode(self) -> bytes:
        return enc_str(self.org_id) + enc_digest(self.rw_digest)


@dataclass(frozen=True)
class SignedTransaction:
    kind: TxKind
    sc_name: str
    function: str
    args: tuple[str, ...]
    proposer_org: str
    logical_time: int
    rw_set: RWSet
    endorsements: tuple[Endorsement, ...]
    tx_id: bytes

    @classmethod
    def create(
        cls,
        kind: TxKind,
        sc_name: str,
        function: str,
        args: Sequence[str],
        proposer_org: str,
        logical_time: int,
        rw_set: RWSet,
        endorsements: Iterable[Endorsement] = (),
    ) -> "SignedTransaction":
        endorsements = tuple(sorted(endorsements, key=lambda e: e.org_id))
        orgs = [e.org_id for e in endorsements]
        if len(set(orgs)) != len(orgs):
            raise ValueError("at most one endorsement per org")
        tx = cls(TxKind(kind), sc_name, function, tuple(args), proposer_org,
                 logical_time, rw_set, endorsements, ZERO_DIGEST)
        return replace(tx, tx_id=tx.compute_id())

    def body(self) -> bytes:
        """Canonical encoding of every field except ``tx_id`` and endorsements."""
        return (
            enc_str(self.kind.value)
            + enc_str(self.sc_name)
            + enc_str(self.function)
            + enc_str_list(self.args)
            + enc_str(self.proposer_org)
            + enc_int(self.logical_time)
            + enc_bytes(self.rw_set.encode())
        )

    def compute_id(self) -> bytes:
        return digest(self.body())

    def encode(self) -> bytes:
        return (
            enc_digest(self.tx_id)
            + enc_bytes(self.body())
            + enc_list(e.encode() for e in self.endorsements)
        )

    @classmethod
    def decode(cls, r: Reader) -> "SignedTransaction":
        tx_id = r.digest()
        b = Reader(r.field())
        try:
            kind = TxKind(b.str())
        except ValueError as exc:
            raise EncodingError(str(exc)) from None
        sc_name, function = b.str(), b.str()
        args = tuple(b.str_list())
        proposer, logical_time = b.str(), b.int()
        rw_reader = Reader(b.field())
        rw_set = RWSet.decode(rw_reader)
        rw_reader.expect_end()
        b.expect_end()
        endorsements = tuple(Endorsement(i.str(), i.digest()) for i in _closed(r.list()))
        return cls(kind, sc_name, function, args, proposer, logical_time, rw_set,
                   endorsements, tx_id)


def compute_block_hash(index: int, prev_hash: bytes, txs: Sequence[SignedTransaction]) -> bytes:
    return digest(enc_int(index) + enc_digest(prev_hash) + enc_list(tx.tx_id for tx in txs))


def compute_metadata_hash(txs: Sequence[SignedTransaction], validation: Sequence[str]) -> bytes:
    return digest(
        enc_list(enc_list(e.encode() for e in tx.endorsements) for tx in txs)
        + enc_str_list(validation)
    )


@dataclass(frozen=True)
class Block:
    """A block as cut by the orderer, plus commit metadata once applied.

    ``validation`` holds one code per tx (``"valid"`` or a rejection reason)
    and ``metadata_hash`` covers endorsements and those codes, since neither
    is part of ``block_hash``.
    """

    index: int
    prev_hash: bytes
    txs: tuple[SignedTransaction, ...]
    block_hash: bytes
    validation: tuple[str, ...] = ()
    metadata_hash: bytes = ZERO_DIGEST

    @classmethod
    def make(cls, index: int, prev_hash: bytes, txs: Sequence[SignedTransaction]) -> "Block":
        txs = tuple(txs)
        return cls(index, prev_hash, txs, compute_block_hash(index, prev_hash, txs))

    def valid_txs(self) -> Iterator[SignedTransaction]:
        for tx, code in zip(self.txs, self.validation):
            if code == VALID:
                yield tx

    def encode(self) -> bytes:
        return (
            enc_int(self.index)
            + enc_digest(self.prev_hash)
            + enc_list(tx.encode() for tx in self.txs)
            + enc_digest(self.block_hash)
            + enc_str_list(self.validation)
            + enc_digest(self.metadata_hash)
        )

    @classmethod
    def decode(cls, r: Reader) -> "Block":
        index = r.int()
        prev_hash = r.digest()
        txs = tuple(SignedTransaction.decode(i) for i in _closed(r.list()))
        block_hash = r.digest()
        validation = tuple(r.str_list())
        metadata_hash = r.digest()
        return cls(index, prev_hash, txs, block_hash, validation, metadata_hash)


def genesis_block() -> Block:
    b = Block.make(0, ZERO_DIGEST, ())
    return replace(b, metadata_hash=compute_metadata_hash((), ()))


class WorldState:
    """Versioned key-value map. Versions start at 1 on first write."""

    def __init__(self) -> None:
        self.entries: dict[str, tuple[bytes, int]] = {}

    def get(self, key: str) -> Optional[bytes]:
        entry = self.entries.get(key)
        return None if entry is None else entry[0]

    def version(self, key: str) -> int:
        entry = self.entries.get(key)
        return 0 if entry is None else entry[1]

    def put(self, key: str, value: bytes) -> None:
        self.entries[key] = (bytes(value), self.version(key) + 1)

    def scan(self, prefix: str) -> list[tuple[str, bytes]]:
        return sorted((k, v) for k, (v, _) in self.entries.items() if k.startswith(prefix))

    def snapshot(self) -> bytes:
        """Canonical serialization, used for replica equality checks."""
        return enc_list(
            enc_str(k) + enc_bytes(v) + enc_int(ver)
            for k, (v, ver) in sorted(self.entries.items())
        )

    def copy(self) -> "WorldState":
        other = WorldState()
        other.entries = dict(self.entries)
        return other

    def __eq__(self, other: object) -> bool:
        return isinstance(other, WorldState) and self.entries == other.entries


# (tx, state before applying tx) -> None when valid, else a rejection code
TxValidator = Callable[[SignedTransaction, WorldState], Optional[str]]


def validate_tx(tx: SignedTransaction, state: WorldState,
                validator: Optional[TxValidator] = None) -> str:
    rw_digest = tx.rw_set.digest()
    if not tx.endorsements or any(e.rw_digest != rw_digest for e in tx.endorsements):
        return BAD_ENDORSEMENT
    for key, version in tx.rw_set.reads:
        if state.version(key) != version:
            return MVCC_CONFLICT
    if validator is not None:
        code = validator(tx, state)
        if code:
            return code
    return VALID


def apply_writes(state: WorldState, tx: SignedTransaction) -> None:
    for key, value in tx.rw_set.writes:
        state.put(key, value)


@dataclass
class LedgerReplica:
    owner_node: str
    chain: list[Block] = field(default_factory=lambda: [genesis_block()])
    state: WorldState = field(default_factory=WorldState)

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    @property
    def height(self) -> int:
        return len(self.chain)

    def append_block(self, block: Block, validator: Optional[TxValidator] = None) -> Block:
        return append_block(self, block, validator)

    def verify(self) -> bool:
        return verify_chain(self.chain)

    def dump(self) -> bytes:
        return dump_chain(self.chain)

    def clone(self, owner_node: str) -> "LedgerReplica":
        return LedgerReplica(owner_node, list(self.chain), self.state.copy())


def append_block(replica: LedgerReplica, block: Block,
                 validator: Optional[TxValidator] = None) -> Block:
    """Validate ``block`` against the tip, apply valid txs, and return the
    committed block carrying its validation codes.

    On a chain-integrity error the replica is left untouched.
    """
    tip = replica.tip
    if block.index != tip.index + 1:
        raise ChainIntegrityError(f"expected block {tip.index + 1}, got {block.index}")
    if block.prev_hash != tip.block_hash:
        raise ChainIntegrityError(f"block {block.index} does not link to the tip")
    if not block.txs:
        raise ChainIntegrityError("empty blocks are only allowed at genesis")
    if compute_block_hash(block.index, block.prev_hash, block.txs) != block.block_hash:
        raise ChainIntegrityError(f"block {block.index} hash mismatch")
    for tx in block.txs:
        if tx.compute_id() != tx.tx_id:
            raise ChainIntegrityError(f"tx id mismatch in block {block.index}")

    state = replica.state.copy()
    codes = []
    for tx in block.txs:
        code = validate_tx(tx, state, validator)
        codes.append(code)
        if code == VALID:
            apply_writes(state, tx)
    committed = replace(
        block,
        validation=tuple(codes),
        metadata_hash=compute_metadata_hash(block.txs, codes),
    )
    replica.chain.append(committed)
    replica.state = state
    return committed


def verify_chain(chain: Sequence[Block] | LedgerReplica) -> bool:
    """True iff every block hash recomputes and links, tx ids recompute and
    commit metadata matches. Never mutates its input."""
    if isinstance(chain, LedgerReplica):
        chain = chain.chain
    if not chain:
        return False
    prev: Optional[Block] = None
    for block in chain:
        try:
            if prev is None:
                if block.index != 0 or block.prev_hash != ZERO_DIGEST or block.txs:
                    return False
            else:
                if block.index != prev.index + 1 or block.prev_hash != prev.block_hash:
                    return False
                if not block.txs:
                    return False
            if compute_block_hash(block.index, block.prev_hash, block.txs) != block.block_hash:
                return False
            if len(block.validation) != len(block.txs):
                return False
            if compute_metadata_hash(block.txs, block.validation) != block.metadata_hash:
                return False
            for tx, code in zip(block.txs, block.validation):
                if tx.compute_id() != tx.tx_id:
                    return False
                orgs = [e.org_id for e in tx.endorsements]
                if len(set(orgs)) != len(orgs):
                    return False
                if code != BAD_ENDORSEMENT:
                    rw_digest = tx.rw_set.digest()
                    if not orgs or any(e.rw_digest != rw_digest for e in tx.endorsements):
                        return False
        except EncodingError:
            return False
        prev = block
    return True


def replay_state(chain: Sequence[Block]) -> WorldState:
    """Rebuild the world state from the committed validation codes."""
    state = WorldState()
    for block in chain:
        for tx in block.valid_txs():
            apply_writes(state, tx)
    return state


def dump_chain(chain: Sequence[Block]) -> bytes:
    return (
        DUMP_MAGIC
        + struct.pack(">H", DUMP_FORMAT_VERSION)
        + enc_list(b.encode() for b in chain)
    )


def load_chain(data: bytes) -> list[Block]:
    """Parse a chain dump. Raises :class:`EncodingError` on any malformed byte."""
    if data[:len(DUMP_MAGIC)] != DUMP_MAGIC:
        raise EncodingError("not a chain dump")
    r = Reader(data[len(DUMP_MAGIC):])
    (version,) = struct.unpack(">H", r.raw(2))
    if version != DUMP_FORMAT_VERSION:
        raise EncodingError(f"unsupported chain dump version {version}")
    blocks = [Block.decode(i) for i in _closed(r.list())]
    r.expect_end()
    return blocks


def replica_from_chain(owner_node: str, chain: Sequence[Block]) -> LedgerReplica:
    if not verify_chain(chain):
        raise ChainIntegrityError(f"chain for {owner_node} failed verification")
    return LedgerReplica(owner_node, list(chain), replay_state(chain))


def write_dump(path: Path, chain: Sequence[Block]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dump_chain(chain))
    tmp.replace(path)


def read_dump(path: Path) -> list[Block]:
    return load_chain(Path(path).read_bytes())


__all__ = [
    "Block", "ChainIntegrityError", "Endorsement", "LedgerReplica", "RWSet",
    "SignedTransaction", "TxKind", "WorldState", "append_block", "compute_block_hash",
    "dump_chain", "genesis_block", "load_chain", "replay_state", "verify_chain",
]
