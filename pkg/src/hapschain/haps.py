"""HAPS stations: transaction pool, block creation, QUICO and the PBFT-style baseline.

The module has two layers.  Pure functions (``quorum_met``, ``collect_votes``,
``schedule_next_creator``, ``pbft_baseline_round``, ``create_block``,
``on_transaction``, ``on_block_as_station``, ``majority_verdict``) carry the
protocol rules and are what the unit tests pin.  :class:`QuicoStation` and
:class:`PbftStation` wire them to a :class:`~hapschain.runtime.Runtime`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from .core import (
    ADMIN_ID,
    GENESIS_BLOCK,
    HASH_SIZE,
    HEADER_WIRE_BYTES,
    NODE_ID_WIRE_BYTES,
    SIGNATURE_WIRE_BYTES,
    Block,
    BlockHeader,
    Hash,
    NodeId,
    Role,
    Signature,
    Transaction,
    block_wire_size,
    canonical_encode,
    check_block_structure,
    header_hash,
    make_header,
    order_body,
    register,
    transaction_content,
    transaction_id,
    transaction_wire_size,
)
from .crypto import KeyRegistry
from .runtime import CostModel, Runtime, winding_down
from .wsn import NeighborStore

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Parameters and quorum


@dataclass(frozen=True)
class ConsensusParams:
    X: int
    Y: int
    t_th: int = 100
    t_w: int = 100
    max_retry_rounds: int = 3

    def __post_init__(self) -> None:
        if self.X < 1 or self.Y < 1:
            raise ValueError("X and Y must be at least 1")
        if self.t_th <= 0 or self.t_w <= 0:
            raise ValueError("t_th and t_w must be positive")
        if self.max_retry_rounds < 0:
            raise ValueError("max_retry_rounds must be non-negative")

    @property
    def hack_quorum(self) -> int:
        return self.X - 1

    @property
    def gack_quorum(self) -> int:
        return self.Y // 2 + 1


def quorum_met(hacks: int, gacks: int, params: ConsensusParams) -> bool:
    return hacks >= params.hack_quorum and gacks >= params.gack_quorum


def pbft_quorum(n: int) -> int:
    """Commits needed among ``n`` consensus nodes: ceil(2n/3)."""
    return -(-2 * n // 3)


# ---------------------------------------------------------------------------
# Wire vocabulary


@register(60)
class Verdict(IntEnum):
    VERSION_BLOCK = 0
    VERSION_PENDING = 1
    UNKNOWN = 2
    EXPIRED = 3


@register(40)
@dataclass(frozen=True)
class NewBlock:
    block: Block
    sender: NodeId
    signature: Optional[Signature] = None


@register(41)
@dataclass(frozen=True)
class BlockAck:
    height: int
    sequence_number: int
    block_hash: Hash
    voter: NodeId
    signature: Optional[Signature] = None


@register(42)
@dataclass(frozen=True)
class BlockError:
    """Vote against a block.

    ``disputed`` lists transaction ids whose copy in the block differs from
    the voter's; ``versions`` carries the voter's own copies of those that it
    holds.  ``structural`` flags a header problem instead.
    """

    height: int
    sequence_number: int
    block_hash: Hash
    disputed: Tuple[Hash, ...]
    structural: bool
    versions: Tuple[Transaction, ...]
    voter: NodeId
    signature: Optional[Signature] = None


@register(43)
@dataclass(frozen=True)
class ErrorCheck:
    height: int
    sequence_number: int
    tx_id: Hash
    version_block: Optional[Transaction]
    version_pending: Optional[Transaction]
    targets: Tuple[NodeId, ...]
    sender: NodeId
    signature: Optional[Signature] = None


@register(44)
@dataclass(frozen=True)
class ErrorResolve:
    height: int
    sequence_number: int
    tx_id: Hash
    verdict: Verdict
    voter: NodeId
    signature: Optional[Signature] = None


@register(45)
@dataclass(frozen=True)
class BlockConfirm:
    header: BlockHeader
    votes: Tuple[Signature, ...]
    t_b: int
    sender: NodeId
    signature: Optional[Signature] = None


@register(46)
@dataclass(frozen=True)
class WarningReport:
    suspects: Tuple[NodeId, ...]
    evidence: Tuple[str, ...]
    height: int
    sequence_number: int
    sender: NodeId
    signature: Optional[Signature] = None


@register(47)
@dataclass(frozen=True)
class PrePrepare:
    block: Block
    sender: NodeId
    signature: Optional[Signature] = None


@register(48)
@dataclass(frozen=True)
class Commit:
    height: int
    block_hash: Hash
    accept: bool
    voter: NodeId
    signature: Optional[Signature] = None


@register(49)
@dataclass(frozen=True)
class FixNotice:
    fixed: Tuple[NodeId, ...]
    height: int
    sequence_number: int
    sender: NodeId
    signature: Optional[Signature] = None


@register(50)
@dataclass(frozen=True)
class DisputeDecision:
    height: int
    sequence_number: int
    tx_id: Hash
    verdict: Optional[Verdict]
    sender: NodeId
    signature: Optional[Signature] = None


@register(51)
@dataclass(frozen=True)
class HeaderSyncRequest:
    from_height: int
    sender: NodeId
    signature: Optional[Signature] = None


@register(52)
@dataclass(frozen=True)
class HeaderSyncReply:
    headers: Tuple[BlockHeader, ...]
    sender: NodeId
    signature: Optional[Signature] = None


@register(53)
@dataclass(frozen=True)
class TxSubmit:
    """A transaction travelling gateway -> station or station -> station.

    Data-class traffic; the transaction carries its own signatures.
    """

    tx: Transaction
    sender: NodeId


ConsensusMessage = Union[
    NewBlock, BlockAck, BlockError, ErrorCheck, ErrorResolve, BlockConfirm, WarningReport,
    PrePrepare, Commit, FixNotice, DisputeDecision, HeaderSyncRequest, HeaderSyncReply,
]

_VOTE = struct.Struct(">Bqq32sBI")


def vote_bytes(height: int, sequence_number: int, block_hash: Hash, voter: NodeId, kind: int = 1) -> bytes:
    """Bytes covered by a vote signature; also rebuilt when checking a confirm."""
    return _VOTE.pack(kind, height, sequence_number, block_hash, int(voter.role), voter.index)


def message_sender(msg: Any) -> NodeId:
    return msg.voter if hasattr(msg, "voter") else msg.sender


def signing_bytes(msg: Any) -> bytes:
    if isinstance(msg, BlockAck):
        return vote_bytes(msg.height, msg.sequence_number, msg.block_hash, msg.voter)
    if isinstance(msg, Commit):
        return vote_bytes(msg.height, int(msg.accept), msg.block_hash, msg.voter, kind=2)
    values = [type(msg).__name__]
    for name in msg.__dataclass_fields__:
        if name != "signature":
            values.append(getattr(msg, name))
    return canonical_encode(tuple(values))


def signed(msg: Any, registry: KeyRegistry) -> Any:
    """Return ``msg`` carrying its sender's signature."""
    return replace(msg, signature=registry.sign(signing_bytes(msg), message_sender(msg)))


def verify_message(msg: Any, registry: KeyRegistry) -> bool:
    sig = msg.signature
    if sig is None:
        return False
    return registry.verify(signing_bytes(msg), sig, message_sender(msg))


_MSG_BASE = 8 + NODE_ID_WIRE_BYTES + SIGNATURE_WIRE_BYTES


def wire_size(msg: Any) -> int:
    """Bytes a message occupies on a link."""
    if isinstance(msg, TxSubmit):
        return transaction_wire_size(msg.tx) + NODE_ID_WIRE_BYTES
    if isinstance(msg, (NewBlock, PrePrepare)):
        return _MSG_BASE + block_wire_size(msg.block)
    if isinstance(msg, (BlockAck, Commit, ErrorResolve, DisputeDecision)):
        return _MSG_BASE + 24 + HASH_SIZE
    if isinstance(msg, BlockError):
        return (_MSG_BASE + 25 + HASH_SIZE + HASH_SIZE * len(msg.disputed)
                + sum(transaction_wire_size(t) for t in msg.versions))
    if isinstance(msg, ErrorCheck):
        size = _MSG_BASE + 16 + HASH_SIZE + NODE_ID_WIRE_BYTES * len(msg.targets)
        for v in (msg.version_block, msg.version_pending):
            if v is not None:
                size += transaction_wire_size(v)
        return size
    if isinstance(msg, BlockConfirm):
        return _MSG_BASE + HEADER_WIRE_BYTES + 8 + (SIGNATURE_WIRE_BYTES + NODE_ID_WIRE_BYTES) * len(msg.votes)
    if isinstance(msg, WarningReport):
        return _MSG_BASE + 16 + NODE_ID_WIRE_BYTES * len(msg.suspects) + sum(len(e) for e in msg.evidence)
    if isinstance(msg, FixNotice):
        return _MSG_BASE + 16 + NODE_ID_WIRE_BYTES * len(msg.fixed)
    if isinstance(msg, HeaderSyncRequest):
        return _MSG_BASE + 8
    if isinstance(msg, HeaderSyncReply):
        return _MSG_BASE + HEADER_WIRE_BYTES * len(msg.headers)
    return _MSG_BASE


def is_data(msg: Any) -> bool:
    return isinstance(msg, TxSubmit)


# ---------------------------------------------------------------------------
# Transaction checks shared by stations and gateways


def valid_transaction(tx: Transaction, registry: KeyRegistry, now: Optional[int] = None) -> bool:
    """Id, expiry window, creator signature and gateway endorsements."""
    if tx.expiry_deadline <= tx.creation_timestamp or not tx.readings:
        return False
    if transaction_id(tx) != tx.id:
        return False
    if tx.origin_gateway.role is not Role.GATEWAY or tx.creator_signature.signer != tx.origin_gateway:
        return False
    content = transaction_content(
        tx.origin_gateway, tx.readings, tx.creation_timestamp, tx.expiry_deadline, tx.service_id
    )
    if not registry.verify(content, tx.creator_signature):
        return False
    for e in tx.endorsements:
        if e.signature.signer != e.endorser or not registry.verify(tx.id, e.signature):
            return False
    return now is None or tx.expiry_deadline > now


# ---------------------------------------------------------------------------
# Round bookkeeping


class Phase(Enum):
    IDLE = "idle"
    COLLECTING = "collecting"
    RESOLVING = "resolving"
    CONFIRMED = "confirmed"


@dataclass
class Dispute:
    tx_id: Hash
    reporters: List[NodeId]
    version_block: Transaction
    version_pending: Optional[Transaction]
    targets: Tuple[NodeId, ...]
    verdicts: Dict[NodeId, Verdict] = field(default_factory=dict)
    closed: bool = False
    notified: bool = False


@dataclass
class RoundState:
    phase: Phase
    current_block: Block
    hacks: Set[NodeId] = field(default_factory=set)
    gacks: Set[NodeId] = field(default_factory=set)
    errors: Dict[NodeId, Tuple[Hash, ...]] = field(default_factory=dict)
    retry_round: int = 0
    deadline: int = 0
    # Bookkeeping beyond the vote sets.
    ack_sigs: Dict[NodeId, Signature] = field(default_factory=dict)
    error_msgs: Dict[NodeId, BlockError] = field(default_factory=dict)
    handled: Set[NodeId] = field(default_factory=set)
    refuted: Set[NodeId] = field(default_factory=set)
    disputes: Dict[Hash, Dispute] = field(default_factory=dict)
    changed: bool = False
    escalated: bool = False
    final: bool = False
    timeouts: int = 0

    @property
    def height(self) -> int:
        return self.current_block.height

    @property
    def sequence_number(self) -> int:
        return self.current_block.sequence_number

    def unresolved(self) -> Dict[NodeId, Tuple[Hash, ...]]:
        return {v: ids for v, ids in self.errors.items() if v not in self.handled}

    def error_gateways(self) -> int:
        voters = set(self.errors) | self.refuted
        return sum(1 for v in voters if v.role is Role.GATEWAY)


@dataclass(frozen=True)
class Confirm:
    pass


@dataclass(frozen=True)
class Resolve:
    disputes: Mapping[NodeId, Tuple[Hash, ...]]


@dataclass(frozen=True)
class Wait:
    pass


@dataclass(frozen=True)
class Escalate:
    suspects: Tuple[NodeId, ...]


Decision = Union[Confirm, Resolve, Wait, Escalate]


def collect_votes(round: RoundState, now: int, params: ConsensusParams) -> Decision:
    """Decide what the creator does next with the votes in hand.

    Unhandled errors always go to resolution first.  Quorum with nothing
    outstanding confirms immediately.  Once ``t_w`` has elapsed without
    quorum, errors from more than half of the gateways escalate.
    """
    if round.phase is Phase.RESOLVING:
        return Wait()
    new = round.unresolved()
    if new and not round.final:
        return Resolve(new)
    if quorum_met(len(round.hacks), len(round.gacks), params):
        return Confirm()
    if now >= round.deadline and 2 * round.error_gateways() > params.Y:
        suspects = sorted(
            (v for v in set(round.errors) | round.refuted if v.role is Role.GATEWAY), key=lambda n: n.index
        )
        return Escalate(tuple(suspects))
    return Wait()


def majority_verdict(verdicts: Iterable[Verdict]) -> Optional[Verdict]:
    """Majority between the two versions; ``None`` on a tie or no usable verdict."""
    a = b = 0
    for v in verdicts:
        if v is Verdict.VERSION_BLOCK:
            a += 1
        elif v is Verdict.VERSION_PENDING:
            b += 1
    if a > b:
        return Verdict.VERSION_BLOCK
    if b > a:
        return Verdict.VERSION_PENDING
    return None


def schedule_next_creator(
    stations: Sequence[NodeId], confirm: BlockConfirm, params: ConsensusParams
) -> Tuple[NodeId, int]:
    order = sorted(stations, key=lambda s: s.index)
    creator = confirm.header.creator
    i = next(k for k, s in enumerate(order) if s == creator)
    return order[(i + 1) % len(order)], confirm.t_b + params.t_th


@dataclass(frozen=True)
class ConsensusOutcome:
    accepted: bool
    commits: int
    rejects: int
    quorum: int
    broadcast_rounds: int = 2


def pbft_decide(commits: int, rejects: int, n: int) -> Optional[bool]:
    """True once commits reach quorum, False once quorum is out of reach."""
    q = pbft_quorum(n)
    if commits >= q:
        return True
    if rejects > n - q:
        return False
    return None


def pbft_baseline_round(
    stations: Sequence[NodeId],
    gateways: Sequence[NodeId],
    block: Block,
    commits: Mapping[NodeId, bool],
) -> ConsensusOutcome:
    """Outcome of one PRE-PREPARE/COMMIT round given every node's commit vote.

    Voters missing from ``commits`` count as not committing.
    """
    voters = list(stations) + list(gateways)
    n = len(voters)
    yes = sum(1 for v in voters if commits.get(v, False))
    no = n - yes
    return ConsensusOutcome(yes >= pbft_quorum(n), yes, no, pbft_quorum(n))


# ---------------------------------------------------------------------------
# Station state and pure per-station operations


class StationDataCheck:
    """Reading-level anomaly check a station applies to gateway transactions."""

    def __init__(self, store: NeighborStore, tolerance: float, min_neighbors: int) -> None:
        self.store = store
        self.tolerance = tolerance
        self.min_neighbors = min_neighbors

    def check(self, tx: Transaction) -> Optional[bool]:
        """False if any reading is anomalous, None if some cannot be judged yet."""
        verdict: Optional[bool] = True
        for r in tx.readings:
            v = self.store.judge(r, self.tolerance, self.min_neighbors)
            if v is False:
                return False
            if v is None:
                verdict = None
        return verdict

    def accept(self, tx: Transaction) -> Optional[bool]:
        verdict = self.check(tx)
        # Rejected transactions still carry honest readings worth comparing against.
        self.observe(tx)
        return verdict

    def observe(self, tx: Transaction) -> None:
        for r in tx.readings:
            self.store.observe(r)


@dataclass
class HapsState:
    node: NodeId
    stations: List[NodeId]
    gateways: List[NodeId]
    registry: KeyRegistry
    params: ConsensusParams
    checker: Optional[StationDataCheck] = None
    chain: List[Block] = field(default_factory=lambda: [GENESIS_BLOCK])
    pool: Dict[Hash, Transaction] = field(default_factory=dict)
    confirmed_ids: Set[Hash] = field(default_factory=set)
    candidates: Dict[Tuple[int, Hash], Block] = field(default_factory=dict)
    held: Dict[Hash, Transaction] = field(default_factory=dict)
    dropped: int = 0

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    @property
    def peers(self) -> List[NodeId]:
        return [s for s in self.stations if s != self.node]


def on_transaction(st: HapsState, tx: Transaction, from_peer: bool = False, now: Optional[int] = None) -> List[NodeId]:
    """Validate and pool ``tx``; returns the stations it must be broadcast to."""
    if tx.id in st.pool or tx.id in st.confirmed_ids or tx.id in st.held:
        return []
    if not valid_transaction(tx, st.registry, now):
        st.dropped += 1
        return []
    if st.checker is not None:
        if from_peer:
            st.checker.observe(tx)
        else:
            verdict = st.checker.accept(tx)
            if verdict is False:
                st.dropped += 1
                return []
            if verdict is None:
                # Not enough near readings yet: hold until they arrive or the tx expires.
                st.held[tx.id] = tx
                return []
    st.pool[tx.id] = tx
    return [] if from_peer else st.peers


def recheck_held(st: HapsState, now: int) -> Tuple[List[Transaction], List[Transaction]]:
    """Re-judge held transactions; returns (admitted, dropped).

    A transaction that still cannot be judged halfway through its lifetime
    is admitted on the strength of the gateway's own check, so that it keeps
    enough time to be ordered into a block.
    """
    admitted: List[Transaction] = []
    dropped: List[Transaction] = []
    if st.checker is None:
        return admitted, dropped
    for tid, tx in list(st.held.items()):
        verdict = None if tx.expiry_deadline <= now else st.checker.check(tx)
        if verdict is None and tx.expiry_deadline > now:
            midpoint = (tx.creation_timestamp + tx.expiry_deadline) // 2
            if now >= midpoint:
                verdict = True
        if verdict is True:
            st.pool[tid] = tx
            admitted.append(tx)
        elif verdict is False or tx.expiry_deadline <= now:
            dropped.append(tx)
            st.dropped += 1
        else:
            continue
        del st.held[tid]
    return admitted, dropped


def create_block(st: HapsState, now: int, sequence_number: int = 0) -> Block:
    """Block over every unexpired pooled transaction, ordered by (timestamp, id)."""
    for tid in [t for t, tx in st.pool.items() if tx.expiry_deadline <= now]:
        del st.pool[tid]
    body = order_body(st.pool.values())
    return Block(make_header(st.tip.header, body, now, st.node, sequence_number), body)


def on_block_as_station(st: HapsState, block: Block) -> Union[BlockAck, BlockError]:
    """Full validation against the replicated pool, signed by ``st.node``."""
    bh = header_hash(block.header)
    problems = check_block_structure(block, st.tip.header)
    if problems:
        return signed(
            BlockError(block.height, block.sequence_number, bh, (), True, (), st.node), st.registry
        )
    disputed = []
    versions = []
    for tx in block.body:
        mine = st.pool.get(tx.id)
        if tx.id in st.confirmed_ids or mine is None or canonical_encode(mine) != canonical_encode(tx):
            disputed.append(tx.id)
            if mine is not None:
                versions.append(mine)
    if disputed:
        return signed(
            BlockError(block.height, block.sequence_number, bh, tuple(disputed), False, tuple(versions), st.node),
            st.registry,
        )
    return signed(BlockAck(block.height, block.sequence_number, bh, st.node), st.registry)


def verify_confirm(
    confirm: BlockConfirm,
    registry: KeyRegistry,
    params: ConsensusParams,
    stations: Sequence[NodeId],
    gateways: Sequence[NodeId],
) -> bool:
    """Sender signature plus a quorum of distinct valid votes from registered voters."""
    if confirm.sender != confirm.header.creator or not verify_message(confirm, registry):
        return False
    h = confirm.header
    bh = header_hash(h)
    st_set, gw_set = set(stations), set(gateways)
    hacks: Set[NodeId] = set()
    gacks: Set[NodeId] = set()
    for sig in confirm.votes:
        v = sig.signer
        if v == h.creator or not (v in st_set or v in gw_set):
            continue
        if not registry.verify(vote_bytes(h.height, h.sequence_number, bh, v), sig):
            continue
        (hacks if v in st_set else gacks).add(v)
    return quorum_met(len(hacks), len(gacks), params)


def emit_confirm(st: HapsState, round: RoundState, now: int) -> BlockConfirm:
    votes = tuple(round.ack_sigs[v] for v in sorted(round.ack_sigs, key=lambda n: (n.role, n.index)))
    round.phase = Phase.CONFIRMED
    return signed(BlockConfirm(round.current_block.header, votes, now, st.node), st.registry)


def resolve_disputes(
    st: HapsState, round: RoundState, now: int
) -> Tuple[Block, List[NodeId], List[NodeId]]:
    """Apply closed dispute verdicts to the round's block.

    Returns the corrected block (sequence number bumped when anything
    changed), the refuted reporters and the reporters of unresolved disputes.
    """
    block = round.current_block
    body = {tx.id: tx for tx in block.body}
    refuted: List[NodeId] = []
    unresolved: List[NodeId] = []
    for d in round.disputes.values():
        verdict = majority_verdict(d.verdicts.values())
        if verdict is Verdict.VERSION_BLOCK:
            refuted.extend(d.reporters)
        elif verdict is Verdict.VERSION_PENDING:
            body.pop(d.tx_id, None)
            if d.version_pending is not None:
                body[d.version_pending.id] = d.version_pending
        else:
            body.pop(d.tx_id, None)
            unresolved.extend(d.reporters)
    new_body = order_body(body.values())
    if new_body != block.body or round.changed:
        header = make_header(st.tip.header, new_body, now, st.node, block.sequence_number + 1)
        block = Block(header, new_body)
    return block, refuted, unresolved


# ---------------------------------------------------------------------------
# Event-driven stations


class _StationBase(HapsState):
    """Shared plumbing for both consensus modes."""

    def __init__(
        self,
        node: NodeId,
        stations: Sequence[NodeId],
        gateways: Sequence[NodeId],
        registry: KeyRegistry,
        params: ConsensusParams,
        runtime: Runtime,
        *,
        checker: Optional[StationDataCheck] = None,
        cost: Optional[CostModel] = None,
        admin: NodeId = ADMIN_ID,
    ) -> None:
        super().__init__(node, sorted(stations, key=lambda s: s.index), list(gateways), registry, params, checker)
        self.rt = runtime
        self.cost = cost or CostModel()
        self.admin = admin
        self._creating: Optional[int] = None

    # -- transactions -------------------------------------------------------

    def _on_tx(self, msg: TxSubmit, src: NodeId) -> None:
        tx = msg.tx
        from_peer = src.role is Role.HAPS_STATION
        if tx.id in self.pool or tx.id in self.confirmed_ids:
            return
        sigs = 1 + len(tx.endorsements)
        cost = self.cost.station(sigs, 0 if from_peer else len(tx.readings), transaction_wire_size(tx))
        done = self.rt.compute(self.node, cost)
        self.rt.at(done, self._admit_tx, tx, from_peer)

    def _admit_tx(self, tx: Transaction, from_peer: bool) -> None:
        before = self.dropped
        targets = on_transaction(self, tx, from_peer, self.rt.now)
        if self.dropped != before:
            self._record_drop(tx)
        elif targets:
            self.rt.broadcast(self.node, targets, TxSubmit(tx, self.node))
        if self.held and not from_peer:
            admitted, dropped = recheck_held(self, self.rt.now)
            for t in dropped:
                self._record_drop(t)
            for t in admitted:
                self.rt.broadcast(self.node, self.peers, TxSubmit(t, self.node))

    def _record_drop(self, tx: Transaction) -> None:
        self.rt.record("tx_dropped", station=self.node, tx=tx.id, origin=tx.origin_gateway,
                       readings=len(tx.readings))

    # -- chain --------------------------------------------------------------

    def _append(self, block: Block) -> None:
        self.chain.append(block)
        for tx in block.body:
            self.pool.pop(tx.id, None)
            self.confirmed_ids.add(tx.id)
        for key in [k for k in self.candidates if k[0] <= block.height]:
            del self.candidates[key]
        self.rt.record("append", station=self.node, height=block.height,
                       sequence_number=block.sequence_number, block_hash=header_hash(block.header))

    def _headers_from(self, height: int) -> Tuple[BlockHeader, ...]:
        return tuple(b.header for b in self.chain[max(0, height):])

    def _on_sync(self, msg: HeaderSyncRequest, src: NodeId) -> None:
        self.rt.send(self.node, src, signed(HeaderSyncReply(self._headers_from(msg.from_height), self.node),
                                            self.registry))

    def _schedule_after(self, creator: NodeId, t_b: int, height: int) -> None:
        order = self.stations
        i = next(k for k, s in enumerate(order) if s == creator)
        nxt = order[(i + 1) % len(order)]
        if nxt == self.node:
            self._creating = height
            self.rt.at(t_b + self.params.t_th, self._create, height)

    def start(self) -> None:
        """Arm the first creator timer as if genesis had just been confirmed at t=0."""
        self._schedule_after(GENESIS_BLOCK.header.creator, 0, 1)

    def _create(self, height: int) -> None:
        raise NotImplementedError

    def handle(self, msg: Any, src: NodeId) -> None:
        raise NotImplementedError


class QuicoStation(_StationBase):
    """A HAPS station running QUICO: voter, and creator on its turn."""

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.round: Optional[RoundState] = None
        self.audits: Dict[Tuple[int, int], RoundState] = {}
        self.reported: Set[Tuple[int, NodeId]] = set()

    def handle(self, msg: Any, src: NodeId) -> None:
        if isinstance(msg, TxSubmit):
            self._on_tx(msg, src)
        elif isinstance(msg, NewBlock):
            self._on_new_block(msg)
        elif isinstance(msg, (BlockAck, BlockError)):
            self._on_vote(msg)
        elif isinstance(msg, ErrorResolve):
            self._on_resolve(msg)
        elif isinstance(msg, BlockConfirm):
            self._on_confirm(msg)
        elif isinstance(msg, FixNotice):
            self._on_fix(msg)
        elif isinstance(msg, HeaderSyncRequest):
            self._on_sync(msg, src)

    # -- voter side ---------------------------------------------------------

    def _on_new_block(self, msg: NewBlock) -> None:
        block = msg.block
        if not verify_message(msg, self.registry) or msg.sender != block.header.creator:
            return
        if block.height <= self.tip.height:
            return
        self.candidates[(block.height, header_hash(block.header))] = block
        cost = self.cost.station(len(block.body), sum(len(t.readings) for t in block.body), block_wire_size(block))
        done = self.rt.compute(self.node, cost)
        self.rt.at(done, self._vote_on, block)

    def _vote_on(self, block: Block) -> None:
        if block.height != self.tip.height + 1:
            return
        vote = on_block_as_station(self, block)
        self.rt.send(self.node, block.header.creator, vote)

    def _on_confirm(self, msg: BlockConfirm) -> None:
        h = msg.header
        if h.height != self.tip.height + 1:
            return
        if not verify_confirm(msg, self.registry, self.params, self.stations, self.gateways):
            self.rt.record("invalid_confirm", node=self.node, height=h.height)
            return
        block = self.candidates.get((h.height, header_hash(h)))
        if block is None:
            log.warning("%s: confirm for unseen block at height %d", self.node, h.height)
            return
        self._append(block)
        self._schedule_after(h.creator, msg.t_b, h.height + 1)

    # -- creator side -------------------------------------------------------

    def _create(self, height: int) -> None:
        if height != self.tip.height + 1 or (winding_down(self.rt) and not self.pool):
            return
        now = self.rt.now
        block = create_block(self, now)
        self.round = RoundState(Phase.COLLECTING, block, deadline=now + self.params.t_w)
        self._broadcast_block(self.round, self.peers + self.gateways)

    def _broadcast_block(self, r: RoundState, targets: Sequence[NodeId]) -> None:
        msg = signed(NewBlock(r.current_block, self.node), self.registry)
        self.rt.broadcast(self.node, list(targets), msg)
        self.rt.record("block_broadcast", creator=self.node, height=r.height, sequence_number=r.sequence_number,
                       txs=len(r.current_block.body), targets=len(targets))
        self.rt.at(r.deadline, self._on_deadline, r.height, r.sequence_number)

    def _round_for(self, height: int, seq: int) -> Optional[RoundState]:
        r = self.round
        if r is not None and r.height == height and r.sequence_number == seq:
            return r
        return self.audits.get((height, seq))

    def _on_vote(self, msg: Union[BlockAck, BlockError]) -> None:
        r = self._round_for(msg.height, msg.sequence_number)
        if r is None or msg.block_hash != header_hash(r.current_block.header):
            return
        voter = msg.voter
        if voter == self.node or not (voter in self.stations or voter in self.gateways):
            return
        if not verify_message(msg, self.registry):
            return
        if r.phase is Phase.CONFIRMED:
            if isinstance(msg, BlockError) and voter not in r.error_msgs:
                # A dissent arriving after the block confirmed: audit it.
                r.errors[voter] = msg.disputed
                r.error_msgs[voter] = msg
                self._start_resolution(r, {voter: msg.disputed})
            return
        votes = r.hacks if voter.role is Role.HAPS_STATION else r.gacks
        if isinstance(msg, BlockAck):
            r.errors.pop(voter, None)
            r.error_msgs.pop(voter, None)
            votes.add(voter)
            r.ack_sigs[voter] = msg.signature
        else:
            votes.discard(voter)
            r.ack_sigs.pop(voter, None)
            r.errors[voter] = msg.disputed
            r.error_msgs[voter] = msg
            r.handled.discard(voter)
            if r.final:
                r.refuted.add(voter)
        self._evaluate(r)

    def _evaluate(self, r: RoundState) -> None:
        if r is not self.round or r.phase is Phase.CONFIRMED:
            return
        d = collect_votes(r, self.rt.now, self.params)
        if isinstance(d, Confirm):
            self._confirm(r)
        elif isinstance(d, Resolve):
            self._start_resolution(r, d.disputes)
        elif isinstance(d, Escalate):
            self._escalate(r, d.suspects)

    def _on_deadline(self, height: int, seq: int) -> None:
        r = self.round
        if r is None or r.height != height or r.sequence_number != seq or r.phase is Phase.CONFIRMED:
            return
        if self.rt.now < r.deadline:
            return
        d = collect_votes(r, self.rt.now, self.params)
        if isinstance(d, Wait) and r.phase is Phase.COLLECTING:
            # Quorum missing without a gateway majority of errors.  The first
            # expiry only extends the wait (a large block may still be in
            # flight); later ones chase the silent voters.
            silent = [v for v in self.peers + self.gateways
                      if v not in r.hacks and v not in r.gacks and v not in r.errors and v not in r.refuted]
            r.timeouts += 1
            if silent and r.timeouts > 1:
                self._warn(r, [v for v in silent if v.role is Role.GATEWAY], "timeout")
                self.rt.broadcast(self.node, silent, signed(NewBlock(r.current_block, self.node), self.registry))
            r.deadline = self.rt.now + self.params.t_w
            self.rt.at(r.deadline, self._on_deadline, height, seq)
            self.rt.record("round_timeout", creator=self.node, height=height, sequence_number=seq,
                           silent=len(silent))
            return
        if isinstance(d, Wait) and r.phase is Phase.RESOLVING:
            r.deadline = self.rt.now + self.params.t_w
            self.rt.at(r.deadline, self._on_deadline, height, seq)
            return
        self._evaluate(r)

    def _confirm(self, r: RoundState) -> None:
        now = self.rt.now
        confirm = emit_confirm(self, r, now)
        block = r.current_block
        self.rt.broadcast(self.node, self.peers + self.gateways, confirm)
        self.rt.record("confirm", creator=self.node, height=block.height, sequence_number=block.sequence_number,
                       block=block, t_b=now)
        self.audits = {k: v for k, v in self.audits.items() if k[0] >= block.height - 2}
        self.audits[(block.height, block.sequence_number)] = r
        self.round = None
        self._append(block)
        self._schedule_after(self.node, now, block.height + 1)

    # -- dispute handling ---------------------------------------------------

    def _revalidate(self, tx: Transaction) -> bool:
        return valid_transaction(tx, self.registry)

    def _start_resolution(self, r: RoundState, disputes: Mapping[NodeId, Tuple[Hash, ...]]) -> None:
        in_block = {tx.id: tx for tx in r.current_block.body}
        own_structure_ok = not check_block_structure(r.current_block, self._parent_of(r).header)
        opened: List[Dispute] = []
        for voter in sorted(disputes, key=lambda n: (n.role, n.index)):
            r.handled.add(voter)
            err = r.error_msgs[voter]
            if err.structural or not err.disputed:
                if own_structure_ok:
                    r.refuted.add(voter)
                continue
            versions = {v.id: v for v in err.versions}
            for tid in err.disputed:
                mine = in_block.get(tid)
                if mine is None:
                    r.refuted.add(voter)
                    continue
                d = r.disputes.get(tid)
                if d is not None and not d.closed:
                    d.reporters.append(voter)
                    continue
                if d is not None and d.closed:
                    # Already arbitrated for this block; reuse the outcome.
                    d.reporters.append(voter)
                    if majority_verdict(d.verdicts.values()) is Verdict.VERSION_BLOCK:
                        r.refuted.add(voter)
                    continue
                theirs = versions.get(tid)
                if theirs is not None and canonical_encode(theirs) == canonical_encode(mine):
                    theirs = None
                if r.phase is not Phase.CONFIRMED and not self._revalidate(mine):
                    # Our copy is provably wrong; no need to ask anybody.
                    r.changed = True
                    d = Dispute(tid, [voter], mine, theirs, (), closed=True)
                    d.verdicts[self.node] = Verdict.VERSION_PENDING
                    r.disputes[tid] = d
                    continue
                targets = [mine.origin_gateway] + [
                    e.endorser for e in mine.endorsements if e.endorser.role is Role.GATEWAY
                ]
                targets = list(dict.fromkeys(targets))
                d = Dispute(tid, [voter], mine, theirs, tuple(targets))
                r.disputes[tid] = d
                opened.append(d)
        if r.phase is not Phase.CONFIRMED:
            r.phase = Phase.RESOLVING
        for d in opened:
            check = signed(
                ErrorCheck(r.height, r.sequence_number, d.tx_id, d.version_block, d.version_pending, d.targets,
                           self.node),
                self.registry,
            )
            self.rt.broadcast(self.node, list(d.targets), check)
            self.rt.at(self.rt.now + self.params.t_w, self._close_dispute, r, d.tx_id)
        self.rt.record("dispute", creator=self.node, height=r.height, sequence_number=r.sequence_number,
                       reporters=len(disputes), opened=len(opened))
        self._maybe_finish(r)

    def _parent_of(self, r: RoundState) -> Block:
        return self.chain[r.height - 1]

    def _on_resolve(self, msg: ErrorResolve) -> None:
        r = self._round_for(msg.height, msg.sequence_number)
        if r is None:
            return
        d = r.disputes.get(msg.tx_id)
        if d is None or d.closed or msg.voter not in d.targets or not verify_message(msg, self.registry):
            return
        d.verdicts[msg.voter] = msg.verdict
        if len(d.verdicts) == len(d.targets):
            d.closed = True
            self._maybe_finish(r)

    def _close_dispute(self, r: RoundState, tx_id: Hash) -> None:
        d = r.disputes.get(tx_id)
        if d is None or d.closed:
            return
        for t in d.targets:
            d.verdicts.setdefault(t, Verdict.UNKNOWN)
        d.closed = True
        self._maybe_finish(r)

    def _maybe_finish(self, r: RoundState) -> None:
        if any(not d.closed for d in r.disputes.values()):
            return
        now = self.rt.now
        block, refuted, unresolved = resolve_disputes(self, r, now)
        refuted_set = set(refuted) | r.refuted
        for d in r.disputes.values():
            verdict = majority_verdict(d.verdicts.values())
            if not d.notified:
                for rep in d.reporters:
                    self.rt.send(self.node, rep, signed(
                        DisputeDecision(r.height, r.sequence_number, d.tx_id, verdict, self.node), self.registry))
                d.notified = True
        for v in refuted_set:
            r.errors.pop(v, None)
        r.refuted |= refuted_set
        self._warn(r, [v for v in refuted_set if v.role is Role.GATEWAY], "refuted")
        if unresolved:
            self._warn(r, [v for v in unresolved if v.role is Role.GATEWAY], "unresolved")
        if r.phase is Phase.CONFIRMED:
            return
        if block is not r.current_block:
            self._regenerate(r, block, unresolved)
            return
        r.phase = Phase.COLLECTING
        self._evaluate(r)

    def _regenerate(self, r: RoundState, block: Block, unresolved: List[NodeId]) -> None:
        retry = r.retry_round + 1
        final = retry >= self.params.max_retry_rounds
        if final and not r.final:
            # Give up arbitrating: drop whatever is still disputed.
            disputed = {tid for ids in r.errors.values() for tid in ids}
            body = order_body(tx for tx in block.body if tx.id not in disputed)
            block = Block(make_header(self.tip.header, body, self.rt.now, self.node, block.sequence_number), body)
        nr = RoundState(Phase.COLLECTING, block, retry_round=retry, deadline=self.rt.now + self.params.t_w,
                        final=final)
        self.round = nr
        self.rt.record("regenerate", creator=self.node, height=block.height, sequence_number=block.sequence_number,
                       txs=len(block.body))
        self._broadcast_block(nr, self.peers + self.gateways)

    def _warn(self, r: RoundState, suspects: Sequence[NodeId], reason: str) -> None:
        fresh = sorted({s for s in suspects if (r.height, s) not in self.reported}, key=lambda n: n.index)
        if not fresh:
            return
        for s in fresh:
            self.reported.add((r.height, s))
        report = signed(WarningReport(tuple(fresh), (reason,), r.height, r.sequence_number, self.node), self.registry)
        self.rt.send(self.node, self.admin, report)
        self.rt.record("warning", creator=self.node, height=r.height, suspects=len(fresh), reason=reason)

    def _escalate(self, r: RoundState, suspects: Tuple[NodeId, ...]) -> None:
        fresh = [s for s in suspects if (r.height, s) not in self.reported]
        if r.escalated and not fresh:
            return
        r.escalated = True
        report = signed(WarningReport(tuple(suspects), ("majority-error",), r.height, r.sequence_number, self.node),
                        self.registry)
        for s in fresh:
            self.reported.add((r.height, s))
        self.rt.send(self.node, self.admin, report)
        self.rt.record("escalate", creator=self.node, height=r.height, suspects=len(suspects))

    def _on_fix(self, msg: FixNotice) -> None:
        r = self.round
        if r is None or r.height != msg.height or not verify_message(msg, self.registry):
            return
        resend = []
        for g in msg.fixed:
            if g in r.errors or g in r.refuted:
                r.errors.pop(g, None)
                r.error_msgs.pop(g, None)
                r.refuted.discard(g)
                r.handled.discard(g)
                resend.append(g)
        if resend:
            self.rt.broadcast(self.node, resend, signed(NewBlock(r.current_block, self.node), self.registry))
        self.rt.record("fix_resend", creator=self.node, height=r.height, gateways=len(resend))


@dataclass
class PbftRound:
    block: Optional[Block]
    started: int
    votes: Dict[NodeId, bool] = field(default_factory=dict)
    decided: Optional[bool] = None


class PbftStation(_StationBase):
    """Baseline: PRE-PREPARE then all-to-all COMMIT, 2/3 quorum, reject on failure."""

    def __init__(self, *args: Any, timeout: int = 500, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.timeout = timeout
        self.rounds: Dict[Hash, PbftRound] = {}

    @property
    def n_voters(self) -> int:
        return len(self.stations) + len(self.gateways)

    def handle(self, msg: Any, src: NodeId) -> None:
        if isinstance(msg, TxSubmit):
            self._on_tx(msg, src)
        elif isinstance(msg, PrePrepare):
            self._on_preprepare(msg)
        elif isinstance(msg, Commit):
            self._on_commit(msg)
        elif isinstance(msg, HeaderSyncRequest):
            self._on_sync(msg, src)

    def _create(self, height: int) -> None:
        if height != self.tip.height + 1 or (winding_down(self.rt) and not self.pool):
            return
        block = create_block(self, self.rt.now)
        bh = header_hash(block.header)
        rnd = self.rounds.setdefault(bh, PbftRound(None, self.rt.now))
        rnd.block = block
        rnd.votes[self.node] = True
        self.candidates[(block.height, bh)] = block
        msg = signed(PrePrepare(block, self.node), self.registry)
        targets = self.peers + self.gateways
        self.rt.broadcast(self.node, targets, msg)
        self.rt.record("block_broadcast", creator=self.node, height=block.height, sequence_number=0,
                       txs=len(block.body), targets=len(targets))
        self.rt.at(self.rt.now + self.timeout, self._on_timeout, bh)
        self._check(bh)

    def _on_preprepare(self, msg: PrePrepare) -> None:
        block = msg.block
        if not verify_message(msg, self.registry) or msg.sender != block.header.creator:
            return
        if block.height != self.tip.height + 1:
            return
        bh = header_hash(block.header)
        rnd = self.rounds.setdefault(bh, PbftRound(None, self.rt.now))
        rnd.block = block
        rnd.votes.setdefault(block.header.creator, True)
        self.candidates[(block.height, bh)] = block
        cost = self.cost.station(len(block.body), sum(len(t.readings) for t in block.body), block_wire_size(block))
        done = self.rt.compute(self.node, cost)
        self.rt.at(done, self._commit_on, block, bh)
        self.rt.at(self.rt.now + self.timeout, self._on_timeout, bh)

    def _commit_on(self, block: Block, bh: Hash) -> None:
        rnd = self.rounds.get(bh)
        if rnd is None or rnd.decided is not None:
            return
        accept = isinstance(on_block_as_station(self, block), BlockAck)
        rnd.votes[self.node] = accept
        vote = signed(Commit(block.height, bh, accept, self.node), self.registry)
        others = [s for s in self.peers] + self.gateways
        self.rt.broadcast(self.node, others, vote)
        self._check(bh)

    def _on_commit(self, msg: Commit) -> None:
        if msg.height <= self.tip.height:
            return
        voter = msg.voter
        if not (voter in self.stations or voter in self.gateways) or not verify_message(msg, self.registry):
            return
        rnd = self.rounds.setdefault(msg.block_hash, PbftRound(None, self.rt.now))
        if rnd.decided is not None:
            return
        rnd.votes[voter] = msg.accept
        self._check(msg.block_hash)

    def _check(self, bh: Hash) -> None:
        rnd = self.rounds.get(bh)
        if rnd is None or rnd.block is None or rnd.decided is not None:
            return
        yes = sum(1 for v in rnd.votes.values() if v)
        no = len(rnd.votes) - yes
        outcome = pbft_decide(yes, no, self.n_voters)
        if outcome is not None:
            self._decide(rnd, outcome)

    def _on_timeout(self, bh: Hash) -> None:
        rnd = self.rounds.get(bh)
        if rnd is None or rnd.block is None or rnd.decided is not None:
            return
        self._decide(rnd, False)

    def _decide(self, rnd: PbftRound, accepted: bool) -> None:
        block = rnd.block
        assert block is not None
        rnd.decided = accepted
        now = self.rt.now
        creator = block.header.creator
        if creator == self.node:
            dissent = [v for v, ok in rnd.votes.items() if ok != accepted and v.role is Role.GATEWAY]
            if dissent:
                dissent.sort(key=lambda n: n.index)
                report = signed(WarningReport(tuple(dissent), ("dissent",), block.height, 0, self.node), self.registry)
                self.rt.send(self.node, self.admin, report)
                self.rt.record("warning", creator=self.node, height=block.height, suspects=len(dissent),
                               reason="dissent")
            if accepted:
                self.rt.record("confirm", creator=self.node, height=block.height, sequence_number=0, block=block,
                               t_b=now)
            else:
                self.rt.record("reject", creator=self.node, height=block.height, txs=len(block.body))
        if accepted and block.height == self.tip.height + 1:
            self._append(block)
        for key in [k for k, v in self.rounds.items() if v.decided is not None and k != header_hash(block.header)]:
            del self.rounds[key]
        self._schedule_after(creator, now, self.tip.height + 1)
