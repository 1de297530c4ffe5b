"""Gateways: packet ingest, aggregation, pending list, header chain and voting.

A gateway is a light node.  It keeps the transactions it created or
forwarded in a :class:`PendingList` and only block headers in a
:class:`HeaderChain`; it checks a new block against its own pending
transactions rather than re-validating the whole body.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from .core import (
    GENESIS_HEADER,
    Block,
    BlockHeader,
    Endorsement,
    Hash,
    NodeId,
    Reading,
    Role,
    Transaction,
    block_wire_size,
    canonical_decode,
    canonical_encode,
    check_block_structure,
    header_hash,
    register,
    transaction_content,
    transaction_id,
    verify_merkle_proof,
)
from .crypto import Ciphertext, DecryptionFailure, KeyRegistry, seal, unseal
from .haps import (
    BlockAck,
    BlockConfirm,
    BlockError,
    Commit,
    ConsensusParams,
    DisputeDecision,
    ErrorCheck,
    ErrorResolve,
    HeaderSyncReply,
    HeaderSyncRequest,
    NewBlock,
    PrePrepare,
    TxSubmit,
    Verdict,
    pbft_decide,
    signed,
    valid_transaction,
    verify_confirm,
    verify_message,
)
from .runtime import CostModel, Runtime, winding_down
from .wsn import DataPacket, NeighborStore, packet_content

log = logging.getLogger(__name__)


class HeightMismatch(Exception):
    """A block arrived for a height other than tip + 1."""

    def __init__(self, expected: int, got: int) -> None:
        super().__init__(f"expected height {expected}, got {got}")
        self.expected = expected
        self.got = got


class InvalidConfirm(Exception):
    """A Block CONFIRM whose votes do not reach quorum."""


class UnknownHeader(KeyError):
    """No header stored at the requested height."""


# ---------------------------------------------------------------------------
# Pending list and header chain


@dataclass
class PendingList:
    entries: Dict[Hash, Tuple[Transaction, int]] = field(default_factory=dict)

    def add(self, tx: Transaction, now: int) -> None:
        self.entries.setdefault(tx.id, (tx, now))

    def get(self, tx_id: Hash) -> Optional[Transaction]:
        entry = self.entries.get(tx_id)
        return entry[0] if entry else None

    def __contains__(self, tx_id: object) -> bool:
        return tx_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def remove(self, tx_ids: Sequence[Hash]) -> int:
        n = 0
        for tid in tx_ids:
            if self.entries.pop(tid, None) is not None:
                n += 1
        return n

    def sweep(self, now: int) -> int:
        """Drop entries whose expiry deadline has been reached."""
        dead = [tid for tid, (tx, _) in self.entries.items() if tx.expiry_deadline <= now]
        for tid in dead:
            del self.entries[tid]
        return len(dead)


@dataclass
class HeaderChain:
    headers: List[BlockHeader] = field(default_factory=lambda: [GENESIS_HEADER])

    @property
    def tip(self) -> BlockHeader:
        return self.headers[-1]

    def append(self, header: BlockHeader) -> None:
        tip = self.tip
        if header.height != tip.height + 1:
            raise HeightMismatch(tip.height + 1, header.height)
        if header.previous_hash != header_hash(tip):
            raise ValueError("header does not link to the tip")
        self.headers.append(header)

    def get(self, height: int) -> BlockHeader:
        if 0 <= height < len(self.headers):
            return self.headers[height]
        raise UnknownHeader(height)


# ---------------------------------------------------------------------------
# Outcomes


@dataclass(frozen=True)
class Accepted:
    readings: int


@dataclass(frozen=True)
class Discarded:
    reason: str


@dataclass(frozen=True)
class Deferred:
    pass


IngestOutcome = Union[Accepted, Discarded, Deferred]


@dataclass(frozen=True)
class EndorsedReply:
    tx: Transaction
    proof: Tuple[Tuple[Hash, str], ...]
    header_height: int
    endorsements: Tuple[Endorsement, ...]


@dataclass(frozen=True)
class RejectReply:
    reason: str


@register(31)
@dataclass(frozen=True)
class SealedTx:
    """A transaction sealed for the next hop only."""

    ciphertext: Ciphertext
    sender: NodeId
    recipient: NodeId


# ---------------------------------------------------------------------------
# Gateway state and operations


@dataclass
class GatewayState:
    node: NodeId
    registry: KeyRegistry
    store: NeighborStore
    routes: Dict[NodeId, Tuple[NodeId, ...]] = field(default_factory=dict)
    service_id: str = "eim"
    require_endorsements: bool = True
    min_neighbors: int = 3
    max_deferred_ticks: int = 3
    pending: PendingList = field(default_factory=PendingList)
    headers: HeaderChain = field(default_factory=HeaderChain)
    buffer: Dict[Tuple[NodeId, int], Reading] = field(default_factory=dict)
    deferred: List[List[Any]] = field(default_factory=list)
    candidates: Dict[int, Block] = field(default_factory=dict)
    last_sweep: int = 0
    discarded: Dict[str, int] = field(default_factory=dict)

    def _discard(self, reason: str, n: int = 1) -> Discarded:
        self.discarded[reason] = self.discarded.get(reason, 0) + n
        return Discarded(reason)


def _judge_packet(gw: GatewayState, packet: DataPacket, window: int, tolerance: float) -> Optional[bool]:
    verdict: Optional[bool] = True
    for r in packet.readings:
        v = gw.store.judge(r, tolerance, gw.min_neighbors, window)
        if v is False:
            return False
        if v is None:
            verdict = None
    return verdict


def _buffer(gw: GatewayState, packet: DataPacket) -> Accepted:
    for r in packet.readings:
        gw.buffer.setdefault((r.sensor, r.timestamp), r)
    return Accepted(len(packet.readings))


def ingest_packet(
    gw: GatewayState, packet: DataPacket, now: int, neighbor_window: int, tolerance: float
) -> IngestOutcome:
    """Signature and endorsement checks, then the near-sensor comparison if needed."""
    if not packet.readings:
        return gw._discard("Malformed")
    sender = packet.sender
    if any(r.sensor != sender for r in packet.readings):
        return gw._discard("BadSignature")
    content = packet_content(packet.readings, sender)
    if packet.sender_signature.signer != sender or not gw.registry.verify(content, packet.sender_signature):
        return gw._discard("BadSignature")
    trace = set(packet.hop_trace)
    endorsers = set()
    for e in packet.endorsements:
        if e.endorser not in trace or e.signature.signer != e.endorser or not gw.registry.verify(content, e.signature):
            return gw._discard("BadSignature")
        endorsers.add(e.endorser)
    for r in packet.readings:
        gw.store.observe(r)
    # Only a packet vouched for by every intermediate hop skips the comparison.
    # A sender adjacent to its head or sink has no endorsers, so it is judged.
    route = gw.routes.get(sender)
    if gw.require_endorsements and route and endorsers.issuperset(route):
        return _buffer(gw, packet)
    verdict = _judge_packet(gw, packet, neighbor_window, tolerance)
    if verdict is False:
        return gw._discard("Anomalous")
    if verdict is None:
        gw.deferred.append([packet, 0])
        return Deferred()
    return _buffer(gw, packet)


def revisit_deferred(gw: GatewayState, neighbor_window: int, tolerance: float) -> Tuple[int, int]:
    """Re-judge deferred packets; returns (accepted, dropped)."""
    keep = []
    accepted = dropped = 0
    for entry in gw.deferred:
        packet, ticks = entry
        verdict = _judge_packet(gw, packet, neighbor_window, tolerance)
        if verdict is True:
            _buffer(gw, packet)
            accepted += 1
        elif verdict is False:
            gw._discard("Anomalous")
            dropped += 1
        elif ticks + 1 >= gw.max_deferred_ticks:
            gw._discard("NoNeighbors")
            dropped += 1
        else:
            keep.append([packet, ticks + 1])
    gw.deferred = keep
    return accepted, dropped


def build_transaction(gw: GatewayState, readings: Sequence[Reading], now: int, expiry_horizon: int) -> Transaction:
    readings = tuple(readings)
    expiry = now + expiry_horizon
    content = transaction_content(gw.node, readings, now, expiry, gw.service_id)
    sig = gw.registry.sign(content, gw.node)
    draft = Transaction(b"", gw.node, readings, now, expiry, gw.service_id, sig)
    return Transaction(transaction_id(draft), gw.node, readings, now, expiry, gw.service_id, sig)


def aggregate(gw: GatewayState, now: int, period: int, expiry_horizon: int) -> List[Transaction]:
    """Group buffered readings into one signed transaction (if any)."""
    gw.pending.sweep(now)
    gw.last_sweep = now
    if not gw.buffer:
        return []
    readings = sorted(gw.buffer.values(), key=lambda r: (r.timestamp, r.sensor.index))
    tx = build_transaction(gw, readings, now, expiry_horizon)
    gw.pending.add(tx, now)
    gw.buffer.clear()
    return [tx]


def on_new_block(gw: GatewayState, block: Block) -> Union[BlockAck, BlockError]:
    """Light validation: header links and own pending transactions only."""
    tip = gw.headers.tip
    if block.height != tip.height + 1:
        raise HeightMismatch(tip.height + 1, block.height)
    bh = header_hash(block.header)
    if check_block_structure(block, tip):
        return signed(BlockError(block.height, block.sequence_number, bh, (), True, (), gw.node), gw.registry)
    disputed: List[Hash] = []
    versions: List[Transaction] = []
    for tx in block.body:
        mine = gw.pending.get(tx.id)
        if mine is None:
            if tx.origin_gateway == gw.node and tx.expiry_deadline > gw.last_sweep:
                disputed.append(tx.id)
            continue
        if canonical_encode(mine) != canonical_encode(tx):
            disputed.append(tx.id)
            versions.append(mine)
    if disputed:
        return signed(
            BlockError(block.height, block.sequence_number, bh, tuple(disputed), False, tuple(versions), gw.node),
            gw.registry,
        )
    return signed(BlockAck(block.height, block.sequence_number, bh, gw.node), gw.registry)


def _same(a: Optional[Transaction], b: Transaction) -> bool:
    return a is not None and canonical_encode(a) == canonical_encode(b)


def on_error_check(gw: GatewayState, check: ErrorCheck) -> ErrorResolve:
    mine = gw.pending.get(check.tx_id)
    if mine is None:
        verdict = Verdict.EXPIRED
    elif _same(check.version_block, mine):
        verdict = Verdict.VERSION_BLOCK
    elif _same(check.version_pending, mine):
        verdict = Verdict.VERSION_PENDING
    else:
        verdict = Verdict.UNKNOWN
    return signed(ErrorResolve(check.height, check.sequence_number, check.tx_id, verdict, gw.node), gw.registry)


def on_block_confirm(
    gw: GatewayState,
    confirm: BlockConfirm,
    params: ConsensusParams,
    stations: Sequence[NodeId],
    gateways: Sequence[NodeId],
) -> GatewayState:
    """Append the confirmed header and retire its transactions from the pending list."""
    if not verify_confirm(confirm, gw.registry, params, stations, gateways):
        raise InvalidConfirm(f"confirm for height {confirm.header.height} lacks a valid quorum")
    _apply_header(gw, confirm.header)
    return gw


def _apply_header(gw: GatewayState, header: BlockHeader) -> None:
    gw.headers.append(header)
    block = gw.candidates.get(header.height)
    if block is not None and header_hash(block.header) == header_hash(header):
        gw.pending.remove([tx.id for tx in block.body])
    for h in [h for h in gw.candidates if h <= header.height]:
        del gw.candidates[h]


def _endorsement_messages(tx: Transaction) -> List[bytes]:
    msgs = [tx.id]
    for r in tx.readings:
        msgs.append(packet_content((r,), r.sensor))
    return msgs


def endorse_user_reply(
    gw: GatewayState,
    tx: Transaction,
    merkle_proof: Sequence[Tuple[Hash, str]],
    header_height: int,
) -> Union[EndorsedReply, RejectReply]:
    """Check a transaction served to a cloud user and add this gateway's endorsement."""
    header = gw.headers.get(header_height)
    if transaction_id(tx) != tx.id:
        return RejectReply("id")
    if not valid_transaction(tx, gw.registry):
        return RejectReply("signature")
    options = _endorsement_messages(tx)
    for e in tx.endorsements:
        if e.signature.signer != e.endorser:
            return RejectReply("endorsement")
        if not any(gw.registry.verify(m, e.signature) for m in options):
            return RejectReply("endorsement")
    if not verify_merkle_proof(tx.id, merkle_proof, header.merkle_root):
        return RejectReply("proof")
    mine = Endorsement(gw.node, gw.registry.sign(tx.id, gw.node))
    return EndorsedReply(tx, tuple(merkle_proof), header_height, tx.endorsements + (mine,))


def forward_transaction(
    gw: GatewayState, tx: Transaction, now: int, next_hop: NodeId, randbytes: Optional[Callable[[int], bytes]] = None
) -> SealedTx:
    """Endorse ``tx``, keep it pending here, and seal it for ``next_hop``."""
    if gw.node != tx.origin_gateway:
        tx = Transaction(
            tx.id, tx.origin_gateway, tx.readings, tx.creation_timestamp, tx.expiry_deadline, tx.service_id,
            tx.creator_signature, tx.endorsements + (Endorsement(gw.node, gw.registry.sign(tx.id, gw.node)),),
        )
    gw.pending.add(tx, now)
    ct = seal(canonical_encode(tx), gw.registry.box_public_key(next_hop), randbytes)
    return SealedTx(ct, gw.node, next_hop)


def open_sealed(sealed: SealedTx, registry: KeyRegistry, me: NodeId) -> Transaction:
    """Unseal and decode a hop-sealed transaction addressed to ``me``."""
    if sealed.recipient != me:
        raise DecryptionFailure("not addressed to this node")
    tx = canonical_decode(unseal(sealed.ciphertext, registry.keypair(me)))
    if not isinstance(tx, Transaction):
        raise DecryptionFailure("sealed payload is not a transaction")
    return tx


# ---------------------------------------------------------------------------
# Event-driven gateway


Saboteur = Callable[[NodeId, Block], Optional[Tuple[Hash, ...]]]


@dataclass
class _PbftTally:
    block: Optional[Block] = None
    votes: Dict[NodeId, bool] = field(default_factory=dict)
    decided: Optional[bool] = None


class GatewayNode:
    """Gateway behaviour driven by a runtime, for either consensus mode."""

    def __init__(
        self,
        state: GatewayState,
        runtime: Runtime,
        params: ConsensusParams,
        stations: Sequence[NodeId],
        gateways: Sequence[NodeId],
        *,
        uplink: Sequence[NodeId],
        mode: str = "quico",
        cost: Optional[CostModel] = None,
        aggregation_period: int = 50,
        expiry_horizon: int = 1000,
        neighbor_window: int = 1000,
        tolerance: float = 0.5,
        pbft_timeout: int = 500,
        seal_uplink: bool = False,
        randbytes: Optional[Callable[[int], bytes]] = None,
        saboteur: Optional[Saboteur] = None,
    ) -> None:
        if not uplink or uplink[-1].role is not Role.HAPS_STATION:
            raise ValueError("uplink must end at a HAPS station")
        self.s = state
        self.rt = runtime
        self.params = params
        self.stations = list(stations)
        self.gateways = list(gateways)
        self.uplink = tuple(uplink)
        self.mode = mode
        self.cost = cost or CostModel()
        self.period = aggregation_period
        self.expiry_horizon = expiry_horizon
        self.window = neighbor_window
        self.tolerance = tolerance
        self.pbft_timeout = pbft_timeout
        self.seal_uplink = seal_uplink
        self.randbytes = randbytes
        self.saboteur = saboteur
        self.tallies: Dict[Hash, _PbftTally] = {}

    @property
    def node(self) -> NodeId:
        return self.s.node

    def start(self) -> None:
        self.rt.at(self.period, self._tick)

    # -- data path ----------------------------------------------------------

    def receive_packet(self, packet: DataPacket) -> IngestOutcome:
        out = ingest_packet(self.s, packet, self.rt.now, self.window, self.tolerance)
        if isinstance(out, Discarded):
            self.rt.record("packet_discarded", gateway=self.node, reason=out.reason,
                           malicious=sum(r.secret_malicious_flag for r in packet.readings))
        return out

    def _tick(self) -> None:
        now = self.rt.now
        revisit_deferred(self.s, self.window, self.tolerance)
        for tx in aggregate(self.s, now, self.period, self.expiry_horizon):
            self.rt.record("tx_created", gateway=self.node, tx=tx.id, readings=len(tx.readings))
            self._send_up(tx)
        if winding_down(self.rt) and not self.s.buffer and not self.s.deferred:
            return
        self.rt.at(now + self.period, self._tick)

    def _send_up(self, tx: Transaction) -> None:
        nxt = self.uplink[0]
        if self.seal_uplink:
            self.rt.send(self.node, nxt, forward_transaction(self.s, tx, self.rt.now, nxt, self.randbytes))
        else:
            self.rt.send(self.node, nxt, TxSubmit(tx, self.node))

    def _relay(self, tx: Transaction) -> None:
        if not valid_transaction(tx, self.s.registry):
            self.rt.record("tx_dropped", gateway=self.node, tx=tx.id, origin=tx.origin_gateway,
                           readings=len(tx.readings))
            return
        nxt = self.uplink[0]
        if self.seal_uplink:
            self.rt.send(self.node, nxt, forward_transaction(self.s, tx, self.rt.now, nxt, self.randbytes))
            return
        endorsed = Transaction(
            tx.id, tx.origin_gateway, tx.readings, tx.creation_timestamp, tx.expiry_deadline, tx.service_id,
            tx.creator_signature,
            tx.endorsements + (Endorsement(self.node, self.s.registry.sign(tx.id, self.node)),),
        )
        self.s.pending.add(endorsed, self.rt.now)
        self.rt.send(self.node, nxt, TxSubmit(endorsed, self.node))

    # -- messages -----------------------------------------------------------

    def handle(self, msg: Any, src: NodeId) -> None:
        if isinstance(msg, SealedTx):
            try:
                tx = open_sealed(msg, self.s.registry, self.node)
            except DecryptionFailure:
                self.rt.record("decrypt_failed", node=self.node)
                return
            self._relay(tx)
        elif isinstance(msg, TxSubmit):
            self._relay(msg.tx)
        elif isinstance(msg, NewBlock):
            self._on_new_block(msg)
        elif isinstance(msg, BlockConfirm):
            self._on_confirm(msg)
        elif isinstance(msg, ErrorCheck):
            if verify_message(msg, self.s.registry):
                self.rt.send(self.node, msg.sender, on_error_check(self.s, msg))
        elif isinstance(msg, PrePrepare):
            self._on_preprepare(msg)
        elif isinstance(msg, Commit):
            self._on_commit(msg)
        elif isinstance(msg, HeaderSyncReply):
            self._on_sync_reply(msg)
        elif isinstance(msg, DisputeDecision):
            pass

    def _validation_cost(self, block: Block, full: bool) -> float:
        if full:
            return self.cost.gateway(
                len(block.body), sum(len(t.readings) for t in block.body), block_wire_size(block)
            )
        own = [t for t in block.body if t.id in self.s.pending]
        return self.cost.gateway(0, sum(len(t.readings) for t in own), 32 * len(block.body))

    def _sync(self) -> None:
        self.rt.send(self.node, self.uplink[-1],
                     signed(HeaderSyncRequest(self.s.headers.tip.height + 1, self.node), self.s.registry))

    def _on_sync_reply(self, msg: HeaderSyncReply) -> None:
        for h in msg.headers:
            if h.height == self.s.headers.tip.height + 1:
                try:
                    _apply_header(self.s, h)
                except ValueError:
                    break

    def _on_new_block(self, msg: NewBlock) -> None:
        block = msg.block
        if msg.sender != block.header.creator or not verify_message(msg, self.s.registry):
            return
        tip = self.s.headers.tip.height
        if block.height <= tip:
            return
        self.s.candidates[block.height] = block
        if block.height > tip + 1:
            self._sync()
            return
        done = self.rt.compute(self.node, self._validation_cost(block, full=False))
        self.rt.at(done, self._vote, block)

    def _vote(self, block: Block) -> None:
        try:
            vote = on_new_block(self.s, block)
        except HeightMismatch:
            self._sync()
            return
        if self.saboteur is not None:
            disputed = self.saboteur(self.node, block)
            if disputed:
                vote = signed(
                    BlockError(block.height, block.sequence_number, header_hash(block.header), disputed, False, (),
                               self.node),
                    self.s.registry,
                )
        self.rt.send(self.node, block.header.creator, vote)

    def _on_confirm(self, msg: BlockConfirm) -> None:
        if msg.header.height != self.s.headers.tip.height + 1:
            return
        try:
            on_block_confirm(self.s, msg, self.params, self.stations, self.gateways)
        except InvalidConfirm as exc:
            self.rt.record("invalid_confirm", node=self.node, height=msg.header.height)
            log.warning("%s: %s", self.node, exc)
        except (HeightMismatch, ValueError):
            self._sync()

    # -- baseline -----------------------------------------------------------

    def _on_preprepare(self, msg: PrePrepare) -> None:
        block = msg.block
        if msg.sender != block.header.creator or not verify_message(msg, self.s.registry):
            return
        if block.height != self.s.headers.tip.height + 1:
            if block.height > self.s.headers.tip.height + 1:
                self._sync()
            return
        bh = header_hash(block.header)
        t = self.tallies.setdefault(bh, _PbftTally())
        t.block = block
        t.votes.setdefault(block.header.creator, True)
        self.s.candidates[block.height] = block
        done = self.rt.compute(self.node, self._validation_cost(block, full=True))
        self.rt.at(done, self._commit, block, bh)
        self.rt.at(self.rt.now + self.pbft_timeout, self._pbft_timeout, bh)

    def _commit(self, block: Block, bh: Hash) -> None:
        t = self.tallies.get(bh)
        if t is None or t.decided is not None:
            return
        try:
            accept = isinstance(on_new_block(self.s, block), BlockAck)
        except HeightMismatch:
            return
        if self.saboteur is not None and self.saboteur(self.node, block):
            accept = False
        t.votes[self.node] = accept
        vote = signed(Commit(block.height, bh, accept, self.node), self.s.registry)
        self.rt.broadcast(self.node, self.stations + [g for g in self.gateways if g != self.node], vote)
        self._check(bh)

    def _on_commit(self, msg: Commit) -> None:
        if msg.height <= self.s.headers.tip.height:
            return
        if not (msg.voter in self.stations or msg.voter in self.gateways):
            return
        if not verify_message(msg, self.s.registry):
            return
        t = self.tallies.setdefault(msg.block_hash, _PbftTally())
        if t.decided is not None:
            return
        t.votes[msg.voter] = msg.accept
        self._check(msg.block_hash)

    def _check(self, bh: Hash) -> None:
        t = self.tallies[bh]
        if t.block is None or t.decided is not None:
            return
        yes = sum(1 for v in t.votes.values() if v)
        outcome = pbft_decide(yes, len(t.votes) - yes, len(self.stations) + len(self.gateways))
        if outcome is not None:
            self._decide(bh, outcome)

    def _pbft_timeout(self, bh: Hash) -> None:
        t = self.tallies.get(bh)
        if t is not None and t.block is not None and t.decided is None:
            self._decide(bh, False)

    def _decide(self, bh: Hash, accepted: bool) -> None:
        t = self.tallies[bh]
        t.decided = accepted
        block = t.block
        if accepted and block is not None and block.height == self.s.headers.tip.height + 1:
            _apply_header(self.s, block.header)
        for k in [k for k, v in self.tallies.items() if v.decided is not None and k != bh]:
            del self.tallies[k]
