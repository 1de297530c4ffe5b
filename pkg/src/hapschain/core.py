"""Domain types, canonical encoding, hashing and Merkle trees.

Every value that is hashed or signed goes through :func:`canonical_encode`,
a self-describing tagged format:

* integers are 8-byte signed big-endian,
* floats are IEEE-754 binary64 big-endian,
* bytes and strings are prefixed with a 4-byte length,
* sequences are prefixed with a 4-byte item count,
* registered records carry a 2-byte type tag followed by their fields in
  declaration order.

The format is injective and :func:`canonical_decode` inverts it exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Any, Callable, Dict, Iterable, List, Sequence, Tuple, Type, Union, get_args, get_origin, get_type_hints

Hash = bytes
HASH_SIZE = 32
ZERO_HASH: Hash = bytes(HASH_SIZE)

# Wire-size constants used by the link model.  Signatures are costed at the
# Ed25519 length regardless of the backend actually used to produce them.
SIGNATURE_WIRE_BYTES = 64
NODE_ID_WIRE_BYTES = 4
READING_WIRE_OVERHEAD = NODE_ID_WIRE_BYTES + 8 + 8 + 1
ENDORSEMENT_WIRE_BYTES = NODE_ID_WIRE_BYTES + SIGNATURE_WIRE_BYTES
TRANSACTION_WIRE_OVERHEAD = HASH_SIZE + NODE_ID_WIRE_BYTES + 16 + 8 + SIGNATURE_WIRE_BYTES
HEADER_WIRE_BYTES = 8 + 8 + HASH_SIZE + HASH_SIZE + 8 + NODE_ID_WIRE_BYTES


class EncodingError(ValueError):
    """Raised when bytes are not a valid canonical encoding."""


class EmptyLeafSet(ValueError):
    """Raised when a Merkle root is requested for zero leaves."""


# ---------------------------------------------------------------------------
# Type registry for the record/enum tags of the encoding.

_RECORD_TAGS: Dict[int, type] = {}
_TAG_OF: Dict[type, int] = {}


def register(tag: int) -> Callable[[type], type]:
    """Class decorator assigning a stable encoding tag to a dataclass or enum."""

    def wrap(cls: type) -> type:
        if tag in _RECORD_TAGS and _RECORD_TAGS[tag] is not cls:
            raise ValueError(f"encoding tag {tag} already used by {_RECORD_TAGS[tag].__name__}")
        _RECORD_TAGS[tag] = cls
        _TAG_OF[cls] = tag
        return cls

    return wrap


# ---------------------------------------------------------------------------
# Domain types


@register(1)
class Role(IntEnum):
    SENSOR = 0
    CLUSTER_HEAD = 1
    GATEWAY = 2
    HAPS_STATION = 3
    CLOUD_USER = 4
    ADMIN = 5


@register(2)
@dataclass(frozen=True, order=True)
class NodeId:
    role: Role
    index: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("node index must be non-negative")
    def __str__(self) -> str:
        return f"{self.role.name.lower()}:{self.index}"


def sensor(i: int) -> NodeId:
    return NodeId(Role.SENSOR, i)


def gateway(i: int) -> NodeId:
    return NodeId(Role.GATEWAY, i)


def station(i: int) -> NodeId:
    return NodeId(Role.HAPS_STATION, i)


ADMIN_ID = NodeId(Role.ADMIN, 0)


@register(3)
@dataclass(frozen=True)
class Signature:
    data: bytes
    signer: NodeId


@register(4)
@dataclass(frozen=True)
class Reading:
    """One sensed sample.

    ``padding`` counts zero bytes that follow ``payload`` on the wire.  It lets
    large payloads be simulated without materialising them; the count is part
    of the encoding, so it is covered by hashes and signatures.
    """

    sensor: NodeId
    timestamp: int
    payload: bytes
    ground_truth_value: float
    secret_malicious_flag: bool = False
    padding: int = 0

    def __post_init__(self) -> None:
        if len(self.payload) + self.padding <= 0:
            raise ValueError("reading payload must be non-empty")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def payload_size(self) -> int:
        return len(self.payload) + self.padding


@register(5)
@dataclass(frozen=True)
class Endorsement:
    endorser: NodeId
    signature: Signature


@register(6)
@dataclass(frozen=True)
class Transaction:
    id: Hash
    origin_gateway: NodeId
    readings: Tuple[Reading, ...]
    creation_timestamp: int
    expiry_deadline: int
    service_id: str
    creator_signature: Signature
    endorsements: Tuple[Endorsement, ...] = ()


@register(7)
@dataclass(frozen=True)
class BlockHeader:
    height: int
    sequence_number: int
    previous_hash: Hash
    merkle_root: Hash
    timestamp: int
    creator: NodeId


@register(8)
@dataclass(frozen=True)
class Block:
    header: BlockHeader
    body: Tuple[Transaction, ...] = ()

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def sequence_number(self) -> int:
        return self.header.sequence_number


# ---------------------------------------------------------------------------
# Canonical encoding

_K_NONE, _K_FALSE, _K_TRUE, _K_INT, _K_FLOAT, _K_BYTES, _K_STR, _K_SEQ, _K_RECORD, _K_ENUM = range(10)

_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")

_CACHE_ATTR = "_canonical_bytes"


def _enc_none(value: Any, out: List[bytes]) -> None:
    out.append(b"\x00")


def _enc_bool(value: bool, out: List[bytes]) -> None:
    out.append(b"\x02" if value else b"\x01")


def _enc_int(value: int, out: List[bytes]) -> None:
    out.append(bytes((_K_INT,)) + _I64.pack(value))


def _enc_float(value: float, out: List[bytes]) -> None:
    out.append(bytes((_K_FLOAT,)) + _F64.pack(value))


def _enc_bytes(value: Any, out: List[bytes]) -> None:
    out.append(bytes((_K_BYTES,)) + _U32.pack(len(value)) + bytes(value))


def _enc_str(value: str, out: List[bytes]) -> None:
    raw = value.encode("utf-8")
    out.append(bytes((_K_STR,)) + _U32.pack(len(raw)) + raw)


def _enc_seq(value: Any, out: List[bytes]) -> None:
    out.append(bytes((_K_SEQ,)) + _U32.pack(len(value)))
    for item in value:
        _encode_into(item, out)


def _enc_record(value: Any, out: List[bytes]) -> None:
    out.append(_encode_record(value))


# Dispatch on the exact type; subclasses (enums, records) are added on first use.
_ENCODERS: Dict[type, Callable[[Any, List[bytes]], None]] = {
    type(None): _enc_none,
    bool: _enc_bool,
    int: _enc_int,
    float: _enc_float,
    bytes: _enc_bytes,
    bytearray: _enc_bytes,
    str: _enc_str,
    tuple: _enc_seq,
    list: _enc_seq,
}
_RECORD_FIELDS: Dict[type, Tuple[str, ...]] = {}


def _encoder_for(tp: type) -> Callable[[Any, List[bytes]], None]:
    if issubclass(tp, Enum):
        tag = _TAG_OF.get(tp)
        if tag is None:
            raise TypeError(f"unregistered enum {tp.__name__}")
        prefix = bytes((_K_ENUM,)) + _U16.pack(tag)

        def enc(value: Any, out: List[bytes]) -> None:
            out.append(prefix + _I64.pack(int(value.value)))

        return enc
    if dataclasses.is_dataclass(tp):
        return _enc_record
    for base, fn in ((bool, _enc_bool), (int, _enc_int), (float, _enc_float), (str, _enc_str),
                     (bytes, _enc_bytes), (tuple, _enc_seq), (list, _enc_seq)):
        if issubclass(tp, base):
            return fn
    raise TypeError(f"cannot canonically encode {tp.__name__}")


def _encode_into(value: Any, out: List[bytes]) -> None:
    enc = _ENCODERS.get(type(value))
    if enc is None:
        enc = _encoder_for(type(value))
        _ENCODERS[type(value)] = enc
    enc(value, out)


def _encode_record(value: Any) -> bytes:
    d = getattr(value, "__dict__", None)
    if d is not None:
        cached = d.get(_CACHE_ATTR)
        if cached is not None:
            return cached
    tp = type(value)
    names = _RECORD_FIELDS.get(tp)
    if names is None:
        if tp not in _TAG_OF:
            raise TypeError(f"unregistered record {tp.__name__}")
        names = tuple(f.name for f in dataclasses.fields(value))
        _RECORD_FIELDS[tp] = names
    parts = [bytes((_K_RECORD,)) + _U16.pack(_TAG_OF[tp])]
    for name in names:
        _encode_into(getattr(value, name), parts)
    encoded = b"".join(parts)
    if d is not None:
        # Frozen records are immutable, so memoising their encoding is safe.
        object.__setattr__(value, _CACHE_ATTR, encoded)
    return encoded


def canonical_encode(value: Any) -> bytes:
    """Deterministic, injective byte encoding of a domain value."""
    out: List[bytes] = []
    _encode_into(value, out)
    return b"".join(out)


_FIELD_TYPES: Dict[type, Dict[str, Any]] = {}


def _field_types(cls: type) -> Dict[str, Any]:
    hints = _FIELD_TYPES.get(cls)
    if hints is None:
        resolved = get_type_hints(cls)
        hints = {f.name: resolved.get(f.name, Any) for f in dataclasses.fields(cls)}
        _FIELD_TYPES[cls] = hints
    return hints


def _conforms(value: Any, tp: Any) -> bool:
    """Shape check of a decoded field against its annotation.

    A flipped kind byte can still decode to *some* value; without this check
    a string could stand where a tuple of endorsements belongs.
    """
    if tp is Any:
        return True
    origin = get_origin(tp)
    if origin is Union:
        return any(_conforms(value, a) for a in get_args(tp))
    if origin in (tuple, Tuple):
        args = get_args(tp)
        if not isinstance(value, tuple):
            return False
        if len(args) == 2 and args[1] is Ellipsis:
            return all(_conforms(v, args[0]) for v in value)
        return len(args) == len(value) and all(_conforms(v, a) for v, a in zip(value, args))
    if origin is not None:
        return True  # other generics are not produced by the decoder's record types
    if tp is type(None):
        return value is None
    if tp is float:
        return isinstance(value, float)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(tp, type):
        return isinstance(value, tp)
    return True


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise EncodingError("truncated encoding")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def value(self) -> Any:
        kind = self.take(1)[0]
        if kind == _K_NONE:
            return None
        if kind == _K_FALSE:
            return False
        if kind == _K_TRUE:
            return True
        if kind == _K_INT:
            return _I64.unpack(self.take(8))[0]
        if kind == _K_FLOAT:
            return _F64.unpack(self.take(8))[0]
        if kind == _K_BYTES:
            (n,) = _U32.unpack(self.take(4))
            return self.take(n)
        if kind == _K_STR:
            (n,) = _U32.unpack(self.take(4))
            try:
                return self.take(n).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise EncodingError("invalid utf-8 string") from exc
        if kind == _K_SEQ:
            (n,) = _U32.unpack(self.take(4))
            if n > len(self.buf) - self.pos:
                raise EncodingError("sequence length exceeds input")
            return tuple(self.value() for _ in range(n))
        if kind == _K_ENUM:
            (tag,) = _U16.unpack(self.take(2))
            (raw,) = _I64.unpack(self.take(8))
            cls = _RECORD_TAGS.get(tag)
            if cls is None or not issubclass(cls, Enum):
                raise EncodingError(f"unknown enum tag {tag}")
            try:
                return cls(raw)
            except ValueError as exc:
                raise EncodingError(f"invalid {cls.__name__} value {raw}") from exc
        if kind == _K_RECORD:
            (tag,) = _U16.unpack(self.take(2))
            cls = _RECORD_TAGS.get(tag)
            if cls is None or not dataclasses.is_dataclass(cls):
                raise EncodingError(f"unknown record tag {tag}")
            args = [self.value() for _ in dataclasses.fields(cls)]
            for name, arg in zip(_field_types(cls), args):
                if not _conforms(arg, _field_types(cls)[name]):
                    raise EncodingError(f"invalid {cls.__name__}.{name}: got {type(arg).__name__}")
            try:
                return cls(*args)
            except (TypeError, ValueError) as exc:
                raise EncodingError(f"invalid {cls.__name__}: {exc}") from exc
        raise EncodingError(f"unknown kind byte {kind}")


def canonical_decode(data: bytes) -> Any:
    """Inverse of :func:`canonical_encode`.  Sequences come back as tuples."""
    reader = _Reader(bytes(data))
    value = reader.value()
    if reader.pos != len(reader.buf):
        raise EncodingError("trailing bytes after value")
    return value


# ---------------------------------------------------------------------------
# Hashing and Merkle trees


def hash_bytes(data: bytes) -> Hash:
    """SHA3-256 digest."""
    return hashlib.sha3_256(data).digest()


EMPTY_BODY_ROOT: Hash = hash_bytes(b"hapschain/empty-body/v1")


def merkle_root(leaves: Sequence[Hash]) -> Hash:
    """Binary Merkle root; odd levels duplicate their last node."""
    if not leaves:
        raise EmptyLeafSet("merkle_root requires at least one leaf")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hash_bytes(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


LEFT = "L"
RIGHT = "R"
MerkleProof = Tuple[Tuple[Hash, str], ...]


def merkle_proof(leaves: Sequence[Hash], index: int) -> MerkleProof:
    """Sibling path for ``leaves[index]``; side tells where the sibling sits."""
    if not leaves:
        raise EmptyLeafSet("merkle_proof requires at least one leaf")
    if not 0 <= index < len(leaves):
        raise IndexError("leaf index out of range")
    proof: List[Tuple[Hash, str]] = []
    level = list(leaves)
    pos = index
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        if pos % 2:
            proof.append((level[pos - 1], LEFT))
        else:
            proof.append((level[pos + 1], RIGHT))
        level = [hash_bytes(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        pos //= 2
    return tuple(proof)


def fold_merkle_proof(leaf: Hash, proof: Iterable[Tuple[Hash, str]]) -> Hash:
    node = leaf
    for sibling, side in proof:
        if side == LEFT:
            node = hash_bytes(sibling + node)
        elif side == RIGHT:
            node = hash_bytes(node + sibling)
        else:
            raise ValueError(f"invalid proof side {side!r}")
    return node


def verify_merkle_proof(leaf: Hash, proof: Iterable[Tuple[Hash, str]], root: Hash) -> bool:
    try:
        return fold_merkle_proof(leaf, proof) == root
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Derived values


def reading_content(reading: Reading) -> bytes:
    return canonical_encode(reading)


def transaction_content(
    origin_gateway: NodeId,
    readings: Sequence[Reading],
    creation_timestamp: int,
    expiry_deadline: int,
    service_id: str,
) -> bytes:
    """Bytes the origin gateway signs."""
    return canonical_encode(
        ("tx", origin_gateway, tuple(readings), creation_timestamp, expiry_deadline, service_id)
    )


def transaction_id(tx: Transaction) -> Hash:
    """Hash over every field except ``id`` and ``endorsements``."""
    content = transaction_content(
        tx.origin_gateway, tx.readings, tx.creation_timestamp, tx.expiry_deadline, tx.service_id
    )
    return hash_bytes(content + canonical_encode(tx.creator_signature))


def header_hash(header: BlockHeader) -> Hash:
    return hash_bytes(canonical_encode(header))


def body_root(body: Sequence[Transaction]) -> Hash:
    if not body:
        return EMPTY_BODY_ROOT
    return merkle_root([tx.id for tx in body])


def body_sort_key(tx: Transaction) -> Tuple[int, bytes]:
    return (tx.creation_timestamp, tx.id)


def order_body(txs: Iterable[Transaction]) -> Tuple[Transaction, ...]:
    return tuple(sorted(txs, key=body_sort_key))


GENESIS_HEADER = BlockHeader(
    height=0,
    sequence_number=0,
    previous_hash=ZERO_HASH,
    merkle_root=EMPTY_BODY_ROOT,
    timestamp=0,
    creator=NodeId(Role.HAPS_STATION, 0),
)
GENESIS_BLOCK = Block(GENESIS_HEADER, ())


def make_header(
    previous: BlockHeader, body: Sequence[Transaction], timestamp: int, creator: NodeId, sequence_number: int = 0
) -> BlockHeader:
    return BlockHeader(
        height=previous.height + 1,
        sequence_number=sequence_number,
        previous_hash=header_hash(previous),
        merkle_root=body_root(body),
        timestamp=timestamp,
        creator=creator,
    )


def check_block_structure(block: Block, previous: BlockHeader) -> List[str]:
    """Header invariants that do not need transaction context."""
    problems = []
    if block.header.height != previous.height + 1:
        problems.append("height")
    if block.header.previous_hash != header_hash(previous):
        problems.append("previous_hash")
    if block.header.merkle_root != body_root(block.body):
        problems.append("merkle_root")
    if tuple(block.body) != order_body(block.body):
        problems.append("order")
    if len({tx.id for tx in block.body}) != len(block.body):
        problems.append("duplicate")
    return problems


# ---------------------------------------------------------------------------
# Wire sizes


def reading_wire_size(reading: Reading) -> int:
    return READING_WIRE_OVERHEAD + reading.payload_size


def transaction_wire_size(tx: Transaction) -> int:
    cached = tx.__dict__.get("_wire_size")
    if cached is not None:
        return cached
    size = (
        TRANSACTION_WIRE_OVERHEAD
        + len(tx.service_id)
        + sum(reading_wire_size(r) for r in tx.readings)
        + ENDORSEMENT_WIRE_BYTES * len(tx.endorsements)
    )
    object.__setattr__(tx, "_wire_size", size)
    return size


def block_wire_size(block: Block) -> int:
    return HEADER_WIRE_BYTES + sum(transaction_wire_size(tx) for tx in block.body)


def record_type(tag: int) -> Type[Any]:
    return _RECORD_TAGS[tag]
