"""Sensor and cluster-head behaviour: readings, packets, endorsement, clustering."""

from __future__ import annotations

import math
import random
import struct
from collections import deque
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .core import Endorsement, NodeId, Reading, Role, Signature, canonical_encode, register
from .crypto import KeyPair, KeyRegistry, sign


class MalformedPacket(ValueError):
    """A data packet without readings."""


class DisconnectedSensor(ValueError):
    """A sensor cannot reach its cluster head within the radio range."""


@dataclass(frozen=True)
class EnvModel:
    """Scalar field plus truncated Gaussian per-sample noise.

    The field is ``base + amplitude * sin(2*pi*x/wavelength) * cos(2*pi*y/wavelength)``
    with coordinates in km.  Noise is drawn from N(0, noise_sigma) and clipped
    to ``[-noise_band, noise_band]``.
    """

    base: float = 20.0
    amplitude: float = 0.0
    wavelength_km: float = 1.0
    noise_sigma: float = 0.2
    noise_band: float = 0.5

    def value_at(self, x: float, y: float) -> float:
        if self.amplitude == 0.0:
            return self.base
        k = 2.0 * math.pi / self.wavelength_km
        return self.base + self.amplitude * math.sin(k * x) * math.cos(k * y)

    def sample(self, x: float, y: float, rng: random.Random) -> float:
        value = self.value_at(x, y)
        if self.noise_sigma > 0.0 and self.noise_band > 0.0:
            noise = rng.gauss(0.0, self.noise_sigma)
            value += min(self.noise_band, max(-self.noise_band, noise))
        return value


_PAYLOAD_HEAD = struct.Struct(">Iq")


def generate_reading(
    node: NodeId,
    now: int,
    env_model: EnvModel,
    malicious: bool,
    *,
    position: Tuple[float, float] = (0.0, 0.0),
    rng: Optional[random.Random] = None,
    falsification_offset: float = 75.0,
    payload_size: int = 16,
) -> Reading:
    """Sample the environment at ``position``.

    A malicious node reports the sampled value displaced by
    ``falsification_offset`` and its reading carries the secret flag.
    """
    if node.role not in (Role.SENSOR, Role.CLUSTER_HEAD):
        raise ValueError("only sensor nodes generate readings")
    rng = rng or random.Random(0)
    value = env_model.sample(position[0], position[1], rng)
    if malicious:
        value += falsification_offset
    head = _PAYLOAD_HEAD.pack(node.index, now)
    size = max(1, payload_size)
    payload = head[:size]
    return Reading(node, now, payload, value, bool(malicious), size - len(payload))


# ---------------------------------------------------------------------------
# Packets


@register(30)
@dataclass(frozen=True)
class DataPacket:
    readings: Tuple[Reading, ...]
    sender: NodeId
    sender_signature: Signature
    endorsements: Tuple[Endorsement, ...] = ()
    hop_trace: Tuple[NodeId, ...] = ()


def packet_content(readings: Sequence[Reading], sender: NodeId) -> bytes:
    """Bytes covered by the sender signature and by every endorsement."""
    return canonical_encode(("pkt", tuple(readings), sender))


def make_packet(readings: Sequence[Reading], sender: NodeId, key: KeyPair) -> DataPacket:
    readings = tuple(readings)
    return DataPacket(readings, sender, sign(packet_content(readings, sender), key))


@dataclass(frozen=True)
class Endorsed:
    packet: DataPacket


@dataclass(frozen=True)
class ForwardUnendorsed:
    packet: DataPacket


@dataclass(frozen=True)
class Reject:
    reason: str


EndorseOutcome = Union[Endorsed, ForwardUnendorsed, Reject]


def relative_deviation(value: float, reference: float) -> float:
    scale = abs(reference)
    if scale < 1e-12:
        return math.inf if abs(value - reference) > 1e-12 else 0.0
    return abs(value - reference) / scale


def validate_and_endorse(
    packet: DataPacket,
    at: NodeId,
    local_value: float,
    tolerance: float,
    registry: KeyRegistry,
) -> EndorseOutcome:
    """In-path check by relay ``at``.

    ``local_value`` is the relay's own contemporaneous reading.  The relay
    endorses only when every reading is within ``tolerance`` (relative) of
    it; otherwise the packet travels on without this relay's endorsement.
    """
    if not packet.readings:
        raise MalformedPacket("packet has no readings")
    content = packet_content(packet.readings, packet.sender)
    if packet.sender_signature.signer != packet.sender or not registry.verify(content, packet.sender_signature):
        return Reject("bad-signature")
    trace = packet.hop_trace + (at,)
    if any(relative_deviation(r.ground_truth_value, local_value) > tolerance for r in packet.readings):
        return ForwardUnendorsed(replace(packet, hop_trace=trace))
    endorsement = Endorsement(at, registry.sign(content, at))
    return Endorsed(replace(packet, endorsements=packet.endorsements + (endorsement,), hop_trace=trace))


def verify_endorsements(packet: DataPacket, registry: KeyRegistry) -> bool:
    """Every endorsement verifies and names a node on the hop trace."""
    content = packet_content(packet.readings, packet.sender)
    trace = set(packet.hop_trace)
    for e in packet.endorsements:
        if e.endorser not in trace or e.signature.signer != e.endorser:
            return False
        if not registry.verify(content, e.signature):
            return False
    return True


# ---------------------------------------------------------------------------
# Clustering


@dataclass
class Cluster:
    id: int
    head: NodeId
    members: List[NodeId]
    intra_routes: Dict[NodeId, Tuple[NodeId, ...]]
    uplink: Optional[NodeId] = None

    def route(self, member: NodeId) -> Tuple[NodeId, ...]:
        """Relays from ``member`` to the head, excluding the member, ending at the head."""
        return self.intra_routes[member]


def _dist(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def build_cluster_topology(
    sensor_positions: Sequence[Tuple[NodeId, float, float]],
    cluster_radius: float,
    transmission_range: float = 0.1,
    first_cluster_id: int = 0,
) -> List[Cluster]:
    """Leader clustering followed by centroid head election and BFS routing.

    Sensors are visited by ascending index; each joins the first cluster whose
    seed lies within ``cluster_radius`` or seeds a new one.  The head is the
    member nearest the cluster centroid (ties to the lowest index), and
    routes are fewest-hop paths to the head using only links no longer than
    ``transmission_range``.  Distances are in km.
    """
    if not sensor_positions:
        raise ValueError("sensor_positions must be non-empty")
    pos: Dict[NodeId, Tuple[float, float]] = {}
    for node, x, y in sensor_positions:
        if node in pos:
            raise ValueError(f"duplicate sensor {node}")
        pos[node] = (x, y)
    if len(set(pos.values())) != len(pos):
        raise ValueError("sensor positions must be distinct")

    order = sorted(pos, key=lambda n: n.index)
    seeds: List[NodeId] = []
    groups: List[List[NodeId]] = []
    # Bucket seeds on a grid so the nearest-seed search stays local.
    cell = max(cluster_radius, 1e-9)
    grid: Dict[Tuple[int, int], List[int]] = {}
    for node in order:
        p = pos[node]
        cx, cy = int(math.floor(p[0] / cell)), int(math.floor(p[1] / cell))
        chosen = None
        for gx in (cx - 1, cx, cx + 1):
            for gy in (cy - 1, cy, cy + 1):
                for gi in grid.get((gx, gy), ()):
                    if _dist(pos[seeds[gi]], p) <= cluster_radius and (chosen is None or gi < chosen):
                        chosen = gi
        if chosen is None:
            seeds.append(node)
            groups.append([node])
            grid.setdefault((cx, cy), []).append(len(seeds) - 1)
        else:
            groups[chosen].append(node)

    clusters = []
    for k, members in enumerate(groups):
        mx = sum(pos[m][0] for m in members) / len(members)
        my = sum(pos[m][1] for m in members) / len(members)
        head = min(members, key=lambda m: (_dist(pos[m], (mx, my)), m.index))
        routes = _bfs_routes(head, members, pos, transmission_range)
        clusters.append(Cluster(first_cluster_id + k, head, sorted(members, key=lambda m: m.index), routes))
    return clusters


def _bfs_routes(
    head: NodeId, members: Sequence[NodeId], pos: Dict[NodeId, Tuple[float, float]], rng_km: float
) -> Dict[NodeId, Tuple[NodeId, ...]]:
    ordered = sorted(members, key=lambda m: m.index)
    parent: Dict[NodeId, Optional[NodeId]] = {head: None}
    queue = deque([head])
    while queue:
        cur = queue.popleft()
        for other in ordered:
            if other not in parent and _dist(pos[cur], pos[other]) <= rng_km + 1e-12:
                parent[other] = cur
                queue.append(other)
    routes: Dict[NodeId, Tuple[NodeId, ...]] = {}
    for m in ordered:
        if m not in parent:
            raise DisconnectedSensor(f"{m} cannot reach cluster head {head} within {rng_km} km")
        path = []
        cur = parent[m]
        while cur is not None:
            path.append(cur)
            cur = parent[cur]
        routes[m] = tuple(path)
    return routes


def assign_uplinks(
    clusters: Sequence[Cluster],
    positions: Dict[NodeId, Tuple[float, float]],
    sink: NodeId,
    sink_position: Tuple[float, float],
    uplink_range: float,
) -> None:
    """Point each head at the sink, or at a closer head when the sink is out of range."""
    heads = sorted((c for c in clusters), key=lambda c: _dist(positions[c.head], sink_position))
    for c in heads:
        hp = positions[c.head]
        d = _dist(hp, sink_position)
        if d <= uplink_range:
            c.uplink = sink
            continue
        best = None
        for other in heads:
            op = positions[other.head]
            od = _dist(op, sink_position)
            if other is c or od >= d or _dist(hp, op) > uplink_range:
                continue
            if best is None or (od, other.head.index) < best[0]:
                best = ((od, other.head.index), other.head)
        c.uplink = best[1] if best else sink


def uplink_chain(head: NodeId, clusters_by_head: Dict[NodeId, Cluster], sink: NodeId) -> Tuple[NodeId, ...]:
    """Cluster heads a packet crosses after leaving ``head`` and before the sink."""
    chain: List[NodeId] = []
    cur = clusters_by_head[head].uplink
    seen = {head}
    while cur is not None and cur != sink:
        if cur in seen:
            raise DisconnectedSensor(f"uplink loop at {cur}")
        seen.add(cur)
        chain.append(cur)
        cur = clusters_by_head[cur].uplink
    return tuple(chain)


def neighbors_within(
    positions: Dict[NodeId, Tuple[float, float]], radius: float, min_count: int = 0
) -> Dict[NodeId, Tuple[NodeId, ...]]:
    """For every node, the other nodes within ``radius`` km, ordered by index.

    Nodes with fewer than ``min_count`` nodes in range (map edges, sparse
    corners) get their ``min_count`` nearest nodes instead.
    """
    cell = max(radius, 1e-9)
    grid: Dict[Tuple[int, int], List[NodeId]] = {}
    for n, (x, y) in positions.items():
        grid.setdefault((int(math.floor(x / cell)), int(math.floor(y / cell))), []).append(n)
    out: Dict[NodeId, Tuple[NodeId, ...]] = {}
    for n, (x, y) in positions.items():
        cx, cy = int(math.floor(x / cell)), int(math.floor(y / cell))
        near = []
        for gx in (cx - 1, cx, cx + 1):
            for gy in (cy - 1, cy, cy + 1):
                for o in grid.get((gx, gy), ()):
                    if o != n and _dist(positions[o], (x, y)) <= radius:
                        near.append(o)
        if len(near) < min_count:
            ranked = sorted((o for o in positions if o != n), key=lambda o: (_dist(positions[o], (x, y)), o.index))
            near = ranked[:min_count]
        out[n] = tuple(sorted(near, key=lambda m: m.index))
    return out


class NeighborStore:
    """Recent readings per sensor, for "compare with near sensors" checks.

    ``near`` maps each sensor to the sensors considered near it.  Only
    readings within ``window`` ms of the reading under test are compared.
    """

    def __init__(self, near: Dict[NodeId, Tuple[NodeId, ...]], window: int, history: int = 4) -> None:
        self.near = near
        self.window = window
        self.history = history
        self._obs: Dict[NodeId, deque] = {}

    def observe(self, reading: Reading) -> None:
        q = self._obs.get(reading.sensor)
        if q is None:
            q = self._obs[reading.sensor] = deque(maxlen=self.history)
        q.append((reading.timestamp, reading.ground_truth_value))

    def comparable(self, reading: Reading, window: Optional[int] = None) -> List[float]:
        t = reading.timestamp
        w = self.window if window is None else window
        values = []
        for other in self.near.get(reading.sensor, ()):
            q = self._obs.get(other)
            if not q:
                continue
            # Most recent sample of each neighbour inside the window.
            for ts, v in reversed(q):
                if abs(ts - t) <= w:
                    values.append(v)
                    break
        return values

    def judge(
        self, reading: Reading, tolerance: float, min_neighbors: int, window: Optional[int] = None
    ) -> Optional[bool]:
        """True if consistent, False if anomalous, None if too few neighbours."""
        values = self.comparable(reading, window)
        if len(values) < max(1, min_neighbors):
            return None
        values.sort()
        n = len(values)
        median = values[n // 2] if n % 2 else 0.5 * (values[n // 2 - 1] + values[n // 2])
        return relative_deviation(reading.ground_truth_value, median) <= tolerance
