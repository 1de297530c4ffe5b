"""Deterministic discrete-event engine, topology and link model.

Time is integer milliseconds.  Every random draw comes from a named stream
derived from the scenario seed, so a run is a pure function of its config.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import math
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adversary import AdminNode, AdversaryConfig, AdversaryState, Saboteur, select_malicious
from .config import ConfigError, ScenarioConfig
from .core import (
    ADMIN_ID,
    ENDORSEMENT_WIRE_BYTES,
    NODE_ID_WIRE_BYTES,
    SIGNATURE_WIRE_BYTES,
    NodeId,
    Role,
    Signature,
    gateway,
    reading_wire_size,
    sensor,
    station,
)
from .crypto import KeyRegistry
from .gateway import GatewayNode, GatewayState
from .haps import ConsensusParams, PbftStation, QuicoStation, StationDataCheck, is_data, wire_size
from .metrics import MetricsReport, RunLog, finalize
from .runtime import CostModel
from .wsn import (
    Cluster,
    DataPacket,
    DisconnectedSensor,
    Endorsed,
    EnvModel,
    NeighborStore,
    Reject,
    assign_uplinks,
    build_cluster_topology,
    generate_reading,
    make_packet,
    neighbors_within,
    uplink_chain,
    validate_and_endorse,
)

log = logging.getLogger(__name__)


class Unroutable(Exception):
    """No route between two nodes."""


class InfeasibleTopology(ConfigError, ValueError):
    """The requested counts cannot be laid out."""


def derive_seed(seed: int, name: str) -> int:
    return int.from_bytes(hashlib.sha3_256(f"hapschain/{seed}/{name}".encode()).digest()[:8], "big")


def stream(seed: int, name: str) -> random.Random:
    return random.Random(derive_seed(seed, name))


# ---------------------------------------------------------------------------
# Topology

Position = Tuple[float, float, float]


@dataclass
class Topology:
    map_size_km: float
    haps: List[Tuple[NodeId, float, float, float]]
    gateways: List[Tuple[NodeId, float, float, float]]
    sensors: List[Tuple[NodeId, float, float]]
    clusters: List[Cluster]
    sensor_gateway: Dict[NodeId, NodeId]
    sensor_route: Dict[NodeId, Tuple[NodeId, ...]]
    routes: Dict[NodeId, Tuple[NodeId, ...]]
    positions: Dict[NodeId, Position]
    ground_range_km: float = 50.0
    station_range_km: float = 500.0

    def station_ids(self) -> List[NodeId]:
        return [h[0] for h in self.haps]

    def gateway_ids(self) -> List[NodeId]:
        return [g[0] for g in self.gateways]

    def sensor_ids(self) -> List[NodeId]:
        return [s[0] for s in self.sensors]

    def distance(self, a: NodeId, b: NodeId) -> float:
        pa, pb = self.positions[a], self.positions[b]
        return math.sqrt((pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2 + (pa[2] - pb[2]) ** 2)

    def fingerprint(self) -> Tuple[Any, ...]:
        """Plain data describing the layout, for determinism checks."""
        return (
            round(self.map_size_km, 12),
            tuple((str(n), x, y, z) for n, x, y, z in self.haps),
            tuple((str(n), x, y, z) for n, x, y, z in self.gateways),
            tuple((str(n), x, y) for n, x, y in self.sensors),
            tuple((c.id, str(c.head), tuple(map(str, c.members)), str(c.uplink)) for c in self.clusters),
            tuple(sorted((str(k), tuple(map(str, v))) for k, v in self.routes.items())),
        )


def _grid_centres(count: int, side: float) -> List[Tuple[float, float]]:
    cols = max(1, math.ceil(math.sqrt(count)))
    rows = max(1, math.ceil(count / cols))
    w, h = side / cols, side / rows
    return [((i % cols + 0.5) * w, (i // cols + 0.5) * h) for i in range(count)]


def _ground_path(
    src: NodeId, ok: Callable[[NodeId], bool], gateways: Sequence[NodeId], pos: Dict[NodeId, Position], rng_km: float
) -> Optional[Tuple[NodeId, ...]]:
    """Fewest-hop gateway path from ``src`` to the first gateway satisfying ``ok``."""
    parent: Dict[NodeId, Optional[NodeId]] = {src: None}
    q = deque([src])
    while q:
        cur = q.popleft()
        if cur != src and ok(cur):
            path = []
            while cur is not None and cur != src:
                path.append(cur)
                cur = parent[cur]
            return tuple(reversed(path))
        for g in gateways:
            if g in parent:
                continue
            a, b = pos[cur], pos[g]
            if math.hypot(a[0] - b[0], a[1] - b[1]) <= rng_km:
                parent[g] = cur
                q.append(g)
    return None


def build_topology(cfg: ScenarioConfig, rng: random.Random) -> Topology:
    t = cfg.topology
    n = t.sensors
    side = t.map_size_km if t.map_size_km is not None else math.sqrt(n / t.density_per_km2)
    g = t.gateways if t.gateways is not None else math.ceil(n / t.sensors_per_gateway)
    if g > n:
        raise InfeasibleTopology(f"{g} gateways for {n} sensors")
    if g * t.sensors_per_gateway < n:
        raise InfeasibleTopology(f"{g} gateways x {t.sensors_per_gateway} sensors each cannot serve {n} sensors")

    k = math.ceil(math.sqrt(n))
    cell = side / k
    picked = sorted(rng.sample(range(k * k), n))
    sensors: List[Tuple[NodeId, float, float]] = []
    for idx, c in enumerate(picked):
        i, j = c % k, c // k
        jx = (rng.random() - 0.5) * t.placement_jitter
        jy = (rng.random() - 0.5) * t.placement_jitter
        sensors.append((sensor(idx), (i + 0.5 + jx) * cell, (j + 0.5 + jy) * cell))

    gws = [(gateway(i), x, y, 0.0) for i, (x, y) in enumerate(_grid_centres(g, side))]
    haps = [(station(i), x, y, t.station_altitude_km) for i, (x, y) in enumerate(_grid_centres(t.stations, side))]

    positions: Dict[NodeId, Position] = {}
    for nid, x, y in sensors:
        positions[nid] = (x, y, 0.0)
    for nid, x, y, z in gws + haps:
        positions[nid] = (x, y, z)

    # Capacity-balanced nearest assignment of sensors to gateways.
    cap = math.ceil(n / g)
    pairs = []
    for s, sx, sy in sensors:
        for gw, gx, gy, _ in gws:
            pairs.append((math.hypot(sx - gx, sy - gy), s.index, gw.index))
    pairs.sort()
    load = [0] * g
    owner: Dict[NodeId, NodeId] = {}
    for _, si, gi in pairs:
        s = sensor(si)
        if s in owner or load[gi] >= cap:
            continue
        owner[s] = gateway(gi)
        load[gi] += 1
        if len(owner) == n:
            break

    clusters: List[Cluster] = []
    routes_to_gw: Dict[NodeId, Tuple[NodeId, ...]] = {}
    flat = {s: (x, y) for s, x, y in sensors}
    for gw, gx, gy, _ in gws:
        members = [(s, x, y) for s, x, y in sensors if owner[s] == gw]
        if not members:
            continue
        try:
            cs = build_cluster_topology(members, t.cluster_radius_km, t.sensor_range_km, len(clusters))
        except DisconnectedSensor as exc:
            raise InfeasibleTopology(str(exc)) from exc
        assign_uplinks(cs, flat, gw, (gx, gy), t.ch_uplink_range_km)
        by_head = {c.head: c for c in cs}
        for c in cs:
            chain = uplink_chain(c.head, by_head, gw)
            for m in c.members:
                routes_to_gw[m] = c.intra_routes[m] + chain
        clusters.extend(cs)

    # Gateway -> station routes.
    station_ids = [h[0] for h in haps]
    gw_ids = [x[0] for x in gws]

    def dist3(a: NodeId, b: NodeId) -> float:
        pa, pb = positions[a], positions[b]
        return math.sqrt(sum((pa[i] - pb[i]) ** 2 for i in range(3)))

    def home(gw: NodeId) -> Optional[NodeId]:
        best = min(station_ids, key=lambda s: (dist3(gw, s), s.index))
        return best if dist3(gw, best) <= t.gateway_station_range_km else None

    routes: Dict[NodeId, Tuple[NodeId, ...]] = {}
    for gw in gw_ids:
        h = home(gw)
        if h is not None:
            routes[gw] = (h,)
            continue
        path = _ground_path(gw, lambda x: home(x) is not None, gw_ids, positions, t.gateway_range_km)
        if path is None:
            raise Unroutable(f"{gw} has no route to any HAPS station")
        routes[gw] = path + (home(path[-1]),)  # type: ignore[operator]

    return Topology(side, haps, gws, sensors, clusters, owner, routes_to_gw, routes, positions,
                    t.gateway_range_km, t.gateway_station_range_km)


# ---------------------------------------------------------------------------
# Links


class LinkClass(Enum):
    SENSOR = "sensor"
    UPLINK = "uplink"
    DOWNLINK = "downlink"
    PEER = "peer"
    GROUND = "ground"
    ADMIN = "admin"


@dataclass
class LinkModel:
    propagation_speed: float
    bandwidth: Dict[LinkClass, float]  # bits per ms
    mtu: int
    jitter: float
    extra_latency: Dict[LinkClass, float] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "LinkModel":
        n = cfg.network
        return cls(
            n.propagation_km_per_ms,
            {
                LinkClass.SENSOR: n.sensor_kbps,
                LinkClass.UPLINK: n.uplink_kbps,
                LinkClass.DOWNLINK: n.uplink_kbps,
                LinkClass.PEER: n.peer_kbps,
                LinkClass.GROUND: n.ground_kbps,
                LinkClass.ADMIN: n.admin_kbps,
            },
            n.mtu,
            n.jitter,
            {LinkClass.ADMIN: n.admin_latency_ms},
        )

    def segments(self, size: int) -> int:
        return max(1, -(-size // self.mtu))

    def segment_time(self, cls: LinkClass) -> float:
        return self.mtu * 8.0 / self.bandwidth[cls]

    def transmission_time(self, cls: LinkClass, size: int) -> float:
        return self.segments(size) * self.segment_time(cls)

    def propagation(self, cls: LinkClass, distance_km: float) -> float:
        return distance_km / self.propagation_speed + self.extra_latency.get(cls, 0.0)

    def jitter_for(self, base: float, rng: random.Random) -> float:
        if self.jitter <= 0 or base <= 0:
            return 0.0
        sigma = self.jitter * base
        return min(3 * sigma, max(-3 * sigma, rng.gauss(0.0, sigma)))

    def delay(self, cls: LinkClass, distance_km: float, size: int, rng: random.Random) -> float:
        """Deterministic part plus jitter for one uncontended hop, in ms."""
        base = self.propagation(cls, distance_km) + self.transmission_time(cls, size)
        return base + self.jitter_for(base, rng)


@dataclass
class EnergyLedger:
    budget: float
    used: Dict[NodeId, float] = field(default_factory=dict)

    def debit(self, node: NodeId, joules: float) -> None:
        self.used[node] = min(self.budget, self.used.get(node, 0.0) + joules)

    def remaining(self, node: NodeId) -> float:
        return max(0.0, self.budget - self.used.get(node, 0.0))

    def alive(self, node: NodeId) -> bool:
        return self.remaining(node) > 0.0


# ---------------------------------------------------------------------------
# Engine


_PACKET_OVERHEAD = NODE_ID_WIRE_BYTES + SIGNATURE_WIRE_BYTES + 8


class Engine:
    """Event queue plus message delivery; implements the node runtime."""

    def __init__(self, cfg: ScenarioConfig, topo: Topology) -> None:
        self.cfg = cfg
        self.topo = topo
        self.now = 0
        self.horizon = cfg.sim_time
        self._queue: List[Tuple[int, int, Callable[..., None], Tuple[Any, ...]]] = []
        self._seq = 0
        self.links = LinkModel.from_config(cfg)
        self.jitter_rng = stream(cfg.seed, "jitter")
        self.cpu_rng = stream(cfg.seed, "cpu")
        self.busy: Dict[Tuple[NodeId, LinkClass], float] = {}
        self.cpu_busy: Dict[NodeId, float] = {}
        self.nodes: Dict[NodeId, Any] = {}
        self.events: List[Tuple[int, str, Dict[str, Any]]] = []
        self.nt = {"data": 0, "control": 0}
        self.max_link_delay = 0.0
        self.queue_drops = 0
        self.event_count = 0
        self.compute_jitter = cfg.compute.jitter
        self._paths: Dict[Tuple[NodeId, NodeId], Tuple[NodeId, ...]] = {}

    # -- Runtime protocol ---------------------------------------------------

    def at(self, time: int, fn: Callable[..., None], *args: Any) -> None:
        if time < self.now:
            raise ValueError(f"event scheduled in the past ({time} < {self.now})")
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, fn, args))

    def record(self, kind: str, **fields: Any) -> None:
        self.events.append((self.now, kind, fields))

    def compute(self, node: NodeId, cost_ms: float) -> int:
        if cost_ms <= 0:
            return self.now
        start = max(float(self.now), self.cpu_busy.get(node, 0.0))
        if self.compute_jitter > 0:
            cost_ms *= 1.0 + min(3 * self.compute_jitter, max(-3 * self.compute_jitter,
                                                              self.cpu_rng.gauss(0.0, self.compute_jitter)))
        finish = start + cost_ms
        self.cpu_busy[node] = finish
        return int(math.ceil(finish))

    def send(self, src: NodeId, dst: NodeId, msg: Any) -> None:
        size = wire_size(msg)
        kind = "data" if is_data(msg) else "control"
        path = self.path(src, dst)
        t = float(self.now)
        hops = (src,) + path
        for k in range(len(path)):
            a, b = hops[k], hops[k + 1]
            t = self._hop(a, b, size, t)
        self._count(src, path, kind)
        self.at(int(math.ceil(t)), self._deliver, dst, msg, src)

    def broadcast(self, src: NodeId, dsts: Sequence[NodeId], msg: Any) -> None:
        if src.role is Role.HAPS_STATION:
            beam = [d for d in dsts if d.role is Role.GATEWAY]
            rest = [d for d in dsts if d.role is not Role.GATEWAY]
            if beam:
                self._beam(src, beam, msg)
            for d in rest:
                self.send(src, d, msg)
            return
        for d in dsts:
            self.send(src, d, msg)

    # -- internals ----------------------------------------------------------

    def link_class(self, a: NodeId, b: NodeId) -> LinkClass:
        ra, rb = a.role, b.role
        if Role.ADMIN in (ra, rb):
            return LinkClass.ADMIN
        if ra is Role.HAPS_STATION and rb is Role.HAPS_STATION:
            return LinkClass.PEER
        if ra is Role.HAPS_STATION:
            return LinkClass.DOWNLINK
        if rb is Role.HAPS_STATION:
            return LinkClass.UPLINK
        if ra is Role.GATEWAY and rb is Role.GATEWAY:
            return LinkClass.GROUND
        return LinkClass.SENSOR

    def path(self, src: NodeId, dst: NodeId) -> Tuple[NodeId, ...]:
        """Hops after ``src`` up to and including ``dst``."""
        key = (src, dst)
        cached = self._paths.get(key)
        if cached is not None:
            return cached
        p = self._route(src, dst)
        self._paths[key] = p
        return p

    def _route(self, src: NodeId, dst: NodeId) -> Tuple[NodeId, ...]:
        topo = self.topo
        if src not in topo.positions and src.role is not Role.ADMIN:
            raise Unroutable(f"unknown node {src}")
        if dst not in topo.positions and dst.role is not Role.ADMIN:
            raise Unroutable(f"unknown node {dst}")
        rs, rd = src.role, dst.role
        if Role.ADMIN in (rs, rd):
            if Role.HAPS_STATION not in (rs, rd):
                raise Unroutable("the admin talks to HAPS stations only")
            return (dst,)
        if rs is Role.HAPS_STATION and rd in (Role.HAPS_STATION, Role.GATEWAY):
            return (dst,)
        if rs is Role.GATEWAY and rd is Role.HAPS_STATION:
            if topo.distance(src, dst) <= topo.station_range_km:
                return (dst,)
            via = topo.routes[src]
            return via if via[-1] == dst else via + (dst,)
        if rs is Role.GATEWAY and rd is Role.GATEWAY:
            p = _ground_path(src, lambda x: x == dst, topo.gateway_ids(), topo.positions, topo.ground_range_km)
            if p is None:
                raise Unroutable(f"no ground path {src} -> {dst}")
            return p
        raise Unroutable(f"no route {src} -> {dst}")

    def _distance(self, a: NodeId, b: NodeId) -> float:
        if a.role is Role.ADMIN or b.role is Role.ADMIN:
            return 0.0
        return self.topo.distance(a, b)

    def _hop(self, a: NodeId, b: NodeId, size: int, t: float) -> float:
        cls = self.link_class(a, b)
        key = (a, cls)
        start = max(t, self.busy.get(key, 0.0))
        txt = self.links.transmission_time(cls, size)
        self.busy[key] = start + txt
        prop = self.links.propagation(cls, self._distance(a, b))
        base = txt + prop
        arrival = start + base + self.links.jitter_for(base, self.jitter_rng)
        self.max_link_delay = max(self.max_link_delay, arrival - t)
        return arrival

    def _beam(self, src: NodeId, dsts: Sequence[NodeId], msg: Any) -> None:
        size = wire_size(msg)
        kind = "data" if is_data(msg) else "control"
        cls = LinkClass.DOWNLINK
        key = (src, cls)
        t = float(self.now)
        start = max(t, self.busy.get(key, 0.0))
        txt = self.links.transmission_time(cls, size)
        self.busy[key] = start + txt
        for d in dsts:
            prop = self.links.propagation(cls, self._distance(src, d))
            base = txt + prop
            arrival = start + base + self.links.jitter_for(base, self.jitter_rng)
            self.max_link_delay = max(self.max_link_delay, arrival - t)
            self._count(src, (d,), kind)
            self.at(int(math.ceil(arrival)), self._deliver, d, msg, src)

    def _count(self, src: NodeId, path: Sequence[NodeId], kind: str) -> None:
        # Traffic is counted where it is seen at sensors and gateways.
        n = 0
        if src.role is Role.GATEWAY:
            n += 1
        for hop in path:
            if hop.role is Role.GATEWAY:
                n += 1
        self.nt[kind] += n

    def _deliver(self, dst: NodeId, msg: Any, src: NodeId) -> None:
        node = self.nodes.get(dst)
        if node is not None:
            node.handle(msg, src)

    def run_until_idle(self, hard_stop: int) -> bool:
        """Process events; returns True if the queue drained before ``hard_stop``."""
        q = self._queue
        while q:
            t, _, fn, args = q[0]
            if t > hard_stop:
                return False
            heapq.heappop(q)
            self.now = t
            self.event_count += 1
            fn(*args)
        return True


# ---------------------------------------------------------------------------
# Sensor layer


class SensorField:
    """All sensors and cluster heads, driven as one component for speed."""

    def __init__(self, sim: "Simulation") -> None:
        cfg = sim.cfg
        self.sim = sim
        self.engine = sim.engine
        self.topo = sim.topo
        self.registry = sim.registry
        self.env = EnvModel(cfg.sensing.env_base, cfg.sensing.env_amplitude, cfg.sensing.env_wavelength_km,
                            cfg.sensing.noise_sigma, cfg.sensing.noise_band)
        self.noise_rng = stream(cfg.seed, "noise")
        self.loss_rng = np.random.default_rng(derive_seed(cfg.seed, "loss"))
        self.loss = cfg.network.sensor_frame_loss
        self.retries = cfg.network.arq_retries
        self.queue_limit = cfg.network.queue_limit_ms
        self.interval = cfg.sensing.reading_interval
        self.payload = cfg.tx_payload_size
        self.offset = cfg.adversary.falsification_offset
        self.tolerance = cfg.sensing.tolerance
        self.blockchain = cfg.blockchain_enabled
        self.endorse = cfg.blockchain_enabled and cfg.consensus == "quico"
        e = cfg.energy
        self.tx_j = e.tx_uj_per_byte * 1e-6
        self.rx_j = e.rx_uj_per_byte * 1e-6
        self.sign_j = e.sign_mj * 1e-3
        self.verify_j = e.verify_mj * 1e-3
        self.energy = EnergyLedger(e.budget_j)
        self.last_value: Dict[NodeId, float] = {}
        self.busy: Dict[NodeId, float] = {}
        self.links = self.engine.links
        self.seg_time = self.links.segment_time(LinkClass.SENSOR)
        self.speed = self.links.propagation_speed
        self.generated = 0
        self.malicious_times: List[int] = []
        self.delivered = 0
        self.lost = 0
        self.dropped = 0
        self.no_sig = Signature(b"", sensor(0))
        pos = self.topo.positions
        self.paths: Dict[NodeId, Tuple[NodeId, ...]] = {}
        self.hop_dist: Dict[NodeId, Tuple[float, ...]] = {}
        for s in self.topo.sensor_ids():
            p = (s,) + self.topo.sensor_route[s] + (self.topo.sensor_gateway[s],)
            self.paths[s] = p
            self.hop_dist[s] = tuple(
                math.hypot(pos[p[i]][0] - pos[p[i + 1]][0], pos[p[i]][1] - pos[p[i + 1]][1])
                for i in range(len(p) - 1)
            )

    def start(self) -> None:
        phase_rng = stream(self.sim.cfg.seed, "phase")
        for s in self.topo.sensor_ids():
            self.engine.at(phase_rng.randrange(self.interval), self._tick, s)

    def _tick(self, s: NodeId) -> None:
        eng = self.engine
        now = eng.now
        if now >= eng.horizon:
            return
        eng.at(now + self.interval, self._tick, s)
        if not self.energy.alive(s):
            return
        malicious = s in self.sim.adversary.malicious_sensors
        x, y, _ = self.topo.positions[s]
        reading = generate_reading(s, now, self.env, malicious, position=(x, y), rng=self.noise_rng,
                                   falsification_offset=self.offset, payload_size=self.payload)
        self.last_value[s] = reading.ground_truth_value
        self.generated += 1
        if malicious:
            self.malicious_times.append(now)
        if self.blockchain:
            packet = make_packet((reading,), s, self.registry.keypair(s))
            self.energy.debit(s, self.sign_j)
        else:
            packet = DataPacket((reading,), s, self.no_sig)
        self._route(packet, now)

    def _transmissions(self, segments: int) -> Tuple[int, bool]:
        """Frames sent for ``segments`` under per-frame loss with ARQ; and whether it got through."""
        if self.loss <= 0:
            return segments, True
        rng = self.loss_rng
        total = segments
        failed = int(rng.binomial(segments, self.loss))
        for _ in range(self.retries):
            if not failed:
                break
            total += failed
            failed = int(rng.binomial(failed, self.loss))
        return total, failed == 0

    def _route(self, packet: DataPacket, now: int) -> None:
        s = packet.sender
        path = self.paths[s]
        dists = self.hop_dist[s]
        t = float(now)
        eng = self.engine
        reading_bytes = reading_wire_size(packet.readings[0])
        for k in range(len(path) - 1):
            a, b = path[k], path[k + 1]
            size = _PACKET_OVERHEAD + reading_bytes + ENDORSEMENT_WIRE_BYTES * len(packet.endorsements)
            start = max(t, self.busy.get(a, 0.0))
            if start - t > self.queue_limit:
                self.dropped += 1
                eng.queue_drops += 1
                return
            segments = self.links.segments(size)
            frames, ok = self._transmissions(segments)
            txt = frames * self.seg_time
            self.busy[a] = start + txt
            sent_bytes = size * frames / segments
            self.energy.debit(a, sent_bytes * self.tx_j)
            eng.nt["data"] += 1  # sent at the origin, forwarded at each relay
            if not ok:
                self.lost += 1
                return
            base = txt + dists[k] / self.speed
            arrival = start + base + self.links.jitter_for(base, eng.jitter_rng)
            eng.max_link_delay = max(eng.max_link_delay, arrival - t)
            t = arrival
            if b.role is Role.GATEWAY:
                break
            self.energy.debit(b, size * self.rx_j)
            if not self.energy.alive(b):
                self.dropped += 1
                return
            if self.endorse:
                self.energy.debit(b, self.verify_j)
                local = self.last_value.get(b)
                if local is None:
                    continue  # nothing sensed yet, so no opinion to give
                out = validate_and_endorse(packet, b, local, self.tolerance, self.registry)
                if isinstance(out, Reject):
                    self.dropped += 1
                    return
                if isinstance(out, Endorsed):
                    self.energy.debit(b, self.sign_j)
                packet = out.packet
        eng.nt["data"] += 1  # received at the gateway
        self.delivered += 1
        gw = path[-1]
        eng.at(int(math.ceil(t)), self._arrive, gw, packet)

    def _arrive(self, gw: NodeId, packet: DataPacket) -> None:
        node = self.sim.gateway_nodes.get(gw)
        if node is not None:
            node.receive_packet(packet)
        else:
            self.sim.offline_received += 1


# ---------------------------------------------------------------------------
# Simulation


class Simulation:
    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        self.topo = build_topology(cfg, stream(cfg.seed, "topology"))
        self.engine = Engine(cfg, self.topo)
        self.registry = KeyRegistry.from_int(cfg.seed, cfg.signature_scheme)
        self.stations = self.topo.station_ids()
        self.gateways = self.topo.gateway_ids()
        a = cfg.adversary
        self.adv_cfg = AdversaryConfig(a.pmn, a.attack_interval, a.falsification_offset, a.reselect, a.fix_latency,
                                       a.sabotage)
        chosen = select_malicious(self.topo.sensor_ids(), self.gateways, a.pmn, stream(cfg.seed, "adversary"))
        self.adversary = AdversaryState.from_selection(chosen, self.gateways)
        self.gateway_nodes: Dict[NodeId, GatewayNode] = {}
        self.station_nodes: Dict[NodeId, Any] = {}
        self.offline_received = 0
        self.sensors = SensorField(self)
        if cfg.blockchain_enabled:
            self._build_protocol_nodes()

    def _build_protocol_nodes(self) -> None:
        cfg = self.cfg
        eng = self.engine
        c = cfg.compute
        cost = CostModel(c.station_sig_ms, c.station_reading_ms, c.station_kb_ms, c.gateway_sig_ms,
                         c.gateway_reading_ms, c.gateway_kb_ms, c.jitter)
        cp = cfg.consensus_params
        params = ConsensusParams(len(self.stations), len(self.gateways), cp.t_th, cp.t_w, cp.max_retry_rounds)
        flat = {s: (x, y) for s, x, y in self.topo.sensors}
        k = cfg.sensing.min_neighbors + 2
        near = neighbors_within(flat, cfg.sensing.near_radius_km, k)
        quico = cfg.consensus == "quico"
        saboteur = Saboteur(self.adversary, stream(cfg.seed, "sabotage"), eng) if self.adv_cfg.sabotage else None
        seal_rng = stream(cfg.seed, "seal")
        for gw in self.gateways:
            routes = {s: self.topo.sensor_route[s] for s, g in self.topo.sensor_gateway.items() if g == gw}
            # A gateway only ever sees its own sensors, so it compares among them.
            own = neighbors_within({s: flat[s] for s in routes}, cfg.sensing.near_radius_km, k)
            state = GatewayState(
                gw, self.registry, NeighborStore(own, cfg.sensing.neighbor_window), routes, cfg.service_id,
                require_endorsements=quico, min_neighbors=cfg.sensing.min_neighbors,
                max_deferred_ticks=cfg.gateway.max_deferred_ticks,
            )
            node = GatewayNode(
                state, eng, params, self.stations, self.gateways,
                uplink=self.topo.routes[gw], mode=cfg.consensus, cost=cost,
                aggregation_period=cfg.gateway.aggregation_period, expiry_horizon=cfg.gateway.expiry_horizon,
                neighbor_window=cfg.sensing.neighbor_window, tolerance=cfg.sensing.tolerance,
                pbft_timeout=cp.pbft_timeout, seal_uplink=cfg.gateway.seal_uplink,
                randbytes=seal_rng.randbytes, saboteur=saboteur,
            )
            self.gateway_nodes[gw] = node
            eng.nodes[gw] = node
        for h in self.stations:
            checker = None
            if quico:
                checker = StationDataCheck(NeighborStore(near, cfg.sensing.neighbor_window), cfg.sensing.tolerance,
                                           cfg.sensing.min_neighbors)
            if quico:
                st = QuicoStation(h, self.stations, self.gateways, self.registry, params, eng, checker=checker,
                                  cost=cost)
            else:
                st = PbftStation(h, self.stations, self.gateways, self.registry, params, eng, cost=cost,
                                 timeout=cp.pbft_timeout)
            self.station_nodes[h] = st
            eng.nodes[h] = st
        self.admin = AdminNode(self.adversary, self.adv_cfg, stream(cfg.seed, "admin"), self.registry, eng)
        eng.nodes[ADMIN_ID] = self.admin

    def run(self) -> MetricsReport:
        cfg = self.cfg
        eng = self.engine
        if cfg.sim_time > 0:
            self.sensors.start()
            for g in self.gateway_nodes.values():
                g.start()
            for s in self.station_nodes.values():
                s.start()
            if self.cfg.blockchain_enabled:
                self.admin.start()
        # Generation stops at the horizon; in-flight consensus is allowed to settle.
        drain = max(5000, 10 * cfg.consensus_params.pbft_timeout)
        drained = eng.run_until_idle(cfg.sim_time + drain) if cfg.sim_time > 0 else True
        return finalize(self.run_log(drained), cfg)

    def run_log(self, drained: bool) -> RunLog:
        sf = self.sensors
        chains = {str(h): [(b.height, b.header) for b in st.chain] for h, st in self.station_nodes.items()}
        energy = [sf.energy.used.get(s, 0.0) for s in self.topo.sensor_ids()]
        return RunLog(
            sim_time=self.cfg.sim_time,
            events=self.engine.events,
            readings_generated=sf.generated,
            malicious_times=sf.malicious_times,
            nt_data=self.engine.nt["data"],
            nt_control=self.engine.nt["control"],
            nt_nodes=len(self.topo.sensors) + len(self.gateways),
            energy_used=energy,
            sabotage=list(self.adversary.actions),
            false_positives=self.adversary.false_positives,
            chains=chains,
            max_link_delay=self.engine.max_link_delay,
            packets_delivered=sf.delivered,
            packets_lost=sf.lost,
            packets_dropped=sf.dropped,
            drained=drained,
            event_count=self.engine.event_count,
        )


def run(cfg: ScenarioConfig) -> MetricsReport:
    """Build and run one scenario."""
    return Simulation(cfg).run()
