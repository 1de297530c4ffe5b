"""Topology, link model, event engine and whole-run behaviour."""

import math
import random

import pytest

from hapschain.config import ScenarioConfig
from hapschain.core import Role, gateway, sensor, station
from hapschain.haps import BlockAck
from hapschain.simnet import (
    Engine,
    EnergyLedger,
    InfeasibleTopology,
    LinkClass,
    LinkModel,
    Simulation,
    Unroutable,
    build_topology,
    derive_seed,
    run,
    stream,
)


def small(**changes):
    base = {"sim_time": 10_000, "topology.sensors": 200, "topology.stations": 1, "adversary.pmn": 0.0}
    base.update(changes)
    return ScenarioConfig().replace(**base)


# -- topology -------------------------------------------------------------------------


def test_two_hundred_sensors_make_two_gateways():
    topo = build_topology(small(), random.Random(1))
    assert len(topo.gateways) == 2 and len(topo.sensors) == 200
    assert sorted(list(topo.sensor_gateway.values()).count(g) for g in topo.gateway_ids()) == [100, 100]


def test_single_station_is_centred():
    topo = build_topology(small(), random.Random(1))
    (_, x, y, z), = topo.haps
    assert (x, y) == pytest.approx((topo.map_size_km / 2, topo.map_size_km / 2))
    assert z == 20.0


def test_topology_is_deterministic():
    a = build_topology(small(), stream(5, "topology"))
    b = build_topology(small(), stream(5, "topology"))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != build_topology(small(), stream(6, "topology")).fingerprint()


def test_every_gateway_routes_to_one_station():
    cfg = ScenarioConfig().replace(**{"topology.gateway_station_range_km": 20.01, "topology.map_size_km": 2.0})
    topo = build_topology(cfg, random.Random(2))
    for gw in topo.gateway_ids():
        path = topo.routes[gw]
        assert path[-1].role is Role.HAPS_STATION
        assert all(h.role is Role.GATEWAY for h in path[:-1])


def test_multi_hop_gateway_path_when_station_out_of_range():
    cfg = small(**{"topology.stations": 1, "topology.sensors": 900, "topology.map_size_km": 100.0,
                   "topology.gateway_station_range_km": 40.0, "topology.gateway_range_km": 60.0,
                   "topology.sensor_range_km": 10.0, "topology.cluster_radius_km": 5.0,
                   "topology.ch_uplink_range_km": 100.0})
    topo = build_topology(cfg, random.Random(3))
    # The centre and edge-midpoint gateways see the station; the corners relay.
    assert sorted(len(p) for p in topo.routes.values()) == [1] * 5 + [2] * 4


def test_infeasible_gateway_count():
    with pytest.raises(InfeasibleTopology):
        build_topology(small(**{"topology.gateways": 1}), random.Random(1))


def test_sensor_routes_end_at_cluster_heads_and_stay_in_range():
    cfg = small()
    topo = build_topology(cfg, random.Random(4))
    heads = {c.head for c in topo.clusters}
    for s in topo.sensor_ids():
        route = topo.sensor_route[s]
        hops = (s,) + route
        assert s in heads or any(h in heads for h in route)
        for a, b in zip(hops, hops[1:]):
            limit = cfg.topology.ch_uplink_range_km if a in heads else cfg.topology.sensor_range_km
            assert topo.distance(a, b) <= limit + 1e-9


# -- links ---------------------------------------------------------------------------------


def test_link_delay_formula():
    lm = LinkModel(300.0, {LinkClass.UPLINK: 1000.0}, 1500, 0.0)
    # 3000 bytes = 2 segments of 1500 B at 1000 bits/ms, plus 30 km of propagation.
    assert lm.delay(LinkClass.UPLINK, 30.0, 3000, random.Random(0)) == pytest.approx(0.1 + 2 * 12.0)
    assert lm.segments(1) == 1 and lm.segments(1501) == 2


def test_jitter_is_truncated_and_non_negative():
    lm = LinkModel(300.0, {LinkClass.PEER: 1000.0}, 100, 0.3)
    rng = random.Random(1)
    base = lm.propagation(LinkClass.PEER, 3.0) + lm.transmission_time(LinkClass.PEER, 100)
    for _ in range(2000):
        d = lm.delay(LinkClass.PEER, 3.0, 100, rng)
        assert d >= 0 and abs(d - base) <= 3 * 0.3 * base + 1e-12


def test_energy_ledger_floors_at_zero():
    e = EnergyLedger(1.0)
    e.debit(sensor(0), 0.6)
    e.debit(sensor(0), 0.6)
    assert e.remaining(sensor(0)) == 0.0 and not e.alive(sensor(0))


def test_named_streams_differ_and_repeat():
    assert derive_seed(1, "a") == derive_seed(1, "a") != derive_seed(1, "b")
    assert stream(1, "a").random() == stream(1, "a").random()


# -- engine ------------------------------------------------------------------------------


class Sink:
    def __init__(self):
        self.got = []

    def handle(self, msg, src):
        self.got.append((msg, src))


def _engine():
    cfg = small()
    topo = build_topology(cfg, random.Random(1))
    return Engine(cfg, topo), topo


def test_send_delivers_after_link_delay_and_counts_traffic():
    eng, topo = _engine()
    sink = Sink()
    eng.nodes[station(0)] = sink
    msg = BlockAck(1, 0, bytes(32), gateway(0))
    eng.send(gateway(0), station(0), msg)
    assert eng.nt["control"] == 1
    eng.run_until_idle(10_000)
    assert sink.got == [(msg, gateway(0))]
    assert eng.now >= math.floor(topo.distance(gateway(0), station(0)) / 299.792458)


def test_unroutable_pairs_raise():
    eng, _ = _engine()
    with pytest.raises(Unroutable):
        eng.send(sensor(0), station(0), BlockAck(1, 0, bytes(32), sensor(0)))


def test_events_never_run_before_their_scheduler():
    eng, _ = _engine()
    order = []

    def tick(k):
        order.append(eng.now)
        if k:
            eng.at(eng.now + (k % 3), tick, k - 1)

    eng.at(5, tick, 20)
    eng.run_until_idle(10_000)
    assert order == sorted(order)
    with pytest.raises(ValueError):
        eng.at(eng.now - 1, tick, 0)


# -- whole runs --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def honest_small():
    sim = Simulation(small())
    return sim, sim.run()


def test_small_honest_run_confirms_everything(honest_small):
    sim, rep = honest_small
    assert rep.txs_created > 0 and rep.txs_confirmed == rep.txs_created
    assert not any(kind in ("warning", "escalate") for _, kind, _ in sim.engine.events)
    assert rep.identical_chains and rep.max_confirms_per_height == 1 and rep.drained


def test_gateway_headers_match_station_tip(honest_small):
    from hapschain.core import header_hash

    sim, _ = honest_small
    tip = header_hash(next(iter(sim.station_nodes.values())).tip.header)
    for g in sim.gateway_nodes.values():
        assert header_hash(g.s.headers.tip) == tip


def test_honest_latency_bounded_by_consensus_timers(honest_small):
    sim, rep = honest_small
    cp = sim.cfg.consensus_params
    bound = cp.t_th + cp.t_w + 4 * rep.max_link_delay
    assert rep.liveness_ratio is not None and rep.liveness_ratio >= 0.99
    assert rep.tla_p50 <= bound + sim.cfg.sensing.reading_interval


def test_zero_sim_time_is_empty():
    rep = run(small(sim_time=0))
    assert rep.blocks_confirmed == 0 and rep.readings_generated == 0 and rep.bth == 0.0


def test_same_seed_same_report():
    cfg = small(sim_time=3000, **{"adversary.pmn": 0.3})
    assert run(cfg).to_json() == run(cfg).to_json()


def test_energy_differs_only_through_packets():
    on = Simulation(small(sim_time=3000, tx_payload_size=200))
    on.run()
    off = Simulation(small(sim_time=3000, tx_payload_size=200, blockchain_enabled=False))
    off.run()
    assert on.topo.fingerprint() == off.topo.fingerprint()
    # Without the blockchain nothing signs, so sensors spend no more than with it.
    e_on = sum(on.sensors.energy.used.values())
    e_off = sum(off.sensors.energy.used.values())
    assert 0 < e_off <= e_on
