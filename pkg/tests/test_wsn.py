"""Sensor readings, relay endorsement and clustering."""

import math
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import packet
from hapschain.core import Signature, gateway, sensor
from hapschain.wsn import (
    DisconnectedSensor,
    Endorsed,
    EnvModel,
    ForwardUnendorsed,
    MalformedPacket,
    NeighborStore,
    Reject,
    build_cluster_topology,
    generate_reading,
    make_packet,
    neighbors_within,
    validate_and_endorse,
    verify_endorsements,
)


def test_honest_readings_stay_in_noise_band():
    env = EnvModel(base=20.0, noise_sigma=0.3, noise_band=0.5)
    rng = random.Random(1)
    values = [generate_reading(sensor(1), t, env, False, rng=rng).ground_truth_value for t in range(10_000)]
    assert min(values) >= 19.5 and max(values) <= 20.5
    assert max(values) - min(values) > 0.5  # the noise is actually drawn


def test_malicious_reading_is_offset_and_flagged():
    env = EnvModel(base=20.0, noise_sigma=0.0)
    r = generate_reading(sensor(2), 5, env, True, falsification_offset=75.0)
    assert r.ground_truth_value == 95.0
    assert r.secret_malicious_flag


def test_zero_noise_reading_equals_field():
    env = EnvModel(base=20.0, amplitude=3.0, wavelength_km=2.0, noise_sigma=0.0)
    r = generate_reading(sensor(3), 5, env, False, position=(0.5, 0.0))
    assert r.ground_truth_value == env.value_at(0.5, 0.0) == pytest.approx(23.0)
    assert not r.secret_malicious_flag


def test_reading_payload_size_is_honoured():
    r = generate_reading(sensor(3), 5, EnvModel(), False, payload_size=1000)
    assert r.payload_size == 1000


def test_only_sensors_generate_readings():
    with pytest.raises(ValueError):
        generate_reading(gateway(0), 0, EnvModel(), False)


def test_endorse_consistent_value(registry):
    out = validate_and_endorse(packet(registry, 1, 0, 20.1), sensor(2), 20.0, 0.5, registry)
    assert isinstance(out, Endorsed)
    assert [e.endorser for e in out.packet.endorsements] == [sensor(2)]
    assert out.packet.hop_trace == (sensor(2),)
    assert verify_endorsements(out.packet, registry)


def test_forward_unendorsed_anomalous_value(registry):
    out = validate_and_endorse(packet(registry, 1, 0, 95.0), sensor(2), 20.0, 0.5, registry)
    assert isinstance(out, ForwardUnendorsed)
    assert out.packet.endorsements == ()
    assert out.packet.hop_trace == (sensor(2),)


def test_corrupted_sender_signature_rejected(registry):
    p = packet(registry, 1, 0, 20.0)
    sig = p.sender_signature
    bad = replace(p, sender_signature=Signature(bytes([sig.data[0] ^ 1]) + sig.data[1:], sig.signer))
    assert isinstance(validate_and_endorse(bad, sensor(2), 20.0, 0.5, registry), Reject)


def test_empty_packet_is_malformed(registry):
    p = make_packet([], sensor(1), registry.keypair(sensor(1)))
    with pytest.raises(MalformedPacket):
        validate_and_endorse(p, sensor(2), 20.0, 0.5, registry)


def test_endorsement_by_node_off_trace_fails(registry):
    out = validate_and_endorse(packet(registry, 1, 0, 20.0), sensor(2), 20.0, 0.5, registry).packet
    assert not verify_endorsements(replace(out, hop_trace=(sensor(9),)), registry)


@given(st.lists(st.floats(min_value=19.5, max_value=20.5), min_size=1, max_size=6), st.booleans())
@settings(max_examples=40, deadline=None)
def test_endorsements_grow_along_a_route(local_values, malicious):
    from hapschain.crypto import KeyRegistry

    reg = KeyRegistry.from_int(3, "sim")
    p = packet(reg, 0, 0, 95.0 if malicious else 20.0)
    for k, v in enumerate(local_values, start=1):
        before = len(p.endorsements)
        p = validate_and_endorse(p, sensor(k), v, 0.5, reg).packet
        assert len(p.endorsements) >= before
        assert all(e.endorser in p.hop_trace for e in p.endorsements)
    if malicious:
        assert len(p.endorsements) < len(local_values)
    else:
        # honest, noise within the band: every hop endorses
        assert [e.endorser for e in p.endorsements] == [sensor(k) for k in range(1, len(local_values) + 1)]


# -- clustering ---------------------------------------------------------------


def test_single_sensor_cluster():
    (c,) = build_cluster_topology([(sensor(0), 0.0, 0.0)], 0.1)
    assert c.head == sensor(0) and c.members == [sensor(0)] and c.route(sensor(0)) == ()


def test_square_corners_head_is_centroid_nearest():
    pts = [(sensor(i), x, y) for i, (x, y) in enumerate([(0, 0), (0.05, 0), (0, 0.05), (0.05, 0.05)])]
    (c,) = build_cluster_topology(pts, 0.1)
    # Brute force: every member is equidistant from the centroid, so the
    # lowest index wins.
    cx = sum(p[1] for p in pts) / 4
    cy = sum(p[2] for p in pts) / 4
    best = min(pts, key=lambda p: (math.hypot(p[1] - cx, p[2] - cy), p[0].index))
    assert c.head == best[0] == sensor(0)


def test_head_minimises_centroid_distance_brute_force():
    rnd = random.Random(5)
    pts = [(sensor(i), rnd.uniform(0, 0.05), rnd.uniform(0, 0.05)) for i in range(7)]
    (c,) = build_cluster_topology(pts, 0.2)
    cx = sum(p[1] for p in pts) / len(pts)
    cy = sum(p[2] for p in pts) / len(pts)
    dists = {p[0]: math.hypot(p[1] - cx, p[2] - cy) for p in pts}
    assert all(dists[c.head] <= d for d in dists.values())


def test_separated_groups_form_two_clusters():
    pts = [(sensor(0), 0.0, 0.0), (sensor(1), 0.01, 0.0), (sensor(2), 5.0, 5.0), (sensor(3), 5.01, 5.0)]
    clusters = build_cluster_topology(pts, 0.1)
    assert sorted(len(c.members) for c in clusters) == [2, 2]


@given(st.integers(min_value=1, max_value=60), st.integers(min_value=0, max_value=10 ** 6))
@settings(max_examples=40, deadline=None)
def test_clusters_partition_and_routes_are_acyclic(n, seed):
    rnd = random.Random(seed)
    side = 0.04 * math.sqrt(n)
    pts = [(sensor(i), rnd.uniform(0, side), rnd.uniform(0, side)) for i in range(n)]
    try:
        clusters = build_cluster_topology(pts, 0.1, transmission_range=0.1)
    except DisconnectedSensor:
        return
    seen = [m for c in clusters for m in c.members]
    assert sorted(seen) == sorted(p[0] for p in pts)
    for c in clusters:
        assert c.head in c.members
        for m in c.members:
            route = c.route(m)
            if m != c.head:
                assert route[-1] == c.head
            assert len(set(route)) == len(route) and m not in route


def test_unreachable_member_raises():
    pts = [(sensor(0), 0.0, 0.0), (sensor(1), 0.3, 0.0)]
    with pytest.raises(DisconnectedSensor):
        build_cluster_topology(pts, 1.0, transmission_range=0.1)


def test_neighbors_fallback_to_nearest():
    pos = {sensor(0): (0.0, 0.0), sensor(1): (1.0, 0.0), sensor(2): (2.0, 0.0), sensor(3): (0.05, 0.0)}
    near = neighbors_within(pos, 0.1, min_count=2)
    assert near[sensor(0)] == (sensor(1), sensor(3))
    assert neighbors_within(pos, 0.1)[sensor(0)] == (sensor(3),)


def test_neighbor_store_judges_against_median():
    from conftest import reading

    store = NeighborStore({sensor(0): (sensor(1), sensor(2), sensor(3))}, window=100)
    assert store.judge(reading(0, 50, 95.0), 0.5, 1) is None
    for i, v in ((1, 19.0), (2, 20.0), (3, 80.0)):
        store.observe(reading(i, 40, v))
    assert store.judge(reading(0, 50, 95.0), 0.5, 3) is False
    assert store.judge(reading(0, 50, 20.5), 0.5, 3) is True
    assert store.judge(reading(0, 500, 20.5), 0.5, 1) is None  # outside the window
