"""Malicious selection, sabotage votes and the admin loop."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import reading, station_state, tx_from
from hapschain.adversary import (
    AdminNode,
    AdversaryConfig,
    AdversaryState,
    Saboteur,
    admin_respond,
    malicious_count,
    sabotage_vote,
    select_malicious,
)
from hapschain.core import ADMIN_ID, GENESIS_BLOCK, Role, gateway, sensor, station
from hapschain.haps import BlockError, FixNotice, WarningReport, create_block, on_transaction, signed, verify_message
from hapschain.runtime import RecordingRuntime

SENSORS = [sensor(i) for i in range(100)]
GATEWAYS = [gateway(i) for i in range(10)]


def test_pmn_zero_selects_nobody():
    assert select_malicious(SENSORS, GATEWAYS, 0.0, random.Random(1)) == set()


def test_ten_gateways_at_thirty_percent():
    chosen = select_malicious(SENSORS, GATEWAYS, 0.3, random.Random(1))
    assert sum(1 for n in chosen if n.role is Role.GATEWAY) == 3
    assert sum(1 for n in chosen if n.role is Role.SENSOR) == 30


def test_selection_is_deterministic_per_seed():
    a = select_malicious(SENSORS, GATEWAYS, 0.4, random.Random(9))
    assert a == select_malicious(SENSORS, GATEWAYS, 0.4, random.Random(9))
    assert a != select_malicious(SENSORS, GATEWAYS, 0.4, random.Random(10))


@given(st.floats(min_value=0.0, max_value=0.99), st.integers(min_value=1, max_value=50))
@settings(max_examples=80, deadline=None)
def test_malicious_count_is_floor(pmn, n):
    product = pmn * n
    near_integer = abs(product - round(product)) < 1e-9
    expected = round(product) if near_integer else int(product // 1)
    assert malicious_count(pmn, n) == expected


def test_malicious_count_exact_products():
    assert malicious_count(0.57, 100) == 57
    assert malicious_count(0.3, 10) == 3


def test_config_rejects_out_of_range():
    with pytest.raises(ValueError):
        AdversaryConfig(pmn=1.0)
    with pytest.raises(ValueError):
        AdversaryConfig(attack_interval=0)


def _state(malicious=(0, 1, 2)):
    return AdversaryState(set(), {gateway(i) for i in malicious}, list(GATEWAYS))


def _report(*suspects):
    return WarningReport(tuple(suspects), ("test",), 1, 0, station(0))


def test_fix_two_attackers_with_reselection_keeps_share():
    st_ = _state()
    out = admin_respond(_report(gateway(0), gateway(1)), st_, random.Random(2), reselect=True)
    assert out.fixed == (gateway(0), gateway(1))
    assert len(out.reselected) == 2 and not set(out.reselected) & {gateway(0), gateway(1)}
    assert len(st_.malicious_gateways) == 3 and st_.detections == 2


def test_honest_suspect_counts_false_positive():
    st_ = _state()
    out = admin_respond(_report(gateway(7)), st_, random.Random(2))
    assert out.false_positives == (gateway(7),) and out.fixed == ()
    assert st_.false_positives == 1 and st_.malicious_gateways == {gateway(i) for i in (0, 1, 2)}


def test_without_reselection_population_shrinks():
    st_ = _state()
    admin_respond(_report(gateway(0)), st_, random.Random(2), reselect=False)
    assert st_.malicious_gateways == {gateway(1), gateway(2)}


@given(st.lists(st.integers(min_value=0, max_value=9), max_size=6), st.integers(min_value=0, max_value=999))
@settings(max_examples=60, deadline=None)
def test_reselection_holds_malicious_count(suspects, seed):
    st_ = _state()
    admin_respond(_report(*[gateway(i) for i in suspects]), st_, random.Random(seed), reselect=True)
    assert len(st_.malicious_gateways) == malicious_count(0.3, 10)


def test_sabotage_vote_disputes_a_real_transaction(registry):
    s = station_state(registry)
    on_transaction(s, tx_from(registry, 0, [reading(1, 10)]))
    block = create_block(s, 150)
    vote = sabotage_vote(gateway(3), block, 160, AdversaryConfig(), random.Random(0), registry)
    assert isinstance(vote, BlockError) and verify_message(vote, registry)
    assert vote.disputed[0] in {t.id for t in block.body}


def test_sabotage_on_empty_block_is_noop(registry):
    assert sabotage_vote(gateway(3), GENESIS_BLOCK, 0, AdversaryConfig(), random.Random(0), registry) is None


def test_saboteur_fires_once_per_arming(registry):
    s = station_state(registry)
    on_transaction(s, tx_from(registry, 0, [reading(1, 10)]))
    block = create_block(s, 150)
    state = _state((3,))
    rt = RecordingRuntime(now=200)
    sab = Saboteur(state, random.Random(0), rt)
    assert sab(gateway(3), block) is None  # not armed yet
    state.arm()
    assert sab(gateway(3), block) is not None
    assert sab(gateway(3), block) is None
    assert sab(gateway(4), block) is None  # honest
    assert len(state.actions) == 1 and state.actions[0].time == 200


def test_admin_node_detects_fixes_and_notifies(registry):
    s = station_state(registry)
    on_transaction(s, tx_from(registry, 0, [reading(1, 10)]))
    block = create_block(s, 150)
    state = _state((3,))
    rt = RecordingRuntime(now=100)
    state.arm()
    Saboteur(state, random.Random(0), rt)(gateway(3), block)
    admin = AdminNode(state, AdversaryConfig(pmn=0.1, fix_latency=500), random.Random(1), registry, rt)
    report = signed(WarningReport((gateway(3), gateway(5)), ("err",), block.height, 0, station(0)), registry)
    admin.handle(report, station(0))
    assert state.actions[0].detected
    assert state.false_positives == 1  # gateway 5 was honest and never sabotaged
    rt.fire_due(600)
    assert gateway(3) not in state.malicious_gateways
    assert len(state.malicious_gateways) == 1  # reselected to keep the share
    (src, dst, notice), = rt.take(FixNotice)
    assert (src, dst) == (ADMIN_ID, station(0)) and verify_message(notice, registry)


def test_admin_ignores_unsigned_reports(registry):
    state = _state((3,))
    admin = AdminNode(state, AdversaryConfig(), random.Random(1), registry, RecordingRuntime())
    admin.handle(WarningReport((gateway(3),), (), 1, 0, station(0)), station(0))
    assert state.malicious_gateways == {gateway(3)}
