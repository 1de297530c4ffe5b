"""Report arithmetic on hand-built event streams."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import reading, tx_from
from hapschain.adversary import SabotageAction
from hapschain.core import GENESIS_HEADER, Block, gateway, make_header, station
from hapschain.metrics import MetricsReport, RunLog, compute_adr, compute_mgdr, finalize


def _block(registry, txs, height=1, t=200):
    prev = GENESIS_HEADER if height == 1 else GENESIS_HEADER.__class__(
        height - 1, 0, bytes(32), bytes(32), 0, station(0))
    return Block(make_header(prev, txs, t, station(0)), tuple(txs))


def _confirm(block, t_b):
    return (t_b, "confirm", {"t_b": t_b, "block": block, "height": block.height})


def test_nt_data_per_node_second():
    rep = finalize(RunLog(sim_time=10_000, nt_data=60, nt_nodes=3))
    assert rep.nt_data == pytest.approx(2.0)


def test_single_tx_latency(registry):
    tx = tx_from(registry, 0, [reading(1, 100)], now=150)
    rep = finalize(RunLog(sim_time=1000, events=[_confirm(_block(registry, [tx]), 290)]))
    assert rep.tla_mean == 190 and rep.tla_p50 == 190 and rep.tla_max == 190


def test_throughput_of_hundred_txs_over_ten_seconds(registry):
    events = []
    for k in range(100):
        tx = tx_from(registry, k % 9, [reading(k, 10 * k)], now=10 * k + 5)
        events.append((10 * k + 5, "tx_created", {}))
        events.append(_confirm(_block(registry, [tx], height=k + 1, t=10 * k + 20), 10 * k + 30))
    rep = finalize(RunLog(sim_time=10_000, events=events))
    assert rep.bth == pytest.approx(10.0)
    assert rep.txs_confirmed == rep.txs_created == 100 and rep.confirm_ratio == 1.0


def test_confirms_after_horizon_do_not_count_toward_throughput(registry):
    tx = tx_from(registry, 0, [reading(1, 100)], now=150)
    rep = finalize(RunLog(sim_time=1000, events=[_confirm(_block(registry, [tx]), 1200)]))
    assert rep.bth == 0.0 and rep.txs_confirmed == 1


def test_adr_no_malicious_in_blocks():
    assert compute_adr([(100, 0), (200, 0)], list(range(0, 200, 4))) == 1.0


def test_adr_every_malicious_confirmed():
    times = [10, 20, 110, 120]
    assert compute_adr([(100, 2), (200, 2)], times) == 0.0


def test_adr_absent_without_malicious_readings():
    assert compute_adr([(100, 0)], []) is None


def test_adr_averages_per_block_ratios():
    # Block 1 lets 1 of 2 through, block 2 lets 0 of 4 through.
    assert compute_adr([(100, 1), (200, 0)], [10, 20, 110, 120, 130, 140]) == pytest.approx(1 - 0.25)


def test_adr_skips_windows_without_generation():
    assert compute_adr([(100, 0), (200, 0), (300, 1)], [250, 260]) == pytest.approx(0.5)


@given(st.lists(st.tuples(st.integers(0, 10_000), st.integers(0, 5)), max_size=20),
       st.lists(st.integers(0, 10_000), max_size=40))
@settings(max_examples=100, deadline=None)
def test_adr_within_unit_interval(confirms, times):
    confirms = sorted(confirms)
    adr = compute_adr(confirms, times)
    assert adr is None or 0.0 <= adr <= 1.0


def test_mgdr():
    acts = [SabotageAction(gateway(0), 1, 0, 10, b"", detected=d) for d in (True, True, False, True)]
    assert compute_mgdr(acts) == 0.75
    assert compute_mgdr([]) is None


def test_ct_from_broadcast_to_last_append(registry):
    tx = tx_from(registry, 0, [reading(1, 100)], now=150)
    b = _block(registry, [tx])
    events = [
        (200, "block_broadcast", {"height": 1}),
        (260, "append", {"height": 1, "block_hash": b"h"}),
        (275, "append", {"height": 1, "block_hash": b"h"}),
        _confirm(b, 250),
    ]
    rep = finalize(RunLog(sim_time=1000, events=events))
    assert rep.ct_mean == 75
    assert rep.max_confirms_per_height == 1


def test_conflicting_appends_are_visible(registry):
    events = [(260, "append", {"height": 1, "block_hash": b"a"}), (261, "append", {"height": 1, "block_hash": b"b"})]
    assert finalize(RunLog(sim_time=1000, events=events)).max_confirms_per_height == 2


def test_chain_divergence_detected():
    log = RunLog(sim_time=10, chains={"a": [(0, 1)], "b": [(0, 2)]})
    assert not finalize(log).identical_chains


def test_finalize_is_idempotent_and_serialisable(registry):
    tx = tx_from(registry, 0, [reading(1, 100, malicious=True)], now=150)
    log = RunLog(sim_time=1000, events=[_confirm(_block(registry, [tx]), 290)], malicious_times=[100],
                 readings_generated=1)
    a, b = finalize(log), finalize(log)
    assert a == b
    assert a.adr == 0.0 and a.malicious_confirmed == 1
    data = json.loads(a.to_json())
    assert MetricsReport.from_dict(data) == a


def test_rates_non_negative_on_empty_log():
    rep = finalize(RunLog(sim_time=0))
    assert rep.bth == 0.0 and rep.nt_data == 0.0 and rep.adr is None and rep.mgdr is None
