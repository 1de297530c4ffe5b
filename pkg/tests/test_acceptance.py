"""Desk-scale acceptance suite: twelve criteria, one verdict line each.

The grids are expensive (about 640 seeded runs); set ``HAPSCHAIN_JOBS`` to
spread them over worker processes.  Each criterion records a verdict with
``conftest.record`` and the verdicts are printed in the terminal summary.
"""

from __future__ import annotations

import random

import pytest
from scipy.stats import spearmanr

import acceptance_runs as A
from conftest import record
from hapschain.core import canonical_decode, canonical_encode, merkle_proof
from hapschain.gateway import RejectReply, endorse_user_reply
from hapschain.simnet import Simulation, run

pytestmark = pytest.mark.acceptance

LIVENESS_SIM_TIME = 60_000


@pytest.fixture(scope="session")
def matrix():
    """7 sizes x 8 pmn values x 5 seeds x both modes."""
    return A.grid(A.MODES, A.SIZES_KB, A.PMNS, A.SEEDS)


@pytest.fixture(scope="session")
def honest():
    """Same sizes and seeds with no malicious nodes."""
    return A.grid(A.MODES, A.SIZES_KB, (0.0,), A.SEEDS)


def by_pmn(results, metric, mode):
    return [A.mean_of(results, metric, mode=mode, pmn=p) for p in A.PMNS]


def by_size(results, metric, mode):
    return [A.mean_of(results, metric, mode=mode, size=s) for s in A.SIZES_KB]


def fmt(xs):
    return "[" + ", ".join("-" if x is None else f"{x:.3g}" for x in xs) + "]"


# 1 ---------------------------------------------------------------------------------


def test_criterion_1_quorum_oracle():
    from itertools import product

    from hapschain.core import GENESIS_BLOCK, gateway, station
    from hapschain.haps import Confirm, ConsensusParams, Phase, RoundState, collect_votes

    mismatches = checked = 0
    for x, y in product(range(1, 7), range(1, 10)):
        others = [station(i) for i in range(1, x)]
        gws = [gateway(i) for i in range(y)]
        params = ConsensusParams(X=x, Y=y)
        for hmask in range(1 << len(others)):
            hacks = {s for k, s in enumerate(others) if hmask >> k & 1}
            for gmask in range(1 << y):
                gacks = {g for k, g in enumerate(gws) if gmask >> k & 1}
                r = RoundState(Phase.COLLECTING, GENESIS_BLOCK, hacks, gacks, {})
                r.deadline = 10 ** 9
                expected = len(hacks) >= x - 1 and len(gacks) >= (y // 2 + 1)
                mismatches += (collect_votes(r, 0, params) == Confirm()) != expected
                checked += 1
    record(1, "brute force", mismatches == 0, f"{checked} vote subsets, {mismatches} mismatches")
    assert mismatches == 0


# 2 ---------------------------------------------------------------------------------


def test_criterion_2_no_fork(matrix):
    forks = [k for k, r in matrix.items() if not r["identical_chains"] or r["max_confirms_per_height"] > 1]
    record(2, "identical chains, one block per height", not forks, f"{len(matrix)} runs, {len(forks)} violations")
    assert not forks, forks[:5]


# 3 ---------------------------------------------------------------------------------


def test_criterion_3_honest_liveness():
    bad = []
    ratios = []
    for seed in A.SEEDS:
        cfg = A.cell("quico", 100, 0.0, seed).replace(sim_time=LIVENESS_SIM_TIME)
        rep = run(cfg)
        ratios.append(rep.liveness_ratio)
        if rep.liveness_ratio is None or rep.liveness_ratio < 0.99:
            bad.append(seed)
    record(3, "confirmed within t_th + t_w + 4 x max link delay", not bad,
           f"60 s runs, liveness ratios {fmt(ratios)}")
    assert not bad


# 4 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("mode", A.MODES)
def test_criterion_4_throughput_trend(honest, mode):
    means = by_size(honest, "bth_readings", mode)
    rho = spearmanr(A.SIZES_KB, means).statistic
    ok = rho <= -0.9
    record(4, f"{mode} readings/s vs payload", ok, f"rho={rho:.3f} means={fmt(means)}")
    assert ok


# 5 ---------------------------------------------------------------------------------


def test_criterion_5_consensus_delay(honest):
    q = by_size(honest, "ct_mean", "quico")
    b = by_size(honest, "ct_mean", "pbft_baseline")
    ratios = [qi / bi for qi, bi in zip(q, b)]
    ok = all(r <= 0.7 for r in ratios)
    record(5, "QUICO CT <= 0.7 x baseline at every size", ok, f"ratios={fmt(ratios)}")
    assert ok


# 6 ---------------------------------------------------------------------------------


def _tla(matrix, mode):
    return dict(zip(A.PMNS, by_pmn(matrix, "tla_mean", mode)))


def test_criterion_6_quico_latency_stable(matrix):
    t = _tla(matrix, "quico")
    # No surge at or below 0.5: every such point stays within 25% of the 0.1 value.
    low = [p for p in A.PMNS if p <= 0.5]
    ok = all(abs(t[p] - t[0.1]) <= 0.25 * t[0.1] for p in low)
    above = max(t[p] for p in A.PMNS if p > 0.5) / t[0.1]
    record(6, "QUICO TLa within 25% of TLa(0.1) up to pmn 0.5", ok,
           f"tla={fmt(t.values())} peak above 0.5 = {above:.2f} x")
    assert ok


@pytest.mark.xfail(strict=True, reason="three malicious gateways out of twelve voters cannot block a 2/3 quorum; "
                                       "see README, 'Known failing criterion'")
def test_criterion_6_baseline_latency_surge(matrix):
    t = _tla(matrix, "pbft_baseline")
    ok = t[0.4] >= 1.5 * t[0.3]
    record(6, "baseline TLa(0.4) >= 1.5 x TLa(0.3)", ok, f"ratio={t[0.4] / t[0.3]:.3f} tla={fmt(t.values())}")
    assert ok


# 7 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("mode", A.MODES)
def test_criterion_7_adr_decreasing(matrix, mode):
    adr = by_pmn(matrix, "adr", mode)
    rho = spearmanr(A.PMNS, adr).statistic
    ok = rho <= -0.9
    record(7, f"{mode} ADR decreasing in pmn", ok, f"rho={rho:.3f} adr={fmt(adr)}")
    assert ok


def test_criterion_7_quico_dominates(matrix):
    q, b = by_pmn(matrix, "adr", "quico"), by_pmn(matrix, "adr", "pbft_baseline")
    ok = all(qi >= bi for qi, bi in zip(q, b))
    record(7, "QUICO ADR >= baseline at every pmn", ok, f"quico={fmt(q)} baseline={fmt(b)}")
    assert ok


# 8 ---------------------------------------------------------------------------------


def test_criterion_8_mgdr(matrix):
    q, b = by_pmn(matrix, "mgdr", "quico"), by_pmn(matrix, "mgdr", "pbft_baseline")
    # pmn 0.1 leaves no malicious gateway among nine, so MGDR is undefined there.
    defined = [(p, qi, bi) for p, qi, bi in zip(A.PMNS, q, b) if qi is not None]
    floor_ok = bool(defined) and all(qi >= 0.80 for _, qi, _ in defined)
    degrade_ok = all(bi is not None and bi < qi for p, qi, bi in defined if p > 0.3)
    record(8, "QUICO MGDR >= 0.80 wherever defined", floor_ok, f"quico={fmt(q)}")
    record(8, "baseline MGDR below QUICO for pmn > 0.3", degrade_ok, f"baseline={fmt(b)}")
    assert floor_ok and degrade_ok


# 9 ---------------------------------------------------------------------------------


def test_criterion_9_control_traffic(matrix):
    q, b = by_pmn(matrix, "nt_control", "quico"), by_pmn(matrix, "nt_control", "pbft_baseline")
    ratios = [bi / qi for qi, bi in zip(q, b)]
    ok = all(r >= 2.0 for r in ratios)
    record(9, "baseline nt_control >= 2 x QUICO at every pmn", ok, f"ratios={fmt(ratios)}")
    assert ok


# 10 --------------------------------------------------------------------------------


def test_criterion_10_energy_overhead():
    size = max(A.SIZES_KB)
    ratios = []
    for seed in A.SEEDS:
        on = Simulation(A.cell("quico", size, 0.0, seed))
        off = Simulation(A.cell("quico", size, 0.0, seed, blockchain_enabled=False))
        e_on, e_off = on.run().energy_per_sensor, off.run().energy_per_sensor
        assert on.topo.fingerprint() == off.topo.fingerprint()
        ratios.append(e_on / e_off)
    ok = all(r <= 1.25 for r in ratios)
    record(10, f"energy on/off at {size} KB", ok, f"ratios={fmt(ratios)}")
    assert ok


# 11 --------------------------------------------------------------------------------


def test_criterion_11_tamper_evidence():
    sim = Simulation(A.cell("quico", 10, 0.0, 1).replace(sim_time=3000))
    sim.run()
    chain = next(iter(sim.station_nodes.values())).chain
    blocks = [b for b in chain[1:] if b.body]
    gw = next(iter(sim.gateway_nodes.values())).s
    rnd = random.Random(11)
    tested = rejected = undecodable = 0
    while tested < 1000:
        block = rnd.choice(blocks)
        k = rnd.randrange(len(block.body))
        tx = block.body[k]
        proof = merkle_proof([t.id for t in block.body], k)
        enc = bytearray(canonical_encode(tx))
        bit = rnd.randrange(len(enc) * 8)
        enc[bit // 8] ^= 1 << (bit % 8)
        try:
            mutated = canonical_decode(bytes(enc))
        except Exception:
            undecodable += 1  # refused by the parser before any check runs
            continue
        tested += 1
        rejected += isinstance(endorse_user_reply(gw, mutated, proof, block.height), RejectReply)
    ok = rejected == tested
    record(11, "mutated transactions rejected", ok, f"{rejected}/{tested} (plus {undecodable} unparseable)")
    assert ok


# 12 --------------------------------------------------------------------------------


def test_criterion_12_determinism(tmp_path):
    from hapschain.cli import run_scenario

    outs = []
    for mode in A.MODES:
        cfg = A.cell(mode, 100, 0.5, 3)
        a, b = tmp_path / f"{mode}-a", tmp_path / f"{mode}-b"
        run_scenario(cfg, a)
        run_scenario(cfg, b)
        outs.append((a / "report.json").read_bytes() == (b / "report.json").read_bytes())
    ok = all(outs)
    record(12, "report.json bit-identical on re-run", ok, f"{sum(outs)}/{len(outs)} scenarios")
    assert ok
