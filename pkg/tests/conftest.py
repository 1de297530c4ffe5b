"""Shared builders for unit tests."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import pytest

from hapschain.core import NodeId, Reading, gateway, sensor, station
from hapschain.crypto import KeyRegistry
from hapschain.gateway import GatewayState, build_transaction
from hapschain.haps import ConsensusParams, HapsState
from hapschain.wsn import NeighborStore, make_packet


@pytest.fixture
def registry() -> KeyRegistry:
    return KeyRegistry.from_int(7)


def reading(i: int, t: int, value: float = 20.0, malicious: bool = False, payload: bytes = b"\x01\x02") -> Reading:
    return Reading(sensor(i), t, payload, value, malicious)


def gw_state(
    registry: KeyRegistry,
    index: int = 0,
    near: Dict[NodeId, Tuple[NodeId, ...]] = None,
    routes: Dict[NodeId, Tuple[NodeId, ...]] = None,
    min_neighbors: int = 1,
) -> GatewayState:
    store = NeighborStore(near or {}, window=1000)
    return GatewayState(gateway(index), registry, store, routes=routes or {}, min_neighbors=min_neighbors)


def tx_from(registry: KeyRegistry, gw_index: int, readings: Sequence[Reading], now: int = 100, horizon: int = 1000):
    gw = gw_state(registry, gw_index)
    return build_transaction(gw, readings, now, horizon)


def station_state(registry: KeyRegistry, index: int = 0, x: int = 3, y: int = 4) -> HapsState:
    return HapsState(
        station(index),
        [station(i) for i in range(x)],
        [gateway(i) for i in range(y)],
        registry,
        ConsensusParams(X=x, Y=y),
    )


def packet(registry: KeyRegistry, i: int, t: int, value: float, malicious: bool = False):
    r = reading(i, t, value, malicious)
    return make_packet([r], sensor(i), registry.keypair(sensor(i)))


# -- acceptance verdicts --------------------------------------------------------------

# criterion number -> list of (clause, passed, detail); filled by test_acceptance.
VERDICTS: Dict[int, list] = {}


def record(criterion: int, clause: str, passed: bool, detail: str) -> None:
    VERDICTS.setdefault(criterion, []).append((clause, bool(passed), detail))


def pytest_terminal_summary(terminalreporter) -> None:
    if not VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(VERDICTS):
        parts = VERDICTS[n]
        ok = all(p for _, p, _ in parts)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}")
        for clause, passed, detail in parts:
            tr.write_line(f"    {'ok  ' if passed else 'FAIL'} {clause}: {detail}")
