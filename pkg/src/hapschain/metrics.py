"""Run log and the final report.

Everything here is computed from the recorded event stream plus a handful
of counters kept by the engine.  The malicious flag on readings is read
only in this module.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

Event = Tuple[int, str, Dict[str, Any]]


@dataclass
class RunLog:
    sim_time: int
    events: List[Event] = field(default_factory=list)
    readings_generated: int = 0
    malicious_times: List[int] = field(default_factory=list)
    nt_data: int = 0
    nt_control: int = 0
    nt_nodes: int = 1
    energy_used: List[float] = field(default_factory=list)
    sabotage: List[Any] = field(default_factory=list)
    false_positives: int = 0
    chains: Dict[str, List[Tuple[int, Any]]] = field(default_factory=dict)
    max_link_delay: float = 0.0
    packets_delivered: int = 0
    packets_lost: int = 0
    packets_dropped: int = 0
    drained: bool = True
    event_count: int = 0


@dataclass
class MetricsReport:
    bth: float = 0.0
    bth_readings: float = 0.0
    tla_mean: Optional[float] = None
    tla_p50: Optional[float] = None
    tla_p95: Optional[float] = None
    tla_max: Optional[float] = None
    tla_tx_max: Optional[float] = None
    liveness_ratio: Optional[float] = None
    ct_mean: Optional[float] = None
    adr: Optional[float] = None
    mgdr: Optional[float] = None
    nt_data: float = 0.0
    nt_control: float = 0.0
    energy_per_sensor: float = 0.0
    false_positive_count: int = 0
    blocks_confirmed: int = 0
    txs_created: int = 0
    txs_confirmed: int = 0
    confirm_ratio: Optional[float] = None
    readings_generated: int = 0
    readings_confirmed: int = 0
    malicious_generated: int = 0
    malicious_confirmed: int = 0
    sabotage_actions: int = 0
    sabotage_detected: int = 0
    identical_chains: bool = True
    max_confirms_per_height: int = 0
    max_link_delay: float = 0.0
    packets_delivered: int = 0
    packets_lost: int = 0
    packets_dropped: int = 0
    drained: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def compute_adr(confirms: Sequence[Tuple[int, int]], malicious_times: Sequence[int]) -> Optional[float]:
    """ADR from ``(confirm_time, malicious_readings_in_block)`` pairs in chain order.

    Each block's malicious count is divided by the malicious readings
    generated since the previous block; the ratios are averaged and the
    mean is subtracted from one.  Blocks whose window saw no malicious
    readings carry no information and are skipped.
    """
    if not malicious_times:
        return None
    times = sorted(malicious_times)
    ratios: List[float] = []
    prev = -math.inf
    for t, m_in in confirms:
        lo = bisect.bisect_right(times, prev)
        hi = bisect.bisect_right(times, t)
        generated = hi - lo
        prev = t
        if generated == 0:
            continue
        ratios.append(min(1.0, m_in / generated))
    if not ratios:
        return 1.0
    return min(1.0, max(0.0, 1.0 - float(np.mean(ratios))))


def compute_mgdr(actions: Iterable[Any]) -> Optional[float]:
    acts = list(actions)
    if not acts:
        return None
    return sum(1 for a in acts if a.detected) / len(acts)


def _percentile(values: np.ndarray, q: float) -> float:
    return float(np.percentile(values, q))


def finalize(log: RunLog, cfg: Any = None) -> MetricsReport:
    """Turn a finished run into its report; a pure function of ``log``."""
    seconds = log.sim_time / 1000.0 if log.sim_time > 0 else 0.0
    rep = MetricsReport(
        readings_generated=log.readings_generated,
        malicious_generated=len(log.malicious_times),
        false_positive_count=log.false_positives,
        max_link_delay=round(log.max_link_delay, 6),
        packets_delivered=log.packets_delivered,
        packets_lost=log.packets_lost,
        packets_dropped=log.packets_dropped,
        drained=log.drained,
    )
    if seconds > 0 and log.nt_nodes > 0:
        rep.nt_data = log.nt_data / (log.nt_nodes * seconds)
        rep.nt_control = log.nt_control / (log.nt_nodes * seconds)
    if log.energy_used:
        rep.energy_per_sensor = float(np.mean(log.energy_used))

    first_broadcast: Dict[int, int] = {}
    last_append: Dict[int, int] = {}
    confirms: List[Tuple[int, Any]] = []
    confirms_per_height: Dict[int, int] = {}
    hashes_per_height: Dict[int, set] = {}
    created = 0
    for t, kind, f in log.events:
        if kind == "block_broadcast":
            h = f["height"]
            if h not in first_broadcast:
                first_broadcast[h] = t
        elif kind == "append":
            h = f["height"]
            last_append[h] = max(t, last_append.get(h, t))
            hashes_per_height.setdefault(h, set()).add(f["block_hash"])
        elif kind == "confirm":
            confirms.append((f["t_b"], f["block"]))
            h = f["height"]
            confirms_per_height[h] = confirms_per_height.get(h, 0) + 1
        elif kind == "tx_created":
            created += 1
    confirms.sort(key=lambda c: (c[1].height, c[0]))

    tla: List[int] = []
    tla_tx: List[int] = []
    confirmed_ids = set()
    adr_input: List[Tuple[int, int]] = []
    tx_in_window = 0
    readings_in_window = 0
    for t_b, block in confirms:
        m_in = 0
        for tx in block.body:
            if tx.id in confirmed_ids:
                continue
            confirmed_ids.add(tx.id)
            if tx.readings:
                tla_tx.append(t_b - min(r.timestamp for r in tx.readings))
            if t_b <= log.sim_time:
                tx_in_window += 1
                readings_in_window += len(tx.readings)
            for r in tx.readings:
                tla.append(t_b - r.timestamp)
                rep.readings_confirmed += 1
                if r.secret_malicious_flag:
                    m_in += 1
        rep.malicious_confirmed += m_in
        adr_input.append((t_b, m_in))

    rep.blocks_confirmed = len(confirms)
    rep.txs_created = created
    rep.txs_confirmed = len(confirmed_ids)
    if created:
        rep.confirm_ratio = len(confirmed_ids) / created
    if seconds > 0:
        rep.bth = tx_in_window / seconds
        rep.bth_readings = readings_in_window / seconds
    if tla:
        arr = np.asarray(tla, dtype=float)
        rep.tla_mean = float(arr.mean())
        rep.tla_p50 = _percentile(arr, 50)
        rep.tla_p95 = _percentile(arr, 95)
        rep.tla_max = float(arr.max())
    if tla_tx:
        rep.tla_tx_max = float(max(tla_tx))
        if cfg is not None and created:
            # Transactions confirmed within the liveness bound, measured from
            # their earliest reading.
            bound = cfg.consensus_params.t_th + cfg.consensus_params.t_w + 4 * log.max_link_delay
            rep.liveness_ratio = sum(1 for x in tla_tx if x <= bound) / created
    cts = [last_append[h] - first_broadcast[h] for _, b in confirms
           for h in (b.height,) if h in last_append and h in first_broadcast]
    if cts:
        rep.ct_mean = float(np.mean(cts))

    rep.adr = compute_adr(adr_input, log.malicious_times)
    rep.mgdr = compute_mgdr(log.sabotage)
    rep.sabotage_actions = len(log.sabotage)
    rep.sabotage_detected = sum(1 for a in log.sabotage if a.detected)

    chains = list(log.chains.values())
    rep.identical_chains = all(c == chains[0] for c in chains[1:]) if chains else True
    per_height = [len(s) for s in hashes_per_height.values()] + list(confirms_per_height.values())
    rep.max_confirms_per_height = max(per_height) if per_height else 0
    return rep
