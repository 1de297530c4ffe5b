"""Fault injection: malicious sensors and gateways, and the admin that fixes them.

Two attacks are simulated.  Malicious sensors falsify their readings (the
offset itself is applied in :func:`hapschain.wsn.generate_reading`).
Malicious gateways sabotage consensus by voting against blocks that are
fine.  The admin reacts to warning reports: it switches confirmed attackers
back to honest behaviour after a delay and, to keep the malicious share
constant, turns other gateways malicious.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Set, Tuple

from .core import ADMIN_ID, Block, Hash, NodeId, Role, header_hash
from .crypto import KeyRegistry
from .haps import BlockError, FixNotice, WarningReport, signed, verify_message


@dataclass(frozen=True)
class AdversaryConfig:
    pmn: float = 0.30
    attack_interval: int = 1000
    falsification_offset: float = 75.0
    reselect: bool = True
    fix_latency: int = 500
    sabotage: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.pmn < 1.0:
            raise ValueError("pmn must lie in [0, 1)")
        if self.attack_interval <= 0:
            raise ValueError("attack_interval must be positive")
        if self.fix_latency < 0:
            raise ValueError("fix_latency must be non-negative")


def malicious_count(pmn: float, population: int) -> int:
    # The epsilon keeps products such as 0.57 * 100 from rounding down a whole unit.
    return int(math.floor(pmn * population + 1e-9))


def select_malicious(
    sensors: Sequence[NodeId], gateways: Sequence[NodeId], pmn: float, rng: random.Random
) -> Set[NodeId]:
    """floor(pmn * |sensors|) sensors and floor(pmn * |gateways|) gateways, uniformly."""
    chosen: Set[NodeId] = set()
    for group in (sensors, gateways):
        ordered = sorted(group, key=lambda n: (n.role, n.index))
        chosen.update(rng.sample(ordered, malicious_count(pmn, len(ordered))))
    return chosen


@dataclass
class SabotageAction:
    gateway: NodeId
    height: int
    sequence_number: int
    time: int
    tx_id: Hash
    detected: bool = False


@dataclass
class AdversaryState:
    malicious_sensors: Set[NodeId] = field(default_factory=set)
    malicious_gateways: Set[NodeId] = field(default_factory=set)
    all_gateways: List[NodeId] = field(default_factory=list)
    armed: Set[NodeId] = field(default_factory=set)
    actions: List[SabotageAction] = field(default_factory=list)
    detections: int = 0
    false_positives: int = 0
    fixes: int = 0

    @classmethod
    def from_selection(cls, chosen: Set[NodeId], gateways: Sequence[NodeId]) -> "AdversaryState":
        return cls(
            malicious_sensors={n for n in chosen if n.role in (Role.SENSOR, Role.CLUSTER_HEAD)},
            malicious_gateways={n for n in chosen if n.role is Role.GATEWAY},
            all_gateways=sorted(gateways, key=lambda n: n.index),
        )

    def is_malicious(self, node: NodeId) -> bool:
        return node in self.malicious_sensors or node in self.malicious_gateways

    def arm(self) -> int:
        """An attack tick: every currently malicious gateway gets one sabotage."""
        self.armed = set(self.malicious_gateways)
        return len(self.armed)


def sabotage_vote(
    gw: NodeId, block: Block, now: int, cfg: AdversaryConfig, rng: random.Random, registry: KeyRegistry
) -> Optional[BlockError]:
    """A signed Block ERROR disputing one transaction that really is in the block."""
    if not block.body:
        return None
    tx = block.body[rng.randrange(len(block.body))]
    return signed(
        BlockError(block.height, block.sequence_number, header_hash(block.header), (tx.id,), False, (), gw),
        registry,
    )


@dataclass(frozen=True)
class AdminOutcome:
    fixed: Tuple[NodeId, ...]
    false_positives: Tuple[NodeId, ...]
    reselected: Tuple[NodeId, ...]


def admin_respond(
    report: WarningReport, adversary: AdversaryState, rng: random.Random, reselect: bool = True
) -> AdminOutcome:
    """Inspect the suspects: fix attackers, count honest suspects as false positives."""
    fixed: List[NodeId] = []
    honest: List[NodeId] = []
    for s in dict.fromkeys(report.suspects):
        if s in adversary.malicious_gateways:
            adversary.malicious_gateways.discard(s)
            adversary.armed.discard(s)
            fixed.append(s)
        elif s.role is Role.GATEWAY:
            honest.append(s)
    adversary.detections += len(fixed)
    adversary.fixes += len(fixed)
    adversary.false_positives += len(honest)
    new: List[NodeId] = []
    if reselect and fixed:
        pool = [g for g in adversary.all_gateways if g not in adversary.malicious_gateways and g not in fixed]
        new = rng.sample(pool, min(len(fixed), len(pool)))
        adversary.malicious_gateways.update(new)
    return AdminOutcome(tuple(fixed), tuple(honest), tuple(new))


class Saboteur:
    """Callable handed to gateways; decides whether a vote is sabotaged."""

    def __init__(self, state: AdversaryState, rng: random.Random, clock: Any) -> None:
        self.state = state
        self.rng = rng
        self.clock = clock

    def __call__(self, gw: NodeId, block: Block) -> Optional[Tuple[Hash, ...]]:
        st = self.state
        if gw not in st.armed or gw not in st.malicious_gateways or not block.body:
            return None
        st.armed.discard(gw)
        tx = block.body[self.rng.randrange(len(block.body))]
        st.actions.append(SabotageAction(gw, block.height, block.sequence_number, self.clock.now, tx.id))
        return (tx.id,)


class AdminNode:
    """The network administrator as a simulated node."""

    def __init__(
        self,
        state: AdversaryState,
        cfg: AdversaryConfig,
        rng: random.Random,
        registry: KeyRegistry,
        runtime: Any,
        node: NodeId = ADMIN_ID,
    ) -> None:
        self.state = state
        self.cfg = cfg
        self.rng = rng
        self.registry = registry
        self.rt = runtime
        self.node = node
        self.pending_fix: Set[NodeId] = set()

    def start(self) -> None:
        if self.cfg.sabotage and self.state.malicious_gateways:
            self.rt.at(self.cfg.attack_interval, self._tick)

    def _tick(self) -> None:
        h = getattr(self.rt, "horizon", None)
        if h is not None and self.rt.now >= h:
            return
        n = self.state.arm()
        self.rt.record("attack_tick", armed=n)
        self.rt.at(self.rt.now + self.cfg.attack_interval, self._tick)

    def handle(self, msg: Any, src: NodeId) -> None:
        if isinstance(msg, WarningReport) and verify_message(msg, self.registry):
            self._on_report(msg, src)

    def _on_report(self, report: WarningReport, src: NodeId) -> None:
        st = self.state
        to_fix: List[NodeId] = []
        for s in dict.fromkeys(report.suspects):
            if s.role is not Role.GATEWAY:
                continue
            hits = [a for a in st.actions if a.gateway == s and a.height == report.height]
            for a in hits:
                if not a.detected:
                    a.detected = True
            if s in st.malicious_gateways:
                if s not in self.pending_fix:
                    self.pending_fix.add(s)
                    to_fix.append(s)
            elif not hits:
                st.false_positives += 1
                self.rt.record("false_positive", gateway=s, height=report.height)
        self.rt.record("report", sender=report.sender, height=report.height, suspects=len(report.suspects))
        self.rt.at(self.rt.now + self.cfg.fix_latency, self._fix, report, tuple(to_fix), src)

    def _fix(self, report: WarningReport, to_fix: Tuple[NodeId, ...], src: NodeId) -> None:
        for s in to_fix:
            self.pending_fix.discard(s)
        fp_before = self.state.false_positives
        outcome = admin_respond(
            WarningReport(to_fix, report.evidence, report.height, report.sequence_number, report.sender),
            self.state, self.rng, self.cfg.reselect,
        )
        # False positives were already counted when the report arrived.
        self.state.false_positives = fp_before
        for s in outcome.fixed:
            self.rt.record("fixed", gateway=s)
        notice = signed(FixNotice(tuple(report.suspects), report.height, report.sequence_number, self.node),
                        self.registry)
        self.rt.send(self.node, src, notice)
