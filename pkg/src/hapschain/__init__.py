"""Blockchain consensus for sensor networks backed by high-altitude platform stations.

Modules:
    core       records, canonical encoding, hashing, Merkle trees
    crypto     signatures, key registry, sealed boxes
    wsn        readings, clustering, in-path endorsement
    gateway    ingest, aggregation, voting, user replies
    haps       QUICO and the PBFT baseline at the stations
    adversary  malicious nodes and the admin
    simnet     topology, links and the event engine
    metrics    the run report
    cli        command line entry point
"""

from .config import ScenarioConfig, parse_config
from .metrics import MetricsReport

__all__ = ["ScenarioConfig", "parse_config", "MetricsReport", "run"]
__version__ = "0.1.0"


def run(cfg: ScenarioConfig) -> MetricsReport:
    from .simnet import run as _run

    return _run(cfg)
