"""Run grids for the acceptance suite.

Every cell is an independent seeded scenario, so cells may run in worker
processes (``HAPSCHAIN_JOBS``) without changing any result.
"""

from __future__ import annotations

import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from hapschain.cli import apply_axis
from hapschain.config import ScenarioConfig, parse_config
from hapschain.simnet import run

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "acceptance.yaml"
SIZES_KB = (10, 50, 100, 300, 500, 750, 1000)
PMNS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
SEEDS = (1, 2, 3, 4, 5)
MODES = ("quico", "pbft_baseline")

Key = Tuple[str, float, float, int]  # (mode, size_kb, pmn, seed)


def base() -> ScenarioConfig:
    return parse_config(CONFIG)


def cell(mode: str, size_kb: float, pmn: float, seed: int, **changes) -> ScenarioConfig:
    cfg = apply_axis(base(), "tx_size", size_kb)
    return cfg.replace(consensus=mode, seed=seed, **{"adversary.pmn": pmn}, **changes)


def _one(cfg: ScenarioConfig) -> Dict:
    return run(cfg).to_dict()


def run_cells(cfgs: Iterable[ScenarioConfig], jobs: Optional[int] = None) -> List[Dict]:
    cfgs = list(cfgs)
    jobs = jobs or int(os.environ.get("HAPSCHAIN_JOBS", "1"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_one, cfgs, chunksize=4))
    return [_one(c) for c in cfgs]


def grid(modes, sizes, pmns, seeds) -> Dict[Key, Dict]:
    keys = [(m, s, p, seed) for m in modes for s in sizes for p in pmns for seed in seeds]
    reports = run_cells(cell(*k) for k in keys)
    return dict(zip(keys, reports))


def mean_of(results: Dict[Key, Dict], metric: str, **where) -> Optional[float]:
    """Mean of ``metric`` over the runs matching ``where`` (mode/size/pmn/seed)."""
    pos = {"mode": 0, "size": 1, "pmn": 2, "seed": 3}
    xs = [r[metric] for k, r in results.items()
          if all(k[pos[f]] == v for f, v in where.items()) and r[metric] is not None]
    return statistics.fmean(xs) if xs else None
