"""Command line: single runs, sweeps and the default config.

    hapschain run scenario.yaml --out results/ --events
    hapschain sweep scenario.yaml --axis pmn --values 0.1,0.2,0.3 --seeds 1,2 --modes quico,pbft_baseline
    hapschain defaults > scenario.yaml

Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .config import MODES, ConfigError, ScenarioConfig, dump_config, parse_config
from .core import NodeId
from .metrics import MetricsReport

log = logging.getLogger("hapschain")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

SWEEP_COLUMNS = ("axis_value", "mode", "metric", "mean", "stddev")
EVENT_COLUMNS = ("time_ms", "kind", "fields")
AXES = ("tx_size", "pmn")
# Sweep values on the tx_size axis are in KB at full scale; a payload of
# value * 1000 * scale bytes is simulated.
DEFAULT_PAYLOAD_SCALE = 0.01


class IoError(OSError):
    """The output directory cannot be written."""


def _ensure_dir(out_dir: Path) -> Path:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise IoError(f"{out_dir} is not writable")
    return out_dir


def _plain(value: Any) -> Any:
    if isinstance(value, NodeId):
        return str(value)
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "header") and hasattr(value, "body"):
        return {"height": value.height, "txs": len(value.body)}
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


def write_events(events: Iterable[Tuple[int, str, Dict[str, Any]]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for t, kind, fields in events:
            w.writerow((t, kind, json.dumps({k: _plain(v) for k, v in fields.items()}, sort_keys=True)))


def summary_line(cfg: ScenarioConfig, rep: MetricsReport) -> str:
    def f(x: Optional[float], spec: str = ".1f") -> str:
        return "-" if x is None else format(x, spec)

    return (f"mode={cfg.consensus} seed={cfg.seed} pmn={cfg.adversary.pmn:g} payload={cfg.tx_payload_size}B "
            f"bth={rep.bth:.2f}tx/s tla={f(rep.tla_mean)}ms ct={f(rep.ct_mean)}ms adr={f(rep.adr, '.3f')} "
            f"mgdr={f(rep.mgdr, '.3f')} nt_ctl={rep.nt_control:.3f}")


def run_scenario(cfg: ScenarioConfig, out_dir: Path, events: bool = False) -> int:
    """One run; writes report.json (and events.csv when asked); returns an exit code."""
    from .simnet import Simulation

    out_dir = _ensure_dir(Path(out_dir))
    sim = Simulation(cfg)
    rep = sim.run()
    (out_dir / "report.json").write_text(rep.to_json(), encoding="utf-8")
    if events:
        write_events(sim.engine.events, out_dir / "events.csv")
    print(summary_line(cfg, rep))
    return EXIT_OK


def apply_axis(cfg: ScenarioConfig, axis: str, value: float, payload_scale: float = DEFAULT_PAYLOAD_SCALE) -> ScenarioConfig:
    if axis == "tx_size":
        return cfg.replace(tx_payload_size=max(1, int(round(value * 1000 * payload_scale))))
    if axis == "pmn":
        return cfg.replace(**{"adversary.pmn": float(value)})
    raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}")


def _run_cell(cfg: ScenarioConfig) -> Dict[str, Any]:
    from .simnet import run

    return run(cfg).to_dict()


def sweep(
    base_cfg: ScenarioConfig,
    axis: str,
    values: Sequence[float],
    seeds: Sequence[int],
    out_dir: Optional[Path] = None,
    modes: Optional[Sequence[str]] = None,
    payload_scale: float = DEFAULT_PAYLOAD_SCALE,
    jobs: int = 1,
) -> List[Dict[str, Any]]:
    """Run every (value, mode, seed) cell and aggregate mean/stddev per metric."""
    if not values:
        raise ValueError("sweep needs at least one value")
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    modes = list(modes or [base_cfg.consensus])
    cells: List[Tuple[float, str, ScenarioConfig]] = []
    for v in values:
        for m in modes:
            for s in seeds:
                cells.append((v, m, apply_axis(base_cfg, axis, v, payload_scale).replace(consensus=m, seed=s)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_cell, [c for _, _, c in cells]))
    else:
        reports = [_run_cell(c) for _, _, c in cells]

    grouped: Dict[Tuple[float, str], List[Dict[str, Any]]] = {}
    for (v, m, _), rep in zip(cells, reports):
        grouped.setdefault((v, m), []).append(rep)
    rows: List[Dict[str, Any]] = []
    for v in values:
        for m in modes:
            reps = grouped[(v, m)]
            for metric in sorted(reps[0]):
                xs = [r[metric] for r in reps if isinstance(r[metric], (int, float)) and r[metric] is not None]
                if not xs:
                    continue
                xs = [float(x) for x in xs]
                rows.append({"axis_value": v, "mode": m, "metric": metric, "mean": statistics.fmean(xs),
                             "stddev": statistics.pstdev(xs) if len(xs) > 1 else 0.0})
    if out_dir is not None:
        write_sweep_csv(rows, _ensure_dir(Path(out_dir)) / "sweep.csv")
    return rows


def write_sweep_csv(rows: Iterable[Dict[str, Any]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_COLUMNS})


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hapschain", description="HAPS blockchain consensus simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("config", help="YAML scenario file")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--events", action="store_true", help="also write events.csv")

    s = sub.add_parser("sweep", help="sweep tx size or PMN")
    s.add_argument("config")
    s.add_argument("--axis", choices=AXES, required=True)
    s.add_argument("--values", type=_floats, required=True, help="comma-separated axis values")
    s.add_argument("--seeds", type=_ints, default=[1], help="comma-separated seeds (default: 1)")
    s.add_argument("--modes", default=None, help="comma-separated consensus modes (default: the config's)")
    s.add_argument("--payload-scale", type=float, default=DEFAULT_PAYLOAD_SCALE,
                   help="bytes simulated per full-scale byte on the tx_size axis")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default="out")

    sub.add_parser("defaults", help="print the default scenario as YAML")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "defaults":
        sys.stdout.write(dump_config(ScenarioConfig()))
        return EXIT_OK
    try:
        cfg = parse_config(args.config)
        if args.command == "run":
            changes: Dict[str, Any] = {}
            if args.seed is not None:
                changes["seed"] = args.seed
            if args.mode:
                changes["consensus"] = args.mode
            if changes:
                cfg = cfg.replace(**changes)
        else:
            modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
            for m in modes or []:
                if m not in MODES:
                    raise ConfigError(f"unknown mode {m!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return run_scenario(cfg, Path(args.out), events=args.events)
        rows = sweep(cfg, args.axis, args.values, args.seeds, Path(args.out), modes, args.payload_scale, args.jobs)
        print(f"wrote {len(rows)} rows to {Path(args.out) / 'sweep.csv'}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside a run is a runtime error
        log.debug("run failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
