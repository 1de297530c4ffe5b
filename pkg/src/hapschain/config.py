"""Scenario configuration: nested dataclasses loaded from YAML.

Every field has a default, so an empty file is a valid scenario.  Unknown
keys are rejected and invariant violations name the offending field with
its dotted path (``adversary.pmn``).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union, get_args, get_origin, get_type_hints

import yaml


class ConfigError(Exception):
    pass


class ConfigNotFound(ConfigError):
    pass


class ConfigInvalid(ConfigError):
    def __init__(self, field_path: str, reason: str = "") -> None:
        super().__init__(field_path if not reason else f"{field_path}: {reason}")
        self.field = field_path
        self.reason = reason


MODES = ("quico", "pbft_baseline")


@dataclass
class TopologyConfig:
    stations: int = 3
    gateways: Optional[int] = None  # derived from sensors / sensors_per_gateway when unset
    sensors: int = 900
    sensors_per_gateway: int = 100
    map_size_km: Optional[float] = None  # derived from density when unset
    density_per_km2: float = 394.0
    station_altitude_km: float = 20.0
    cluster_radius_km: float = 0.1
    sensor_range_km: float = 0.1
    ch_uplink_range_km: float = 0.5
    gateway_station_range_km: float = 500.0
    gateway_range_km: float = 50.0
    placement_jitter: float = 0.3


@dataclass
class SensingConfig:
    reading_interval: int = 1000
    env_base: float = 20.0
    env_amplitude: float = 0.0
    env_wavelength_km: float = 1.0
    noise_sigma: float = 0.2
    noise_band: float = 0.5
    tolerance: float = 0.5
    near_radius_km: float = 0.1
    neighbor_window: int = 1000
    min_neighbors: int = 3


@dataclass
class ConsensusConfig:
    t_th: int = 100
    t_w: int = 100
    max_retry_rounds: int = 3
    pbft_timeout: int = 500


@dataclass
class GatewayConfig:
    aggregation_period: int = 50
    expiry_horizon: int = 1000
    max_deferred_ticks: int = 3
    seal_uplink: bool = False


@dataclass
class NetworkConfig:
    mtu: int = 1500
    sensor_kbps: float = 250.0
    uplink_kbps: float = 100_000.0
    peer_kbps: float = 1_000_000.0
    ground_kbps: float = 10_000.0
    admin_kbps: float = 10_000.0
    admin_latency_ms: float = 10.0
    propagation_km_per_ms: float = 299.792458
    jitter: float = 0.05
    sensor_frame_loss: float = 0.0
    arq_retries: int = 3
    queue_limit_ms: float = 1000.0


@dataclass
class ComputeConfig:
    station_sig_ms: float = 0.01
    station_reading_ms: float = 0.0005
    station_kb_ms: float = 0.0005
    gateway_sig_ms: float = 0.3
    gateway_reading_ms: float = 0.05
    gateway_kb_ms: float = 0.02
    jitter: float = 0.05


@dataclass
class EnergyConfig:
    budget_j: float = 1000.0
    tx_uj_per_byte: float = 1.7
    rx_uj_per_byte: float = 1.9
    sign_mj: float = 0.5
    verify_mj: float = 1.0


@dataclass
class AdversarySection:
    pmn: float = 0.30
    attack_interval: int = 1000
    falsification_offset: float = 75.0
    reselect: bool = True
    fix_latency: int = 500
    sabotage: bool = True


@dataclass
class ScenarioConfig:
    seed: int = 1
    sim_time: int = 60_000
    consensus: str = "quico"
    blockchain_enabled: bool = True
    tx_payload_size: int = 1000
    signature_scheme: str = "sim"
    service_id: str = "eim"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    consensus_params: ConsensusConfig = field(default_factory=ConsensusConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    compute: ComputeConfig = field(default_factory=ComputeConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    adversary: AdversarySection = field(default_factory=AdversarySection)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "ScenarioConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"adversary.pmn": 0.5})``."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            parts = path.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigInvalid(path, "unknown key")
            node[parts[-1]] = value
        return from_dict(data)


# ---------------------------------------------------------------------------


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = get_origin(tp)
    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        if value is None:
            value = {}
        if not isinstance(value, dict):
            raise ConfigInvalid(path, "expected a mapping")
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(path, "expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigInvalid(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigInvalid(path, "expected a string")
        return value
    return value


def _build(cls: Any, data: Dict[str, Any], prefix: str = "") -> Any:
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigInvalid(f"{prefix}{key}" if not prefix else f"{prefix}.{key}", "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            path = f"{prefix}.{f.name}" if prefix else f.name
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], path)
    return cls(**kwargs)


def _check(cond: bool, path: str, reason: str) -> None:
    if not cond:
        raise ConfigInvalid(path, reason)


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    t, s, c, g, n, e, a = (cfg.topology, cfg.sensing, cfg.consensus_params, cfg.gateway, cfg.network,
                           cfg.energy, cfg.adversary)
    _check(cfg.sim_time >= 0, "sim_time", "must be >= 0")
    _check(cfg.consensus in MODES, "consensus", f"must be one of {MODES}")
    _check(cfg.tx_payload_size >= 1, "tx_payload_size", "must be >= 1")
    _check(cfg.signature_scheme in ("sim", "ed25519"), "signature_scheme", "must be 'sim' or 'ed25519'")
    _check(0 <= cfg.seed < 2 ** 64, "seed", "must be a 64-bit unsigned integer")
    _check(t.stations >= 1, "topology.stations", "must be >= 1")
    _check(t.sensors >= 1, "topology.sensors", "must be >= 1")
    _check(t.sensors_per_gateway >= 1, "topology.sensors_per_gateway", "must be >= 1")
    _check(t.gateways is None or t.gateways >= 1, "topology.gateways", "must be >= 1")
    _check(t.map_size_km is None or t.map_size_km > 0, "topology.map_size_km", "must be > 0")
    _check(t.density_per_km2 > 0, "topology.density_per_km2", "must be > 0")
    for name in ("station_altitude_km", "cluster_radius_km", "sensor_range_km", "ch_uplink_range_km",
                 "gateway_station_range_km", "gateway_range_km"):
        _check(getattr(t, name) > 0, f"topology.{name}", "must be > 0")
    _check(0 <= t.placement_jitter < 1, "topology.placement_jitter", "must lie in [0, 1)")
    _check(s.reading_interval > 0, "sensing.reading_interval", "must be > 0")
    _check(s.noise_sigma >= 0 and s.noise_band >= 0, "sensing.noise_sigma", "must be >= 0")
    _check(s.tolerance > 0, "sensing.tolerance", "must be > 0")
    _check(s.neighbor_window >= 0, "sensing.neighbor_window", "must be >= 0")
    _check(s.min_neighbors >= 1, "sensing.min_neighbors", "must be >= 1")
    _check(c.t_th > 0, "consensus_params.t_th", "must be > 0")
    _check(c.t_w > 0, "consensus_params.t_w", "must be > 0")
    _check(c.max_retry_rounds >= 0, "consensus_params.max_retry_rounds", "must be >= 0")
    _check(c.pbft_timeout > 0, "consensus_params.pbft_timeout", "must be > 0")
    _check(g.aggregation_period > 0, "gateway.aggregation_period", "must be > 0")
    _check(g.expiry_horizon > 0, "gateway.expiry_horizon", "must be > 0")
    _check(g.max_deferred_ticks >= 1, "gateway.max_deferred_ticks", "must be >= 1")
    _check(n.mtu >= 1, "network.mtu", "must be >= 1")
    for name in ("sensor_kbps", "uplink_kbps", "peer_kbps", "ground_kbps", "admin_kbps", "propagation_km_per_ms"):
        _check(getattr(n, name) > 0, f"network.{name}", "must be > 0")
    _check(n.admin_latency_ms >= 0, "network.admin_latency_ms", "must be >= 0")
    _check(0 <= n.jitter < 1, "network.jitter", "must lie in [0, 1)")
    _check(0 <= n.sensor_frame_loss < 1, "network.sensor_frame_loss", "must lie in [0, 1)")
    _check(n.arq_retries >= 0, "network.arq_retries", "must be >= 0")
    _check(n.queue_limit_ms > 0, "network.queue_limit_ms", "must be > 0")
    for f in dataclasses.fields(cfg.compute):
        _check(getattr(cfg.compute, f.name) >= 0, f"compute.{f.name}", "must be >= 0")
    for f in dataclasses.fields(e):
        _check(getattr(e, f.name) >= 0, f"energy.{f.name}", "must be >= 0")
    _check(0 <= a.pmn < 1, "adversary.pmn", "must lie in [0, 1)")
    _check(a.attack_interval > 0, "adversary.attack_interval", "must be > 0")
    _check(a.fix_latency >= 0, "adversary.fix_latency", "must be >= 0")
    return cfg


def from_dict(data: Optional[Dict[str, Any]]) -> ScenarioConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigInvalid("<root>", "expected a mapping")
    return validate(_build(ScenarioConfig, data))


def parse_config(path: Union[str, os.PathLike]) -> ScenarioConfig:
    """Load and validate a YAML scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError as exc:
        raise ConfigNotFound(str(path)) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid("<root>", f"not valid YAML: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
