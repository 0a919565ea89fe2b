"""Engine configuration (TOML) and its validation."""

from __future__ import annotations

import ipaddress
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .aggregate import (
    COLLECT,
    DEFAULT_DATA_PORTS,
    DEFAULT_SERVICE_PORTS,
    EXFIL_FLOW,
    EXFIL_PROXY,
    HOST_TARGETS,
    PortGroupPolicy,
    RegularityGate,
)
from .ingest import (
    COLUMN_KINDS,
    DEFAULT_SCHEMAS,
    REQUIRED_FIELDS,
    SOURCE_KINDS,
    ConfigError,
    IdentityMap,
    IdentityMapError,
    InternalNetworks,
    LogSourceSpec,
    load_identity_map,
)
from .learn.explore import Blueprint

RECON, COLLECTION, EXFILTRATION = 3, 4, 5
STAGE_NAMES = {RECON: "recon", COLLECTION: "collect", EXFILTRATION: "exfil"}
STAGE_TARGETS = {
    RECON: HOST_TARGETS,
    COLLECTION: (COLLECT,),
    EXFILTRATION: (EXFIL_PROXY, EXFIL_FLOW),
}
TARGET_STAGE = {t: s for s, ts in STAGE_TARGETS.items() for t in ts}
ALL_TARGETS = tuple(t for ts in STAGE_TARGETS.values() for t in ts)


@dataclass
class ComboSpec:
    """Expert weights for one stage; ``destination_weight`` is the level-2 weight.

    ``min_volume`` drops a destination from the flow combo when the pair moved
    fewer bytes than that in the window.
    """

    stage: int
    weights: dict[str, float]
    destination_weight: float = 1.0
    min_volume: float = 0.0


@dataclass
class MonitorConfig:
    min_rows: int = 200
    sigma_min: float = 0.05
    p_floor: float = 1e-12
    risk_cap: float = 12.0
    identifier_columns: tuple[str, ...] = ("host", "remote")
    targets: tuple[str, ...] = ALL_TARGETS
    cv_folds: int = 5
    min_tune_rows: int = 30
    sigma_estimator: str = "clipped"
    sigma_clip: float = 5.0
    trim_outliers: bool = False
    max_trim_fraction: float = 0.2
    trim_rounds: int = 3


@dataclass
class LinkConfig:
    edge_threshold: float = 3.0
    seed_count: int = 50
    evidence_min_risk: float = 1.0
    high_risk: float = 6.0
    medium_risk: float = 3.0
    high_top_fraction: float = 0.01
    medium_top_fraction: float = 0.05
    neighbors: str = "reachable"  # or "one_hop"


LOG_CONTEXT_COLUMNS = (
    "log1p(history)",
    "log1p(symmetric)",
    "log1p(dest_clients)",
    "log1p(dest_median)",
    "log1p(dest_iqr)",
)


def default_blueprint() -> dict[str, Any]:
    # numeric context is already log-scaled; a straight line in log space is
    # what "same as last month" means, so it is not binned by default
    return {
        "time_tradeoff": 5.0,
        # every derived feature must describe a pool of rows, not one machine
        "min_support": 5,
        "encoders": {c: "passthrough" for c in LOG_CONTEXT_COLUMNS},
        "regularization": "ridge",
        "explorations": {
            "interaction": [1, 2],
            "lambdas": [1e-3, 1e-2, 1e-1],
            "max_experiments": 24,
        },
    }


@dataclass
class EngineConfig:
    path: Path
    sources: dict[str, LogSourceSpec]
    internal_cidrs: list[str]
    identity_map_path: Path | None
    results_dir: Path
    cidr_labels: dict[str, str] = field(default_factory=dict)
    ports: PortGroupPolicy = field(default_factory=PortGroupPolicy)
    window_days: int = 28
    history_days: int = 28
    min_clients: int = 10
    gate: RegularityGate = field(default_factory=RegularityGate)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    combos: dict[int, ComboSpec] = field(default_factory=dict)
    link: LinkConfig = field(default_factory=LinkConfig)
    blueprint: dict[str, Any] = field(default_factory=default_blueprint)
    seed: int = 0

    @property
    def internal(self) -> InternalNetworks:
        return InternalNetworks(self.internal_cidrs)

    def identity_map(self) -> IdentityMap:
        if self.identity_map_path is None:
            return IdentityMap()
        return load_identity_map(self.identity_map_path)

    def make_blueprint(self) -> Blueprint:
        return Blueprint.from_dict(self.blueprint)


DEFAULT_MIN_VOLUME = {COLLECTION: 1e6}


def default_combos() -> dict[int, ComboSpec]:
    return {
        s: ComboSpec(s, {t: 1.0 for t in ts}, min_volume=DEFAULT_MIN_VOLUME.get(s, 0.0))
        for s, ts in STAGE_TARGETS.items()
    }


def _load_toml(path: Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc


def _resolve(base: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() else base / q


def _ports(values: Any, what: str) -> frozenset[int]:
    out = set()
    for v in values:
        if isinstance(v, str) and "-" in v:
            a, b = (int(x) for x in v.split("-", 1))
            out.update(range(a, b + 1))
        else:
            out.add(int(v))
    bad = [p for p in out if not 0 <= p <= 65535]
    if bad:
        raise ConfigError(f"{what} ports outside 0-65535: {sorted(bad)[:5]}")
    return frozenset(out)


def parse_config(raw: Mapping[str, Any], path: Path) -> EngineConfig:
    """Build an EngineConfig; raises ConfigError on the first structural problem."""
    base = path.parent
    eng = dict(raw.get("engine", {}))
    sources = {}
    for kind, src in dict(raw.get("sources", {})).items():
        if kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source kind {kind!r}")
        schema = src.get("schema")
        schema = tuple(tuple(c) for c in schema) if schema else DEFAULT_SCHEMAS[kind]
        sources[kind] = LogSourceSpec(kind, _resolve(base, src["root"]), schema, src.get("delimiter", ","))
    if not sources:
        raise ConfigError("no log sources configured")

    ports_raw = dict(raw.get("ports", {}))
    try:
        ports = PortGroupPolicy(
            _ports(ports_raw.get("data", sorted(DEFAULT_DATA_PORTS)), "data"),
            _ports(ports_raw.get("service", sorted(DEFAULT_SERVICE_PORTS)), "service"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    ctx = dict(raw.get("context", {}))
    mon = dict(raw.get("monitor", {}))
    if "targets" in mon:
        mon["targets"] = tuple(mon["targets"])
    if "identifier_columns" in mon:
        mon["identifier_columns"] = tuple(mon["identifier_columns"])
    combos = default_combos()
    for name, w in dict(raw.get("weights", {})).items():
        stage = {v: k for k, v in STAGE_NAMES.items()}.get(name)
        if stage is None:
            raise ConfigError(f"unknown weight table {name!r}")
        w = dict(w)
        dest = float(w.pop("destination", 1.0))
        min_volume = float(w.pop("min_volume", combos[stage].min_volume))
        weights = dict(combos[stage].weights)
        weights.update({k: float(v) for k, v in w.items()})
        combos[stage] = ComboSpec(stage, weights, dest, min_volume)
    blueprint = default_blueprint()
    blueprint.update(dict(raw.get("blueprint", {})))
    try:
        return EngineConfig(
            path=path,
            sources=sources,
            internal_cidrs=list(eng.get("internal_cidrs", ["10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16"])),
            identity_map_path=_resolve(base, eng.get("identity_map")),
            results_dir=_resolve(base, eng.get("results_dir", "results")),
            cidr_labels=dict(raw.get("cidr_labels", {})),
            ports=ports,
            window_days=int(eng.get("window_days", 28)),
            history_days=int(eng.get("history_days", 28)),
            min_clients=int(ctx.get("min_clients", 10)),
            gate=RegularityGate(
                float(ctx.get("min_active_fraction", 0.8)), float(ctx.get("max_cv", 0.5))
            ),
            monitor=MonitorConfig(**mon),
            combos=combos,
            link=LinkConfig(**dict(raw.get("link", {}))),
            blueprint=blueprint,
            seed=int(eng.get("seed", 0)),
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: Path | str) -> EngineConfig:
    path = Path(path)
    return parse_config(_load_toml(path), path)


def validate_config(path: Path | str) -> list[str]:
    """All problems found in a config file; an empty list means valid.

    Unlike load_config this keeps going after the first problem where it can.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    raw = _load_toml(path)
    diags: list[str] = []
    base = path.parent

    for kind, src in dict(raw.get("sources", {})).items():
        if kind not in SOURCE_KINDS:
            diags.append(f"sources: unknown source kind {kind!r}")
            continue
        if "root" not in src:
            diags.append(f"sources.{kind}: missing root")
        elif not _resolve(base, src["root"]).is_dir():
            diags.append(f"sources.{kind}: root {src['root']!r} is not a directory")
        schema = src.get("schema")
        if schema is not None:
            names = []
            for col in schema:
                if len(col) != 2 or col[1] not in COLUMN_KINDS:
                    diags.append(f"sources.{kind}: bad schema column {col!r}")
                else:
                    names.append(col[0])
            missing = [f for f in REQUIRED_FIELDS[kind] if f not in names]
            if missing:
                diags.append(f"sources.{kind}: schema lacks required columns {missing}")
    if not raw.get("sources"):
        diags.append("sources: no log sources configured")

    eng = dict(raw.get("engine", {}))
    for c in eng.get("internal_cidrs", []):
        try:
            ipaddress.ip_network(c, strict=False)
        except ValueError:
            diags.append(f"engine.internal_cidrs: bad CIDR {c!r}")
    for c in dict(raw.get("cidr_labels", {})):
        try:
            ipaddress.ip_network(c, strict=False)
        except ValueError:
            diags.append(f"cidr_labels: bad CIDR {c!r}")
    if eng.get("identity_map"):
        try:
            load_identity_map(_resolve(base, eng["identity_map"]))
        except IdentityMapError as exc:
            diags.append(f"identity map: {exc}")
    for key in ("window_days", "history_days"):
        if key in eng and int(eng[key]) < 1:
            diags.append(f"engine.{key} must be >= 1")

    ports = dict(raw.get("ports", {}))
    try:
        data = _ports(ports.get("data", sorted(DEFAULT_DATA_PORTS)), "data")
        service = _ports(ports.get("service", sorted(DEFAULT_SERVICE_PORTS)), "service")
        overlap = data & service
        if overlap:
            diags.append(f"ports: {sorted(overlap)[:10]} are in both data and service groups")
    except (ConfigError, ValueError) as exc:
        diags.append(f"ports: {exc}")

    stage_by_name = {v: k for k, v in STAGE_NAMES.items()}
    for name, w in dict(raw.get("weights", {})).items():
        stage = stage_by_name.get(name)
        if stage is None:
            diags.append(f"weights: unknown stage table {name!r}")
            continue
        merged = {t: 1.0 for t in STAGE_TARGETS[stage]}
        for t, v in dict(w).items():
            if t in ("destination", "min_volume"):
                if not _nonneg(v):
                    diags.append(f"weights.{name}.{t}: must be a finite number >= 0, got {v!r}")
                continue
            if t not in STAGE_TARGETS[stage]:
                diags.append(f"weights.{name}: unknown target {t!r}")
                continue
            if not _nonneg(v):
                diags.append(f"weights.{name}.{t}: weight must be a finite number >= 0, got {v!r}")
                continue
            merged[t] = float(v)
        if not any(v > 0 for v in merged.values()):
            diags.append(f"weights.{name}: at least one weight must be positive")

    link = dict(raw.get("link", {}))
    unknown = set(link) - set(LinkConfig.__dataclass_fields__)
    if unknown:
        diags.append(f"link: unknown keys {sorted(unknown)}")
    if link.get("neighbors", "reachable") not in ("reachable", "one_hop"):
        diags.append("link.neighbors must be 'reachable' or 'one_hop'")
    mon = dict(raw.get("monitor", {}))
    unknown = set(mon) - set(MonitorConfig.__dataclass_fields__)
    if unknown:
        diags.append(f"monitor: unknown keys {sorted(unknown)}")
    for t in mon.get("targets", []):
        if t not in ALL_TARGETS:
            diags.append(f"monitor.targets: unknown target {t!r}")

    bp = default_blueprint()
    bp.update(dict(raw.get("blueprint", {})))
    try:
        Blueprint.from_dict(bp)
    except (TypeError, ValueError) as exc:
        diags.append(f"blueprint: {exc}")

    if not diags:
        try:
            parse_config(raw, path)
        except ConfigError as exc:
            diags.append(str(exc))
    return diags


def _nonneg(v: Any) -> bool:
    try:
        x = float(v)
    except (TypeError, ValueError):
        return False
    return math.isfinite(x) and x >= 0
