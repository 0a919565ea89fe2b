"""Two-step aggregation: per-day host activity, merged into windowed
monitoring-target tables plus context columns.

Distinct counts are exact (materialized sets), so merging daily aggregates
is a plain union/sum fold and equals aggregating the raw records directly.
"""

from __future__ import annotations

import datetime as dt
import gzip
import ipaddress
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .ingest import (
    DnsRecord,
    FlowRecord,
    InternalNetworks,
    PORTLESS,
    Record,
    as_ip,
    reverse_pointer_ip,
)

log = logging.getLogger(__name__)

INTERNAL, EXTERNAL, INBOUND = "internal", "external", "inbound"
DATA, SERVICE, GENERAL, NONE = "data", "service", "general", "none"
PORT_GROUPS = (DATA, SERVICE, GENERAL)

DEFAULT_DATA_PORTS = frozenset(
    {20, 21, 69, 80, 110, 139, 143, 156, 389, 443, 445, 636, 873, 993, 995, 1433, 1521,
     2049, 3306, 5432, 6379, 8080, 8443, 9200, 27017}
)
DEFAULT_SERVICE_PORTS = frozenset(
    {22, 23, 25, 53, 67, 68, 88, 123, 135, 137, 138, 161, 162, 514, 3389, 5900, 5985}
    | set(range(6660, 6671))
)


@dataclass(frozen=True)
class PortGroupPolicy:
    data_ports: frozenset[int] = DEFAULT_DATA_PORTS
    service_ports: frozenset[int] = DEFAULT_SERVICE_PORTS

    def __post_init__(self) -> None:
        overlap = self.data_ports & self.service_ports
        if overlap:
            raise ValueError(f"ports in both data and service groups: {sorted(overlap)[:10]}")

    def group(self, protocol: str, port: int) -> str:
        if protocol in PORTLESS:
            return NONE
        if port in self.data_ports:
            return DATA
        if port in self.service_ports:
            return SERVICE
        return GENERAL


@dataclass(frozen=True, slots=True)
class LabeledRecord:
    record: Record
    direction: str
    port_group: str


def is_internal(endpoint: str, internal: InternalNetworks) -> bool:
    """Machine names are internal; literal addresses are decided by CIDR."""
    if as_ip(endpoint) is None:
        return True
    return internal.contains(endpoint)


def label_record(record: Record, internal: InternalNetworks, policy: PortGroupPolicy) -> LabeledRecord:
    if isinstance(record, FlowRecord):
        if not is_internal(record.src, internal):
            return LabeledRecord(record, INBOUND, policy.group(record.protocol, record.dst_port))
        direction = INTERNAL if is_internal(record.dst, internal) else EXTERNAL
        return LabeledRecord(record, direction, policy.group(record.protocol, record.dst_port))
    if isinstance(record, DnsRecord):
        ip = reverse_pointer_ip(record.query_value) if record.query_type == "PTR" else None
        direction = INTERNAL if ip is not None and internal.contains(ip) else EXTERNAL
        return LabeledRecord(record, direction, NONE)
    return LabeledRecord(record, EXTERNAL, NONE)


def registrable_domain(host: str) -> str:
    parts = host.strip(".").lower().split(".")
    if len(parts) <= 2:
        return ".".join(parts)
    if len(parts[-1]) == 2 and parts[-2] in {"co", "com", "org", "net", "ac", "gov", "edu"}:
        return ".".join(parts[-3:])
    return ".".join(parts[-2:])


def external_net(ip: str) -> str:
    """Cluster an external address by /24 (IPv4) or /48 (IPv6)."""
    addr = ipaddress.ip_address(ip)
    prefix = 24 if addr.version == 4 else 48
    return str(ipaddress.ip_network(f"{ip}/{prefix}", strict=False))


# --------------------------------------------------------------------------
# activity (shared by daily and window aggregates)
# --------------------------------------------------------------------------


def _sets() -> dict[str, set]:
    return {g: set() for g in PORT_GROUPS}


@dataclass
class Activity:
    """Partial aggregates for one host: distinct-sets and byte sums.

    ``consumed[r]`` bytes the host received from internal remote r,
    ``sent[r]`` bytes it sent to r; ``uploaded``/``downloaded`` are proxy
    volumes per registrable domain; ``ext_sent``/``ext_received`` are flow
    volumes per external /24.
    """

    ips: set[str] = field(default_factory=set)
    ips_by_group: dict[str, set[str]] = field(default_factory=_sets)
    ports_by_group: dict[str, set[tuple[str, int]]] = field(default_factory=_sets)
    ptr: set[str] = field(default_factory=set)
    consumed: dict[str, int] = field(default_factory=dict)
    sent: dict[str, int] = field(default_factory=dict)
    uploaded: dict[str, int] = field(default_factory=dict)
    downloaded: dict[str, int] = field(default_factory=dict)
    ext_sent: dict[str, int] = field(default_factory=dict)
    ext_received: dict[str, int] = field(default_factory=dict)
    initiated: int = 0

    def merge(self, other: "Activity") -> "Activity":
        out = Activity(
            ips=self.ips | other.ips,
            ips_by_group={g: self.ips_by_group[g] | other.ips_by_group[g] for g in PORT_GROUPS},
            ports_by_group={g: self.ports_by_group[g] | other.ports_by_group[g] for g in PORT_GROUPS},
            ptr=self.ptr | other.ptr,
            initiated=self.initiated + other.initiated,
        )
        for name in ("consumed", "sent", "uploaded", "downloaded", "ext_sent", "ext_received"):
            a, b = getattr(self, name), getattr(other, name)
            merged = dict(a)
            for k, v in b.items():
                merged[k] = merged.get(k, 0) + v
            setattr(out, name, merged)
        return out

    def to_dict(self) -> dict:
        return {
            "ips": sorted(self.ips),
            "ips_by_group": {g: sorted(s) for g, s in self.ips_by_group.items()},
            "ports_by_group": {g: sorted([list(p) for p in s]) for g, s in self.ports_by_group.items()},
            "ptr": sorted(self.ptr),
            "consumed": dict(sorted(self.consumed.items())),
            "sent": dict(sorted(self.sent.items())),
            "uploaded": dict(sorted(self.uploaded.items())),
            "downloaded": dict(sorted(self.downloaded.items())),
            "ext_sent": dict(sorted(self.ext_sent.items())),
            "ext_received": dict(sorted(self.ext_received.items())),
            "initiated": self.initiated,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Activity":
        return cls(
            ips=set(d["ips"]),
            ips_by_group={g: set(v) for g, v in d["ips_by_group"].items()},
            ports_by_group={g: {(a, int(b)) for a, b in v} for g, v in d["ports_by_group"].items()},
            ptr=set(d["ptr"]),
            consumed={k: int(v) for k, v in d["consumed"].items()},
            sent={k: int(v) for k, v in d["sent"].items()},
            uploaded={k: int(v) for k, v in d["uploaded"].items()},
            downloaded={k: int(v) for k, v in d["downloaded"].items()},
            ext_sent={k: int(v) for k, v in d["ext_sent"].items()},
            ext_received={k: int(v) for k, v in d["ext_received"].items()},
            initiated=int(d["initiated"]),
        )


def _add(d: dict[str, int], key: str, value: int) -> None:
    d[key] = d.get(key, 0) + value


def accumulate(records: Iterable[LabeledRecord]) -> dict[str, Activity]:
    """Aggregate labeled records into per-host activity (no day check)."""
    hosts: dict[str, Activity] = {}

    def act(h: str) -> Activity:
        a = hosts.get(h)
        if a is None:
            a = hosts[h] = Activity()
        return a

    for lr in records:
        r = lr.record
        if isinstance(r, FlowRecord):
            if lr.direction == INBOUND:
                # external peer opened the connection; the internal side published bytes_received
                b = act(r.dst)
                net = external_net(r.src)
                _add(b.ext_sent, net, r.bytes_received)
                _add(b.ext_received, net, r.bytes_sent)
            elif lr.direction == INTERNAL:
                if r.src == r.dst:
                    continue
                a = act(r.src)
                a.initiated += 1
                a.ips.add(r.dst)
                if lr.port_group in PORT_GROUPS:
                    a.ips_by_group[lr.port_group].add(r.dst)
                    a.ports_by_group[lr.port_group].add((r.dst, r.dst_port))
                _add(a.consumed, r.dst, r.bytes_received)
                _add(a.sent, r.dst, r.bytes_sent)
                if r.bytes_received > 0:
                    # an unanswered probe is not data the destination took in
                    b = act(r.dst)
                    _add(b.consumed, r.src, r.bytes_sent)
                    _add(b.sent, r.src, r.bytes_received)
            else:
                a = act(r.src)
                a.initiated += 1
                net = external_net(r.dst)
                _add(a.ext_sent, net, r.bytes_sent)
                _add(a.ext_received, net, r.bytes_received)
        elif isinstance(r, DnsRecord):
            a = act(r.src)
            a.initiated += 1
            if r.query_type == "PTR" and lr.direction == INTERNAL:
                a.ptr.add(r.query_value)
        else:
            a = act(r.src)
            a.initiated += 1
            dom = registrable_domain(r.external_host)
            _add(a.uploaded, dom, r.bytes_uploaded)
            _add(a.downloaded, dom, r.bytes_downloaded)
    return hosts


@dataclass
class DailyAggregate:
    day: dt.date
    host: str
    activity: Activity

    def to_dict(self) -> dict:
        return {"day": self.day.isoformat(), "host": self.host, "activity": self.activity.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DailyAggregate":
        return cls(dt.date.fromisoformat(d["day"]), d["host"], Activity.from_dict(d["activity"]))


class MixedDayError(ValueError):
    pass


def aggregate_day(records: Sequence[LabeledRecord]) -> list[DailyAggregate]:
    """One DailyAggregate per host touched by the records of a single UTC day."""
    if not records:
        return []
    days = {lr.record.timestamp.astimezone(dt.timezone.utc).date() for lr in records}
    if len(days) != 1:
        raise MixedDayError(f"records span {len(days)} days: {sorted(days)[:3]}...")
    day = days.pop()
    return [DailyAggregate(day, h, a) for h, a in sorted(accumulate(records).items())]


def merge_dailies(dailies: Iterable[DailyAggregate]) -> dict[str, Activity]:
    out: dict[str, Activity] = {}
    for d in dailies:
        cur = out.get(d.host)
        out[d.host] = d.activity if cur is None else cur.merge(d.activity)
    return out


# --------------------------------------------------------------------------
# monitoring targets
# --------------------------------------------------------------------------

HOST_TARGETS = (
    "recon_ips",
    "recon_ips_data",
    "recon_ips_service",
    "recon_ips_general",
    "recon_ptr",
    "recon_ports_data",
    "recon_ports_service",
    "recon_ports_general",
)
COLLECT = "collect_bytes"
EXFIL_PROXY = "exfil_proxy_bytes"
EXFIL_FLOW = "exfil_flow_bytes"
PAIR_TARGETS = (COLLECT, EXFIL_PROXY, EXFIL_FLOW)

# pair target -> (value field, symmetric-context field)
PAIR_FIELDS = {
    COLLECT: ("consumed", "sent"),
    EXFIL_PROXY: ("uploaded", "downloaded"),
    EXFIL_FLOW: ("ext_sent", "ext_received"),
}


def host_target_values(a: Activity) -> dict[str, int]:
    out = {"recon_ips": len(a.ips), "recon_ptr": len(a.ptr)}
    for g in PORT_GROUPS:
        out[f"recon_ips_{g}"] = len(a.ips_by_group[g])
        out[f"recon_ports_{g}"] = len(a.ports_by_group[g])
    return out


def pair_target_values(a: Activity, target: str) -> dict[str, int]:
    return dict(getattr(a, PAIR_FIELDS[target][0]))


@dataclass
class WindowTable:
    """Target values for every active host over one window."""

    window: tuple[dt.date, dt.date]
    host_values: dict[str, dict[str, int]]
    pair_values: dict[str, dict[tuple[str, str], int]]
    pair_symmetric: dict[str, dict[tuple[str, str], int]]
    activity: dict[str, Activity]


def aggregate_window(
    dailies: Iterable[DailyAggregate], window: tuple[dt.date, dt.date]
) -> WindowTable:
    """Merge the daily aggregates falling in the window (gaps allowed)."""
    first, last = window
    merged = merge_dailies(d for d in dailies if first <= d.day <= last)
    return window_table(merged, window)


def window_table(merged: Mapping[str, Activity], window: tuple[dt.date, dt.date]) -> WindowTable:
    host_values = {h: host_target_values(a) for h, a in sorted(merged.items()) if a.initiated > 0}
    pair_values: dict[str, dict[tuple[str, str], int]] = {}
    pair_sym: dict[str, dict[tuple[str, str], int]] = {}
    for t in PAIR_TARGETS:
        vf, sf = PAIR_FIELDS[t]
        pv, ps = {}, {}
        for h in host_values:
            a = merged[h]
            vals, sym = getattr(a, vf), getattr(a, sf)
            for r in sorted(vals):
                pv[(h, r)] = vals[r]
                ps[(h, r)] = sym.get(r, 0)
        pair_values[t] = pv
        pair_sym[t] = ps
    return WindowTable(window, host_values, pair_values, pair_sym, dict(merged))


# --------------------------------------------------------------------------
# context
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CommonDestinationStats:
    destination: str
    client_count: int
    median_bytes: float
    dispersion: float


def common_destinations(
    pair_values: Mapping[tuple[str, str], int], min_clients: int = 10
) -> dict[str, CommonDestinationStats]:
    """Peer statistics for destinations contacted by at least ``min_clients`` hosts."""
    per_dest: dict[str, list[float]] = {}
    for (h, r), v in pair_values.items():
        if v > 0:
            per_dest.setdefault(r, []).append(float(v))
    out = {}
    for dest, vols in sorted(per_dest.items()):
        if len(vols) >= min_clients:
            q1, med, q3 = np.percentile(vols, [25, 50, 75])
            out[dest] = CommonDestinationStats(dest, len(vols), float(med), float(q3 - q1))
    return out


@dataclass(frozen=True)
class RegularityGate:
    min_active_fraction: float = 0.8
    max_cv: float = 0.5

    def is_regular(self, daily: Sequence[float]) -> bool:
        v = np.asarray(daily, dtype=np.float64)
        if len(v) == 0:
            return False
        active = np.count_nonzero(v > 0) / len(v)
        if active < self.min_active_fraction:
            return False
        mean = v.mean()
        if mean <= 0:
            return False
        return float(v.std() / mean) <= self.max_cv


@dataclass
class HistoryValue:
    value: float
    regular: bool


def days_in(window: tuple[dt.date, dt.date]) -> list[dt.date]:
    first, last = window
    return [first + dt.timedelta(days=i) for i in range((last - first).days + 1)]


def compute_history(
    dailies_by_day: Mapping[dt.date, Mapping[str, Activity]],
    history_window: tuple[dt.date, dt.date],
    gate: RegularityGate,
) -> tuple[dict[tuple[str, str], HistoryValue], dict[str, dict[tuple[str, str], HistoryValue]]]:
    """History values for host targets and pair targets, with the regularity verdict.

    The value is the target aggregated over the history window; the verdict
    looks at the day-by-day series (days without activity count as zero).
    """
    days = days_in(history_window)
    merged = merge_dailies(
        DailyAggregate(d, h, a) for d in days for h, a in sorted(dailies_by_day.get(d, {}).items())
    )
    table = window_table(merged, history_window)
    host_daily: dict[tuple[str, str], list[float]] = {}
    pair_daily: dict[str, dict[tuple[str, str], list[float]]] = {t: {} for t in PAIR_TARGETS}
    n = len(days)
    for i, d in enumerate(days):
        for h, a in dailies_by_day.get(d, {}).items():
            if h in table.host_values:
                for t, v in host_target_values(a).items():
                    host_daily.setdefault((h, t), [0.0] * n)[i] = float(v)
            for t in PAIR_TARGETS:
                for r, v in pair_target_values(a, t).items():
                    pair_daily[t].setdefault((h, r), [0.0] * n)[i] = float(v)
    hosts = {}
    for h, vals in table.host_values.items():
        for t, v in vals.items():
            series = host_daily.get((h, t), [0.0] * n)
            hosts[(h, t)] = HistoryValue(float(v), gate.is_regular(series))
    pairs: dict[str, dict[tuple[str, str], HistoryValue]] = {}
    for t in PAIR_TARGETS:
        pairs[t] = {}
        for key, v in table.pair_values[t].items():
            series = pair_daily[t].get(key, [0.0] * n)
            pairs[t][key] = HistoryValue(float(v), gate.is_regular(series))
    return hosts, pairs


class CidrLabeler:
    """Maps a machine name (via its leased addresses) or address to a CIDR label."""

    def __init__(self, labels: Mapping[str, str], addresses: Callable[[str], list[str]]):
        self._nets = sorted(
            ((ipaddress.ip_network(c, strict=False), lab) for c, lab in labels.items()),
            key=lambda e: -e[0].prefixlen,
        )
        self._addresses = addresses
        self._cache: dict[str, str] = {}

    def ip_of(self, name: str) -> str | None:
        if as_ip(name) is not None:
            return name
        addrs = self._addresses(name)
        return addrs[0] if addrs else None

    def label(self, name: str) -> str:
        hit = self._cache.get(name)
        if hit is not None:
            return hit
        out = "unlabeled"
        ip = self.ip_of(name)
        if ip is not None:
            addr = ipaddress.ip_address(ip)
            for net, lab in self._nets:
                if addr in net:
                    out = lab
                    break
        self._cache[name] = out
        return out

    def subnet(self, name: str) -> str:
        """Fig.-7-style address cluster of an internal machine, e.g. '10.42.24.*'."""
        ip = self.ip_of(name)
        if ip is None or ipaddress.ip_address(ip).version != 4:
            return "unknown"
        return ".".join(ip.split(".")[:3]) + ".*"


# --------------------------------------------------------------------------
# persistence: one file per (source, day) plus a manifest
# --------------------------------------------------------------------------


def write_dailies(path: Path, dailies: Sequence[DailyAggregate]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with gzip.open(tmp, "wt", encoding="utf-8") as fh:
        for d in dailies:
            fh.write(json.dumps(d.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    tmp.replace(path)


def read_dailies(path: Path) -> list[DailyAggregate]:
    with gzip.open(path, "rt", encoding="utf-8") as fh:
        return [DailyAggregate.from_dict(json.loads(line)) for line in fh if line.strip()]


def window_bounds(day: dt.date, window_days: int, history_days: int):
    """(window, history_window) for the window ending on ``day``."""
    window = (day - dt.timedelta(days=window_days - 1), day)
    history = (window[0] - dt.timedelta(days=history_days), window[0] - dt.timedelta(days=1))
    return window, history


# --------------------------------------------------------------------------
# activity profiles: targets + context for one scoring window
# --------------------------------------------------------------------------

NAN = float("nan")


@dataclass
class ProfileSet:
    """Per-host rows (recon targets) and per-pair rows (flow targets) for one window.

    History values are carried with their regularity verdict; the monitor
    decides how the verdict gates model inputs.
    """

    day: dt.date
    window: tuple[dt.date, dt.date]
    history_window: tuple[dt.date, dt.date]
    host_rows: list[dict]
    pair_rows: dict[str, list[dict]]
    gap_days: list[dt.date]
    destinations: dict[str, dict[str, CommonDestinationStats]]

    def hosts(self) -> list[str]:
        return [r["host"] for r in self.host_rows]


def build_profiles(
    dailies_by_day: Mapping[dt.date, Mapping[str, Activity]],
    day: dt.date,
    labeler: CidrLabeler,
    window_days: int = 28,
    history_days: int = 28,
    gate: RegularityGate = RegularityGate(),
    min_clients: int = 10,
) -> ProfileSet:
    """Window targets for the window ending on ``day`` plus context columns.

    ``dailies_by_day`` maps day -> host -> Activity; missing days are zero
    activity and are listed in ``gap_days``.
    """
    window, history = window_bounds(day, window_days, history_days)
    wdays = days_in(window)
    merged = merge_dailies(
        DailyAggregate(d, h, a) for d in wdays for h, a in sorted(dailies_by_day.get(d, {}).items())
    )
    table = window_table(merged, window)
    gaps = [d for d in wdays if d not in dailies_by_day]
    host_hist, pair_hist = compute_history(dailies_by_day, history, gate)

    host_rows = []
    for h, vals in table.host_values.items():
        row: dict = {"host": h, "cidr_label": labeler.label(h), "gap_days": len(gaps)}
        row.update(vals)
        for t in HOST_TARGETS:
            hv = host_hist.get((h, t))
            row[f"history_{t}"] = hv.value if hv else NAN
            row[f"history_{t}_regular"] = bool(hv and hv.regular)
        host_rows.append(row)

    pair_rows: dict[str, list[dict]] = {}
    dests: dict[str, dict[str, CommonDestinationStats]] = {}
    for t in PAIR_TARGETS:
        common = common_destinations(table.pair_values[t], min_clients)
        dests[t] = common
        rows = []
        for (h, r), v in table.pair_values[t].items():
            if v <= 0:
                continue
            hv = pair_hist[t].get((h, r))
            cd = common.get(r)
            rows.append(
                {
                    "host": h,
                    "remote": r,
                    "cidr_label": labeler.label(h),
                    "remote_group": labeler.subnet(r) if t == COLLECT else ("domain" if t == EXFIL_PROXY else r),
                    "value": v,
                    "symmetric": table.pair_symmetric[t][(h, r)],
                    "history": hv.value if hv else NAN,
                    "history_regular": bool(hv and hv.regular),
                    "dest_clients": cd.client_count if cd else NAN,
                    "dest_median": cd.median_bytes if cd else NAN,
                    "dest_iqr": cd.dispersion if cd else NAN,
                    "gap_days": len(gaps),
                }
            )
        pair_rows[t] = rows
    return ProfileSet(day, window, history, host_rows, pair_rows, gaps, dests)
