"""Date-partitioned log ingestion, parsing, standardization and identity mapping."""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import gzip
import io
import ipaddress
import logging
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence, Union

log = logging.getLogger(__name__)

FLOW, DNS, PROXY = "flow", "dns", "proxy"
SOURCE_KINDS = (FLOW, DNS, PROXY)
COLUMN_KINDS = ("string", "integer", "timestamp", "ip-address")
PROTOCOLS = ("TCP", "UDP", "ICMP", "SNMP")
PORTLESS = ("ICMP",)
QUERY_TYPES = ("A", "AAAA", "PTR")

REQUIRED_FIELDS = {
    FLOW: ("timestamp", "src", "dst", "dst_port", "protocol", "bytes_sent", "bytes_received"),
    DNS: ("timestamp", "src", "query_type", "query_value"),
    PROXY: ("timestamp", "src", "external_host", "bytes_uploaded", "bytes_downloaded"),
}

DEFAULT_SCHEMAS = {
    FLOW: (
        ("timestamp", "timestamp"),
        ("src", "ip-address"),
        ("dst", "ip-address"),
        ("dst_port", "integer"),
        ("protocol", "string"),
        ("bytes_sent", "integer"),
        ("bytes_received", "integer"),
    ),
    DNS: (
        ("timestamp", "timestamp"),
        ("src", "ip-address"),
        ("query_type", "string"),
        ("query_value", "string"),
    ),
    PROXY: (
        ("timestamp", "timestamp"),
        ("src", "ip-address"),
        ("external_host", "string"),
        ("bytes_uploaded", "integer"),
        ("bytes_downloaded", "integer"),
    ),
}

_DAY_RE = re.compile(r"^\d{8}$")


class ConfigError(ValueError):
    """Fatal configuration problem (bad paths, schemas, CIDRs, identity map)."""


class IdentityMapError(ConfigError):
    pass


class PartitionError(IOError):
    def __init__(self, path: Path, cause: Exception):
        super().__init__(f"cannot read partition {path}: {cause}")
        self.path = path


@dataclass(frozen=True)
class LogSourceSpec:
    source_kind: str
    root_path: Path
    field_schema: tuple[tuple[str, str], ...]
    delimiter: str = ","

    def __post_init__(self) -> None:
        if self.source_kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source kind {self.source_kind!r}")
        names = [n for n, _ in self.field_schema]
        for name, kind in self.field_schema:
            if kind not in COLUMN_KINDS:
                raise ConfigError(f"column {name!r} has unknown kind {kind!r}")
        missing = [f for f in REQUIRED_FIELDS[self.source_kind] if f not in names]
        if missing:
            raise ConfigError(f"{self.source_kind} schema lacks required columns {missing}")

    @property
    def column_names(self) -> list[str]:
        return [n for n, _ in self.field_schema]


@dataclass(frozen=True, slots=True)
class FlowRecord:
    timestamp: dt.datetime
    src: str
    dst: str
    dst_port: int
    protocol: str
    bytes_sent: int
    bytes_received: int


@dataclass(frozen=True, slots=True)
class DnsRecord:
    timestamp: dt.datetime
    src: str
    query_type: str
    query_value: str


@dataclass(frozen=True, slots=True)
class ProxyRecord:
    timestamp: dt.datetime
    src: str
    external_host: str
    bytes_uploaded: int
    bytes_downloaded: int


Record = Union[FlowRecord, DnsRecord, ProxyRecord]


@dataclass
class ParseResult:
    path: Path
    records: list[Record]
    reject_count: int
    line_count: int

    @property
    def corrupt(self) -> bool:
        return self.line_count > 0 and self.reject_count * 2 > self.line_count


# --------------------------------------------------------------------------
# partitions
# --------------------------------------------------------------------------


def list_partitions(
    spec: LogSourceSpec,
    day_range: tuple[dt.date, dt.date],
    skipped: list[str] | None = None,
) -> list[tuple[dt.date, Path]]:
    """Every file under ``<root>/<YYYYMMDD>/`` for days in the inclusive range,
    sorted by (date, path). Malformed folder names are skipped and appended
    to ``skipped``."""
    root = Path(spec.root_path)
    if not root.is_dir():
        raise ConfigError(f"log root {root} is not a readable directory")
    first, last = day_range
    out = []
    try:
        children = sorted(root.iterdir())
    except OSError as exc:
        raise ConfigError(f"cannot list {root}: {exc}") from exc
    for child in children:
        if not child.is_dir():
            continue
        day = _parse_day(child.name)
        if day is None:
            log.warning("skipping malformed day folder %s", child)
            if skipped is not None:
                skipped.append(child.name)
            continue
        if first <= day <= last:
            out.extend((day, f) for f in sorted(child.iterdir()) if f.is_file())
    return sorted(out, key=lambda e: (e[0], str(e[1])))


def _parse_day(name: str) -> dt.date | None:
    if not _DAY_RE.match(name):
        return None
    try:
        return dt.datetime.strptime(name, "%Y%m%d").date()
    except ValueError:
        return None


def day_folder(day: dt.date) -> str:
    return day.strftime("%Y%m%d")


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def parse_timestamp(text: str) -> dt.datetime:
    text = text.strip()
    if text.endswith("Z") or text.endswith("z"):
        text = text[:-1] + "+00:00"
    ts = dt.datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts


def _convert(value: str, kind: str):
    if kind == "string":
        return value
    if kind == "integer":
        return int(value)
    if kind == "timestamp":
        return parse_timestamp(value)
    return str(ipaddress.ip_address(value.strip()))


def _build(kind: str, f: dict) -> Record:
    if kind == FLOW:
        port = f["dst_port"]
        proto = f["protocol"].strip().upper()
        proto = proto if proto in PROTOCOLS else "other"
        if proto in PORTLESS:
            port = 0
        elif not 0 < port <= 65535:
            raise ValueError(f"port {port} out of range")
        if f["bytes_sent"] < 0 or f["bytes_received"] < 0:
            raise ValueError("negative byte count")
        return FlowRecord(f["timestamp"], f["src"], f["dst"], port, proto, f["bytes_sent"], f["bytes_received"])
    if kind == DNS:
        qt = f["query_type"].strip().upper()
        qt = qt if qt in QUERY_TYPES else "other"
        qv = f["query_value"].strip()
        if not qv:
            raise ValueError("empty query value")
        if qt == "PTR" and reverse_pointer_ip(qv) is None:
            raise ValueError(f"PTR query {qv!r} is not a reversed address")
        return DnsRecord(f["timestamp"], f["src"], qt, qv)
    host = f["external_host"].strip()
    if not host:
        raise ValueError("empty external host")
    if f["bytes_uploaded"] < 0 or f["bytes_downloaded"] < 0:
        raise ValueError("negative byte count")
    return ProxyRecord(f["timestamp"], f["src"], host, f["bytes_uploaded"], f["bytes_downloaded"])


def _open_text(path: Path) -> io.TextIOBase:
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def parse_partition(spec: LogSourceSpec, path: Path) -> ParseResult:
    """Parse one partition file; malformed lines are counted, never fatal.

    A first line equal to the schema's column names is treated as a header.
    """
    names = spec.column_names
    kinds = dict(spec.field_schema)
    header = spec.delimiter.join(names)
    records: list[Record] = []
    rejects = 0
    lines = 0
    try:
        with _open_text(Path(path)) as fh:
            for i, raw in enumerate(fh):
                line = raw.rstrip("\r\n")
                if i == 0 and line.strip() == header:
                    continue
                if not line.strip():
                    continue
                lines += 1
                try:
                    parts = next(csv.reader([line], delimiter=spec.delimiter))
                    if len(parts) != len(names):
                        raise ValueError(f"expected {len(names)} fields, got {len(parts)}")
                    fields = {n: _convert(v, kinds[n]) for n, v in zip(names, parts)}
                    records.append(_build(spec.source_kind, fields))
                except (ValueError, KeyError):
                    rejects += 1
    except (OSError, EOFError, UnicodeDecodeError) as exc:
        raise PartitionError(Path(path), exc) from exc
    result = ParseResult(Path(path), records, rejects, lines)
    if result.corrupt:
        log.warning("partition %s flagged corrupt: %d of %d lines rejected", path, rejects, lines)
    return result


# --------------------------------------------------------------------------
# identity mapping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Lease:
    ip: str
    name: str
    valid_from: dt.datetime
    valid_to: dt.datetime


@dataclass
class IdentityStats:
    unresolved: int = 0


class IdentityMap:
    """Immutable (ip, interval) -> stable machine name lookup.

    Overlapping leases for the same address are rejected at construction.
    """

    def __init__(self, leases: Iterable[Lease] = ()):
        by_ip: dict[str, list[Lease]] = {}
        for lease in leases:
            if not lease.valid_from < lease.valid_to:
                raise IdentityMapError(
                    f"lease for {lease.ip} has valid_from >= valid_to ({lease.valid_from} .. {lease.valid_to})"
                )
            ip = str(ipaddress.ip_address(lease.ip))
            by_ip.setdefault(ip, []).append(replace(lease, ip=ip, name=lease.name.strip().lower()))
        self._by_ip: dict[str, tuple[Lease, ...]] = {}
        self._starts: dict[str, list[dt.datetime]] = {}
        for ip, ls in by_ip.items():
            ls.sort(key=lambda l: l.valid_from)
            for a, b in zip(ls, ls[1:]):
                if b.valid_from < a.valid_to:
                    raise IdentityMapError(
                        f"overlapping leases for {ip}: {a.name} [{a.valid_from.isoformat()} .. "
                        f"{a.valid_to.isoformat()}) and {b.name} [{b.valid_from.isoformat()} .. "
                        f"{b.valid_to.isoformat()})"
                    )
            self._by_ip[ip] = tuple(ls)
            self._starts[ip] = [l.valid_from for l in ls]
        self._names: dict[str, list[str]] = {}
        for ip, ls in self._by_ip.items():
            for l in ls:
                self._names.setdefault(l.name, [])
                if ip not in self._names[l.name]:
                    self._names[l.name].append(ip)

    @property
    def leases(self) -> list[Lease]:
        return [l for ip in sorted(self._by_ip) for l in self._by_ip[ip]]

    def lookup(self, ip: str, at: dt.datetime) -> str | None:
        ls = self._by_ip.get(ip)
        if not ls:
            return None
        k = bisect.bisect_right(self._starts[ip], at) - 1
        if k >= 0 and ls[k].valid_from <= at < ls[k].valid_to:
            return ls[k].name
        return None

    def addresses(self, name: str) -> list[str]:
        return list(self._names.get(name, []))

    def names(self) -> list[str]:
        return sorted(self._names)


def load_identity_map(path: Path) -> IdentityMap:
    """CSV with columns ip,name,from,to (RFC 3339); a header row is optional."""
    leases = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row or (i == 0 and row[0].strip().lower() == "ip"):
                    continue
                if len(row) != 4:
                    raise IdentityMapError(f"{path}:{i + 1}: expected 4 fields")
                try:
                    leases.append(
                        Lease(row[0].strip(), row[1], parse_timestamp(row[2]), parse_timestamp(row[3]))
                    )
                except ValueError as exc:
                    raise IdentityMapError(f"{path}:{i + 1}: {exc}") from exc
    except OSError as exc:
        raise IdentityMapError(f"cannot read identity map {path}: {exc}") from exc
    return IdentityMap(leases)


def write_identity_map(idmap: IdentityMap, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ip", "name", "from", "to"])
        for l in idmap.leases:
            w.writerow([l.ip, l.name, _rfc3339(l.valid_from), _rfc3339(l.valid_to)])


def _rfc3339(ts: dt.datetime) -> str:
    return ts.astimezone(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class InternalNetworks:
    """Configured internal CIDR ranges; the sole internal/external criterion."""

    def __init__(self, cidrs: Sequence[str]):
        try:
            self.networks = tuple(ipaddress.ip_network(c, strict=False) for c in cidrs)
        except ValueError as exc:
            raise ConfigError(f"bad CIDR in internal ranges: {exc}") from exc
        self._cache: dict[str, bool] = {}

    def contains(self, value: str) -> bool:
        hit = self._cache.get(value)
        if hit is None:
            ip = as_ip(value)
            hit = ip is not None and any(ip in n for n in self.networks)
            self._cache[value] = hit
        return hit


@lru_cache(maxsize=65536)
def as_ip(value: str):
    try:
        return ipaddress.ip_address(value)
    except ValueError:
        return None


def reverse_pointer_ip(query: str) -> str | None:
    """'5.0.0.10.in-addr.arpa' -> '10.0.0.5'; None if not an IPv4 reverse name."""
    q = query.strip().lower().rstrip(".")
    suffix = ".in-addr.arpa"
    if not q.endswith(suffix):
        return None
    parts = q[: -len(suffix)].split(".")
    if len(parts) != 4:
        return None
    ip = ".".join(reversed(parts))
    return ip if as_ip(ip) is not None else None


def resolve_identity(
    ip: str, at: dt.datetime, idmap: IdentityMap, stats: IdentityStats | None = None
) -> str:
    """Lease-matched machine name, or the literal address when no lease matches."""
    name = idmap.lookup(ip, at)
    if name is None:
        if stats is not None:
            stats.unresolved += 1
        return ip
    return name


def _endpoint(value: str, at: dt.datetime, idmap: IdentityMap, internal: InternalNetworks, stats) -> str:
    ip = as_ip(value)
    if ip is None:
        return value.strip().lower()
    text = str(ip)
    if internal.contains(text):
        return resolve_identity(text, at, idmap, stats)
    return text


def _utc(ts: dt.datetime) -> dt.datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


def standardize(
    records: Sequence[Record],
    idmap: IdentityMap,
    internal: InternalNetworks,
    stats: IdentityStats | None = None,
) -> list[Record]:
    """UTC timestamps, lower-cased names/domains, internal IPs -> machine names."""
    out: list[Record] = []
    for r in records:
        ts = _utc(r.timestamp)
        src = _endpoint(r.src, ts, idmap, internal, stats)
        if isinstance(r, FlowRecord):
            dst = _endpoint(r.dst, ts, idmap, internal, stats)
            out.append(replace(r, timestamp=ts, src=src, dst=dst))
        elif isinstance(r, DnsRecord):
            out.append(replace(r, timestamp=ts, src=src, query_value=r.query_value.strip().lower().rstrip(".")))
        else:
            out.append(replace(r, timestamp=ts, src=src, external_host=r.external_host.strip().lower().rstrip(".")))
    return out


def read_day(
    spec: LogSourceSpec,
    day: dt.date,
    idmap: IdentityMap,
    internal: InternalNetworks,
    stats: IdentityStats | None = None,
) -> tuple[list[Record], list[ParseResult]]:
    """Parse and standardize every partition file of one source for one day."""
    results = [parse_partition(spec, p) for _, p in list_partitions(spec, (day, day))]
    records: list[Record] = []
    for res in results:
        records.extend(standardize(res.records, idmap, internal, stats))
    return records, results
