"""Synthetic flow/DNS/proxy corpora with injectable campaign activity.

The generator writes exactly the on-disk layout ingest reads
(``<root>/<source>/<YYYYMMDD>/<file>``) plus an identity-map CSV and a
ready-to-run engine config. Byte volumes are decimal (1 MB = 10**6 bytes).
"""

from __future__ import annotations

import datetime as dt
import gzip
import io
import ipaddress
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .ingest import DNS, FLOW, PROXY, ConfigError, IdentityMap, Lease, day_folder, write_identity_map

MB = 10**6
GB = 10**9
CLIENT, SERVER, BACKUP, INFRASTRUCTURE = "client", "server", "backup", "infrastructure"
ROLES = (CLIENT, SERVER, BACKUP, INFRASTRUCTURE)
SCAN, COLLECT, STAGE_MOVE, EXFIL = "scan", "collect", "stage_move", "exfil"
ACTION_KINDS = (SCAN, COLLECT, STAGE_MOVE, EXFIL)


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class LogNormal:
    median: float
    sigma: float

    def sample(self, rng: np.random.Generator) -> int:
        return int(round(self.median * math.exp(self.sigma * rng.standard_normal())))


@dataclass
class RoleProfile:
    """Per-role business-as-usual traffic."""

    request: LogNormal = LogNormal(40e3, 0.3)
    response: LogNormal = LogNormal(1.0 * MB, 0.3)
    flows_per_service: tuple[int, int] = (2, 3)
    upload: LogNormal = LogNormal(0.5 * MB, 0.3)
    download: LogNormal = LogNormal(5 * MB, 0.3)
    requests_per_domain: tuple[int, int] = (2, 3)
    pull: LogNormal = LogNormal(2 * GB, 0.15)
    peer_probability: float = 0.0
    ptr_probability: float = 0.1


DEFAULT_PROFILES = {
    CLIENT: RoleProfile(),
    SERVER: RoleProfile(request=LogNormal(20e3, 0.3), response=LogNormal(200e3, 0.3)),
    BACKUP: RoleProfile(pull=LogNormal(1.5 * GB, 0.15)),
    INFRASTRUCTURE: RoleProfile(request=LogNormal(5e3, 0.3), response=LogNormal(20e3, 0.3)),
}


@dataclass
class HostSpec:
    """One machine. ``services`` are (server name, port) pairs it uses every
    day; ``pulls_from`` are machines it copies data from daily; ``alt_ip`` is
    a second lease (e.g. VPN) used in the afternoons."""

    name: str
    role: str
    ip: str
    alt_ip: str | None = None
    services: list[tuple[str, int]] = field(default_factory=list)
    pulls_from: list[str] = field(default_factory=list)
    domains: list[str] = field(default_factory=list)
    external: list[tuple[str, int]] = field(default_factory=list)


@dataclass
class NetworkSpec:
    hosts: list[HostSpec]
    cidr_labels: dict[str, str] = field(default_factory=dict)
    internal_cidrs: list[str] = field(default_factory=lambda: ["10.0.0.0/8"])
    profiles: dict[str, RoleProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    start: dt.date = dt.date(2018, 4, 1)
    seed: int = 0
    infra_ports: tuple[int, ...] = (53, 88)

    def __post_init__(self) -> None:
        names = [h.name for h in self.hosts]
        if len(set(names)) != len(names):
            raise SimulationError("host names must be unique")
        for h in self.hosts:
            if h.role not in ROLES:
                raise SimulationError(f"host {h.name}: unknown role {h.role!r}")
        for role, p in self.profiles.items():
            for v in vars(p).values():
                if isinstance(v, LogNormal) and not (math.isfinite(v.median) and math.isfinite(v.sigma)):
                    raise SimulationError(f"role {role}: non-finite distribution parameter")

    def host(self, name: str) -> HostSpec:
        for h in self.hosts:
            if h.name == name:
                return h
        raise SimulationError(f"unknown host {name!r}")

    def profile(self, role: str) -> RoleProfile:
        return self.profiles.get(role, DEFAULT_PROFILES[role])


@dataclass(frozen=True)
class CampaignAction:
    """``day`` is a 0-based offset into the generated range."""

    day: int
    actor: str
    kind: str
    targets: tuple[str, ...] = ()
    count: int = 0
    ports: tuple[int, ...] = ()
    volume: int = 0
    source: str | None = None
    destination: str | None = None


@dataclass
class CampaignScript:
    actions: list[CampaignAction] = field(default_factory=list)

    def validate(self, spec: NetworkSpec, days: int) -> None:
        names = {h.name for h in spec.hosts}
        for a in self.actions:
            if a.kind not in ACTION_KINDS:
                raise SimulationError(f"unknown action kind {a.kind!r}")
            if a.actor not in names:
                raise SimulationError(f"campaign actor {a.actor!r} is not in the network")
            if not 0 <= a.day < days:
                raise SimulationError(f"action day {a.day} outside generated range 0..{days - 1}")
            if a.kind in (COLLECT, STAGE_MOVE) and a.source not in names:
                raise SimulationError(f"{a.kind} source {a.source!r} is not in the network")


# --------------------------------------------------------------------------
# corpus writing
# --------------------------------------------------------------------------


@dataclass
class Corpus:
    root: Path
    spec: NetworkSpec
    days: int

    def day(self, offset: int) -> dt.date:
        return self.spec.start + dt.timedelta(days=offset)

    @property
    def last_day(self) -> dt.date:
        return self.day(self.days - 1)

    def source_root(self, source: str) -> Path:
        return self.root / source

    @property
    def identity_map_path(self) -> Path:
        return self.root / "leases.csv"

    @property
    def config_path(self) -> Path:
        return self.root / "engine.toml"

    def count_records(self) -> int:
        n = 0
        for src in (FLOW, DNS, PROXY):
            for f in sorted(self.source_root(src).rglob("*.txt.gz")):
                with gzip.open(f, "rt") as fh:
                    n += sum(1 for line in fh if line.strip())
        return n


def _ts(day: dt.date, seconds: float) -> str:
    t = dt.datetime.combine(day, dt.time(), dt.timezone.utc) + dt.timedelta(seconds=int(seconds))
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _write(path: Path, lines: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
        gz.write("".join(l + "\n" for l in lines).encode("utf-8"))
    path.write_bytes(buf.getvalue())


OFFICE_HOURS = (8 * 3600, 13 * 3600)
VPN_HOURS = (13 * 3600, 20 * 3600)


def _ip_at(h: HostSpec, seconds: float) -> str:
    if h.alt_ip and seconds >= VPN_HOURS[0]:
        return h.alt_ip
    return h.ip


def _leases(spec: NetworkSpec, days: int) -> IdentityMap:
    start = dt.datetime.combine(spec.start, dt.time(), dt.timezone.utc)
    end = start + dt.timedelta(days=days)
    leases = []
    for h in spec.hosts:
        if h.alt_ip is None:
            leases.append(Lease(h.ip, h.name, start, end))
            continue
        for d in range(days):
            day0 = start + dt.timedelta(days=d)
            leases.append(Lease(h.ip, h.name, day0, day0 + dt.timedelta(seconds=VPN_HOURS[0])))
            leases.append(
                Lease(h.alt_ip, h.name, day0 + dt.timedelta(seconds=VPN_HOURS[0]), day0 + dt.timedelta(days=1))
            )
    return IdentityMap(leases)


def _reverse(ip: str) -> str:
    return ".".join(reversed(ip.split("."))) + ".in-addr.arpa"


def _host_day(spec: NetworkSpec, h: HostSpec, idx: int, offset: int, day: dt.date, infra: list[HostSpec]):
    """Business-as-usual records of one host for one day (flow, dns, proxy lines)."""
    rng = np.random.default_rng([spec.seed, offset, idx])
    prof = spec.profile(h.role)
    flows: list[tuple[float, str]] = []
    dns: list[tuple[float, str]] = []
    proxy: list[tuple[float, str]] = []
    lo, hi = OFFICE_HOURS[0], VPN_HOURS[1]

    def when() -> float:
        return float(rng.uniform(lo, hi))

    def flow(dst_ip: str, port: int, proto: str, sent: int, recv: int) -> None:
        t = when()
        flows.append((t, f"{_ts(day, t)},{_ip_at(h, t)},{dst_ip},{port},{proto},{max(sent, 0)},{max(recv, 0)}"))

    for inf in infra:
        if inf.name == h.name:
            continue
        for port in spec.infra_ports:
            flow(inf.ip, port, "UDP" if port == 53 else "TCP", 300, 600)
        t = when()
        dns.append((t, f"{_ts(day, t)},{_ip_at(h, t)},A,{inf.name}.corp.local"))
    for server, port in h.services:
        s = spec.host(server)
        for _ in range(int(rng.integers(prof.flows_per_service[0], prof.flows_per_service[1] + 1))):
            flow(s.ip, port, "TCP", prof.request.sample(rng), prof.response.sample(rng))
        t = when()
        dns.append((t, f"{_ts(day, t)},{_ip_at(h, t)},A,{server}.corp.local"))
    for src in h.pulls_from:
        s = spec.host(src)
        flow(s.ip, 873, "TCP", 2000, prof.pull.sample(rng))
    for ext_ip, port in h.external:
        flow(ext_ip, port, "TCP", prof.upload.sample(rng), prof.request.sample(rng))
    if prof.peer_probability > 0 and rng.random() < prof.peer_probability:
        peers = [p for p in spec.hosts if p.role == CLIENT and p.name != h.name]
        if peers:
            p = peers[int(rng.integers(len(peers)))]
            flow(p.ip, 445, "TCP", prof.request.sample(rng), prof.request.sample(rng))
    if h.services and rng.random() < prof.ptr_probability:
        server, _ = h.services[int(rng.integers(len(h.services)))]
        t = when()
        dns.append((t, f"{_ts(day, t)},{_ip_at(h, t)},PTR,{_reverse(spec.host(server).ip)}"))
    for dom in h.domains:
        t = when()
        dns.append((t, f"{_ts(day, t)},{_ip_at(h, t)},A,www.{dom}"))
        for _ in range(int(rng.integers(prof.requests_per_domain[0], prof.requests_per_domain[1] + 1))):
            t = when()
            proxy.append(
                (t, f"{_ts(day, t)},{_ip_at(h, t)},www.{dom},{prof.upload.sample(rng)},{prof.download.sample(rng)}")
            )
    return flows, dns, proxy


def generate_baseline(spec: NetworkSpec, days: int, out: Path | str) -> Corpus:
    """Write ``days`` days of business-as-usual logs under ``out``.

    Each (host, day) draws from its own seeded stream, so the corpus is a
    pure function of (spec, days).
    """
    if days < 1:
        raise SimulationError("days must be >= 1")
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for src in (FLOW, DNS, PROXY):
            (root / src).mkdir(exist_ok=True)
    except OSError as exc:
        raise SimulationError(f"cannot write corpus to {root}: {exc}") from exc
    corpus = Corpus(root, spec, days)
    infra = [h for h in spec.hosts if h.role == INFRASTRUCTURE]
    for offset in range(days):
        day = corpus.day(offset)
        per_source: dict[str, list[tuple[float, str]]] = {FLOW: [], DNS: [], PROXY: []}
        for idx, h in enumerate(spec.hosts):
            f, d, p = _host_day(spec, h, idx, offset, day, infra)
            per_source[FLOW] += f
            per_source[DNS] += d
            per_source[PROXY] += p
        for src, lines in per_source.items():
            if lines:
                lines.sort()
                _write(root / src / day_folder(day) / "part-00.txt.gz", [l for _, l in lines])
    write_identity_map(_leases(spec, days), corpus.identity_map_path)
    write_engine_config(corpus)
    return corpus


def write_engine_config(corpus: Corpus, extra: str = "") -> Path:
    spec = corpus.spec
    labels = "\n".join(f'"{c}" = "{l}"' for c, l in spec.cidr_labels.items())
    cidrs = ", ".join(f'"{c}"' for c in spec.internal_cidrs)
    text = f"""# generated by simgen
[engine]
internal_cidrs = [{cidrs}]
identity_map = "leases.csv"
results_dir = "results"
seed = {spec.seed}

[sources.flow]
root = "flow"

[sources.dns]
root = "dns"

[sources.proxy]
root = "proxy"

[cidr_labels]
{labels}
{extra}"""
    corpus.config_path.write_text(text, encoding="utf-8")
    return corpus.config_path


# --------------------------------------------------------------------------
# campaign injection
# --------------------------------------------------------------------------


def _scan_targets(spec: NetworkSpec, actor: HostSpec, count: int) -> list[str]:
    """``count`` internal addresses near the actor, skipping its own."""
    own = {actor.ip, actor.alt_ip}
    nets = [ipaddress.ip_network(c, strict=False) for c in spec.cidr_labels] or [
        ipaddress.ip_network(f"{actor.ip}/24", strict=False)
    ]
    out = []
    for net in nets:
        for ip in net.hosts():
            s = str(ip)
            if s not in own:
                out.append(s)
            if len(out) == count:
                return out
    if len(out) < count:
        raise SimulationError(f"only {len(out)} addresses available for a {count}-target scan")
    return out


def _chunks(volume: int, n: int) -> list[int]:
    base, rem = divmod(volume, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def action_lines(spec: NetworkSpec, corpus: Corpus, a: CampaignAction) -> dict[str, list[str]]:
    actor = spec.host(a.actor)
    day = corpus.day(a.day)
    t0 = OFFICE_HOURS[0] + 3600
    out: dict[str, list[str]] = {FLOW: [], DNS: [], PROXY: []}
    if a.kind == SCAN:
        targets = list(a.targets) or _scan_targets(spec, actor, a.count)
        ips = [spec.host(t).ip if not _is_ip(t) else t for t in targets]
        ports = a.ports or (22,)
        k = 0
        for ip in ips:
            for port in ports:
                out[FLOW].append(f"{_ts(day, t0 + k)},{actor.ip},{ip},{port},TCP,60,0")
                k += 1
    elif a.kind in (COLLECT, STAGE_MOVE):
        src = spec.host(a.source)
        for k, part in enumerate(_chunks(a.volume, 10)):
            out[FLOW].append(f"{_ts(day, t0 + 60 * k)},{actor.ip},{src.ip},445,TCP,2000,{part}")
    else:
        dest = a.destination or "filedrop.example"
        for k, part in enumerate(_chunks(a.volume, 10)):
            out[PROXY].append(f"{_ts(day, t0 + 60 * k)},{actor.ip},{dest},{part},1000")
    return out


def _is_ip(s: str) -> bool:
    try:
        ipaddress.ip_address(s)
        return True
    except ValueError:
        return False


def inject_campaign(corpus: Corpus, script: CampaignScript) -> Corpus:
    """Add one ``campaign.txt.gz`` per touched (source, day); existing files are not modified."""
    script.validate(corpus.spec, corpus.days)
    per_file: dict[Path, list[str]] = {}
    for a in script.actions:
        for src, lines in action_lines(corpus.spec, corpus, a).items():
            if lines:
                path = corpus.root / src / day_folder(corpus.day(a.day)) / "campaign.txt.gz"
                per_file.setdefault(path, []).extend(lines)
    for path, lines in sorted(per_file.items()):
        existing: list[str] = []
        if path.exists():
            with gzip.open(path, "rt") as fh:
                existing = [l.rstrip("\n") for l in fh if l.strip()]
        _write(path, existing + lines)
    return corpus


# --------------------------------------------------------------------------
# built-in scenario: the five-day multi-host campaign
# --------------------------------------------------------------------------

FIG6_DAYS = 56


def fig6_network(seed: int = 0) -> NetworkSpec:
    """20 hosts: laptop a (office + VPN leases), file server b, replication
    source c with replicas d and e, HR workstation f, ten more clients, two
    more servers, a backup server and an infrastructure host."""
    users, vpn, servers, infra = "10.42.24.0/24", "10.42.99.0/24", "10.42.10.0/24", "10.42.1.0/24"
    domains = ["office.example", "crm.example", "news.example", "updates.example"]
    hosts = [
        HostSpec("infra01", INFRASTRUCTURE, "10.42.1.10", domains=["updates.example"]),
        HostSpec("b", SERVER, "10.42.10.20", domains=["updates.example"]),
        HostSpec("c", SERVER, "10.42.10.30", domains=["updates.example"]),
        HostSpec("d", SERVER, "10.42.10.31", pulls_from=["c"], domains=["updates.example"]),
        HostSpec("e", SERVER, "10.42.10.32", pulls_from=["c"], domains=["updates.example"]),
        HostSpec("srv-mail", SERVER, "10.42.10.40", domains=["updates.example"], external=[("198.51.100.25", 25)]),
        HostSpec("srv-app", SERVER, "10.42.10.50", services=[("c", 1433)], domains=["updates.example"]),
        HostSpec("backup01", BACKUP, "10.42.10.60", pulls_from=["b", "c", "srv-mail", "srv-app"]),
    ]
    rng = np.random.default_rng([seed, 99991])
    clients = ["a", "f"] + [f"ws{i:02d}" for i in range(1, 11)]
    for i, name in enumerate(clients):
        services = [("b", 445), ("srv-mail", 993), ("srv-app", 443)]
        if rng.random() < 0.5:
            services.append(("c", 1433))
        doms = sorted(rng.choice(domains[:3], size=2, replace=False).tolist())
        alt = "10.42.99.5" if name == "a" else None
        hosts.append(HostSpec(name, CLIENT, f"10.42.24.{11 + i}", alt_ip=alt, services=services, domains=doms))
    return NetworkSpec(
        hosts=hosts,
        cidr_labels={users: "Users", vpn: "VPN", servers: "Servers", infra: "Infrastructure"},
        internal_cidrs=["10.0.0.0/8"],
        seed=seed,
    )


def fig6_script(days: int = FIG6_DAYS) -> CampaignScript:
    """Five anomalies on the last five days of the range."""
    d0 = days - 5
    return CampaignScript(
        [
            CampaignAction(d0, "a", SCAN, count=73, ports=(22, 110, 139, 143, 445)),
            CampaignAction(d0 + 1, "b", COLLECT, source="a", volume=50 * MB),
            CampaignAction(d0 + 2, "b", COLLECT, source="d", volume=600 * MB),
            CampaignAction(d0 + 2, "b", COLLECT, source="e", volume=3 * GB),
            CampaignAction(d0 + 3, "f", STAGE_MOVE, source="b", volume=120 * MB),
            CampaignAction(d0 + 4, "f", EXFIL, volume=120 * MB, destination="filedrop.example"),
        ]
    )


# --------------------------------------------------------------------------
# scenario files
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    network: NetworkSpec
    days: int
    script: CampaignScript
    engine_extra: str = ""


def _lognormal(v: Any) -> LogNormal:
    if isinstance(v, Mapping):
        return LogNormal(float(v["median"]), float(v["sigma"]))
    a, b = v
    return LogNormal(float(a), float(b))


def scenario_from_dict(d: Mapping[str, Any]) -> Scenario:
    net = dict(d.get("network", {}))
    seed = int(net.get("seed", 0))
    days = int(net.get("days", FIG6_DAYS))
    preset = net.get("preset")
    if preset == "fig6":
        spec = fig6_network(seed)
    elif preset is None:
        hosts = []
        for h in net.get("hosts", []):
            hosts.append(
                HostSpec(
                    h["name"].lower(),
                    h["role"],
                    h["ip"],
                    h.get("alt_ip"),
                    [(s, int(p)) for s, p in h.get("services", [])],
                    [p.lower() for p in h.get("pulls_from", [])],
                    list(h.get("domains", [])),
                    [(ip, int(p)) for ip, p in h.get("external", [])],
                )
            )
        spec = NetworkSpec(
            hosts=hosts,
            cidr_labels=dict(net.get("cidr_labels", {})),
            internal_cidrs=list(net.get("internal_cidrs", ["10.0.0.0/8"])),
            seed=seed,
        )
    else:
        raise ConfigError(f"unknown network preset {preset!r}")
    if "start" in net:
        spec.start = dt.date.fromisoformat(str(net["start"]))
    for role, prof in dict(net.get("profiles", {})).items():
        base = spec.profile(role)
        kw = {}
        for k, v in prof.items():
            cur = getattr(base, k)
            kw[k] = _lognormal(v) if isinstance(cur, LogNormal) else (tuple(v) if isinstance(cur, tuple) else v)
        spec.profiles[role] = replace(base, **kw)
    actions = []
    for a in d.get("campaign", []):
        actions.append(
            CampaignAction(
                day=int(a["day"]),
                actor=a["actor"].lower(),
                kind=a["kind"],
                targets=tuple(a.get("targets", ())),
                count=int(a.get("count", 0)),
                ports=tuple(int(p) for p in a.get("ports", ())),
                volume=int(a.get("volume", 0)),
                source=a.get("source"),
                destination=a.get("destination"),
            )
        )
    if d.get("campaign_preset") == "fig6":
        actions = fig6_script(days).actions + actions
    return Scenario(spec, days, CampaignScript(actions), str(d.get("engine_extra", "")))


def load_scenario(path: Path | str) -> Scenario:
    try:
        with open(path, "rb") as fh:
            return scenario_from_dict(tomllib.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    except (tomllib.TOMLDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad scenario: {exc}") from exc


FIG6_ENGINE_EXTRA = """
[monitor]
min_rows = 20
"""


def fig6_scenario(seed: int = 0, inject: bool = True) -> Scenario:
    return Scenario(
        fig6_network(seed), FIG6_DAYS, fig6_script() if inject else CampaignScript(), FIG6_ENGINE_EXTRA
    )


def build_scenario(scenario: Scenario, out: Path | str) -> Corpus:
    corpus = generate_baseline(scenario.network, scenario.days, out)
    if scenario.script.actions:
        inject_campaign(corpus, scenario.script)
    write_engine_config(corpus, scenario.engine_extra)
    return corpus
