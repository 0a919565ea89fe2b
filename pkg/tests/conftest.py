import datetime as dt
import logging
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from campaign_engine.aggregate import PortGroupPolicy, label_record
from campaign_engine.ingest import DnsRecord, FlowRecord, InternalNetworks, ProxyRecord

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []

INTERNAL = InternalNetworks(["10.0.0.0/8"])
POLICY = PortGroupPolicy()
UTC = dt.timezone.utc


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("campaign_engine").setLevel(logging.ERROR)
    yield


def random_records(rng: np.random.Generator, n_hosts: int, n_days: int, per_day: int, start=dt.date(2024, 3, 1)):
    """Labeled flow/DNS/proxy records for a small random network."""
    hosts = [f"h{i}" for i in range(n_hosts)]
    ports = [22, 53, 80, 139, 443, 445, 993, 1433, 3389, 8080]
    ext = ["198.51.100.7", "198.51.100.9", "203.0.113.4", "192.0.2.44"]
    domains = ["a.example", "cdn.b.example", "files.example.co.uk", "x.example"]
    out = []
    for d in range(n_days):
        day = start + dt.timedelta(days=d)
        for _ in range(int(rng.integers(0, per_day + 1))):
            ts = dt.datetime.combine(day, dt.time(), UTC) + dt.timedelta(seconds=int(rng.integers(0, 86400)))
            src = hosts[int(rng.integers(n_hosts))]
            kind = rng.random()
            if kind < 0.55:
                if rng.random() < 0.8:
                    dst = hosts[int(rng.integers(n_hosts))]
                else:
                    dst = ext[int(rng.integers(len(ext)))]
                if rng.random() < 0.1:
                    src, dst = ext[int(rng.integers(len(ext)))], src
                proto = "ICMP" if rng.random() < 0.05 else "TCP"
                port = 0 if proto == "ICMP" else ports[int(rng.integers(len(ports)))]
                rec = FlowRecord(ts, src, dst, port, proto, int(rng.integers(0, 10**7)), int(rng.integers(0, 10**7)))
            elif kind < 0.8:
                if rng.random() < 0.6:
                    ip = f"10.0.{int(rng.integers(4))}.{int(rng.integers(1, 20))}"
                    q = ".".join(reversed(ip.split("."))) + ".in-addr.arpa"
                    rec = DnsRecord(ts, src, "PTR", q)
                else:
                    rec = DnsRecord(ts, src, "A", domains[int(rng.integers(len(domains)))])
            else:
                rec = ProxyRecord(
                    ts, src, domains[int(rng.integers(len(domains)))], int(rng.integers(0, 10**6)), int(rng.integers(0, 10**6))
                )
            out.append(label_record(rec, INTERNAL, POLICY))
    return out


@pytest.fixture
def acceptance():
    """Record one line per criterion; printed in the terminal summary."""

    def record(n: int, name: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE_LINES.append(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        print(ACCEPTANCE_LINES[-1])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fig6_corpus(tmp_path_factory):
    from campaign_engine.simgen import build_scenario, fig6_scenario

    return build_scenario(fig6_scenario(0), tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def fig6_result(fig6_corpus, tmp_path_factory):
    from campaign_engine.config import load_config
    from campaign_engine.pipeline import run_daily

    out = tmp_path_factory.mktemp("results")
    return run_daily(load_config(fig6_corpus.config_path), fig6_corpus.last_day, out=out), out
