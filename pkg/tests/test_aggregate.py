import datetime as dt

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from campaign_engine.aggregate import (
    DATA,
    GENERAL,
    INBOUND,
    INTERNAL,
    SERVICE,
    Activity,
    DailyAggregate,
    MixedDayError,
    PortGroupPolicy,
    RegularityGate,
    accumulate,
    aggregate_day,
    common_destinations,
    host_target_values,
    label_record,
    merge_dailies,
    registrable_domain,
    window_bounds,
    window_table,
)
from campaign_engine.ingest import FlowRecord, InternalNetworks
from conftest import INTERNAL as NETS
from conftest import POLICY, random_records

import pytest

T0 = dt.datetime(2024, 3, 1, 9, tzinfo=dt.timezone.utc)


def flow(src, dst, port=445, sent=10, received=20, proto="TCP", ts=T0):
    return label_record(FlowRecord(ts, src, dst, port, proto, sent, received), NETS, POLICY)


def test_directions_and_port_groups():
    assert flow("a", "b").direction == INTERNAL
    assert flow("198.51.100.1", "a").direction == INBOUND
    assert flow("a", "198.51.100.1").direction == "external"
    assert POLICY.group("TCP", 445) == DATA
    assert POLICY.group("TCP", 22) == SERVICE
    assert POLICY.group("TCP", 8081) == GENERAL
    assert POLICY.group("ICMP", 0) == "none"
    with pytest.raises(ValueError):
        PortGroupPolicy(frozenset({22}), frozenset({22}))


def test_registrable_domain():
    assert registrable_domain("a.b.files.example.com") == "example.com"
    assert registrable_domain("x.files.example.co.uk") == "example.co.uk"
    assert registrable_domain("localhost") == "localhost"


def test_pair_bytes_both_sides():
    acts = accumulate([flow("a", "b", sent=100, received=5000)])
    assert acts["a"].consumed == {"b": 5000} and acts["a"].sent == {"b": 100}
    assert acts["b"].consumed == {"a": 100} and acts["b"].sent == {"a": 5000}
    assert acts["b"].initiated == 0


def test_unanswered_probe_is_not_credited_to_target():
    acts = accumulate([flow("a", "b", sent=60, received=0)])
    assert "b" not in acts
    assert acts["a"].ips == {"b"}


def test_aggregate_day_rejects_mixed_days():
    with pytest.raises(MixedDayError):
        aggregate_day([flow("a", "b"), flow("a", "b", ts=T0 + dt.timedelta(days=1))])


@settings(max_examples=60)
@given(st.integers(0, 10**6), st.integers(1, 10), st.integers(1, 14))
def test_two_step_equals_direct(seed, hosts, days):
    recs = random_records(np.random.default_rng(seed), hosts, days, 20)
    direct = accumulate(recs)
    by_day = {}
    for r in recs:
        by_day.setdefault(r.record.timestamp.date(), []).append(r)
    merged = merge_dailies(d for day in sorted(by_day) for d in aggregate_day(by_day[day]))
    assert {h: a.to_dict() for h, a in merged.items()} == {h: a.to_dict() for h, a in direct.items()}


@settings(max_examples=60)
@given(st.integers(0, 10**6))
def test_merge_is_order_independent(seed):
    recs = random_records(np.random.default_rng(seed), 6, 6, 15)
    days = {}
    for r in recs:
        days.setdefault(r.record.timestamp.date(), []).append(r)
    dailies = [d for day in sorted(days) for d in aggregate_day(days[day])]
    rng = np.random.default_rng(seed + 1)
    shuffled = [dailies[i] for i in rng.permutation(len(dailies))]
    a = {h: x.to_dict() for h, x in merge_dailies(dailies).items()}
    b = {h: x.to_dict() for h, x in merge_dailies(shuffled).items()}
    assert a == b


@settings(max_examples=60)
@given(st.integers(0, 10**6))
def test_recon_counts_match_brute_force(seed):
    recs = random_records(np.random.default_rng(seed), 8, 3, 30)
    acts = accumulate(recs)
    brute = oracles.brute_host_counts(recs)
    for h, b in brute.items():
        assert host_target_values(acts[h])["recon_ips"] == len(b["ips"])
        assert host_target_values(acts[h])["recon_ptr"] == len(b["ptr"])
        assert acts[h].initiated == b["initiated"]


def test_activity_round_trip():
    recs = random_records(np.random.default_rng(3), 5, 2, 40)
    for h, a in accumulate(recs).items():
        assert Activity.from_dict(a.to_dict()).to_dict() == a.to_dict()
        d = DailyAggregate(dt.date(2024, 3, 1), h, a)
        assert DailyAggregate.from_dict(d.to_dict()).to_dict() == d.to_dict()


def test_window_table_only_initiators_get_host_rows():
    acts = accumulate([flow("a", "b")])
    t = window_table(acts, (dt.date(2024, 3, 1), dt.date(2024, 3, 1)))
    assert list(t.host_values) == ["a"]
    assert t.pair_values["collect_bytes"] == {("a", "b"): 20}
    assert t.pair_symmetric["collect_bytes"] == {("a", "b"): 10}


def test_regularity_gate():
    g = RegularityGate()
    assert g.is_regular([5.0] * 28)
    assert not g.is_regular([5.0] * 20 + [0.0] * 8)
    assert not g.is_regular([5.0] * 25 + [80.0] * 3)
    assert not g.is_regular([])


@given(st.lists(st.floats(0.1, 1e6), min_size=1, max_size=40), st.floats(0.01, 100))
def test_gate_scale_invariant(series, k):
    g = RegularityGate()
    assert g.is_regular(series) == g.is_regular([k * v for v in series])


def test_common_destinations_threshold():
    pv = {(f"h{i}", "srv"): 100 * (i + 1) for i in range(10)}
    pv[("h0", "rare")] = 5
    cd = common_destinations(pv, min_clients=10)
    assert list(cd) == ["srv"]
    assert cd["srv"].client_count == 10 and cd["srv"].median_bytes == 550.0


def test_window_bounds():
    w, h = window_bounds(dt.date(2024, 3, 28), 28, 28)
    assert w == (dt.date(2024, 3, 1), dt.date(2024, 3, 28))
    assert h == (dt.date(2024, 2, 2), dt.date(2024, 2, 29))
