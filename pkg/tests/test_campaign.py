import datetime as dt
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from campaign_engine.campaign import (
    RankedHost,
    StageRisk,
    check_spec,
    combo_flow,
    combo_recon,
    dense_ranks,
    geomean,
    rank_hosts,
    stage_risks,
)
from campaign_engine.config import ComboSpec, default_combos
from campaign_engine.ingest import ConfigError
from campaign_engine.monitor import SurpriseScore

DAY = dt.date(2024, 3, 1)


def sc(host, target, risk, remote=None, actual=1e7):
    return SurpriseScore(DAY, host, target, remote, actual, 1.0, 10**-risk, risk)


@given(st.lists(st.integers(1, 10**4), min_size=1, max_size=6))
def test_geomean_matches_stdlib(ranks):
    assert geomean(ranks) == pytest.approx(oracles.geomean(ranks), rel=1e-12)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=4))
def test_geomean_between_min_and_max(ranks):
    assert min(ranks) - 1e-9 <= geomean(ranks) <= max(ranks) + 1e-9


def test_geomean_rejects_nonpositive():
    with pytest.raises(ValueError):
        geomean([])
    with pytest.raises(ValueError):
        geomean([1, 0])


def test_dense_ranks():
    assert dense_ranks({"a": 5.0, "b": 5.0, "c": 1.0, "d": 0.0}) == {"a": 1, "b": 1, "c": 2}


def test_rank_hosts_penalizes_missing_stages():
    risks = {3: {"a": 9.0, "b": 1.0}, 4: {"a": 2.0}, 5: {"c": 1.0}}
    ranked = rank_hosts(risks)
    by = {r.host: r for r in ranked}
    assert by["a"].ranks == {3: 1, 4: 1, 5: 2}
    assert by["b"].ranks == {3: 2, 4: 2, 5: 2}
    assert [r.host for r in ranked][0] == "a"
    assert RankedHost.from_dict(by["a"].to_dict()) == by["a"]
    assert rank_hosts({}) == []


def test_recon_combo_is_weighted_sum():
    spec = ComboSpec(3, {"recon_ips": 2.0, "recon_ptr": 0.5})
    r = combo_recon("a", [sc("a", "recon_ips", 3.0), sc("a", "recon_ptr", 4.0)], spec)
    assert r.risk == 8.0


def test_flow_combo_two_levels_and_min_volume():
    spec = ComboSpec(4, {"collect_bytes": 1.0}, destination_weight=0.5, min_volume=1e6)
    scores = [
        sc("b", "collect_bytes", 6.0, "a"),
        sc("b", "collect_bytes", 4.0, "d"),
        sc("b", "collect_bytes", 9.0, "tiny", actual=2e4),
    ]
    r = combo_flow("b", scores, spec)
    assert r.destination_risks == {"a": 6.0, "d": 4.0}
    assert r.risk == 5.0
    assert all(s.remote != "tiny" for s in r.contributors)
    with pytest.raises(ValueError):
        combo_flow("b", [sc("b", "collect_bytes", 1.0)], spec)


def test_stage_risks_groups_by_stage():
    scores = [sc("a", "recon_ips", 2.0), sc("a", "exfil_proxy_bytes", 3.0, "drop.example"), sc("b", "collect_bytes", 1.0, "a")]
    out = stage_risks(scores, default_combos())
    assert out[3]["a"].risk == 2.0 and out[5]["a"].risk == 3.0 and out[4]["b"].risk == 1.0
    assert StageRisk.from_dict(out[5]["a"].to_dict()).risk == 3.0
    with pytest.raises(ConfigError):
        stage_risks([sc("a", "nonsense", 1.0)], default_combos())


def test_check_spec():
    check_spec(ComboSpec(3, {"recon_ips": 1.0}))
    for bad in (ComboSpec(3, {"collect_bytes": 1.0}), ComboSpec(3, {"recon_ips": -1.0}), ComboSpec(3, {"recon_ips": 0.0}), ComboSpec(3, {"recon_ips": math.inf})):
        with pytest.raises(ConfigError):
            check_spec(bad)
