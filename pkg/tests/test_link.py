import datetime as dt

from hypothesis import given
from hypothesis import strategies as st

from campaign_engine.campaign import StageRisk, rank_hosts
from campaign_engine.config import LinkConfig
from campaign_engine.link import (
    HIGH,
    LOW,
    MEDIUM,
    CandidateCase,
    build_graph,
    filter_cases,
    grow_candidates,
    pivot_query,
    risk_bands,
)
from campaign_engine.monitor import SurpriseScore

DAY = dt.date(2024, 3, 1)


def sc(host, target, risk, remote=None):
    return SurpriseScore(DAY, host, target, remote, 5e7, 1e5, 10**-risk, risk)


def test_bands_by_threshold_and_rank():
    cfg = LinkConfig()
    b = risk_bands({"a": 7.0, "b": 4.0, "c": 1.0, "d": 0.0}, cfg)
    assert b == {"a": HIGH, "b": MEDIUM, "c": LOW, "d": LOW}
    many = {f"h{i}": 0.01 * (i + 1) for i in range(100)}
    b = risk_bands(many, cfg)
    assert b["h99"] == HIGH and b["h98"] == MEDIUM and b["h95"] == MEDIUM and b["h94"] == LOW


@given(st.dictionaries(st.text("abcdef", min_size=1, max_size=3), st.floats(0, 12), max_size=30))
def test_bands_monotone_in_risk(risks):
    b = risk_bands(risks)
    order = {LOW: 0, MEDIUM: 1, HIGH: 2}
    for h, r in risks.items():
        for g, s in risks.items():
            if r > s:
                assert order[b[h]] >= order[b[g]]


def _risks():
    collect_b = StageRisk("b", 4, 9.0, [sc("b", "collect_bytes", 9.0, "a")], {"a": 9.0, "c": 1.0})
    collect_f = StageRisk("f", 4, 7.0, [sc("f", "collect_bytes", 7.0, "b")], {"b": 7.0})
    return {
        3: {"a": StageRisk("a", 3, 12.0, [sc("a", "recon_ips", 12.0)])},
        4: {"b": collect_b, "f": collect_f},
        5: {"f": StageRisk("f", 5, 10.0, [sc("f", "exfil_proxy_bytes", 10.0, "drop.example"), sc("f", "exfil_flow_bytes", 0.2, "198.51.100.0/24")])},
    }


def test_graph_edges_follow_the_data():
    g = build_graph(_risks()[4], 3.0)
    assert g.edges == {("a", "b"): 9.0, ("b", "f"): 7.0}
    assert g.successors("a") == ["b"] and g.neighbours("b") == ["a", "f"]
    assert "c" in g.vertices


def _cases(neighbors="reachable"):
    risks = _risks()
    ranking = rank_hosts({s: {h: r.risk for h, r in risks[s].items()} for s in risks})
    cfg = LinkConfig(neighbors=neighbors)
    cands = grow_candidates(ranking, build_graph(risks[4]), risks, cfg)
    return cands, filter_cases(cands, DAY)


def test_reachable_growth_links_the_chain():
    cands, cases = _cases()
    assert len(cases) == 1
    assert cases[0].members == ["a", "b", "f"] and cases[0].high_stages == [3, 4, 5]
    assert cases[0].case_id == "20240301-001"
    assert sorted(cases[0].absorbed) == sorted(c.seed for c in cands if c.seed != cases[0].seed)


def test_one_hop_growth_is_local():
    cands, _ = _cases("one_hop")
    by = {c.seed: c.members for c in cands}
    assert by["a"] == ["a", "b"]


def test_evidence_skips_low_risk_contributors():
    _, cases = _cases()
    targets = {(e.host, e.score.target) for e in cases[0].evidence}
    assert ("f", "exfil_flow_bytes") not in targets
    assert ("f", "exfil_proxy_bytes") in targets


def test_single_stage_candidates_are_dropped():
    c = CandidateCase("x", ["x"], {"x": {3: 9.0, 4: 0.0, 5: 0.0}}, {"x": {3: HIGH, 4: LOW, 5: LOW}}, [])
    assert filter_cases([c], DAY) == []


def test_pivot_query():
    assert pivot_query(sc("f", "exfil_proxy_bytes", 1.0, "drop.example")) == "source=proxy day=2024-03-01 host=f remote=drop.example"
    assert pivot_query(sc("a", "recon_ptr", 1.0)).startswith("source=dns")
