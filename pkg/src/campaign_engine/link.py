"""Association graph over surprising data movements and case building."""

from __future__ import annotations

import datetime as dt
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .campaign import STAGES, RankedHost, StageRisk, dense_ranks
from .config import COLLECTION, LinkConfig, STAGE_NAMES
from .monitor import SurpriseScore

HIGH, MEDIUM, LOW = "high", "medium", "low"
EVIDENCE_PER_STAGE = 5

TARGET_SOURCE = {
    "recon_ptr": "dns",
    "exfil_proxy_bytes": "proxy",
}


def risk_bands(stage_risk: Mapping[str, float], cfg: LinkConfig = LinkConfig(), n_hosts: int | None = None) -> dict[str, str]:
    """high: risk >= high_risk or within the top high_top_fraction of hosts;
    medium: the same with the medium knobs. Zero risk is always low."""
    n = n_hosts if n_hosts is not None else len(stage_risk)
    ranks = dense_ranks(stage_risk)
    top_high = math.floor(cfg.high_top_fraction * n)
    top_medium = math.floor(cfg.medium_top_fraction * n)
    out = {}
    for h, r in stage_risk.items():
        rank = ranks.get(h)
        if r <= 0 or rank is None:
            out[h] = LOW
        elif r >= cfg.high_risk or rank <= top_high:
            out[h] = HIGH
        elif r >= cfg.medium_risk or rank <= top_medium:
            out[h] = MEDIUM
        else:
            out[h] = LOW
    return out


def all_bands(
    risks: Mapping[int, Mapping[str, StageRisk]], hosts: Sequence[str], cfg: LinkConfig = LinkConfig()
) -> dict[str, dict[int, str]]:
    out: dict[str, dict[int, str]] = {h: {s: LOW for s in STAGES} for h in hosts}
    for s in STAGES:
        values = {h: (risks.get(s, {})[h].risk if h in risks.get(s, {}) else 0.0) for h in hosts}
        for h, b in risk_bands(values, cfg, len(hosts)).items():
            out[h][s] = b
    return out


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------


@dataclass
class AssociationGraph:
    """Directed edges follow the data: remote -> consumer."""

    vertices: list[str]
    edges: dict[tuple[str, str], float] = field(default_factory=dict)

    def successors(self, v: str) -> list[str]:
        return sorted(d for (s, d) in self.edges if s == v)

    def neighbours(self, v: str) -> list[str]:
        return sorted({d for (s, d) in self.edges if s == v} | {s for (s, d) in self.edges if d == v})

    def to_dict(self) -> dict[str, Any]:
        return {
            "vertices": self.vertices,
            "edges": [[s, d, r] for (s, d), r in sorted(self.edges.items())],
        }


def build_graph(collection: Mapping[str, StageRisk], edge_threshold: float = 3.0) -> AssociationGraph:
    """An edge remote -> host for every collection sub-risk R(remote) >= threshold."""
    vertices = set(collection)
    edges = {}
    for host, sr in sorted(collection.items()):
        for remote, r in sorted(sr.destination_risks.items()):
            vertices.add(remote)
            if r >= edge_threshold:
                edges[(remote, host)] = r
    return AssociationGraph(sorted(vertices), edges)


# --------------------------------------------------------------------------
# candidates and cases
# --------------------------------------------------------------------------


def pivot_query(score: SurpriseScore, day: dt.date | None = None) -> str:
    source = TARGET_SOURCE.get(score.target, "flow")
    d = (day or score.day).isoformat()
    q = f"source={source} day={d} host={score.host}"
    if score.remote is not None:
        q += f" remote={score.remote}"
    return q


@dataclass
class EvidenceItem:
    host: str
    stage: int
    score: SurpriseScore
    day: dt.date
    pivot: str

    def key(self) -> tuple:
        return (self.host, self.stage, self.score.target, self.score.remote or "")

    def to_dict(self) -> dict[str, Any]:
        s = self.score
        ex = s.explanation
        return {
            "host": self.host,
            "stage": self.stage,
            "day": self.day.isoformat(),
            "target": s.target,
            "remote": s.remote,
            "actual": s.actual,
            "predicted": s.predicted,
            "p": s.p,
            "risk": s.risk,
            "baseline": None if ex is None else ex.baseline,
            "target_transform": None if ex is None else ex.target_transform,
            "reasons": [] if ex is None else [[r.derivation, r.contribution] for r in ex.reasons],
            "scored_day": s.day.isoformat(),
            "pivot": self.pivot,
        }


@dataclass
class CandidateCase:
    seed: str
    members: list[str]
    stage_risks: dict[str, dict[int, float]]
    bands: dict[str, dict[int, str]]
    evidence: list[EvidenceItem]

    def high_stages(self) -> list[int]:
        return sorted({s for m in self.members for s, b in self.bands[m].items() if b == HIGH})


@dataclass
class Case:
    case_id: str
    day: dt.date
    seed: str
    members: list[str]
    stage_risks: dict[str, dict[int, float]]
    bands: dict[str, dict[int, str]]
    high_stages: list[int]
    evidence: list[EvidenceItem]
    absorbed: list[str] = field(default_factory=list)

    def narrative(self) -> list[str]:
        lines = []
        for e in self.evidence:
            s = e.score
            where = f" with {s.remote}" if s.remote else ""
            lines.append(
                f"{e.day.isoformat()} {e.host} stage {e.stage} ({STAGE_NAMES[e.stage]}): "
                f"{s.target}{where} = {s.actual:.6g} vs expected {s.predicted:.6g} (risk {s.risk:.2f})"
            )
        return lines

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "day": self.day.isoformat(),
            "seed": self.seed,
            "members": self.members,
            "high_stages": self.high_stages,
            "stage_risks": {m: {str(k): v for k, v in r.items()} for m, r in self.stage_risks.items()},
            "bands": {m: {str(k): v for k, v in b.items()} for m, b in self.bands.items()},
            "evidence": [e.to_dict() for e in self.evidence],
            "narrative": self.narrative(),
            "absorbed_seeds": self.absorbed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _qualifies(bands: Mapping[int, str]) -> bool:
    return any(b in (HIGH, MEDIUM) for b in bands.values())


def _evidence(
    host: str,
    risks: Mapping[int, Mapping[str, StageRisk]],
    bands: Mapping[int, str],
    attribute: Callable[[SurpriseScore], dt.date] | None,
    min_risk: float = 0.0,
) -> list[EvidenceItem]:
    items = []
    stages = [s for s in STAGES if bands.get(s) in (HIGH, MEDIUM)]
    if not stages:
        stages = [s for s in STAGES if host in risks.get(s, {}) and risks[s][host].risk > 0][:1]
    for s in stages:
        sr = risks.get(s, {}).get(host)
        if sr is None:
            continue
        ranked = sorted(sr.contributors, key=lambda c: (-c.risk, c.target, c.remote or ""))
        top = [c for c in ranked if c.risk >= min_risk][:EVIDENCE_PER_STAGE] or ranked[:1]
        for sc in top:
            day = attribute(sc) if attribute else sc.day
            items.append(EvidenceItem(host, s, sc, day, pivot_query(sc, day)))
    return items


def grow_candidates(
    ranking: Sequence[RankedHost],
    graph: AssociationGraph,
    risks: Mapping[int, Mapping[str, StageRisk]],
    cfg: LinkConfig = LinkConfig(),
    attribute: Callable[[SurpriseScore], dt.date] | None = None,
) -> list[CandidateCase]:
    """One candidate per seed, in ranking order.

    Seeds are the top ``seed_count`` ranked hosts that are high in at least
    one stage. Members are the seed plus hosts with a high or medium stage
    band reachable from it: by following edges in the direction of the data
    ("reachable", the default), or as immediate neighbours in either
    direction ("one_hop").
    """
    hosts = [r.host for r in ranking]
    bands = all_bands(risks, hosts, cfg)
    seeds = [h for h in hosts[: cfg.seed_count] if HIGH in bands[h].values()]
    out = []
    for seed in seeds:
        members = {seed}
        if cfg.neighbors == "one_hop":
            members |= {n for n in graph.neighbours(seed) if n in bands and _qualifies(bands[n])}
        else:
            queue = deque([seed])
            while queue:
                v = queue.popleft()
                for n in graph.successors(v):
                    if n not in members and n in bands and _qualifies(bands[n]):
                        members.add(n)
                        queue.append(n)
        ordered = sorted(members)
        evidence = []
        for m in ordered:
            evidence.extend(_evidence(m, risks, bands[m], attribute, cfg.evidence_min_risk))
        out.append(
            CandidateCase(
                seed,
                ordered,
                {m: {s: (risks[s][m].risk if m in risks.get(s, {}) else 0.0) for s in STAGES} for m in ordered},
                {m: dict(bands[m]) for m in ordered},
                evidence,
            )
        )
    return out


def filter_cases(candidates: Sequence[CandidateCase], day: dt.date) -> list[Case]:
    """Keep candidates high in >= 2 stages; fold subset candidates into supersets."""
    kept = [c for c in candidates if len(c.high_stages()) >= 2]
    # larger sets first so subsets always find their superset
    order = sorted(range(len(kept)), key=lambda i: (-len(kept[i].members), i))
    cases: list[Case] = []
    for i in order:
        c = kept[i]
        mset = set(c.members)
        host = next((k for k in cases if mset <= set(k.members)), None)
        if host is not None:
            host.absorbed.append(c.seed)
            have = {e.key() for e in host.evidence}
            host.evidence.extend(e for e in c.evidence if e.key() not in have)
            continue
        cases.append(
            Case("", day, c.seed, list(c.members), dict(c.stage_risks), dict(c.bands), c.high_stages(), list(c.evidence))
        )
    # report in seed-ranking order
    seed_pos = {c.seed: i for i, c in enumerate(candidates)}
    cases.sort(key=lambda k: seed_pos[k.seed])
    for n, k in enumerate(cases, 1):
        k.case_id = f"{day.strftime('%Y%m%d')}-{n:03d}"
        k.evidence.sort(key=lambda e: (e.day, e.stage, e.host, -e.score.risk, e.score.target, e.score.remote or ""))
    return cases


def collection_stage(risks: Mapping[int, Mapping[str, StageRisk]]) -> Mapping[str, StageRisk]:
    return risks.get(COLLECTION, {})
