"""Stage risks from surprise scores, and the fused host ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .config import COLLECTION, EXFILTRATION, RECON, STAGE_TARGETS, ComboSpec
from .ingest import ConfigError
from .monitor import SurpriseScore

STAGES = (RECON, COLLECTION, EXFILTRATION)


@dataclass
class StageRisk:
    host: str
    stage: int
    risk: float
    contributors: list[SurpriseScore] = field(default_factory=list)
    destination_risks: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "host": self.host,
            "stage": self.stage,
            "risk": self.risk,
            "contributors": [s.to_dict() for s in self.contributors],
            "destination_risks": dict(sorted(self.destination_risks.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StageRisk":
        return cls(
            d["host"],
            int(d["stage"]),
            float(d["risk"]),
            [SurpriseScore.from_dict(s) for s in d["contributors"]],
            {k: float(v) for k, v in d["destination_risks"].items()},
        )


def _weight(spec: ComboSpec, target: str) -> float:
    if target not in spec.weights:
        raise ConfigError(f"stage {spec.stage} has no weight for target {target!r}")
    return spec.weights[target]


def check_spec(spec: ComboSpec) -> None:
    unknown = set(spec.weights) - set(STAGE_TARGETS[spec.stage])
    if unknown:
        raise ConfigError(f"weights for unknown targets in stage {spec.stage}: {sorted(unknown)}")
    if any(not (w >= 0 and math.isfinite(w)) for w in spec.weights.values()) or spec.destination_weight < 0:
        raise ConfigError(f"stage {spec.stage}: weights must be finite and >= 0")
    if not any(w > 0 for w in spec.weights.values()):
        raise ConfigError(f"stage {spec.stage}: at least one weight must be positive")


def combo_recon(host: str, scores: Sequence[SurpriseScore], spec: ComboSpec) -> StageRisk:
    """Weighted sum of a host's per-target surprise risks."""
    risk = math.fsum(_weight(spec, s.target) * s.risk for s in scores)
    used = [s for s in scores if _weight(spec, s.target) > 0 and s.risk > 0]
    return StageRisk(host, spec.stage, risk, used)


def combo_flow(host: str, scores: Sequence[SurpriseScore], spec: ComboSpec) -> StageRisk:
    """Two levels: per-destination weighted sum, then weighted sum over destinations."""
    per_dest: dict[str, list[float]] = {}
    volume: dict[str, float] = {}
    for s in scores:
        if s.remote is None:
            raise ValueError(f"{s.target} score for {s.host} has no remote endpoint")
        per_dest.setdefault(s.remote, []).append(_weight(spec, s.target) * s.risk)
        volume[s.remote] = max(volume.get(s.remote, 0.0), s.actual)
    dest_risk = {d: math.fsum(v) for d, v in per_dest.items() if volume[d] >= spec.min_volume}
    risk = math.fsum(spec.destination_weight * r for r in dest_risk.values())
    used = [s for s in scores if s.remote in dest_risk and _weight(spec, s.target) > 0 and s.risk > 0]
    return StageRisk(host, spec.stage, risk, used, dest_risk)


def stage_risks(
    scores: Iterable[SurpriseScore], combos: Mapping[int, ComboSpec]
) -> dict[int, dict[str, StageRisk]]:
    """Group scores by (stage, host) and apply each stage's ComboModel."""
    by: dict[int, dict[str, list[SurpriseScore]]] = {s: {} for s in STAGES}
    for sc in scores:
        stage = next((st for st, ts in STAGE_TARGETS.items() if sc.target in ts), None)
        if stage is None:
            raise ConfigError(f"score for unknown target {sc.target!r}")
        by[stage].setdefault(sc.host, []).append(sc)
    out: dict[int, dict[str, StageRisk]] = {}
    for stage in STAGES:
        spec = combos[stage]
        fn = combo_recon if stage == RECON else combo_flow
        out[stage] = {h: fn(h, ss, spec) for h, ss in sorted(by[stage].items())}
    return out


# --------------------------------------------------------------------------
# ranking
# --------------------------------------------------------------------------


def geomean(values: Sequence[float]) -> float:
    """n-th root of the product, computed in log space.

    Exact integer roots (e.g. ranks 2, 4, 8) are returned exactly.
    """
    if not values:
        raise ValueError("geomean of nothing")
    if any(v <= 0 for v in values):
        raise ValueError("geomean needs positive values")
    g = math.exp(math.fsum(math.log(v) for v in values) / len(values))
    if all(float(v).is_integer() for v in values):
        k = round(g)
        if k ** len(values) == math.prod(int(v) for v in values):
            return float(k)
    return g


def arithmetic_mean(values: Sequence[float]) -> float:
    """Shown for contrast only; ranking never uses it."""
    return math.fsum(values) / len(values)


def dense_ranks(risks: Mapping[str, float]) -> dict[str, int]:
    """1 = riskiest; equal risks share the smaller rank; zero risk is unranked."""
    levels = sorted({r for r in risks.values() if r > 0}, reverse=True)
    pos = {r: i + 1 for i, r in enumerate(levels)}
    return {h: pos[r] for h, r in risks.items() if r > 0}


@dataclass
class RankedHost:
    host: str
    ranks: dict[int, int]
    score: float
    risks: dict[int, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "host": self.host,
            "ranks": {str(k): v for k, v in self.ranks.items()},
            "score": self.score,
            "risks": {str(k): v for k, v in self.risks.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RankedHost":
        return cls(
            d["host"],
            {int(k): int(v) for k, v in d["ranks"].items()},
            float(d["score"]),
            {int(k): float(v) for k, v in d["risks"].items()},
        )


def rank_hosts(risks: Mapping[int, Mapping[str, float]]) -> list[RankedHost]:
    """Per-stage dense ranks fused by geometric mean, ascending.

    A host without positive risk in a stage gets (ranked hosts in that
    stage) + 1. Ties in the total score are ordered by host name.
    """
    hosts = sorted({h for st in risks.values() for h in st})
    if not hosts:
        return []
    ranks: dict[int, dict[str, int]] = {}
    for stage in STAGES:
        stage_risk = dict(risks.get(stage, {}))
        r = dense_ranks(stage_risk)
        worst = len(r) + 1
        ranks[stage] = {h: r.get(h, worst) for h in hosts}
    out = []
    for h in hosts:
        hr = {s: ranks[s][h] for s in STAGES}
        out.append(
            RankedHost(h, hr, geomean([hr[s] for s in STAGES]), {s: float(risks.get(s, {}).get(h, 0.0)) for s in STAGES})
        )
    out.sort(key=lambda e: (e.score, e.host))
    return out
