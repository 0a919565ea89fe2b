"""The daily batch: ingest -> aggregate -> train -> score -> combo -> rank -> link."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .aggregate import (
    Activity,
    CidrLabeler,
    DailyAggregate,
    HOST_TARGETS,
    PAIR_FIELDS,
    ProfileSet,
    accumulate,
    build_profiles,
    days_in,
    host_target_values,
    label_record,
    merge_dailies,
    read_dailies,
    window_bounds,
    write_dailies,
)
from .campaign import STAGES, RankedHost, StageRisk, rank_hosts, stage_risks
from .config import EngineConfig, STAGE_NAMES
from .ingest import IdentityMap, IdentityStats, list_partitions, parse_partition, standardize
from .link import AssociationGraph, Case, build_graph, filter_cases, grow_candidates
from .monitor import MonitoringModel, SurpriseScore, rows_to_table, score, target_rows, train_monitoring_model
from .store import ResultsStore, write_csv, write_json, write_text

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    """No usable log data for the requested span."""


@dataclass
class SourceDay:
    activity: dict[str, Activity]
    records: int
    rejects: int
    files: list[str]
    corrupt: list[str]


def _fingerprint(paths) -> list[list[Any]]:
    return [[str(p), p.stat().st_size] for p in paths]


def aggregate_source_day(cfg: EngineConfig, source: str, day: dt.date, idmap: IdentityMap, stats: IdentityStats) -> SourceDay:
    spec = cfg.sources[source]
    parts = [p for _, p in list_partitions(spec, (day, day))]
    internal = cfg.internal
    activity: dict[str, Activity] = {}
    records = rejects = 0
    corrupt = []
    for p in parts:
        res = parse_partition(spec, p)
        rejects += res.reject_count
        if res.corrupt:
            corrupt.append(str(p))
        recs = standardize(res.records, idmap, internal, stats)
        # records may straddle midnight in local time; keep only this UTC day
        recs = [r for r in recs if r.timestamp.date() == day]
        records += len(recs)
        labeled = [label_record(r, internal, cfg.ports) for r in recs]
        part = accumulate(labeled)
        for h, a in part.items():
            activity[h] = activity[h].merge(a) if h in activity else a
    return SourceDay(activity, records, rejects, [str(p) for p in parts], corrupt)


def load_dailies(
    cfg: EngineConfig, span: tuple[dt.date, dt.date], store: ResultsStore, idmap: IdentityMap
) -> tuple[dict[dt.date, dict[str, Activity]], dict[str, Any]]:
    """Per-day host activity over the span, reusing cached daily aggregates.

    A cached (source, day) aggregate is reused only when its partition files
    (names and sizes) are unchanged. Days with no partition files in any
    source are left out, i.e. treated as gaps.
    """
    manifest = store.read_manifest()
    stats = IdentityStats()
    out: dict[dt.date, dict[str, Activity]] = {}
    info = {"records": 0, "rejects": 0, "corrupt": [], "unresolved": 0}
    for day in days_in(span):
        merged: dict[str, Activity] = {}
        any_files = False
        for source in sorted(cfg.sources):
            parts = [p for _, p in list_partitions(cfg.sources[source], (day, day))]
            if not parts:
                continue
            any_files = True
            key = f"{source}/{day.isoformat()}"
            fp = _fingerprint(parts)
            path = store.aggregate_path(source, day)
            entry = manifest.get(key)
            if entry is not None and entry.get("files") == fp and path.exists():
                acts = {d.host: d.activity for d in read_dailies(path)}
                info["records"] += entry["records"]
                info["rejects"] += entry["rejects"]
            else:
                sd = aggregate_source_day(cfg, source, day, idmap, stats)
                acts = sd.activity
                write_dailies(path, [DailyAggregate(day, h, a) for h, a in sorted(acts.items())])
                manifest[key] = {"files": fp, "records": sd.records, "rejects": sd.rejects, "corrupt": sd.corrupt}
                info["records"] += sd.records
                info["rejects"] += sd.rejects
                info["corrupt"].extend(sd.corrupt)
            for h, a in acts.items():
                merged[h] = merged[h].merge(a) if h in merged else a
        if any_files:
            out[day] = merged
    store.write_manifest(manifest)
    info["unresolved"] = stats.unresolved
    return out, info


def peak_day_finder(dailies: Mapping[dt.date, Mapping[str, Activity]], window: tuple[dt.date, dt.date]):
    """Evidence day attribution: the window day with the largest daily value."""
    days = days_in(window)

    def attribute(s: SurpriseScore) -> dt.date:
        best, best_v = s.day, -1.0
        for d in days:
            a = dailies.get(d, {}).get(s.host)
            if a is None:
                continue
            if s.target in HOST_TARGETS:
                v = float(host_target_values(a)[s.target])
            else:
                v = float(getattr(a, PAIR_FIELDS[s.target][0]).get(s.remote, 0))
            if v > best_v:
                best, best_v = d, v
        return best

    return attribute


@dataclass
class RunResult:
    day: dt.date
    cases: list[Case]
    ranking: list[RankedHost]
    risks: dict[int, dict[str, StageRisk]]
    scores: list[SurpriseScore]
    models: dict[str, MonitoringModel]
    graph: AssociationGraph
    warnings: list[str] = field(default_factory=list)
    run_dir: Path | None = None


def run_daily(
    cfg: EngineConfig,
    day: dt.date,
    window_days: int | None = None,
    seed_count: int | None = None,
    out: Path | str | None = None,
) -> RunResult:
    """Train on the profile ending the day before, score the profile ending on ``day``."""
    if window_days is not None:
        cfg = replace(cfg, window_days=window_days)
    if seed_count is not None:
        cfg = replace(cfg, link=replace(cfg.link, seed_count=seed_count))
    store = ResultsStore(out if out is not None else cfg.results_dir)
    with store.lock():
        return _run(cfg, day, store)


def _run(cfg: EngineConfig, day: dt.date, store: ResultsStore) -> RunResult:
    warnings: list[str] = []
    train_day = day - dt.timedelta(days=1)
    _, train_hist = window_bounds(train_day, cfg.window_days, cfg.history_days)
    span = (train_hist[0], day)
    idmap = cfg.identity_map()
    dailies, info = load_dailies(cfg, span, store, idmap)
    if not dailies:
        raise DataError(f"no log data between {span[0]} and {span[1]}")
    for c in info["corrupt"]:
        warnings.append(f"corrupt partition: {c}")
    if day not in dailies:
        warnings.append(f"data gap: no logs for scored day {day.isoformat()}")

    labeler = CidrLabeler(cfg.cidr_labels, idmap.addresses)
    kw = dict(
        labeler=labeler,
        window_days=cfg.window_days,
        history_days=cfg.history_days,
        gate=cfg.gate,
        min_clients=cfg.min_clients,
    )
    train_prof = build_profiles(dailies, train_day, **kw)
    score_prof = build_profiles(dailies, day, **kw)
    if train_prof.window[1] >= day:
        raise AssertionError("training profile overlaps the scored day")
    gaps = sorted(set(score_prof.gap_days))
    if gaps and day in dailies:
        warnings.append(f"data gap: {len(gaps)} day(s) without logs in window")

    blueprint = cfg.make_blueprint()
    models: dict[str, MonitoringModel] = {}
    scores: list[SurpriseScore] = []
    if day in dailies:
        for target in cfg.monitor.targets:
            train_rows = target_rows(train_prof, target)
            if len(train_rows) < 2:
                warnings.append(f"{target}: too few training rows ({len(train_rows)}); not scored")
                continue
            table = rows_to_table(train_rows)
            mm = train_monitoring_model(target, table, train_day, blueprint, cfg.monitor)
            models[target] = mm
            scores.extend(score(mm, target_rows(score_prof, target), day, cfg.monitor))

    risks = stage_risks(scores, cfg.combos)
    ranking = rank_hosts({s: {h: sr.risk for h, sr in risks[s].items()} for s in STAGES})
    graph = build_graph(risks[4], cfg.link.edge_threshold)
    attribute = peak_day_finder(dailies, score_prof.window)
    candidates = grow_candidates(ranking, graph, risks, cfg.link, attribute) if ranking else []
    cases = filter_cases(candidates, day)

    result = RunResult(day, cases, ranking, risks, scores, models, graph, warnings)
    result.run_dir = write_run(store, result, score_prof, info)
    for w in warnings:
        log.info(w)
    return result


def write_run(store: ResultsStore, r: RunResult, prof: ProfileSet, info: Mapping[str, Any]) -> Path:
    d = store.run_dir(r.day)
    if (d / "cases").is_dir():
        for old in (d / "cases").glob("*.json"):
            old.unlink()
    for target, mm in sorted(r.models.items()):
        write_json(d / "models" / f"{target}.json", mm.to_dict())
    write_csv(
        d / "scores.csv",
        ["day", "host", "target", "remote", "actual", "predicted", "p", "risk"],
        [
            [s.day.isoformat(), s.host, s.target, s.remote or "", repr(s.actual), repr(s.predicted), repr(s.p), repr(s.risk)]
            for s in sorted(r.scores, key=lambda s: (s.host, s.target, s.remote or ""))
        ],
    )
    write_json(
        d / "stage_risks.json",
        {STAGE_NAMES[s]: {h: sr.to_dict() for h, sr in sorted(r.risks[s].items())} for s in STAGES},
    )
    write_csv(
        d / "ranking.csv",
        ["position", "host", "score", "rank_recon", "rank_collect", "rank_exfil", "risk_recon", "risk_collect", "risk_exfil"],
        [
            [i + 1, e.host, repr(e.score), e.ranks[3], e.ranks[4], e.ranks[5], repr(e.risks[3]), repr(e.risks[4]), repr(e.risks[5])]
            for i, e in enumerate(r.ranking)
        ],
    )
    write_json(d / "graph.json", r.graph.to_dict())
    for c in r.cases:
        write_json(d / "cases" / f"{c.case_id}.json", c.to_dict())
    write_text(d / "cases.json", _case_report(r.cases))
    write_json(
        d / "run.json",
        {
            "day": r.day.isoformat(),
            "window": [prof.window[0].isoformat(), prof.window[1].isoformat()],
            "history_window": [prof.history_window[0].isoformat(), prof.history_window[1].isoformat()],
            "gap_days": [g.isoformat() for g in prof.gap_days],
            "warnings": r.warnings,
            "records": info.get("records"),
            "rejects": info.get("rejects"),
            "unresolved": info.get("unresolved"),
            "models": {t: {"fallback": m.fallback, "sigma": m.sigma, "rows": m.n_rows, "excluded": m.excluded} for t, m in sorted(r.models.items())},
            "cases": [c.case_id for c in r.cases],
        },
    )
    return d


def _case_report(cases) -> str:
    from .store import dumps

    return dumps([c.to_dict() for c in cases])


def load_ranking(run_dir: Path) -> list[dict[str, str]]:
    import csv

    with open(run_dir / "ranking.csv", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def merge_window(dailies: Mapping[dt.date, Mapping[str, Activity]], window) -> dict[str, Activity]:
    return merge_dailies(DailyAggregate(d, h, a) for d in days_in(window) for h, a in dailies.get(d, {}).items())
