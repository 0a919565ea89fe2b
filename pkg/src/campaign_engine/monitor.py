"""Monitoring models: one shared model per target per day, surprise scoring,
and the history regularity gate."""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .aggregate import HOST_TARGETS, PAIR_TARGETS, ProfileSet
from .config import MonitorConfig
from .ingest import ConfigError
from .learn.explore import Blueprint, explore
from .learn.model import Explanation, FittedModel
from .learn.pipeline import PipelineSpec, fit_pipeline
from .learn.table import NUMERIC, STRING, DataTable, TableTransform, apply_table_transforms, split_train_tune

log = logging.getLogger(__name__)

TARGET_COLUMN = "value"
HOST_CONTEXT_NUMERIC = ("history",)
PAIR_CONTEXT_NUMERIC = ("history", "symmetric", "dest_clients", "dest_median", "dest_iqr")


# --------------------------------------------------------------------------
# surprise
# --------------------------------------------------------------------------


def exceedance(actual: float, median: float, sigma: float, log_scale: bool = True) -> float:
    """P(X >= actual) when log1p(X) ~ Normal(log1p(median), sigma).

    With ``log_scale=False`` X itself is normal around ``median``.
    Zero activity is never surprising (p = 1).
    """
    if actual <= 0:
        return 1.0
    if log_scale:
        z = (math.log1p(actual) - math.log1p(max(median, 0.0))) / sigma
    else:
        z = (actual - median) / sigma
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def risk_from_p(p: float, p_floor: float = 1e-12, cap: float = 12.0) -> float:
    return min(-math.log10(max(p, p_floor)), cap) + 0.0


@dataclass
class SurpriseScore:
    day: dt.date
    host: str
    target: str
    remote: str | None
    actual: float
    predicted: float
    p: float
    risk: float
    explanation: Explanation | None = None
    model_day: dt.date | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "day": self.day.isoformat(),
            "host": self.host,
            "target": self.target,
            "remote": self.remote,
            "actual": self.actual,
            "predicted": self.predicted,
            "p": self.p,
            "risk": self.risk,
            "explanation": None if self.explanation is None else self.explanation.to_dict(),
            "model_day": None if self.model_day is None else self.model_day.isoformat(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SurpriseScore":
        return cls(
            dt.date.fromisoformat(d["day"]),
            d["host"],
            d["target"],
            d.get("remote"),
            float(d["actual"]),
            float(d["predicted"]),
            float(d["p"]),
            float(d["risk"]),
            None if d.get("explanation") is None else Explanation.from_dict(d["explanation"]),
            None if d.get("model_day") is None else dt.date.fromisoformat(d["model_day"]),
        )


# --------------------------------------------------------------------------
# profile -> training table
# --------------------------------------------------------------------------


def apply_history_gate(rows: Sequence[Mapping[str, Any]], history_columns: Iterable[str]) -> list[dict]:
    """Pass a history input through only when its regularity flag is set.

    Each history column ``c`` is paired with a boolean ``c_regular``; when the
    flag is false the value is replaced by NaN, which encoders turn into an
    explicit absent indicator. The flag columns are dropped.
    """
    cols = list(history_columns)
    out = []
    for row in rows:
        r = dict(row)
        for c in cols:
            flag = r.pop(f"{c}_regular", False)
            if not flag:
                r[c] = float("nan")
        out.append(r)
    return out


def target_rows(profiles: ProfileSet, target: str) -> list[dict]:
    """Gated model rows for one target; ``value`` holds the target."""
    if target in HOST_TARGETS:
        rows = []
        for r in profiles.host_rows:
            rows.append(
                {
                    "host": r["host"],
                    "cidr_label": r["cidr_label"],
                    "history": r[f"history_{target}"],
                    "history_regular": r[f"history_{target}_regular"],
                    TARGET_COLUMN: float(r[target]),
                }
            )
        return apply_history_gate(rows, ["history"])
    if target in PAIR_TARGETS:
        rows = [dict(r, value=float(r["value"])) for r in profiles.pair_rows[target]]
        for r in rows:
            r.pop("gap_days", None)
        return apply_history_gate(rows, ["history"])
    raise ConfigError(f"unknown monitoring target {target!r}")


def rows_to_table(rows: Sequence[Mapping[str, Any]], target: str | None = TARGET_COLUMN) -> DataTable:
    if not rows:
        raise ValueError("no rows")
    kinds = {}
    for k, v in rows[0].items():
        kinds[k] = STRING if isinstance(v, str) or v is None else NUMERIC
    return DataTable.from_records(rows, kinds, target=target)


def numeric_context(target: str) -> tuple[str, ...]:
    return HOST_CONTEXT_NUMERIC if target in HOST_TARGETS else PAIR_CONTEXT_NUMERIC


def monitoring_blueprint(base: Blueprint, target: str, identifiers: Sequence[str]) -> Blueprint:
    """Log target, log-scaled numeric context, identifiers never admitted."""
    ctx = list(numeric_context(target))
    transforms = [
        TableTransform("log_target", {}),
        TableTransform("log_columns", {"columns": ctx}),
        TableTransform("drop_columns", {"columns": ctx}),
    ]
    bp = replace(
        base,
        table_transforms=transforms + list(base.table_transforms),
        exclude=sorted(set(base.exclude) | set(identifiers)),
        encoders=dict(base.encoders),
        explorations=dict(base.explorations),
    )
    for c in identifiers:
        bp.encoders[c] = "drop"
    return bp


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


@dataclass
class MonitoringModel:
    target: str
    model: FittedModel
    sigma: float
    training_day: dt.date
    fallback: bool = False
    excluded: list[str] = field(default_factory=list)
    n_rows: int = 0
    search: list[dict[str, Any]] = field(default_factory=list)
    trimmed: int = 0

    @property
    def log_scale(self) -> bool:
        return self.model.target_transform == "log1p"

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "model": self.model.to_dict(),
            "sigma": self.sigma,
            "training_day": self.training_day.isoformat(),
            "fallback": self.fallback,
            "excluded": self.excluded,
            "n_rows": self.n_rows,
            "search": self.search,
            "trimmed": self.trimmed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MonitoringModel":
        return cls(
            d["target"],
            FittedModel.from_dict(d["model"]),
            float(d["sigma"]),
            dt.date.fromisoformat(d["training_day"]),
            bool(d["fallback"]),
            list(d.get("excluded", [])),
            int(d.get("n_rows", 0)),
            list(d.get("search", [])),
            int(d.get("trimmed", 0)),
        )


def _robust_outliers(resid: np.ndarray, clip: float) -> np.ndarray:
    """Boolean mask of residuals beyond ``clip`` robust standard deviations."""
    med = np.median(resid)
    scale = 1.4826 * np.median(np.abs(resid - med))
    if not scale > 0:
        return np.zeros(len(resid), dtype=bool)
    return np.abs(resid - med) > clip * scale


def residual_sigma(resid: np.ndarray, estimator: str = "clipped", clip: float = 5.0) -> float:
    """Dispersion of held-out residuals.

    "std" is the plain standard deviation. "clipped" first drops residuals
    further than ``clip`` robust standard deviations (1.4826 * MAD) from the
    median, so a handful of contaminated training rows cannot inflate the
    spread for everybody; on clean, roughly normal residuals it matches "std".
    """
    r = np.asarray(resid, dtype=np.float64)
    r = r[np.isfinite(r)]
    if len(r) == 0:
        return float("nan")
    if estimator == "std":
        return float(np.std(r))
    if estimator != "clipped":
        raise ConfigError(f"unknown sigma estimator {estimator!r}")
    return float(np.std(r[~_robust_outliers(r, clip)]))


def _oof_residuals(spec: PipelineSpec, table: DataTable, folds: int, seed: int) -> np.ndarray:
    """Residuals pooled over k held-out folds."""
    n = table.n_rows
    k = max(2, min(folds, n))
    order = np.random.default_rng(seed).permutation(n)
    resid = []
    for f in range(k):
        held = np.sort(order[f::k])
        fit_idx = np.setdiff1d(np.arange(n), held)
        try:
            m = fit_pipeline(spec, table.take(fit_idx), None)
        except (ValueError, KeyError):
            continue
        y = apply_table_transforms(table.take(held), m.table_transforms).y()
        resid.append(y - m.predict(table.take(held)))
    return np.concatenate(resid) if resid else np.array([])


def train_monitoring_model(
    target: str,
    table: DataTable,
    training_day: dt.date,
    blueprint: Blueprint,
    cfg: MonitorConfig = MonitorConfig(),
    workers: int | None = None,
) -> MonitoringModel:
    """Fit the shared model for one target from the prior day's profile table.

    Identifier columns are removed before anything sees the data. Tables
    with fewer than ``cfg.min_rows`` rows get a context-free model (intercept
    and sigma only).
    """
    if table.target is None or table.target not in table.columns:
        raise ConfigError(f"target column for {target!r} absent from training table")
    excluded = [c for c in cfg.identifier_columns if c in table.columns]
    if excluded:
        log.info("%s: identifier columns excluded from inputs: %s", target, excluded)
        table = table.without(excluded)
    bp = monitoring_blueprint(blueprint, target, excluded)

    if table.n_rows < max(cfg.min_rows, 10):
        spec = PipelineSpec(encoders=(), table_transforms=(TableTransform("log_target", {}),))
        model = fit_pipeline(spec, table, None)
        sigma = residual_sigma(_oof_residuals(spec, table, cfg.cv_folds, bp.seed), cfg.sigma_estimator, cfg.sigma_clip)
        fallback = True
        search: list[dict[str, Any]] = []
        trimmed = 0
    else:
        train, tune = split_train_tune(table, bp.tune_fraction, bp.seed)
        model, entries = explore(bp, train, tune, workers)
        search = [
            {"experiment": e.experiment, "tune_rmse": e.tune_rmse, "pipeline": e.pipeline, "error": e.error}
            for e in entries
        ]
        trimmed = 0
        if cfg.trim_outliers:
            # a few rows of live attacker activity can drag every coefficient;
            # refit the chosen pipeline once without the gross outliers
            spec = PipelineSpec.from_dict(model.pipeline)
            budget = int(cfg.max_trim_fraction * table.n_rows)
            for _ in range(cfg.trim_rounds):
                resid = apply_table_transforms(table, model.table_transforms).y() - model.predict(table)
                out = _robust_outliers(resid, cfg.sigma_clip)
                n_out = int(out.sum())
                if n_out == 0 or trimmed + n_out > budget or table.n_rows - n_out < 10:
                    break
                table = table.take(np.flatnonzero(~out))
                train, tune = split_train_tune(table, bp.tune_fraction, bp.seed)
                model = fit_pipeline(spec, train, tune)
                trimmed += n_out
            if trimmed:
                log.info("%s: refit without %d outlying training rows", target, trimmed)
        if tune.n_rows < cfg.min_tune_rows:
            resid = _oof_residuals(PipelineSpec.from_dict(model.pipeline), table, cfg.cv_folds, bp.seed)
        else:
            resid = apply_table_transforms(tune, model.table_transforms).y() - model.predict(tune)
        sigma = residual_sigma(resid, cfg.sigma_estimator, cfg.sigma_clip)
        if not math.isfinite(sigma):
            sigma = model.sigma
        fallback = False
    if not math.isfinite(sigma) or sigma < cfg.sigma_min:
        sigma = cfg.sigma_min
    return MonitoringModel(target, model, float(sigma), training_day, fallback, excluded, table.n_rows + trimmed, search, trimmed)


def score(
    mm: MonitoringModel,
    rows: Sequence[Mapping[str, Any]],
    day: dt.date,
    cfg: MonitorConfig = MonitorConfig(),
) -> list[SurpriseScore]:
    """Score profile rows of ``day`` under a model trained strictly earlier."""
    if not mm.training_day < day:
        raise ValueError(f"model for {mm.target} trained on {mm.training_day} cannot score {day}")
    if not rows:
        return []
    table = rows_to_table(rows, target=None)
    explanations = mm.model.explain(table)
    out = []
    for row, ex in zip(rows, explanations):
        actual = float(row[TARGET_COLUMN])
        median = ex.natural_prediction
        p = exceedance(actual, median, mm.sigma, mm.log_scale)
        out.append(
            SurpriseScore(
                day=day,
                host=row["host"],
                target=mm.target,
                remote=row.get("remote"),
                actual=actual,
                predicted=median,
                p=p,
                risk=risk_from_p(p, cfg.p_floor, cfg.risk_cap),
                explanation=ex,
                model_day=mm.training_day,
            )
        )
    return out
