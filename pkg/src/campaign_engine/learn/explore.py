"""Blueprint-driven automated exploration over learning pipelines.

The planner starts from a quick heuristic pipeline, then runs rounds of
coordinate search: each unspecified blueprint field is varied over its menu
while the others stay at the current best. It stops when the time budget
(``time_tradeoff`` seconds after the quick model) expires, every variation
has been tried, a round improves tune RMSE by no more than 0.1%, or an
optional good-enough RMSE is reached.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .encoders import CLUSTER_STRING, ONE_HOT, PASSTHROUGH, QUANTILE_BINS, TREE
from .linear import LASSO, RIDGE
from .model import FittedModel
from .pipeline import EncoderChoice, PipelineSpec, fit_pipeline
from .table import NUMERIC, STRING, DataTable, TableTransform, apply_table_transforms

log = logging.getLogger(__name__)

AUTO = "auto"
LAMBDA_GRID = tuple(float(v) for v in np.logspace(-4, 1, 6))
NUMERIC_MENU = ((PASSTHROUGH, ()), (QUANTILE_BINS, (("k", 8),)), (TREE, ()))
STRING_MENU = ((ONE_HOT, ()), (CLUSTER_STRING, ()))
ONE_HOT_MAX_VALUES = 30
WORKERS_ENV = "CAMPAIGN_ENGINE_WORKERS"


class ExplorationError(ValueError):
    """The blueprint leaves nothing to run."""


def _choice(spec: Any) -> tuple[str, tuple]:
    if isinstance(spec, str):
        return spec, ()
    if isinstance(spec, Mapping):
        hyper = {k: v for k, v in spec.items() if k != "kind"}
        return spec["kind"], tuple(sorted(hyper.items()))
    kind, hyper = spec
    return kind, tuple(sorted(dict(hyper).items()))


@dataclass
class Blueprint:
    """Instructions for building a model; any field may be left as ``"auto"``.

    ``encoders`` maps input column -> "auto" | kind | {"kind": ..., **hyper};
    unlisted inputs are "auto". ``explorations`` restricts menus, e.g.
    ``{"interaction": [1, 2], "regularization": ["ridge"], "lambdas": [...],
    "encoders": {"col": ["passthrough", "tree"]}, "max_experiments": 40}``.
    Interaction order 1 means no interaction transform.
    """

    table_transforms: list[TableTransform] = field(default_factory=list)
    encoders: dict[str, Any] = field(default_factory=dict)
    interaction_order: int | str = AUTO
    regularization: str = AUTO
    lam: float | str = AUTO
    time_tradeoff: float = 10.0
    explorations: dict[str, Any] = field(default_factory=dict)
    exclude: list[str] = field(default_factory=list)
    tune_fraction: float = 0.2
    seed: int = 0
    good_enough_rmse: float | None = None
    feature_cap: int = 5000
    min_support: int = 1
    encoder_hyper: dict[str, dict[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "table_transforms": [t.to_dict() for t in self.table_transforms],
            "encoders": dict(self.encoders),
            "interaction_order": self.interaction_order,
            "regularization": self.regularization,
            "lam": self.lam,
            "time_tradeoff": self.time_tradeoff,
            "explorations": self.explorations,
            "exclude": list(self.exclude),
            "tune_fraction": self.tune_fraction,
            "seed": self.seed,
            "good_enough_rmse": self.good_enough_rmse,
            "feature_cap": self.feature_cap,
            "min_support": self.min_support,
            "encoder_hyper": self.encoder_hyper,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Blueprint":
        d = dict(d)
        d["table_transforms"] = [
            t if isinstance(t, TableTransform) else TableTransform.from_dict(t)
            for t in d.get("table_transforms", [])
        ]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown blueprint fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SearchEntry:
    experiment: int
    round: int
    pipeline: dict[str, Any]
    tune_rmse: float
    seconds: float
    error: str | None = None


@dataclass
class Field:
    name: str
    options: list[Any]


def _column_kinds(blueprint: Blueprint, train: DataTable) -> dict[str, str]:
    t = apply_table_transforms(train.take(np.arange(min(train.n_rows, 50))), blueprint.table_transforms)
    return {c: t.kinds[c] for c in t.columns if c != t.target and c not in blueprint.exclude}


def _default_encoder(kind: str, values: np.ndarray) -> tuple[str, tuple]:
    if kind == NUMERIC:
        return PASSTHROUGH, ()
    distinct = len({v for v in values if v is not None})
    return (ONE_HOT, ()) if distinct <= ONE_HOT_MAX_VALUES else (CLUSTER_STRING, ())


def _menu(kind: str, allowed: Sequence[Any] | None) -> list[tuple[str, tuple]]:
    base = NUMERIC_MENU if kind == NUMERIC else STRING_MENU if kind == STRING else ()
    if allowed is None:
        return list(base)
    return [_choice(a) for a in allowed]


class Planner:
    """Expands a blueprint into experiments and tracks the best result."""

    def __init__(self, blueprint: Blueprint, train: DataTable, tune: DataTable):
        self.bp = blueprint
        self.train = train
        self.tune = tune
        self.kinds = _column_kinds(blueprint, train)
        sample = apply_table_transforms(train, blueprint.table_transforms)
        exp = blueprint.explorations
        self.fields: list[Field] = []
        current: dict[str, Any] = {}

        enc_allowed = exp.get("encoders", {})
        for col, kind in self.kinds.items():
            if kind not in (NUMERIC, STRING):
                continue  # timestamps need a table transform first
            spec = blueprint.encoders.get(col, AUTO)
            if spec is None or spec == "drop":
                continue
            if spec != AUTO:
                current[f"enc:{col}"] = _choice(spec)
                continue
            menu = _menu(kind, enc_allowed.get(col))
            if not menu:
                raise ExplorationError(f"explorations allow no encoder for column {col!r}")
            default = _default_encoder(kind, sample.columns[col])
            if default not in menu and menu:
                default = menu[0]
            current[f"enc:{col}"] = default
            if len(menu) > 1:
                self.fields.append(Field(f"enc:{col}", menu))

        if blueprint.interaction_order == AUTO:
            orders = [int(o) for o in exp.get("interaction", [1])]
            if not orders:
                raise ExplorationError("explorations allow no interaction order")
            current["interaction"] = orders[0]
            if len(orders) > 1:
                self.fields.append(Field("interaction", orders))
        else:
            current["interaction"] = int(blueprint.interaction_order)

        if blueprint.regularization == AUTO:
            regs = list(exp.get("regularization", [RIDGE, LASSO]))
            if not regs:
                raise ExplorationError("explorations allow no regularization family")
            current["regularization"] = regs[0]
            if len(regs) > 1:
                self.fields.append(Field("regularization", regs))
        else:
            current["regularization"] = blueprint.regularization

        if blueprint.lam == AUTO:
            grid = [float(v) for v in exp.get("lambdas", LAMBDA_GRID)]
            if not grid:
                raise ExplorationError("explorations allow no regularization strength")
            current["lam"] = grid[len(grid) // 2] if len(grid) > 2 else grid[0]
            if len(grid) > 1:
                self.fields.append(Field("lam", grid))
        else:
            current["lam"] = float(blueprint.lam)

        self.initial = current
        self.max_experiments = int(exp.get("max_experiments", 10_000))
        self.tried: set[str] = set()

    @staticmethod
    def key(config: Mapping[str, Any]) -> str:
        return json.dumps({k: config[k] for k in sorted(config)}, sort_keys=True, default=list)

    def spec(self, config: Mapping[str, Any]) -> PipelineSpec:
        encoders = []
        for col in self.kinds:
            key = f"enc:{col}"
            if key not in config:
                continue
            kind, hyper = config[key]
            hp = dict(self.bp.encoder_hyper.get(kind, {}))
            hp.update(dict(hyper))
            encoders.append(EncoderChoice(col, kind, tuple(sorted(hp.items()))))
        return PipelineSpec(
            encoders=tuple(encoders),
            table_transforms=tuple(self.bp.table_transforms),
            interaction_order=int(config["interaction"]),
            regularization=config["regularization"],
            lam=float(config["lam"]),
            feature_cap=self.bp.feature_cap,
            min_support=self.bp.min_support,
        )

    def neighbours(self, best: Mapping[str, Any], f: Field) -> list[dict[str, Any]]:
        out = []
        for opt in f.options:
            cand = dict(best)
            cand[f.name] = opt
            k = self.key(cand)
            if k not in self.tried:
                out.append(cand)
        return out


def _run(planner: Planner, config: dict[str, Any]) -> tuple[FittedModel | None, float, float, str | None]:
    t0 = time.perf_counter()
    try:
        model = fit_pipeline(planner.spec(config), planner.train, planner.tune)
        err = model.tune_rmse
        if not math.isfinite(err):
            return None, math.inf, time.perf_counter() - t0, "non-finite tune error"
        return model, err, time.perf_counter() - t0, None
    except (ValueError, KeyError) as exc:
        return None, math.inf, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def explore(
    blueprint: Blueprint, train: DataTable, tune: DataTable, workers: int | None = None
) -> tuple[FittedModel, list[SearchEntry]]:
    """Search pipelines allowed by the blueprint; return the best model and the log."""
    planner = Planner(blueprint, train, tune)
    workers = workers or default_workers()
    search: list[SearchEntry] = []
    best_model: FittedModel | None = None
    best_err = math.inf
    best_cfg = planner.initial

    def record(batch: list[dict[str, Any]], rnd: int) -> None:
        nonlocal best_model, best_err, best_cfg
        for cfg in batch:
            planner.tried.add(planner.key(cfg))
        if workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda c: _run(planner, c), batch))
        else:
            results = [_run(planner, c) for c in batch]
        for cfg, (model, err, secs, error) in zip(batch, results):
            search.append(
                SearchEntry(len(search), rnd, planner.spec(cfg).to_dict(), err, secs, error)
            )
            if model is not None and err < best_err:
                best_model, best_err, best_cfg = model, err, cfg

    record([dict(planner.initial)], 0)
    if not planner.fields and best_model is None:
        raise ExplorationError(f"the only experiment failed: {search[-1].error}")
    deadline = time.monotonic() + max(0.0, blueprint.time_tradeoff)

    rnd = 0
    while planner.fields:
        rnd += 1
        start_err = best_err
        ran = 0
        for f in planner.fields:
            if time.monotonic() >= deadline or len(search) >= planner.max_experiments:
                break
            batch = planner.neighbours(best_cfg, f)
            batch = batch[: planner.max_experiments - len(search)]
            if batch:
                record(batch, rnd)
                ran += len(batch)
            if blueprint.good_enough_rmse is not None and best_err <= blueprint.good_enough_rmse:
                break
        if ran == 0 or time.monotonic() >= deadline or len(search) >= planner.max_experiments:
            break
        if blueprint.good_enough_rmse is not None and best_err <= blueprint.good_enough_rmse:
            break
        if not (best_err < start_err * (1.0 - 1e-3)):
            break

    if best_model is None:
        raise ExplorationError("every experiment failed; see search log")
    return best_model, search


def direct_fit(blueprint: Blueprint, train: DataTable, tune: DataTable) -> FittedModel:
    """Fit a fully-specified blueprint without exploration."""
    planner = Planner(blueprint, train, tune)
    if planner.fields:
        raise ExplorationError("blueprint is not fully specified")
    return fit_pipeline(planner.spec(planner.initial), train, tune)
