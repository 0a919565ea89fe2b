"""Frozen prediction models and per-prediction reason codes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .encoders import Encoder, encode
from .linear import LinearModel
from .sparse import InteractionPlan, SparseMatrix, apply_interactions
from .table import DataTable, SchemaError, TableTransform, apply_table_transforms


@dataclass(frozen=True)
class ReasonCode:
    derivation: str
    contribution: float

    @property
    def factor(self) -> float:
        return math.exp(self.contribution)


@dataclass(frozen=True)
class Explanation:
    """One prediction decomposed into a baseline plus per-feature terms.

    ``baseline + sum(contributions) == prediction`` in model space. For a
    log1p target the multiplicative view holds on the exp scale:
    ``exp(baseline) * prod(factors) == exp(prediction)``, and the prediction
    in natural units is ``exp(prediction) - 1``.
    """

    prediction: float
    baseline: float
    reasons: tuple[ReasonCode, ...]
    target_transform: str | None = None

    @property
    def multiplicative(self) -> bool:
        return self.target_transform == "log1p"

    @property
    def natural_prediction(self) -> float:
        return math.expm1(self.prediction) if self.multiplicative else self.prediction

    @property
    def baseline_value(self) -> float:
        """Baseline on the scale where factors multiply (exp scale for log targets)."""
        return math.exp(self.baseline) if self.multiplicative else self.baseline

    @property
    def product_value(self) -> float:
        """baseline times all factors (multiplicative) or baseline plus terms (additive)."""
        if self.multiplicative:
            return self.baseline_value * math.prod(r.factor for r in self.reasons)
        return self.baseline + math.fsum(r.contribution for r in self.reasons)

    def to_dict(self) -> dict[str, Any]:
        return {
            "prediction": self.prediction,
            "baseline": self.baseline,
            "target_transform": self.target_transform,
            "reasons": [[r.derivation, r.contribution] for r in self.reasons],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Explanation":
        return cls(
            float(d["prediction"]),
            float(d["baseline"]),
            tuple(ReasonCode(a, float(b)) for a, b in d["reasons"]),
            d.get("target_transform"),
        )


@dataclass
class FittedModel:
    """Frozen table transforms, encoders and matrix transforms plus a linear model.

    ``sigma`` is the standard deviation of tune-set residuals in model space.
    """

    input_columns: list[str]
    input_kinds: dict[str, str]
    table_transforms: list[TableTransform]
    encoders: list[Encoder]
    interaction_plans: list[InteractionPlan]
    linear: LinearModel
    derivations: list[str]
    sigma: float
    target_transform: str | None = None
    tune_rmse: float = float("nan")
    pipeline: dict[str, Any] = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.derivations)

    def features(self, table: DataTable) -> SparseMatrix:
        for c in self.input_columns:
            if c not in table.columns:
                raise SchemaError(f"schema mismatch: input column {c!r} missing")
        t = table.without([c for c in table.columns if c not in self.input_columns])
        t = apply_table_transforms(t, self.table_transforms)
        x = encode(t.columns, self.encoders)
        for plan in self.interaction_plans:
            x = apply_interactions(x, plan)
        return x

    def predict(self, table: DataTable) -> np.ndarray:
        """Model-space predictions (log1p scale for log targets)."""
        return self.linear.predict(self.features(table))

    def natural(self, values: np.ndarray | float) -> np.ndarray | float:
        return np.expm1(values) if self.target_transform == "log1p" else values

    def explain(self, table: DataTable, rows: Sequence[int] | None = None) -> list[Explanation]:
        x = self.features(table)
        pred = self.linear.predict(x)
        rows = range(table.n_rows) if rows is None else rows
        out = []
        for i in rows:
            terms = [
                ReasonCode(self.derivations[j], c) for j, c in self.linear.contributions(x, i)
            ]
            terms.sort(key=lambda r: (-abs(r.contribution), r.derivation))
            out.append(
                Explanation(float(pred[i]), self.linear.intercept, tuple(terms), self.target_transform)
            )
        return out

    def predict_row(self, row: dict[str, Any]) -> tuple[float, list[tuple[str, float]]]:
        """Single-row convenience: (natural-unit prediction, [(derivation, contribution)])."""
        kinds = {c: self.input_kinds[c] for c in self.input_columns}
        table = DataTable.from_records([row], kinds)
        e = self.explain(table)[0]
        return e.natural_prediction, [(r.derivation, r.contribution) for r in e.reasons]

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "format": "fitted-model/1",
            "input_columns": self.input_columns,
            "input_kinds": self.input_kinds,
            "table_transforms": [t.to_dict() for t in self.table_transforms],
            "encoders": [e.to_dict() for e in self.encoders],
            "interaction_plans": [p.to_dict() for p in self.interaction_plans],
            "linear": self.linear.to_dict(),
            "derivations": self.derivations,
            "sigma": self.sigma,
            "target_transform": self.target_transform,
            "tune_rmse": None if math.isnan(self.tune_rmse) else self.tune_rmse,
            "pipeline": self.pipeline,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FittedModel":
        return cls(
            input_columns=list(d["input_columns"]),
            input_kinds=dict(d["input_kinds"]),
            table_transforms=[TableTransform.from_dict(t) for t in d["table_transforms"]],
            encoders=[Encoder.from_dict(e) for e in d["encoders"]],
            interaction_plans=[InteractionPlan.from_dict(p) for p in d["interaction_plans"]],
            linear=LinearModel.from_dict(d["linear"]),
            derivations=list(d["derivations"]),
            sigma=float(d["sigma"]),
            target_transform=d.get("target_transform"),
            tune_rmse=float("nan") if d.get("tune_rmse") is None else float(d["tune_rmse"]),
            pipeline=dict(d.get("pipeline", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        return cls.from_dict(json.loads(text))
