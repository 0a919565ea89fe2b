"""One fully-specified learning pipeline: table transforms -> encoders ->
interactions -> standardized regularized linear fit -> tune-set error."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp

from .encoders import ONE_HOT, Encoder, fit_encoder
from .encoders import encode as encode_columns
from .linear import RIDGE, fit_linear
from .model import FittedModel
from .sparse import SparseMatrix, apply_interactions, plan_interactions
from .table import DataTable, TableTransform, apply_table_transforms


@dataclass(frozen=True)
class EncoderChoice:
    column: str
    kind: str
    hyper: tuple[tuple[str, Any], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"column": self.column, "kind": self.kind, "hyper": dict(self.hyper)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EncoderChoice":
        return cls(d["column"], d["kind"], tuple(sorted(dict(d.get("hyper", {})).items())))


@dataclass(frozen=True)
class PipelineSpec:
    """Complete instructions for one experiment."""

    encoders: tuple[EncoderChoice, ...]
    table_transforms: tuple[TableTransform, ...] = ()
    interaction_order: int = 1
    regularization: str = RIDGE
    lam: float = 0.0
    feature_cap: int = 5000
    min_support: int = 1
    extra: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "table_transforms": [t.to_dict() for t in self.table_transforms],
            "encoders": [e.to_dict() for e in self.encoders],
            "interaction_order": self.interaction_order,
            "regularization": self.regularization,
            "lam": self.lam,
            "feature_cap": self.feature_cap,
            "min_support": self.min_support,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelineSpec":
        return cls(
            encoders=tuple(EncoderChoice.from_dict(e) for e in d["encoders"]),
            table_transforms=tuple(TableTransform.from_dict(t) for t in d.get("table_transforms", [])),
            interaction_order=int(d.get("interaction_order", 1)),
            regularization=d.get("regularization", RIDGE),
            lam=float(d.get("lam", 0.0)),
            feature_cap=int(d.get("feature_cap", 5000)),
            min_support=int(d.get("min_support", 1)),
        )


def rmse(residuals: np.ndarray) -> float:
    return float(np.sqrt(np.mean(residuals**2))) if len(residuals) else float("nan")


def drop_rare_features(x: SparseMatrix, min_support: int) -> SparseMatrix:
    """Zero every column with fewer than ``min_support`` non-zero training rows.

    A zeroed column has no variance, so the fit leaves its coefficient at 0
    and it never contributes to a prediction. The column stays in place so
    the frozen encoders and interaction plans still line up at predict time.
    """
    support = np.diff(x.csr.tocsc().indptr)
    rare = support < min_support
    if not rare.any():
        return x
    return SparseMatrix(x.csr @ sp.diags((~rare).astype(np.float64)), x.derivations, x.monomials)


def fit_pipeline(
    spec: PipelineSpec, train: DataTable, tune: DataTable | None = None
) -> FittedModel:
    """Run the pipeline on train, score it on tune, and freeze the result.

    One-hot dictionaries are collected from train and tune values; all other
    encoder statistics come from train only. Without a tune table, sigma and
    the reported error fall back to training residuals.
    """
    inputs = [c for c in train.columns if c != train.target]
    kinds = {c: train.kinds[c] for c in inputs}
    transforms = list(spec.table_transforms)
    tr = apply_table_transforms(train, transforms)
    tu = apply_table_transforms(tune, transforms) if tune is not None and tune.n_rows else None

    y = tr.y()
    encoders: list[Encoder] = []
    for choice in spec.encoders:
        if choice.column not in tr.columns:
            raise KeyError(f"encoder column {choice.column!r} not present after table transforms")
        values = tr.columns[choice.column]
        if choice.kind == ONE_HOT and tu is not None:
            values = np.concatenate([values, tu.columns[choice.column]])
        encoders.append(fit_encoder(choice.kind, choice.column, values, y, **dict(choice.hyper)))

    x = encode_columns(tr.columns, encoders)
    plans = []
    for _ in range(max(0, spec.interaction_order - 1)):
        plan = plan_interactions(x, spec.feature_cap, skip_duplicates=True)
        plans.append(plan)
        x = apply_interactions(x, plan)

    if spec.min_support > 1:
        x = drop_rare_features(x, spec.min_support)
    linear = fit_linear(x, y, spec.regularization, spec.lam)
    model = FittedModel(
        input_columns=inputs,
        input_kinds=kinds,
        table_transforms=transforms,
        encoders=encoders,
        interaction_plans=plans,
        linear=linear,
        derivations=list(x.derivations),
        sigma=float("nan"),
        target_transform=tr.target_transform,
        pipeline=spec.to_dict(),
    )
    if tu is not None:
        resid = tu.y() - model.predict(tune)
    else:
        resid = y - linear.predict(x)
    model.tune_rmse = rmse(resid)
    model.sigma = float(np.std(resid)) if len(resid) else float("nan")
    return model
