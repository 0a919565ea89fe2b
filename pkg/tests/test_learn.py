import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from campaign_engine.learn.encoders import Encoder, fit_encoder, quantile_fences
from campaign_engine.learn.explore import Blueprint, ExplorationError, direct_fit, explore
from campaign_engine.learn.linear import fit_linear, lbfgs
from campaign_engine.learn.model import FittedModel
from campaign_engine.learn.pipeline import EncoderChoice, PipelineSpec, drop_rare_features, fit_pipeline
from campaign_engine.learn.sparse import (
    FeatureCapError,
    InteractionPlan,
    SparseMatrix,
    Standardizer,
    apply_interactions,
    interaction_transform,
    plan_interactions,
)
from campaign_engine.learn.table import (
    DataTable,
    SchemaError,
    TableTransform,
    apply_table_transforms,
    calendar,
    rolling,
    split_train_tune,
)


def dense(x, names=None):
    x = np.asarray(x, dtype=float)
    return SparseMatrix.from_dense(x, names or [f"x{j}" for j in range(x.shape[1])])


# -- sparse -------------------------------------------------------------------


def test_interaction_full_expansion_count():
    m = dense(np.random.default_rng(0).normal(size=(6, 3)))
    out = interaction_transform(m, 2)
    assert out.n_cols == 3 + 6
    assert "x0*x1" in out.derivations and "x2^2" in out.derivations
    np.testing.assert_allclose(out.to_dense()[:, out.derivations.index("x0*x2")], m.to_dense()[:, 0] * m.to_dense()[:, 2])


def test_interaction_skips_duplicate_indicator_squares():
    m = dense([[1, 0], [0, 1], [1, 1]], ["a", "b"])
    plan = plan_interactions(m, skip_duplicates=True)
    assert plan.pairs == ((0, 1),)
    assert InteractionPlan.from_dict(plan.to_dict()) == plan
    with pytest.raises(ValueError):
        apply_interactions(dense([[1.0]]), plan)


def test_feature_cap():
    with pytest.raises(FeatureCapError):
        plan_interactions(dense(np.ones((2, 10))), feature_cap=20)


@given(st.integers(0, 10**6))
def test_standardizer_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 4)) * (rng.random((30, 4)) < 0.5)
    x[:, 3] = 2.0
    s = Standardizer.fit(dense(x))
    np.testing.assert_allclose(s.means, x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(s.stds[:3], x[:, :3].std(axis=0), atol=1e-12)
    assert s.keep.tolist() == [True, True, True, False] or x[:, :3].std(axis=0).min() == 0


# -- optimizer and GLM ----------------------------------------------------------


def test_lbfgs_rosenbrock():
    def f(v):
        a, b = v
        val = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
        return val, g

    res = lbfgs(f, np.array([-1.2, 1.0]), tol=1e-8, max_iter=1000)
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.sampled_from([1e-3, 1e-2, 0.1, 1.0]))
def test_ridge_matches_closed_form(seed, lam):
    rng = np.random.default_rng(seed)
    n, p = 80, 4
    x = rng.normal(size=(n, p))
    y = x @ rng.normal(size=p) + 1.5 + rng.normal(size=n)
    m = fit_linear(dense(x), y, "ridge", lam, tol=1e-10, max_iter=2000)
    mu, sd = x.mean(0), x.std(0)
    z = (x - mu) / sd
    b = np.linalg.solve(z.T @ z / n + 2 * lam * np.eye(p), z.T @ (y - y.mean()) / n)
    np.testing.assert_allclose(m.coef, b / sd, atol=1e-6)
    assert math.isclose(m.intercept, y.mean() - mu @ (b / sd), abs_tol=1e-6)


def test_unregularized_matches_ols():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3))
    y = x @ [1.0, -2.0, 0.5] + 4 + 0.1 * rng.normal(size=200)
    m = fit_linear(dense(x), y, lam=0.0, tol=1e-10)
    np.testing.assert_allclose([m.intercept, *m.coef], oracles.ols(x, y), atol=1e-6)


def test_lasso_zeroes_irrelevant_features():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 6))
    y = 3 * x[:, 0] + rng.normal(scale=0.1, size=300)
    m = fit_linear(dense(x), y, "lasso", 0.1)
    assert abs(m.coef[0]) > 2.5
    assert np.all(m.coef[1:] == 0.0)


def test_fit_linear_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_linear(dense([[1.0]]), [np.nan])
    with pytest.raises(ValueError):
        fit_linear(dense(np.eye(3)), [1.0, 2.0, 3.0], lam=-1)
    with pytest.raises(ValueError):
        fit_linear(dense(np.random.default_rng(0).normal(size=(3, 5))), [1.0, 2.0, 3.0], lam=0.0)


def test_constant_columns_get_zero_coefficient():
    x = np.c_[np.arange(10.0), np.ones(10)]
    m = fit_linear(dense(x), 2 * np.arange(10.0), lam=0.0)
    assert m.coef[1] == 0.0 and m.keep.tolist() == [True, False]


# -- encoders -------------------------------------------------------------------


def test_quantile_fences_merge_ties():
    assert quantile_fences(np.array([1.0] * 10), 4) == []
    assert quantile_fences(np.arange(8.0), 4) == [1.5, 3.5, 5.5]


def test_absent_indicator_only_when_training_had_missing():
    enc = fit_encoder("passthrough", "h", [1.0, np.nan, 3.0])
    assert enc.feature_names() == ["h", "h is absent"]
    assert enc.encode(np.array([np.nan])).to_dense().tolist() == [[0.0, 1.0]]
    assert fit_encoder("passthrough", "h", [1.0, 2.0]).feature_names() == ["h"]


@pytest.mark.parametrize("kind", ["passthrough", "quantile_bins", "tree", "one_hot", "cluster_string"])
def test_encoder_json_round_trip(kind):
    rng = np.random.default_rng(0)
    if kind in ("one_hot", "cluster_string"):
        v = np.array([f"s{int(i)}" for i in rng.integers(0, 12, 200)], dtype=object)
    else:
        v = rng.normal(size=200)
    enc = fit_encoder(kind, "c", v, rng.normal(size=200), **({"min_leaf": 20} if kind == "tree" else {}))
    back = Encoder.from_dict(json.loads(json.dumps(enc.to_dict())))
    np.testing.assert_array_equal(back.encode(v).to_dense(), enc.encode(v).to_dense())


def test_tree_finds_the_step():
    x = np.linspace(-1, 1, 400)
    enc = fit_encoder("tree", "x", x, (x > 0.3).astype(float), min_leaf=20, max_leaves=2)
    assert enc.params["splits"] == pytest.approx([0.3], abs=0.01)


def test_unknown_encoder_kind():
    with pytest.raises(ValueError):
        fit_encoder("magic", "x", [1.0])


# -- tables ---------------------------------------------------------------------


def test_table_schema_checks():
    with pytest.raises(SchemaError):
        DataTable.from_columns({"a": [1.0], "b": [1.0, 2.0]})
    with pytest.raises(SchemaError):
        DataTable.from_columns({"a": ["x"]}, target="a")


def test_split_is_disjoint_and_complete():
    t = DataTable.from_columns({"i": np.arange(50.0)})
    a, b = split_train_tune(t, 0.2, 7)
    assert sorted(np.r_[a.columns["i"], b.columns["i"]].tolist()) == list(range(50))
    assert b.n_rows == 10
    with pytest.raises(ValueError):
        split_train_tune(DataTable.from_columns({"i": np.arange(5.0)}), 0.2, 0)


def test_calendar_and_rolling():
    ts = np.array(["2024-03-01", "2024-03-02", "2024-03-04", "2024-03-20"], dtype="datetime64[s]")
    t = DataTable.from_columns({"t": ts, "e": ["a", "a", "a", "a"], "v": [1.0, 3.0, 5.0, 7.0]}, kinds={"t": "timestamp", "e": "string", "v": "numeric"})
    c = calendar(t, "t", holidays=["2024-03-04"])
    assert c.columns["t_day_of_week"].tolist() == ["fri", "sat", "mon", "wed"]
    assert c.columns["t_is_holiday"].tolist() == [0.0, 0.0, 1.0, 0.0]
    r = rolling(t, "v", "e", "t", 7, "median").columns["v_rolling_median_7d"]
    assert math.isnan(r[0]) and r[1] == 1.0 and r[2] == 2.0 and math.isnan(r[3])


def test_log_target_transform_round_trip():
    t = DataTable.from_columns({"x": [1.0, 2.0], "y": [0.0, 9.0]}, target="y")
    out = apply_table_transforms(t, [TableTransform("log_target")])
    assert out.target_transform == "log1p"
    np.testing.assert_allclose(out.y(), np.log1p([0.0, 9.0]))


# -- pipeline, model, explanations ---------------------------------------------------


def _table(seed=0, n=200):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    g = rng.choice(["u", "v", "w"], size=n)
    y = np.exp(1 + 0.5 * x + (g == "u") * 0.7 + 0.05 * rng.normal(size=n))
    return DataTable.from_columns({"x": x, "g": g.astype(object), "y": y}, target="y")


def _spec(order=1, lam=1e-3):
    return PipelineSpec(
        encoders=(EncoderChoice("x", "passthrough"), EncoderChoice("g", "one_hot")),
        table_transforms=(TableTransform("log_target"),),
        interaction_order=order,
        lam=lam,
    )


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.integers(1, 2))
def test_reason_codes_sum_to_prediction(seed, order):
    t = _table(seed % 50)
    m = fit_pipeline(_spec(order), t)
    for ex, p in zip(m.explain(t, range(10)), m.predict(t)[:10]):
        assert math.isclose(ex.baseline + math.fsum(r.contribution for r in ex.reasons), p, abs_tol=1e-9)
        assert math.isclose(ex.product_value, math.exp(p), rel_tol=1e-9)
        assert math.isclose(ex.natural_prediction, math.expm1(p), rel_tol=1e-12)


def test_model_json_round_trip():
    t = _table()
    m = fit_pipeline(_spec(2), t)
    back = FittedModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.predict(t), m.predict(t))
    assert back.derivations == m.derivations


def test_model_rejects_missing_input_column():
    m = fit_pipeline(_spec(), _table())
    with pytest.raises(SchemaError):
        m.predict(DataTable.from_columns({"x": [1.0]}))


def test_drop_rare_features_keeps_shape():
    x = dense([[1, 0, 1], [1, 0, 0], [1, 1, 0], [1, 0, 0]])
    out = drop_rare_features(x, 2)
    assert out.shape == x.shape
    assert out.to_dense()[:, 1:].sum() == 0.0 and out.to_dense()[:, 0].sum() == 4


def test_min_support_freezes_one_row_features():
    rng = np.random.default_rng(3)
    g = np.array(["common"] * 99 + ["lonely"], dtype=object)
    y = np.r_[rng.normal(size=99), 50.0]
    t = DataTable.from_columns({"g": g, "y": y}, target="y")
    spec = PipelineSpec(encoders=(EncoderChoice("g", "one_hot"),), lam=1e-4, min_support=5)
    m = fit_pipeline(spec, t)
    assert m.linear.coef[m.derivations.index("g = lonely")] == 0.0


def test_explore_respects_budget_and_reports_best():
    train, tune = split_train_tune(_table(n=300), 0.2, 0)
    bp = Blueprint(
        table_transforms=[TableTransform("log_target")],
        encoders={"g": "one_hot"},
        explorations={"interaction": [1, 2], "lambdas": [1e-3, 1e-1], "max_experiments": 5},
    )
    model, log = explore(bp, train, tune)
    assert len(log) <= 5
    assert model.tune_rmse == min(e.tune_rmse for e in log if e.error is None)


def test_direct_fit_requires_full_spec():
    train, tune = split_train_tune(_table(), 0.2, 0)
    with pytest.raises(ExplorationError):
        direct_fit(Blueprint(), train, tune)
    bp = Blueprint(
        encoders={"x": "passthrough", "g": "one_hot"}, interaction_order=1, regularization="ridge", lam=0.01
    )
    assert direct_fit(bp, train, tune).pipeline["lam"] == 0.01


def test_blueprint_round_trip_and_unknown_fields():
    bp = Blueprint(encoders={"x": "tree"}, min_support=3)
    assert Blueprint.from_dict(bp.to_dict()) == bp
    with pytest.raises(ValueError):
        Blueprint.from_dict({"colour": "blue"})
