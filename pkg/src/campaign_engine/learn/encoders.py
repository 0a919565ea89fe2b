"""Encoders: learned functions turning one table column into sparse features.

Numeric missing values (NaN) produce no value features; if the training
column contained NaN, an extra ``<col> is absent`` indicator is emitted.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp

from .sparse import SparseMatrix

log = logging.getLogger(__name__)

PASSTHROUGH = "passthrough"
QUANTILE_BINS = "quantile_bins"
TREE = "tree"
ONE_HOT = "one_hot"
CLUSTER_STRING = "cluster_string"

NUMERIC_KINDS = (PASSTHROUGH, QUANTILE_BINS, TREE)
STRING_KINDS = (ONE_HOT, CLUSTER_STRING)
ENCODER_KINDS = NUMERIC_KINDS + STRING_KINDS

DEFAULTS: dict[str, dict[str, Any]] = {
    PASSTHROUGH: {},
    QUANTILE_BINS: {"k": 8},
    TREE: {"min_leaf": 50, "max_leaves": 16},
    ONE_HOT: {},
    CLUSTER_STRING: {"min_samples": 30, "k": 8},
}


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def interval_label(column: str, lo: float, hi: float) -> str:
    if np.isinf(lo) and np.isinf(hi):
        return f"{column} is present"
    if np.isinf(lo):
        return f"{column} < {_fmt(hi)}"
    if np.isinf(hi):
        return f"{column} >= {_fmt(lo)}"
    return f"{_fmt(lo)} <= {column} < {_fmt(hi)}"


def _indicator_block(
    n: int, active_col: np.ndarray, width: int, names: list[str]
) -> SparseMatrix:
    """One-per-row indicator matrix; rows with ``active_col < 0`` stay empty."""
    rows = np.flatnonzero(active_col >= 0)
    data = np.ones(len(rows))
    csr = sp.csr_matrix((data, (rows, active_col[rows])), shape=(n, width))
    return SparseMatrix(csr, names)


def _with_absent(block: SparseMatrix, column: str, missing: np.ndarray) -> SparseMatrix:
    ind = sp.csr_matrix(missing.astype(np.float64).reshape(-1, 1))
    csr = sp.hstack([block.csr, ind], format="csr")
    return SparseMatrix(csr, block.derivations + [f"{column} is absent"])


@dataclass
class Encoder:
    """A fitted encoder. ``params`` holds only JSON-serializable values."""

    kind: str
    column: str
    params: dict[str, Any] = field(default_factory=dict)

    # -- encoding ----------------------------------------------------------
    def encode(self, values: np.ndarray) -> SparseMatrix:
        values = np.asarray(values)
        if self.kind == PASSTHROUGH:
            return self._encode_passthrough(values)
        if self.kind == QUANTILE_BINS:
            return self._encode_intervals(values, [-np.inf, *self.params["fences"], np.inf])
        if self.kind == TREE:
            return self._encode_intervals(values, [-np.inf, *self.params["splits"], np.inf])
        if self.kind == ONE_HOT:
            return self._encode_one_hot(values)
        if self.kind == CLUSTER_STRING:
            return self._encode_cluster(values)
        raise ValueError(f"unknown encoder kind {self.kind!r}")

    @property
    def width(self) -> int:
        return len(self.feature_names())

    def feature_names(self) -> list[str]:
        return self.encode(np.empty(0, dtype=object if self.kind in STRING_KINDS else float)).derivations

    def _numeric(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(values, dtype=np.float64)
        return v, np.isnan(v)

    def _encode_passthrough(self, values: np.ndarray) -> SparseMatrix:
        v, missing = self._numeric(values)
        col = np.where(missing, 0.0, v).reshape(-1, 1)
        block = SparseMatrix(sp.csr_matrix(col), [self.column])
        if self.params.get("has_missing"):
            block = _with_absent(block, self.column, missing)
        return block

    def _encode_intervals(self, values: np.ndarray, edges: list[float]) -> SparseMatrix:
        v, missing = self._numeric(values)
        inner = np.asarray(edges[1:-1], dtype=np.float64)
        idx = np.searchsorted(inner, np.where(missing, 0.0, v), side="right")
        idx = np.where(missing, -1, idx)
        names = [interval_label(self.column, edges[i], edges[i + 1]) for i in range(len(edges) - 1)]
        block = _indicator_block(len(v), idx, len(names), names)
        if self.params.get("has_missing"):
            block = _with_absent(block, self.column, missing)
        return block

    def _encode_one_hot(self, values: np.ndarray) -> SparseMatrix:
        vocab = self.params["values"]
        lookup = {val: i for i, val in enumerate(vocab)}
        idx = np.array([lookup.get(v, -1) if v is not None else -1 for v in values], dtype=np.int64)
        names = [f"{self.column} = {val}" for val in vocab]
        return _indicator_block(len(values), idx, len(names), names)

    def _encode_cluster(self, values: np.ndarray) -> SparseMatrix:
        p = self.params
        mean_edges = [-np.inf, *p["mean_fences"], np.inf]
        count_edges = [-np.inf, *p["count_fences"], np.inf]
        km, kc = len(mean_edges) - 1, len(count_edges) - 1
        combos = [tuple(c) for c in p["combos"]]
        combo_idx = {c: i for i, c in enumerate(combos)}
        stats = p["stats"]
        rare = p["rare"]
        n = len(values)
        mb = np.empty(n, dtype=np.int64)
        cb = np.empty(n, dtype=np.int64)
        for i, v in enumerate(values):
            mean, count = stats.get(v, rare) if v is not None else rare
            mb[i] = np.searchsorted(p["mean_fences"], mean, side="right")
            cb[i] = np.searchsorted(p["count_fences"], count, side="right")
        ci = np.array([combo_idx.get((a, b), -1) for a, b in zip(mb, cb)], dtype=np.int64)
        c = self.column
        mean_names = [
            interval_label(f"mean target of {c}", mean_edges[j], mean_edges[j + 1]) for j in range(km)
        ]
        count_names = [
            interval_label(f"frequency of {c}", count_edges[j], count_edges[j + 1]) for j in range(kc)
        ]
        combo_names = [f"{mean_names[a]} & {count_names[b]}" for a, b in combos]
        blocks = [
            _indicator_block(n, mb, km, mean_names),
            _indicator_block(n, cb, kc, count_names),
            _indicator_block(n, ci, len(combos), combo_names),
        ]
        csr = sp.hstack([b.csr for b in blocks], format="csr")
        return SparseMatrix(csr, mean_names + count_names + combo_names)

    def is_rare(self, value: Any) -> bool:
        if self.kind != CLUSTER_STRING:
            raise ValueError("only cluster_string encoders have a rare bucket")
        return value not in self.params["stats"]

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        params = dict(self.params)
        if self.kind == CLUSTER_STRING:
            params["stats"] = [[k, v[0], v[1]] for k, v in params["stats"].items()]
        return {"kind": self.kind, "column": self.column, "params": params}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Encoder":
        params = dict(d["params"])
        if d["kind"] == CLUSTER_STRING:
            params["stats"] = {k: (m, c) for k, m, c in params["stats"]}
            params["rare"] = tuple(params["rare"])
        return cls(d["kind"], d["column"], params)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


def quantile_fences(values: np.ndarray, k: int) -> list[float]:
    """Fenceposts splitting sorted values into k equal-volume bins.

    The i-th fence is the midpoint between the sorted values either side of
    position floor(n * i / k). Duplicate fences (from ties) are merged.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    v = v[~np.isnan(v)]
    n = len(v)
    distinct = len(np.unique(v))
    if distinct <= 1:
        return []
    if k > distinct:
        log.debug("quantile_bins: k=%d exceeds %d distinct values; clamping", k, distinct)
        k = distinct
    fences = []
    for i in range(1, k):
        s = (n * i) // k
        if s <= 0 or s >= n:
            continue
        if v[s - 1] == v[s]:
            # tied block straddles the cut; keep it in one bin
            continue
        fences.append(float(0.5 * (v[s - 1] + v[s])))
    return sorted(set(fences))


def _tree_splits(x: np.ndarray, y: np.ndarray, min_leaf: int, max_leaves: int) -> list[float]:
    """Best-first variance-reduction regression tree on one input; returns thresholds."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)

    def best(lo: int, hi: int):
        m = hi - lo
        if m < 2 * min_leaf:
            return None
        seg_x = xs[lo:hi]
        seg_y = ys[lo:hi]
        cs = np.cumsum(seg_y)
        total = cs[-1]
        pos = np.arange(min_leaf, m - min_leaf + 1)
        valid = seg_x[pos - 1] < seg_x[pos]
        if not valid.any():
            return None
        pos = pos[valid]
        left = cs[pos - 1]
        gain = left**2 / pos + (total - left) ** 2 / (m - pos) - total**2 / m
        j = int(np.argmax(gain))
        if gain[j] <= 1e-12 * max(1.0, abs(total)):
            return None
        s = int(pos[j])
        return float(gain[j]), lo + s, 0.5 * (seg_x[s - 1] + seg_x[s])

    heap: list = []
    counter = 0
    leaves = 1
    cand = best(0, n)
    if cand is not None:
        heapq.heappush(heap, (-cand[0], counter, 0, n, cand))
    thresholds = []
    while heap and leaves < max_leaves:
        _, _, lo, hi, (gain, s, thr) = heapq.heappop(heap)
        thresholds.append(thr)
        leaves += 1
        for a, b in ((lo, s), (s, hi)):
            c = best(a, b)
            if c is not None:
                counter += 1
                heapq.heappush(heap, (-c[0], counter, a, b, c))
    return sorted(thresholds)


def fit_encoder(
    kind: str,
    column: str,
    values: Sequence[Any],
    target: Sequence[float] | None = None,
    **hyper: Any,
) -> Encoder:
    """Learn an encoder of the given kind from a column (and target, if needed)."""
    if kind not in ENCODER_KINDS:
        raise ValueError(f"unknown encoder kind {kind!r}")
    hp = {**DEFAULTS[kind], **hyper}
    values = np.asarray(values, dtype=object if kind in STRING_KINDS else np.float64)
    if len(values) == 0:
        raise ValueError(f"cannot fit encoder on empty column {column!r}")

    if kind in NUMERIC_KINDS:
        missing = np.isnan(values)
        present = values[~missing]
        base = {"has_missing": bool(missing.any())}
        if kind == PASSTHROUGH:
            return Encoder(kind, column, base)
        if kind == QUANTILE_BINS:
            fences = quantile_fences(present, int(hp["k"])) if len(present) else []
            return Encoder(kind, column, {**base, "k": int(hp["k"]), "fences": fences})
        if target is None:
            raise ValueError("tree encoder needs a target")
        y = np.asarray(target, dtype=np.float64)[~missing]
        splits = (
            _tree_splits(present, y, int(hp["min_leaf"]), int(hp["max_leaves"]))
            if len(present)
            else []
        )
        return Encoder(
            kind,
            column,
            {**base, "min_leaf": int(hp["min_leaf"]), "max_leaves": int(hp["max_leaves"]), "splits": splits},
        )

    if kind == ONE_HOT:
        vocab: dict[str, None] = {}
        for v in values:
            if v is not None:
                vocab.setdefault(str(v), None)
        return Encoder(kind, column, {"values": list(vocab)})

    if target is None:
        raise ValueError("cluster_string encoder needs a target")
    y = np.asarray(target, dtype=np.float64)
    min_samples = int(hp["min_samples"])
    k = int(hp["k"])
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for v, t in zip(values, y):
        if v is None:
            continue
        sums[v] = sums.get(v, 0.0) + float(t)
        counts[v] = counts.get(v, 0) + 1
    stats = {v: (sums[v] / counts[v], counts[v]) for v in counts if counts[v] >= min_samples}
    rare_vals = [v for v in counts if counts[v] < min_samples]
    rare_n = sum(counts[v] for v in rare_vals)
    if rare_n:
        rare = (sum(sums[v] for v in rare_vals) / rare_n, rare_n)
    else:
        rare = (float(np.mean(y)), 0)
    cluster_stats = list(stats.values()) + [rare]
    means = np.array([m for m, _ in cluster_stats])
    freqs = np.array([c for _, c in cluster_stats], dtype=np.float64)
    mean_fences = quantile_fences(means, k)
    count_fences = quantile_fences(freqs, k)
    combos = sorted(
        {
            (
                int(np.searchsorted(mean_fences, m, side="right")),
                int(np.searchsorted(count_fences, c, side="right")),
            )
            for m, c in cluster_stats
        }
    )
    return Encoder(
        kind,
        column,
        {
            "min_samples": min_samples,
            "k": k,
            "stats": stats,
            "rare": rare,
            "mean_fences": mean_fences,
            "count_fences": count_fences,
            "combos": [list(c) for c in combos],
        },
    )


def encode(table_columns: dict[str, np.ndarray], encoders: Sequence[Encoder]) -> SparseMatrix:
    """Encode each column with its encoder and paste the blocks in encoder order."""
    from .sparse import hstack

    n = len(next(iter(table_columns.values()))) if table_columns else 0
    blocks = []
    for enc in encoders:
        if enc.column not in table_columns:
            raise KeyError(f"schema drift: column {enc.column!r} required by {enc.kind} encoder is missing")
        blocks.append(enc.encode(table_columns[enc.column]))
    return hstack(blocks, n)
