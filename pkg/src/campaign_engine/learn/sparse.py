"""Sparse feature matrices with per-feature derivations, and matrix transforms."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class FeatureCapError(ValueError):
    """The interaction transform would exceed the configured feature cap."""


@dataclass
class SparseMatrix:
    """n x p matrix storing non-zero entries only, plus feature metadata.

    ``derivations[j]`` is a human-readable description of how column j was
    built; ``monomials[j]`` is its factorization into base features and is
    what the interaction transform composes.
    """

    csr: sp.csr_matrix
    derivations: list[str]
    monomials: list[tuple[tuple[str, int], ...]] = field(default_factory=list)

    def __post_init__(self) -> None:
        csr = sp.csr_matrix(self.csr, dtype=np.float64)
        csr.eliminate_zeros()
        csr.sort_indices()
        self.csr = csr
        if not self.monomials:
            self.monomials = [((d, 1),) for d in self.derivations]
        if len(self.derivations) != csr.shape[1] or len(self.monomials) != csr.shape[1]:
            raise ValueError("feature metadata length does not match column count")

    @classmethod
    def from_dense(cls, dense: np.ndarray, derivations: Sequence[str]) -> "SparseMatrix":
        return cls(sp.csr_matrix(np.asarray(dense, dtype=np.float64)), list(derivations))

    @classmethod
    def empty(cls, n_rows: int) -> "SparseMatrix":
        return cls(sp.csr_matrix((n_rows, 0)), [])

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def n_rows(self) -> int:
        return self.csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self.csr.shape[1]

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def row(self, i: int) -> list[tuple[int, float]]:
        lo, hi = self.csr.indptr[i], self.csr.indptr[i + 1]
        return list(zip(self.csr.indices[lo:hi].tolist(), self.csr.data[lo:hi].tolist()))


def hstack(blocks: Sequence[SparseMatrix], n_rows: int) -> SparseMatrix:
    """Paste feature blocks side by side, in the given order."""
    if not blocks:
        return SparseMatrix.empty(n_rows)
    csr = sp.hstack([b.csr for b in blocks], format="csr")
    derivations = [d for b in blocks for d in b.derivations]
    monomials = [m for b in blocks for m in b.monomials]
    return SparseMatrix(csr, derivations, monomials)


# --------------------------------------------------------------------------
# interaction transform
# --------------------------------------------------------------------------


def _multiply(a: tuple[tuple[str, int], ...], b: tuple[tuple[str, int], ...]):
    c: Counter[str] = Counter()
    for name, power in a + b:
        c[name] += power
    return tuple(sorted(c.items()))


def monomial_name(mono: tuple[tuple[str, int], ...]) -> str:
    parts = []
    for name, power in mono:
        base = f"({name})" if any(ch in name for ch in " *^") else name
        parts.append(base if power == 1 else f"{base}^{power}")
    return "*".join(parts)


@dataclass(frozen=True)
class InteractionPlan:
    """Frozen column pairs for one interaction application.

    ``pairs`` lists (i, j) with i <= j whose products are appended, in order.
    """

    pairs: tuple[tuple[int, int], ...]
    n_inputs: int

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "n_inputs": self.n_inputs}

    @classmethod
    def from_dict(cls, d: dict) -> "InteractionPlan":
        return cls(tuple(tuple(p) for p in d["pairs"]), int(d["n_inputs"]))


def plan_interactions(
    matrix: SparseMatrix, feature_cap: int = 5000, skip_duplicates: bool = True
) -> InteractionPlan:
    """Choose the products to append for all unordered pairs (squares included).

    A product whose monomial already exists, or whose column is identical to an
    existing column on this data (e.g. the square of a 0/1 indicator), is skipped
    when ``skip_duplicates`` is set.
    """
    p = matrix.n_cols
    total = p + p * (p + 1) // 2
    if total > feature_cap:
        raise FeatureCapError(
            f"interaction over {p} features would create {total} columns "
            f"(cap {feature_cap}); prune encoders or lower the interaction order"
        )
    seen = set(matrix.monomials)
    csc = matrix.csr.tocsc()
    fingerprints = {_fingerprint(csc, j) for j in range(p)} if skip_duplicates else set()
    pairs = []
    for i in range(p):
        for j in range(i, p):
            mono = _multiply(matrix.monomials[i], matrix.monomials[j])
            if skip_duplicates:
                if mono in seen:
                    continue
                col = csc[:, i].multiply(csc[:, j]).tocsc()
                fp = _fingerprint(col, 0)
                if fp in fingerprints:
                    continue
                fingerprints.add(fp)
            seen.add(mono)
            pairs.append((i, j))
    return InteractionPlan(tuple(pairs), p)


def _fingerprint(csc: sp.csc_matrix, j: int) -> tuple:
    col = csc[:, j]
    col.eliminate_zeros()
    col.sort_indices()
    return (tuple(col.indices.tolist()), tuple(np.round(col.data, 12).tolist()))


def apply_interactions(matrix: SparseMatrix, plan: InteractionPlan) -> SparseMatrix:
    if matrix.n_cols != plan.n_inputs:
        raise ValueError(
            f"interaction plan expects {plan.n_inputs} inputs, matrix has {matrix.n_cols}"
        )
    if not plan.pairs:
        return matrix
    csc = matrix.csr.tocsc()
    cols = [csc[:, i].multiply(csc[:, j]) for i, j in plan.pairs]
    new = sp.hstack(cols, format="csr")
    monos = [_multiply(matrix.monomials[i], matrix.monomials[j]) for i, j in plan.pairs]
    names = [monomial_name(m) for m in monos]
    csr = sp.hstack([matrix.csr, new], format="csr")
    return SparseMatrix(csr, matrix.derivations + names, matrix.monomials + monos)


def interaction_transform(
    matrix: SparseMatrix, order: int, feature_cap: int = 5000, skip_duplicates: bool = False
) -> SparseMatrix:
    """Apply the pairwise interaction transform ``order - 1`` times.

    With ``skip_duplicates=False`` the first application appends exactly
    p(p+1)/2 columns; later applications skip monomials that already exist.
    """
    if order < 2:
        raise ValueError("interaction order must be >= 2")
    out = matrix
    for step in range(order - 1):
        plan = plan_interactions(out, feature_cap, skip_duplicates=skip_duplicates or step > 0)
        out = apply_interactions(out, plan)
    return out


# --------------------------------------------------------------------------
# standardization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    """Column means and (population) standard deviations; zero-variance
    columns are flagged and excluded from fitting."""

    means: np.ndarray
    stds: np.ndarray
    keep: np.ndarray

    @classmethod
    def fit(cls, matrix: SparseMatrix, tol: float = 1e-12) -> "Standardizer":
        n = max(matrix.n_rows, 1)
        x = matrix.csr
        means = np.asarray(x.sum(axis=0)).ravel() / n
        stds = np.sqrt(_two_pass_var(x, means))
        keep = stds > tol * np.maximum(1.0, np.abs(means))
        return cls(means, stds, keep)

    def materialize(self, matrix: SparseMatrix) -> np.ndarray:
        """Dense standardized copy of the kept columns (for tests and small data)."""
        x = matrix.to_dense()[:, self.keep]
        return (x - self.means[self.keep]) / self.stds[self.keep]


def _two_pass_var(x: sp.csr_matrix, means: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n == 0:
        return np.zeros(x.shape[1])
    csc = x.tocsc()
    var = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        lo, hi = csc.indptr[j], csc.indptr[j + 1]
        d = csc.data[lo:hi] - means[j]
        n_zero = n - (hi - lo)
        var[j] = (np.sum(d * d) + n_zero * means[j] ** 2) / n
    return var
