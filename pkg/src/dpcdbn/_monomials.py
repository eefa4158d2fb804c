"""Graded monomial bookkeeping shared by the coefficient table and noise stream.

Monomials over ``m`` variables are handled degree by degree in a canonical
order: within degree ``d+1`` the block for variable ``j`` is ``x_j`` times the
degree-``d`` monomials whose smallest variable index is >= ``j``.  The explicit
enumeration (used by small coefficient tables) and the value/gradient recursion
(used by the streamed noise polynomial at scale) walk the identical order, so a
fixed RNG seed yields the same noisy objective through either code path.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np


def monomial_count(n_vars: int, degree: int) -> int:
    """Number of monomials of exactly ``degree`` over ``n_vars`` variables."""
    return math.comb(n_vars + degree - 1, degree)


def support_size(n_vars: int, max_degree: int) -> int:
    """Number of monomials of degree 1..max_degree over ``n_vars`` variables."""
    return sum(monomial_count(n_vars, d) for d in range(1, max_degree + 1))


def _tail_counts(n_vars: int, degree: int) -> np.ndarray:
    """tail[j] = number of degree-``degree`` monomials with min variable >= j."""
    return np.array([monomial_count(n_vars - j, degree) for j in range(n_vars)], dtype=np.int64)


def iter_monomials(n_vars: int, degree: int) -> Iterator[tuple[int, ...]]:
    """Exponent tuples of exactly ``degree`` in the canonical graded order."""
    if degree == 0:
        yield (0,) * n_vars
        return

    def rec(min_var: int, remaining: int, expo: list[int]):
        if remaining == 0:
            yield tuple(expo)
            return
        for j in range(min_var, n_vars):
            expo[j] += 1
            yield from rec(j, remaining - 1, expo)
            expo[j] -= 1

    yield from rec(0, degree, [0] * n_vars)


def iter_support(n_vars: int, max_degree: int) -> Iterator[tuple[int, ...]]:
    """All exponent tuples of degree 1..max_degree, graded, canonical order."""
    for d in range(1, max_degree + 1):
        yield from iter_monomials(n_vars, d)


class GradedEvaluator:
    """Value and gradient of ``sum_phi w_phi * phi(x)`` over the graded support.

    ``weights`` is a flat vector indexed in the canonical order produced by
    :func:`iter_support` (degrees 1..max_degree).  The forward pass builds the
    monomial value vectors ``V_d`` by the block recursion; the gradient is the
    exact reverse sweep of that recursion, so no exponent tables are ever
    materialized (this is what keeps degree-8 supports over ~26 variables
    affordable in memory).
    """

    def __init__(self, n_vars: int, max_degree: int):
        self.n_vars = n_vars
        self.max_degree = max_degree
        # starts[d][j]: offset into V_d of the block whose min variable is j
        self.starts = []
        for d in range(1, max_degree + 1):
            total = monomial_count(n_vars, d)
            self.starts.append(total - _tail_counts(n_vars, d))
        self.size = support_size(n_vars, max_degree)

    def _forward(self, x: np.ndarray) -> list[np.ndarray]:
        values = [np.asarray(x, dtype=float).copy()]
        for d in range(1, self.max_degree):
            prev = values[-1]
            starts = self.starts[d - 1]
            chunks = [x[j] * prev[starts[j] :] for j in range(self.n_vars)]
            values.append(np.concatenate(chunks))
        return values

    def value_and_grad(self, x: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise ValueError("x has the wrong number of variables")
        if weights.shape != (self.size,):
            raise ValueError("weights length must match the support size")
        values = self._forward(x)
        # split the flat weights per degree
        w_by_deg = []
        offset = 0
        for d in range(1, self.max_degree + 1):
            n = monomial_count(self.n_vars, d)
            w_by_deg.append(weights[offset : offset + n])
            offset += n
        total = sum(float(w @ v) for w, v in zip(w_by_deg, values))

        grad = np.zeros(self.n_vars)
        # bar_d = d(total)/d(V_d); start at top degree and sweep down
        bar = w_by_deg[-1].astype(float).copy()
        for d in range(self.max_degree, 0, -1):
            if d == 1:
                grad += bar
                break
            prev = values[d - 2]
            starts = self.starts[d - 2]
            new_bar = w_by_deg[d - 2].astype(float).copy()
            pos = 0
            for j in range(self.n_vars):
                seg = prev.size - starts[j]
                bar_seg = bar[pos : pos + seg]
                grad[j] += float(bar_seg @ prev[starts[j] :])
                new_bar[starts[j] :] += x[j] * bar_seg
                pos += seg
            bar = new_bar
        return total, grad
