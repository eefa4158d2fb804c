"""Chebyshev machinery: evaluation, quadrature, basis conversion, error bounds.

Convention used throughout: a series with stored coefficients ``[A0, A1, ..., AL]``
has the value ``0.5*A0*T0(x) + sum_{k>=1} Ak*Tk(x)``.  The leading coefficient is
stored doubled ("half-A0" convention), which is the classic source of off-by-two
constant bugs -- every consumer in this module goes through
:meth:`ChebyshevSeries.__call__` so the convention lives in exactly one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import DegreeTooLarge, NonFiniteFunction

_CONVERSION_DEGREE_GUARD = 30


def cheb_eval(k: int, x):
    """Evaluate the first-kind Chebyshev polynomial T_k via the two-term recursion.

    ``T_{k+1} = 2x*T_k - T_{k-1}`` with ``T_0 = 1`` and ``T_1 = x``.  Accepts
    scalars or arrays; values of ``x`` outside [-1, 1] are permitted.
    """
    if k < 0:
        raise ValueError("degree must be non-negative")
    x = np.asarray(x, dtype=float)
    t_prev = np.ones_like(x)
    if k == 0:
        return t_prev if t_prev.ndim else float(t_prev)
    t_cur = x.copy()
    for _ in range(k - 1):
        t_prev, t_cur = t_cur, 2.0 * x * t_cur - t_prev
    return t_cur if t_cur.ndim else float(t_cur)


def cheb_eval_closed(k: int, x):
    """Evaluate T_k from its closed form.

    ``T_k(x) = sum_{j=0}^{floor(k/2)} (-1)^j C(k, 2j) x^(k-2j) (1-x^2)^j``.
    Numerically agrees with :func:`cheb_eval` to ~1e-9 on [-1, 1] for k <= 15.
    """
    if k < 0:
        raise ValueError("degree must be non-negative")
    x = np.asarray(x, dtype=float)
    acc = np.zeros_like(x)
    one_minus_x2 = 1.0 - x * x
    for j in range(k // 2 + 1):
        acc += (-1.0) ** j * math.comb(k, 2 * j) * x ** (k - 2 * j) * one_minus_x2**j
    return acc if acc.ndim else float(acc)


@dataclass(frozen=True)
class ChebyshevSeries:
    """Truncated Chebyshev series ``0.5*A0 + sum_{k>=1} Ak*Tk`` (half-A0 convention)."""

    coeffs: np.ndarray

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("coefficients must be a non-empty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coeffs", arr)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, x):
        # Clenshaw recurrence on the stored (doubled-A0) coefficients.
        x = np.asarray(x, dtype=float)
        b1 = np.zeros_like(x)
        b2 = np.zeros_like(x)
        for a in self.coeffs[:0:-1]:
            b1, b2 = 2.0 * x * b1 - b2 + a, b1
        out = x * b1 - b2 + 0.5 * self.coeffs[0]
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class MonomialPolynomial:
    """Power-basis polynomial ``sum_l coeffs[l] * x**l``."""

    coeffs: np.ndarray

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("coefficients must be a non-empty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coeffs", arr)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.polynomial.polynomial.polyval(x, self.coeffs)
        return out if np.ndim(out) else float(out)

    def derivative(self) -> "MonomialPolynomial":
        if self.degree == 0:
            return MonomialPolynomial(np.zeros(1))
        return MonomialPolynomial(self.coeffs[1:] * np.arange(1, self.coeffs.size))


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def cheb_coefficients(
    f: Callable[[np.ndarray], np.ndarray], degree: int, nodes: int = 4096
) -> ChebyshevSeries:
    """Compute coefficients A_0..A_degree of ``f`` by Chebyshev-Gauss quadrature.

    ``A_k = (2/pi) * integral_{-1}^{1} f(x) T_k(x) / sqrt(1-x^2) dx`` evaluated at
    the nodes ``cos((2i-1)pi/2n)`` with equal weights ``pi/n``.  The rule is exact
    for polynomial integrands up to degree ``2*nodes - 1``, so the default 4096
    nodes removes any discretization concern for the degrees handled here.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if nodes < 4 * (degree + 1):
        raise ValueError("need at least 4*(degree+1) quadrature nodes")
    i = np.arange(1, nodes + 1)
    theta = (2.0 * i - 1.0) * np.pi / (2.0 * nodes)
    x = np.cos(theta)
    fx = np.asarray(f(x), dtype=float)
    if fx.shape != x.shape:
        fx = np.broadcast_to(fx, x.shape).astype(float)
    if not np.all(np.isfinite(fx)):
        raise NonFiniteFunction("function returned a non-finite value at a quadrature node")
    # With x_i = cos(theta_i): T_k(x_i) = cos(k*theta_i); A_k = (2/n) sum f(x_i) cos(k theta_i)
    k = np.arange(degree + 1)
    coeffs = (2.0 / nodes) * (np.cos(np.outer(k, theta)) @ fx)
    return ChebyshevSeries(coeffs)


def _cheb_monomial_rows(max_degree: int) -> list[list[int]]:
    """Integer monomial coefficients of T_0..T_max_degree (row k lists x^0..x^k)."""
    rows = [[1], [0, 1]]
    for k in range(1, max_degree):
        prev, cur = rows[k - 1], rows[k]
        nxt = [0] * (k + 2)
        for p, c in enumerate(cur):
            nxt[p + 1] += 2 * c
        for p, c in enumerate(prev):
            nxt[p] -= c
        rows.append(nxt)
    return rows[: max_degree + 1]


def cheb_to_monomial(series: ChebyshevSeries) -> MonomialPolynomial:
    """Exact basis conversion to the power basis (rationals, then rounded).

    The T_k expansions have integer coefficients, so converting through
    :class:`fractions.Fraction` keeps e.g. the degree-7 steep-sigmoid
    coefficients bit-reproducible (multiples of 1/32).
    """
    if series.degree > _CONVERSION_DEGREE_GUARD:
        raise DegreeTooLarge(
            f"degree {series.degree} exceeds conversion guard {_CONVERSION_DEGREE_GUARD}"
        )
    rows = _cheb_monomial_rows(series.degree)
    out = [Fraction(0)] * (series.degree + 1)
    for k, row in enumerate(rows):
        a = Fraction(series.coeffs[k])
        if k == 0:
            a /= 2
        for p, c in enumerate(row):
            if c:
                out[p] += a * c
    return MonomialPolynomial(np.array([float(v) for v in out]))


def monomial_to_cheb(poly: MonomialPolynomial) -> ChebyshevSeries:
    """Exact inverse of :func:`cheb_to_monomial` (Horner in the Chebyshev basis)."""
    if poly.degree > _CONVERSION_DEGREE_GUARD:
        raise DegreeTooLarge(
            f"degree {poly.degree} exceeds conversion guard {_CONVERSION_DEGREE_GUARD}"
        )
    # Plain-A0 working coefficients: value = sum a_k T_k.
    acc = [Fraction(0)] * (poly.degree + 2)
    for alpha in map(Fraction, poly.coeffs[::-1]):
        # acc <- x * acc using x*T_0 = T_1 and x*T_k = (T_{k+1} + T_{k-1})/2
        nxt = [Fraction(0)] * (poly.degree + 2)
        for k, a in enumerate(acc):
            if a == 0:
                continue
            if k == 0:
                nxt[1] += a
            else:
                nxt[k + 1] += a / 2
                nxt[k - 1] += a / 2
        nxt[0] += alpha
        acc = nxt
    acc = acc[: poly.degree + 1]
    acc[0] *= 2  # stored-A0 is doubled
    return ChebyshevSeries(np.array([float(v) for v in acc]))


@dataclass(frozen=True)
class ErrorBounds:
    """Truncation-error certificate for a degree-L series over N_H^2*K hidden units.

    ``lower`` is the proven floor ``(pi/4) * hidden_units * |A_{L+1}|``.  ``upper``
    is the practical sup-error ceiling ``hidden_units * sum_{l=L+1..L+50} |A_l|``
    (absolute tail bound).  ``upper_factor`` is the Lebesgue-constant style factor
    ``4 + (4/pi^2) ln L`` relating the truncation to the best uniform
    approximation; it is reported, not asserted, because its log base is a
    literature convention (natural log here).
    """

    lower: float
    upper: float
    a_next: float
    hidden_units: int
    upper_factor: float
    tail: float

    def __post_init__(self):
        if not (0.0 <= self.lower <= self.upper or math.isnan(self.upper)):
            raise ValueError("bounds must satisfy 0 <= lower <= upper")


def truncation_error_bounds(
    extended: ChebyshevSeries,
    n_hidden_side: int,
    n_groups: int,
    tail_coeffs: Sequence[float] | None = None,
) -> ErrorBounds:
    """Certify truncation at degree L from a series extended to degree >= L+1.

    ``extended`` must carry at least one coefficient past the truncation point;
    its last-but-tail coefficient ``A_{L+1}`` drives the lower bound.  When
    ``tail_coeffs`` (the coefficients A_{L+1}..A_{L+50}) is omitted, the tail is
    taken from whatever trailing coefficients ``extended`` carries.
    """
    if extended.degree < 1:
        raise ValueError("series must extend at least to degree L+1 = 1")
    if n_hidden_side < 1 or n_groups < 1:
        raise ValueError("hidden side and group count must be >= 1")
    big_l = extended.degree - 1
    a_next = float(abs(extended.coeffs[-1]))
    hidden_units = n_hidden_side**2 * n_groups
    if tail_coeffs is None:
        tail = a_next
    else:
        tail = float(np.sum(np.abs(np.asarray(tail_coeffs, dtype=float))))
        if tail < a_next:
            raise ValueError("tail must include |A_{L+1}| itself")
    lower = (np.pi / 4.0) * hidden_units * a_next
    upper = hidden_units * tail
    upper = max(upper, lower)  # quadrature round-off can invert a zero tail
    factor = 4.0 + (4.0 / np.pi**2) * math.log(big_l) if big_l >= 1 else 4.0
    return ErrorBounds(
        lower=lower,
        upper=upper,
        a_next=a_next,
        hidden_units=hidden_units,
        upper_factor=factor,
        tail=tail,
    )


def certify_logistic_truncation(
    degree: int, n_hidden_side: int, n_groups: int, nodes: int = 4096, tail_terms: int = 50
) -> ErrorBounds:
    """Convenience: error bounds for truncating the logistic's series at ``degree``."""
    extended = cheb_coefficients(logistic, degree + tail_terms, nodes=max(nodes, 4 * (degree + tail_terms + 1)))
    tail = extended.coeffs[degree + 1 : degree + 1 + tail_terms]
    return truncation_error_bounds(
        ChebyshevSeries(extended.coeffs[: degree + 2]),
        n_hidden_side,
        n_groups,
        tail_coeffs=tail,
    )


class ApproximatorKind(Enum):
    """Sigmoid stand-ins selectable for the energy approximation."""

    CHEBYSHEV_TRUNCATED = "chebyshev"
    STEEP_SIGMOID_L7 = "steep_sigmoid_l7"
    TAYLOR_TANH5 = "taylor_tanh5"
    LINEAR_PIECEWISE = "linear_piecewise"


# Degree-7 polynomial (16 + 35x - 35x^3 + 21x^5 - 5x^7)/32: fixed to 0 at -1,
# 1/2 at 0 and 1 at +1.  Exposed verbatim; note its slope at 0 is 35/32, which
# is a steep sigmoid rather than the logistic (slope 1/4).
STEEP_SIGMOID_L7_COEFFS = np.array([16, 35, 0, -35, 0, 21, 0, -5], dtype=float) / 32.0


def make_approximator(
    kind: ApproximatorKind,
    degree: int | None = None,
    c1: float = 0.25,
    c2: float = 0.5,
    nodes: int = 4096,
) -> MonomialPolynomial:
    """Build the polynomial evaluator for the requested approximator.

    ``CHEBYSHEV_TRUNCATED`` returns the logistic's truncated series (requires
    ``degree``); ``LINEAR_PIECEWISE`` defaults to the logistic's tangent at the
    origin, ``c1=1/4`` and ``c2=1/2``.
    """
    if kind is ApproximatorKind.CHEBYSHEV_TRUNCATED:
        if degree is None or degree < 1:
            raise ValueError("chebyshev approximator needs degree >= 1")
        return cheb_to_monomial(cheb_coefficients(logistic, degree, nodes=nodes))
    if kind is ApproximatorKind.STEEP_SIGMOID_L7:
        return MonomialPolynomial(STEEP_SIGMOID_L7_COEFFS.copy())
    if kind is ApproximatorKind.TAYLOR_TANH5:
        return MonomialPolynomial(np.array([0.0, 1.0, 0.0, -1.0 / 3.0, 0.0, 2.0 / 15.0]))
    if kind is ApproximatorKind.LINEAR_PIECEWISE:
        if c1 <= 0:
            raise ValueError("linear piecewise slope c1 must be positive")
        return MonomialPolynomial(np.array([c2, c1]))
    raise ValueError(f"unknown approximator kind: {kind!r}")
