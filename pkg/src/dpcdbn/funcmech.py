"""Functional mechanism for the approximated energy: coefficient extraction,
sensitivity bounds, one-shot Laplace perturbation, and the privacy accountant.

Parameter symbols are indexed globally: variable 0 is the shared visible bias
``c``; group ``k`` then owns the block ``W_k[0,0] ... W_k[n-1,n-1], b_k``.
Monomial identifiers are canonical sorted multi-indices over these variables,
and coefficients reaching the same monomial through different expansion paths
are merged before any noise is drawn.

Normalizers ``Z`` are frozen per instance from a public, data-independent
parameter initialization and never updated during training: the coefficient
table must be a pure function of the dataset for the one-shot noise argument
to hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from ._monomials import GradedEvaluator, iter_support, support_size
from .chebyshev import MonomialPolynomial
from .crbm import CrbmParams
from .errors import (
    AlreadyPerturbed,
    DegreeTooLarge,
    EmptyDataset,
    GeometryMismatch,
    NonPositiveBudget,
    NonPositiveNormalizer,
    NonPositiveScale,
    SealedLedger,
)

_DEGREE_GUARD = 9
_EXPLICIT_SUPPORT_GUARD = 2_000_000

MonomialKey = tuple[tuple[int, int], ...]  # sorted ((var index, exponent), ...)


@dataclass(frozen=True)
class LayerGeometry:
    """Static geometry of one CRBM layer: K groups, N_W filters, N_V visibles."""

    n_groups: int
    filter_side: int
    visible_side: int

    def __post_init__(self):
        if self.n_groups < 1 or self.filter_side < 1:
            raise GeometryMismatch("need at least one group and a positive filter side")
        if self.hidden_side < 1:
            raise GeometryMismatch("filter larger than the visible grid")

    @property
    def hidden_side(self) -> int:
        return self.visible_side - self.filter_side + 1

    @property
    def vars_per_group(self) -> int:
        return self.filter_side**2 + 1  # filter weights plus the group bias

    @property
    def n_vars(self) -> int:
        return 1 + self.n_groups * self.vars_per_group

    def group_offset(self, k: int) -> int:
        return 1 + k * self.vars_per_group

    def params_to_vector(self, params: CrbmParams) -> np.ndarray:
        if params.n_groups != self.n_groups or params.filter_side != self.filter_side:
            raise GeometryMismatch("parameters do not match the layer geometry")
        x = np.empty(self.n_vars)
        x[0] = params.visible_bias
        for k in range(self.n_groups):
            off = self.group_offset(k)
            x[off : off + self.filter_side**2] = params.filters[k].ravel()
            x[off + self.filter_side**2] = params.group_bias[k]
        return x

    def vector_to_params(self, x: np.ndarray) -> CrbmParams:
        filters = np.empty((self.n_groups, self.filter_side, self.filter_side))
        bias = np.empty(self.n_groups)
        for k in range(self.n_groups):
            off = self.group_offset(k)
            filters[k] = x[off : off + self.filter_side**2].reshape(
                self.filter_side, self.filter_side
            )
            bias[k] = x[off + self.filter_side**2]
        return CrbmParams(filters, bias, float(x[0]))

    def support_size(self, poly_degree: int) -> int:
        """Merged-support size: c plus every group monomial of degree <= L+1."""
        return 1 + self.n_groups * support_size(self.vars_per_group, poly_degree + 1)


@dataclass
class CoefficientTable:
    """Merged monomial coefficients of the approximated energy over a dataset."""

    entries: dict[MonomialKey, float]
    instance_count: int
    geometry: LayerGeometry
    poly_degree: int

    def l1_norm(self) -> float:
        return float(sum(abs(v) for v in self.entries.values()))

    def __add__(self, other: "CoefficientTable") -> "CoefficientTable":
        if self.geometry != other.geometry or self.poly_degree != other.poly_degree:
            raise GeometryMismatch("tables from different layouts cannot be merged")
        merged = dict(self.entries)
        for key, val in other.entries.items():
            merged[key] = merged.get(key, 0.0) + val
        return CoefficientTable(
            merged, self.instance_count + other.instance_count, self.geometry, self.poly_degree
        )


def _check_frozen_z(frozen_z: np.ndarray, geometry: LayerGeometry, n_instances: int) -> np.ndarray:
    frozen_z = np.asarray(frozen_z, dtype=float)
    expected = (n_instances, geometry.n_groups, geometry.hidden_side, geometry.hidden_side)
    if frozen_z.shape != expected:
        raise GeometryMismatch(f"frozen Z must have shape {expected}, got {frozen_z.shape}")
    if not np.all(frozen_z > 0):
        raise NonPositiveNormalizer("frozen normalizers must be strictly positive")
    return frozen_z


def _patches(v: np.ndarray, geometry: LayerGeometry) -> np.ndarray:
    """Receptive-field patches, shape (N_H, N_H, N_W*N_W), row-major per patch."""
    v = np.asarray(v, dtype=float)
    if v.shape != (geometry.visible_side, geometry.visible_side):
        raise GeometryMismatch("instance does not match the layer geometry")
    n_w, n_h = geometry.filter_side, geometry.hidden_side
    out = np.lib.stride_tricks.sliding_window_view(v, (n_w, n_w))
    return out.reshape(n_h, n_h, n_w * n_w)


def extract_coefficients(
    batch: Sequence[np.ndarray],
    poly: MonomialPolynomial,
    geometry: LayerGeometry,
    frozen_z: np.ndarray,
) -> CoefficientTable:
    """Expand the approximated energy symbolically in (W, b, c) and sum over the batch.

    Per hidden unit the energy contributes ``-(sum_l a_l (lin/Z)^l) * lin`` with
    ``lin = sum_rs v_patch[rs] W[rs] + b``; the visible-bias term contributes the
    degree-1 monomial ``-(sum v) * c``.  Coefficients depend only on the data,
    the frozen normalizers and the approximator -- never on trainable parameters.
    """
    batch = [np.asarray(v, dtype=float) for v in batch]
    if not batch:
        raise EmptyDataset("coefficient extraction needs at least one instance")
    if poly.degree > _DEGREE_GUARD:
        raise DegreeTooLarge(f"approximator degree {poly.degree} exceeds guard {_DEGREE_GUARD}")
    frozen_z = _check_frozen_z(frozen_z, geometry, len(batch))
    alphas = poly.coeffs
    n_w2 = geometry.filter_side**2
    entries: dict[MonomialKey, float] = {}

    def add(key: MonomialKey, value: float):
        entries[key] = entries.get(key, 0.0) + value

    for t, v in enumerate(batch):
        patches = _patches(v, geometry)
        add(((0, 1),), -float(v.sum()))  # the c monomial
        for k in range(geometry.n_groups):
            off = geometry.group_offset(k)
            b_var = off + n_w2
            for i in range(geometry.hidden_side):
                for j in range(geometry.hidden_side):
                    lin = {b_var: 1.0}
                    for p, val in enumerate(patches[i, j]):
                        if val != 0.0:
                            lin[off + p] = float(val)
                    z = frozen_z[t, k, i, j]
                    # power = lin^l as {key: coeff}; accumulate -a_l z^-l lin^(l+1)
                    power: dict[MonomialKey, float] = {(): 1.0}
                    for l, alpha in enumerate(alphas):
                        power = _mul_linear(power, lin)  # now lin^(l+1)
                        if alpha == 0.0:
                            continue
                        scale = -alpha / z**l
                        for key, coeff in power.items():
                            add(key, scale * coeff)
    return CoefficientTable(entries, len(batch), geometry, poly.degree)


def _mul_linear(poly: dict[MonomialKey, float], lin: dict[int, float]) -> dict[MonomialKey, float]:
    out: dict[MonomialKey, float] = {}
    for key, coeff in poly.items():
        expo = dict(key)
        for var, val in lin.items():
            expo2 = dict(expo)
            expo2[var] = expo2.get(var, 0) + 1
            new_key = tuple(sorted(expo2.items()))
            out[new_key] = out.get(new_key, 0.0) + coeff * val
    return out


@dataclass(frozen=True)
class SensitivityReport:
    """Sensitivity audit for one layer geometry and approximator."""

    delta_lemma2: float
    delta_naive_h0: float
    delta_naive_h1: float
    delta_maximal: float
    argmax_instance: int
    argmax_group: int

    def as_dict(self) -> dict:
        return {
            "delta_lemma2": self.delta_lemma2,
            "delta_naive_h0": self.delta_naive_h0,
            "delta_naive_h1": self.delta_naive_h1,
            "delta_maximal": self.delta_maximal,
            "argmax_instance": self.argmax_instance,
            "argmax_group": self.argmax_group,
        }


def sensitivity_lemma2(
    dataset: Sequence[np.ndarray],
    poly: MonomialPolynomial,
    geometry: LayerGeometry,
    frozen_z: np.ndarray,
    with_argmax: bool = False,
):
    """Coefficient sensitivity of the approximated energy (single-group max).

    ``2 * max_{t,k} [ sum_ij sum_l |a_l| ( ((sum_rs v + 1)/Z)^l
    + sum_rs ((sum_rs v + 1)/Z)^l |v_rs| ) + sum_ij |v_ij| ]``.  The sum of
    absolute pixel values lives inside the max over instances, as in the
    underlying per-instance coefficient-mass bound.
    """
    dataset = [np.asarray(v, dtype=float) for v in dataset]
    if not dataset:
        raise EmptyDataset("sensitivity needs a non-empty dataset")
    frozen_z = _check_frozen_z(frozen_z, geometry, len(dataset))
    alphas = np.abs(poly.coeffs)
    best, best_t, best_k = -math.inf, 0, 0
    for t, v in enumerate(dataset):
        patches = _patches(v, geometry)
        patch_sum = patches.sum(axis=2)  # (N_H, N_H)
        patch_abs = np.abs(patches).sum(axis=2)
        pixel_abs = float(np.abs(v).sum())
        for k in range(geometry.n_groups):
            ratio = (patch_sum + 1.0) / frozen_z[t, k]
            group = 0.0
            power = np.ones_like(ratio)
            for alpha in alphas:
                group += alpha * float(np.sum(power * (1.0 + patch_abs)))
                power = power * ratio
            total = group + pixel_abs
            if total > best:
                best, best_t, best_k = total, t, k
    delta = 2.0 * best
    if with_argmax:
        return delta, best_t, best_k
    return delta


def sensitivity_naive_h(
    dataset: Sequence[np.ndarray],
    geometry: LayerGeometry,
    h_maps: Sequence[np.ndarray],
) -> float:
    """Sensitivity evaluated at supplied hidden values (audit only).

    This is the quantity one would get by plugging sampled ``h`` into the raw
    energy; it is ill-defined as a privacy bound because ``h`` changes with
    every Gibbs draw, and is reported purely for comparison.
    """
    dataset = [np.asarray(v, dtype=float) for v in dataset]
    if not dataset:
        raise EmptyDataset("sensitivity needs a non-empty dataset")
    best = -math.inf
    for v, h in zip(dataset, h_maps):
        h = np.asarray(h, dtype=float)
        patches = _patches(v, geometry)
        patch_abs = np.abs(patches).sum(axis=2)
        pixel_abs = float(np.abs(v).sum())
        for k in range(geometry.n_groups):
            hk = np.abs(h[k])
            total = float(np.sum(hk * patch_abs)) + float(hk.sum()) + pixel_abs
            best = max(best, total)
    return 2.0 * best


def sensitivity_maximal(dataset: Sequence[np.ndarray], geometry: LayerGeometry) -> float:
    """Worst-case sensitivity with every hidden unit forced to 1."""
    dataset = [np.asarray(v, dtype=float) for v in dataset]
    if not dataset:
        raise EmptyDataset("sensitivity needs a non-empty dataset")
    best = -math.inf
    n_h2 = geometry.hidden_side**2
    for v in dataset:
        patch_abs = np.abs(_patches(v, geometry)).sum(axis=2)
        total = float(patch_abs.sum()) + n_h2 + float(np.abs(v).sum())
        best = max(best, total)
    return 2.0 * best


def laplace_scale(delta: float, epsilon: float) -> float:
    if delta <= 0 or epsilon <= 0:
        raise NonPositiveBudget("sensitivity and epsilon must be positive")
    return delta / epsilon


def laplace_sample(scale: float, rng: np.random.Generator) -> float:
    """One Laplace(0, scale) draw by inverse CDF from a single uniform."""
    if scale <= 0:
        raise NonPositiveScale("laplace scale must be positive")
    u = rng.random()
    return float(-scale * np.sign(u - 0.5) * np.log1p(-2.0 * abs(u - 0.5)))


def laplace_from_uniform(u: np.ndarray, scale: float) -> np.ndarray:
    """Vectorized inverse-CDF transform; same map as :func:`laplace_sample`."""
    if scale <= 0:
        raise NonPositiveScale("laplace scale must be positive")
    u = np.asarray(u, dtype=float)
    return -scale * np.sign(u - 0.5) * np.log1p(-2.0 * np.abs(u - 0.5))


def iter_support_keys(geometry: LayerGeometry, poly_degree: int):
    """Canonical merged support: the c monomial, then each group's graded block.

    The per-group order matches :class:`GradedEvaluator`, so explicit
    perturbation and the streamed noise polynomial consume identical noise for
    the same seed.  The degree-0 constant is excluded (it never affects the
    optimum and the sensitivity lemma sums from degree 1).
    """
    yield ((0, 1),)
    m = geometry.vars_per_group
    for k in range(geometry.n_groups):
        off = geometry.group_offset(k)
        for expo in iter_support(m, poly_degree + 1):
            key = []
            for local, e in enumerate(expo):
                if e:
                    key.append((off + local, e))
            yield tuple(key)


@dataclass
class PerturbedObjective:
    """Sealed one-shot perturbation of a coefficient table."""

    noisy: CoefficientTable
    delta: float
    epsilon: float
    seed: int
    draws: int

    def __post_init__(self):
        if self.epsilon <= 0:
            raise NonPositiveBudget("epsilon must be positive")


def perturb(
    table: CoefficientTable, delta: float, epsilon: float, rng: np.random.Generator, seed: int = 0
) -> PerturbedObjective:
    """Inject Laplace(delta/epsilon) noise once into every merged coefficient.

    Every monomial of the canonical support receives exactly one draw, in
    support order, including monomials whose data coefficient is zero.
    """
    if isinstance(table, PerturbedObjective):
        raise AlreadyPerturbed("object is already perturbed and sealed")
    scale = laplace_scale(delta, epsilon)
    size = table.geometry.support_size(table.poly_degree)
    if size > _EXPLICIT_SUPPORT_GUARD:
        raise DegreeTooLarge(
            f"explicit support of {size} monomials exceeds the guard; "
            "use the streamed noise objective for geometries this large"
        )
    noisy: dict[MonomialKey, float] = {}
    draws = 0
    for key in iter_support_keys(table.geometry, table.poly_degree):
        eta = laplace_sample(scale, rng)
        draws += 1
        noisy[key] = table.entries.get(key, 0.0) + eta
    # carry over anything outside the support (only the degree-0 constant)
    for key, val in table.entries.items():
        if key not in noisy:
            noisy[key] = val
    sealed = CoefficientTable(noisy, table.instance_count, table.geometry, table.poly_degree)
    return PerturbedObjective(noisy=sealed, delta=delta, epsilon=epsilon, seed=seed, draws=draws)


def objective_value_and_gradient(
    obj: PerturbedObjective | CoefficientTable, params: CrbmParams
) -> tuple[float, CrbmParams]:
    """Evaluate ``sum_phi lambda_phi phi(params)`` and its analytic gradient.

    The gradient is returned in parameter layout (a :class:`CrbmParams` whose
    fields hold the partials).
    """
    table = obj.noisy if isinstance(obj, PerturbedObjective) else obj
    geometry = table.geometry
    x = geometry.params_to_vector(params)
    value = 0.0
    grad = np.zeros_like(x)
    for key, lam in table.entries.items():
        if lam == 0.0:
            continue
        mono = 1.0
        for var, e in key:
            mono *= x[var] ** e
        value += lam * mono
        for var, e in key:
            partial = lam * e * x[var] ** (e - 1)
            for var2, e2 in key:
                if var2 != var:
                    partial *= x[var2] ** e2
            grad[var] += partial
    return value, geometry.vector_to_params(grad)


class NoiseObjective:
    """Streamed equivalent of a perturbed table's pure-noise part.

    ``value_and_grad(params)`` returns ``sum_phi eta_phi phi(params)`` and its
    gradient, where ``eta`` is the exact noise sequence :func:`perturb` would
    have drawn for the same seed.  The draws are regenerated from the seed at
    every call instead of being stored, so degree-8 supports over millions of
    monomials cost memory proportional to one degree block only.
    """

    def __init__(self, geometry: LayerGeometry, poly_degree: int, delta: float, epsilon: float, seed: int):
        self.geometry = geometry
        self.poly_degree = poly_degree
        self.scale = laplace_scale(delta, epsilon)
        self.seed = seed
        self.delta = delta
        self.epsilon = epsilon
        self._evaluator = GradedEvaluator(geometry.vars_per_group, poly_degree + 1)
        self.draws = geometry.support_size(poly_degree)

    def value_and_grad(self, params: CrbmParams) -> tuple[float, CrbmParams]:
        geometry = self.geometry
        x = geometry.params_to_vector(params)
        rng = np.random.default_rng(self.seed)
        value = 0.0
        grad = np.zeros_like(x)
        eta_c = laplace_from_uniform(rng.random(), self.scale)
        value += float(eta_c) * x[0]
        grad[0] += float(eta_c)
        m = geometry.vars_per_group
        for k in range(geometry.n_groups):
            off = geometry.group_offset(k)
            eta = laplace_from_uniform(rng.random(self._evaluator.size), self.scale)
            val_k, grad_k = self._evaluator.value_and_grad(x[off : off + m], eta)
            value += val_k
            grad[off : off + m] += grad_k
        return value, geometry.vector_to_params(grad)


@dataclass(frozen=True)
class LedgerEntry:
    stage: str
    delta: float
    epsilon: float


class PrivacyAccountant:
    """Append-only ledger of (stage, sensitivity, epsilon); total is the plain sum.

    The total is a pure function of the ledger and therefore independent of
    epochs, batch sizes and restarts; sealing freezes the ledger for release.
    """

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._sealed = False

    def record(self, stage: str, delta: float, epsilon: float) -> None:
        if self._sealed:
            raise SealedLedger("cannot record on a sealed ledger")
        if delta <= 0 or epsilon <= 0:
            raise NonPositiveBudget("stage sensitivity and epsilon must be positive")
        self._entries.append(LedgerEntry(stage, float(delta), float(epsilon)))

    def seal(self) -> "PrivacyAccountant":
        self._sealed = True
        return self

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    @property
    def total(self) -> float:
        return float(sum(e.epsilon for e in self._entries))

    def as_dicts(self) -> list[dict]:
        return [{"stage": e.stage, "delta": e.delta, "epsilon": e.epsilon} for e in self._entries]

    @classmethod
    def from_dicts(cls, rows: Sequence[dict], sealed: bool = True) -> "PrivacyAccountant":
        acct = cls()
        for row in rows:
            acct.record(row["stage"], row["delta"], row["epsilon"])
        if sealed:
            acct.seal()
        return acct
