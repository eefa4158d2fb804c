"""Convolutional RBM: parameters, energies, Gibbs conditionals, CD-1, pooling.

Convolution conventions: the hidden path is the valid-mode cross-correlation
``pre[i,j] = sum_{r,s} W[r,s] * v[i+r-1, j+s-1] + b`` (this is the sum that
appears verbatim inside the energy, so the exact/probability/approximate
energies stay term-for-term consistent); the visible path is the adjoint
full-mode convolution.  Visible units are continuous in [0, 1] and the visible
reconstruction is mean-field (no visible sampling inside a Gibbs step).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .chebyshev import MonomialPolynomial, logistic
from .errors import EmptyBatch, GeometryMismatch, IndivisibleShape


@dataclass(frozen=True)
class CrbmParams:
    """K shared filters (each N_W x N_W), one bias per group, one visible bias."""

    filters: np.ndarray  # (K, N_W, N_W)
    group_bias: np.ndarray  # (K,)
    visible_bias: float

    def __post_init__(self):
        filters = np.asarray(self.filters, dtype=float)
        bias = np.atleast_1d(np.asarray(self.group_bias, dtype=float))
        if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
            raise GeometryMismatch("filters must have shape (K, N_W, N_W)")
        if bias.shape != (filters.shape[0],):
            raise GeometryMismatch("group_bias length must equal the number of filters")
        if not (np.all(np.isfinite(filters)) and np.all(np.isfinite(bias)) and np.isfinite(self.visible_bias)):
            raise ValueError("parameters must be finite")
        filters = filters.copy()
        bias = bias.copy()
        filters.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "filters", filters)
        object.__setattr__(self, "group_bias", bias)
        object.__setattr__(self, "visible_bias", float(self.visible_bias))

    @property
    def n_groups(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_side(self) -> int:
        return self.filters.shape[1]

    def hidden_side(self, visible_side: int) -> int:
        side = visible_side - self.filter_side + 1
        if side < 1:
            raise GeometryMismatch(
                f"filter side {self.filter_side} too large for visible side {visible_side}"
            )
        return side


def init_params(n_groups: int, filter_side: int, rng: np.random.Generator, scale: float = 0.05) -> CrbmParams:
    """Zero biases, filter weights i.i.d. uniform in [-scale, scale]."""
    filters = rng.uniform(-scale, scale, size=(n_groups, filter_side, filter_side))
    return CrbmParams(filters, np.zeros(n_groups), 0.0)


@dataclass(frozen=True)
class LrnHyper:
    """Local response normalization hyper-parameters (defaults q=2, l=5, a=1e-4, b=0.75)."""

    q: float = 2.0
    l_span: int = 5
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.q <= 0 or self.beta <= 0 or self.l_span < 1:
            raise ValueError("require q > 0, beta > 0, l_span >= 1")


@dataclass(frozen=True)
class HiddenMap:
    """Per-group hidden probabilities and (optionally) a Bernoulli draw of them."""

    probs: np.ndarray  # (K, N_H, N_H) in [0, 1]
    samples: Optional[np.ndarray] = None  # (K, N_H, N_H) in {0, 1}


def _check_visible(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise GeometryMismatch("visible grid must be a square matrix")
    return v


def hidden_preactivation(params: CrbmParams, v: np.ndarray, k: int) -> np.ndarray:
    """Valid cross-correlation of filter k with v, plus the group bias."""
    v = _check_visible(v)
    params.hidden_side(v.shape[0])
    return signal.correlate2d(v, params.filters[k], mode="valid") + params.group_bias[k]


def all_preactivations(params: CrbmParams, v: np.ndarray) -> np.ndarray:
    """Stacked hidden preactivations, shape (K, N_H, N_H)."""
    v = _check_visible(v)
    side = params.hidden_side(v.shape[0])
    out = np.empty((params.n_groups, side, side))
    for k in range(params.n_groups):
        out[k] = signal.correlate2d(v, params.filters[k], mode="valid") + params.group_bias[k]
    return out


def lrn_normalizers(preacts: np.ndarray, hyper: LrnHyper = LrnHyper()) -> np.ndarray:
    """Normalizers Z for every (k, i, j), vectorized over the whole stack.

    ``Z = max(|pre|, [q + alpha * sum_{m in window} pre_m^2]^beta)`` with the
    window running over the group axis, clipped to [0, K-1].  Always > 0.
    """
    preacts = np.asarray(preacts, dtype=float)
    if not np.all(np.isfinite(preacts)):
        raise ValueError("preactivations must be finite")
    n_groups = preacts.shape[0]
    half = hyper.l_span // 2
    sq = preacts**2
    csum = np.concatenate([np.zeros((1,) + sq.shape[1:]), np.cumsum(sq, axis=0)], axis=0)
    out = np.empty_like(preacts)
    for k in range(n_groups):
        lo, hi = max(0, k - half), min(n_groups - 1, k + half)
        window = csum[hi + 1] - csum[lo]
        out[k] = (hyper.q + hyper.alpha * window) ** hyper.beta
    return np.maximum(np.abs(preacts), out)


def lrn_term(preacts: np.ndarray, k: int, i: int, j: int, hyper: LrnHyper = LrnHyper()) -> float:
    """Single-entry normalizer; see :func:`lrn_normalizers`."""
    return float(lrn_normalizers(preacts, hyper)[k, i, j])


def hidden_prob(
    params: CrbmParams,
    v: np.ndarray,
    hyper: LrnHyper = LrnHyper(),
    normalized: bool = False,
) -> np.ndarray:
    """P(h=1|v) per group: logistic of the (optionally LRN-normalized) preactivation."""
    pre = all_preactivations(params, v)
    if normalized:
        pre = pre / lrn_normalizers(pre, hyper)
    return logistic(pre)


def visible_prob(params: CrbmParams, h_samples: np.ndarray) -> np.ndarray:
    """P(v=1|h): full convolution of each filter with its hidden group, summed, plus c."""
    h_samples = np.asarray(h_samples, dtype=float)
    if h_samples.ndim != 3 or h_samples.shape[0] != params.n_groups:
        raise GeometryMismatch("hidden samples must have shape (K, N_H, N_H)")
    total = np.zeros(
        (
            h_samples.shape[1] + params.filter_side - 1,
            h_samples.shape[2] + params.filter_side - 1,
        )
    )
    for k in range(params.n_groups):
        total += signal.convolve2d(h_samples[k], params.filters[k], mode="full")
    return logistic(total + params.visible_bias)


def gibbs_step(
    params: CrbmParams,
    v: np.ndarray,
    rng: np.random.Generator,
    hyper: LrnHyper = LrnHyper(),
    normalized: bool = False,
) -> tuple[HiddenMap, np.ndarray]:
    """One hidden draw followed by a mean-field visible reconstruction."""
    probs = hidden_prob(params, v, hyper, normalized)
    samples = (rng.random(probs.shape) < probs).astype(float)
    recon = visible_prob(params, samples)
    return HiddenMap(probs=probs, samples=samples), recon


def cd1_update(
    params: CrbmParams,
    batch: Sequence[np.ndarray],
    lr: float,
    rng: np.random.Generator,
    hyper: LrnHyper = LrnHyper(),
    normalized: bool = False,
) -> CrbmParams:
    """One CD-1 step averaged over the batch; returns new parameters.

    Positive statistics use P(h|v) on the data, negative statistics come from a
    single Gibbs step (hidden sample, mean-field reconstruction, P(h|v')).
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    batch = list(batch)
    if not batch:
        raise EmptyBatch("cd1_update needs at least one instance")
    d_filters = np.zeros_like(params.filters)
    d_bias = np.zeros_like(params.group_bias)
    d_visible = 0.0
    for v in batch:
        v = _check_visible(v)
        pos_probs = hidden_prob(params, v, hyper, normalized)
        hidden, recon = gibbs_step(params, v, rng, hyper, normalized)
        neg_probs = hidden_prob(params, recon, hyper, normalized)
        for k in range(params.n_groups):
            d_filters[k] += signal.correlate2d(v, pos_probs[k], mode="valid")
            d_filters[k] -= signal.correlate2d(recon, neg_probs[k], mode="valid")
        d_bias += pos_probs.sum(axis=(1, 2)) - neg_probs.sum(axis=(1, 2))
        d_visible += v.sum() - recon.sum()
    n = len(batch)
    return CrbmParams(
        params.filters + lr * d_filters / n,
        params.group_bias + lr * d_bias / n,
        params.visible_bias + lr * d_visible / n,
    )


def reconstruction_error(
    params: CrbmParams,
    batch: Sequence[np.ndarray],
    rng: np.random.Generator,
    hyper: LrnHyper = LrnHyper(),
    normalized: bool = False,
) -> float:
    """Mean squared one-step reconstruction error over the batch."""
    batch = list(batch)
    if not batch:
        raise EmptyBatch("need at least one instance")
    total = 0.0
    for v in batch:
        _, recon = gibbs_step(params, v, rng, hyper, normalized)
        total += float(np.mean((np.asarray(v, dtype=float) - recon) ** 2))
    return total / len(batch)


def energy_exact(params: CrbmParams, v: np.ndarray, h_samples: np.ndarray) -> float:
    """Energy of a (v, h) configuration.

    ``E = - sum_k sum_ij sum_rs h[k,i,j] W[k,r,s] v[i+r-1, j+s-1]
         - sum_k b_k sum_ij h[k,i,j] - c sum_ij v[i,j]``
    """
    v = _check_visible(v)
    h_samples = np.asarray(h_samples, dtype=float)
    side = params.hidden_side(v.shape[0])
    if h_samples.shape != (params.n_groups, side, side):
        raise GeometryMismatch("hidden samples shape does not match the layer geometry")
    total = 0.0
    for k in range(params.n_groups):
        pre = signal.correlate2d(v, params.filters[k], mode="valid")
        total -= float(np.sum(h_samples[k] * pre))
        total -= params.group_bias[k] * float(h_samples[k].sum())
    total -= params.visible_bias * float(v.sum())
    return total


def _weighted_energy(params: CrbmParams, v: np.ndarray, weights: np.ndarray) -> float:
    """Energy with each h[k,i,j] replaced by the given weight (probability or poly)."""
    total = 0.0
    for k in range(params.n_groups):
        pre = signal.correlate2d(v, params.filters[k], mode="valid")
        total -= float(np.sum(weights[k] * (pre + params.group_bias[k])))
    total -= params.visible_bias * float(v.sum())
    return total


def energy_prob(
    params: CrbmParams,
    v: np.ndarray,
    hyper: LrnHyper = LrnHyper(),
    normalized: bool = True,
) -> float:
    """Probability-based energy: h replaced by sigma of the normalized preactivation."""
    v = _check_visible(v)
    pre = all_preactivations(params, v)
    x = pre / lrn_normalizers(pre, hyper) if normalized else pre
    return _weighted_energy(params, v, logistic(x))


def energy_approx(
    params: CrbmParams,
    v: np.ndarray,
    poly: MonomialPolynomial,
    hyper: LrnHyper = LrnHyper(),
    normalized: bool = True,
) -> float:
    """Approximated energy: the logistic replaced by the polynomial approximator."""
    v = _check_visible(v)
    pre = all_preactivations(params, v)
    x = pre / lrn_normalizers(pre, hyper) if normalized else pre
    return _weighted_energy(params, v, poly(x))


def max_pool(probs: np.ndarray, ratio: int) -> np.ndarray:
    """Per-group, per-block maximum; output shape (K, N_H/ratio, N_H/ratio)."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 3:
        raise GeometryMismatch("expected a (K, N_H, N_H) stack")
    k, side, side2 = probs.shape
    if side != side2:
        raise GeometryMismatch("hidden maps must be square")
    if ratio < 1 or side % ratio != 0:
        raise IndivisibleShape(f"pooling ratio {ratio} does not divide side {side}")
    blocks = probs.reshape(k, side // ratio, ratio, side // ratio, ratio)
    return blocks.max(axis=(2, 4))
