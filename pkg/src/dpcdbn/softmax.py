"""Output layer: cross-entropy, its degree-2 surrogate, and private training.

The binomial loss ``sum_i y_i log(1+exp(-W.p_i)) + (1-y_i) log(1+exp(W.p_i))``
is replaced by its second-order Taylor polynomial around ``W.p = 0``; the
surrogate's monomial coefficients are perturbed once with Laplace noise at
scale ``Delta_C / epsilon`` and the noisy quadratic is then minimized by plain
gradient descent, which consumes no further budget regardless of epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, NonPositiveBudget, ShapeMismatch
from .funcmech import laplace_sample, laplace_scale

LOG2 = math.log(2.0)
_EIGENVALUE_FLOOR = 1e-6


@dataclass(frozen=True)
class SoftmaxParams:
    """Output weights: shape (d,) for the binomial case, (n_classes, d) for one-vs-rest."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim not in (1, 2) or not np.all(np.isfinite(w)):
            raise ShapeMismatch("weights must be a finite vector or matrix")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[-1]


def _check_batch(features: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise ShapeMismatch("features must be (n, d)")
    if labels.shape != (features.shape[0],):
        raise ShapeMismatch("labels length must match the batch")
    if features.shape[0] == 0:
        raise EmptyBatch("need at least one labeled instance")
    return features, labels


def clamp_features(features: np.ndarray) -> np.ndarray:
    """Clamp pooled features into [0, 1] so the sensitivity formula's preconditions hold."""
    return np.clip(np.asarray(features, dtype=float), 0.0, 1.0)


def cross_entropy(features: np.ndarray, labels: np.ndarray, params: SoftmaxParams) -> float:
    """Binomial cross-entropy in its numerically safe log1p(exp) form."""
    features, labels = _check_batch(features, labels)
    if params.weights.ndim != 1 or params.feature_dim != features.shape[1]:
        raise ShapeMismatch("weights do not match the feature dimension")
    z = features @ params.weights
    y = labels.astype(float)
    # log(1+e^{-z}) and log(1+e^{z}) without overflow
    loss_pos = np.logaddexp(0.0, -z)
    loss_neg = np.logaddexp(0.0, z)
    return float(np.sum(y * loss_pos + (1.0 - y) * loss_neg))


@dataclass(frozen=True)
class SurrogateQuadratic:
    """Degree-2 surrogate ``c0 + lin.W + W.Q.W`` of the cross-entropy loss."""

    constant: float
    linear: np.ndarray  # (d,)
    quadratic: np.ndarray  # (d, d) symmetric

    @property
    def feature_dim(self) -> int:
        return self.linear.shape[0]

    def value(self, w: np.ndarray) -> float:
        return float(self.constant + self.linear @ w + w @ self.quadratic @ w)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return self.linear + 2.0 * self.quadratic @ w


def taylor_surrogate_coeffs(features: np.ndarray, labels: np.ndarray) -> SurrogateQuadratic:
    """Second-order Taylor coefficients of the loss around ``W.p = 0``.

    Per instance: constant ``log 2``, linear ``(1/2 - y) p``, quadratic
    ``(1/8) p p^T`` -- the y=1 and y=0 halves share the quadratic term and
    differ only in the sign of the linear one.
    """
    features, labels = _check_batch(features, labels)
    y = labels.astype(float)
    constant = features.shape[0] * LOG2
    linear = features.T @ (0.5 - y)
    quadratic = 0.125 * (features.T @ features)
    return SurrogateQuadratic(constant, linear, (quadratic + quadratic.T) / 2.0)


def softmax_sensitivity(l1_bound: float) -> float:
    """Coefficient sensitivity of the softmax surrogate: ``B + B^2/4``.

    ``B`` is the guaranteed L1 bound of one instance's feature vector; for
    features clipped into [0, 1] that is simply the dimension.
    """
    if l1_bound <= 0:
        raise ValueError("the feature L1 bound must be positive")
    return l1_bound + l1_bound**2 / 4.0


def perturb_surrogate(
    surrogate: SurrogateQuadratic,
    delta: float,
    epsilon: float,
    rng: np.random.Generator,
) -> tuple[SurrogateQuadratic, int]:
    """One Laplace(delta/epsilon) draw per distinct monomial: 1 + d + d(d+1)/2.

    Off-diagonal quadratic entries are perturbed as the single merged monomial
    ``W_a W_b`` (coefficient ``2 Q_ab``), then folded back symmetrically.
    Returns the noisy surrogate and the number of draws consumed.
    """
    scale = laplace_scale(delta, epsilon)
    d = surrogate.feature_dim
    draws = 0
    constant = surrogate.constant + laplace_sample(scale, rng)
    draws += 1
    linear = surrogate.linear.copy()
    for a in range(d):
        linear[a] += laplace_sample(scale, rng)
        draws += 1
    quadratic = surrogate.quadratic.copy()
    for a in range(d):
        for b in range(a, d):
            eta = laplace_sample(scale, rng)
            draws += 1
            if a == b:
                quadratic[a, a] += eta
            else:
                quadratic[a, b] += eta / 2.0
                quadratic[b, a] += eta / 2.0
    return SurrogateQuadratic(constant, linear, quadratic), draws


def clip_quadratic(surrogate: SurrogateQuadratic, floor: float = _EIGENVALUE_FLOOR) -> SurrogateQuadratic:
    """Clip the quadratic term's eigenvalues at a positive floor.

    Noise can make the quadratic indefinite; flooring its spectrum keeps the
    perturbed surrogate bounded below so gradient descent has a minimizer.
    """
    vals, vecs = np.linalg.eigh(surrogate.quadratic)
    clipped = (vecs * np.maximum(vals, floor)) @ vecs.T
    return SurrogateQuadratic(surrogate.constant, surrogate.linear, (clipped + clipped.T) / 2.0)


def surrogate_minimizer(surrogate: SurrogateQuadratic, floor: float = _EIGENVALUE_FLOOR) -> np.ndarray:
    """Closed-form stationary point of the (eigenvalue-floored) quadratic."""
    floored = clip_quadratic(surrogate, floor)
    return np.linalg.solve(2.0 * floored.quadratic, -floored.linear)


def descend_quadratic(
    surrogate: SurrogateQuadratic, epochs: int, lr: float, w0: np.ndarray | None = None
) -> np.ndarray:
    """Plain gradient descent on a (floored) quadratic from the origin."""
    w = np.zeros(surrogate.feature_dim) if w0 is None else np.asarray(w0, dtype=float).copy()
    for _ in range(epochs):
        w -= lr * surrogate.gradient(w)
    return w


def train_private_softmax(
    features: np.ndarray,
    labels: np.ndarray,
    epsilon: float,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    delta: float | None = None,
) -> tuple[SoftmaxParams, float, int]:
    """Perturb the binomial surrogate once, then gradient-descend it.

    Returns (params, delta used, noise draws).  ``delta`` defaults to the
    dimension formula from :func:`softmax_sensitivity`.
    """
    if epsilon <= 0:
        raise NonPositiveBudget("epsilon must be positive")
    features, labels = _check_batch(clamp_features(features), labels)
    surrogate = taylor_surrogate_coeffs(features, labels)
    if delta is None:
        delta = softmax_sensitivity(surrogate.feature_dim)
    noisy, draws = perturb_surrogate(surrogate, delta, epsilon, rng)
    floored = clip_quadratic(noisy)
    # step size capped by the top eigenvalue so descent never diverges
    lam_max = float(np.linalg.eigvalsh(floored.quadratic).max())
    lr = min(lr, 0.9 / (2.0 * lam_max))
    w = descend_quadratic(floored, epochs, lr)
    return SoftmaxParams(w), delta, draws


def train_private_softmax_multiclass(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    epsilon: float,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
) -> tuple[SoftmaxParams, float, int]:
    """One-vs-rest private softmax; the budget is split equally across classes.

    Equivalent to scaling the per-class noise by ``n_classes * Delta_C / epsilon``
    (sequential composition over per-class surrogates).
    """
    features = clamp_features(features)
    delta = softmax_sensitivity(features.shape[1])
    eps_class = epsilon / n_classes
    rows, draws = [], 0
    for cls in range(n_classes):
        binary = (np.asarray(labels) == cls).astype(float)
        params, _, d = train_private_softmax(
            features, binary, eps_class, epochs, lr, rng, delta=delta
        )
        rows.append(params.weights)
        draws += d
    return SoftmaxParams(np.vstack(rows)), delta, draws


def predict_proba(features: np.ndarray, params: SoftmaxParams) -> np.ndarray:
    """P(y=1) for binomial weights; per-class logistic scores for one-vs-rest."""
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != params.feature_dim:
        raise ShapeMismatch("features do not match the weight dimension")
    z = features @ params.weights.T if params.weights.ndim == 2 else features @ params.weights
    return 1.0 / (1.0 + np.exp(-z))


def predict_label(features: np.ndarray, params: SoftmaxParams) -> np.ndarray:
    proba = predict_proba(features, params)
    if params.weights.ndim == 2:
        return np.argmax(proba, axis=-1)
    return (proba >= 0.5).astype(int)
