"""Layer-wise private training pipeline: stacked CRBM + pooling, then softmax.

Each hidden layer is trained greedily on its predecessor's pooled output by
minimizing the perturbed polynomial energy: the data part is evaluated directly
from the images (it equals the merged coefficient table applied to the
parameters, with normalizers frozen from a public initialization), while the
noise part streams its Laplace draws from a fixed seed at every gradient step.
Because the noise enters the objective once, the privacy spend per stage is a
single ledger entry regardless of how many epochs the optimizer runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import data_io
from .chebyshev import ApproximatorKind, MonomialPolynomial, make_approximator
from .crbm import CrbmParams, LrnHyper, all_preactivations, hidden_prob, init_params, lrn_normalizers, max_pool
from .errors import (
    BudgetSplitMismatch,
    EmptyDataset,
    EmptyTestSet,
    GeometryMismatch,
    IndivisibleShape,
    ShapeMismatch,
)
from .funcmech import LayerGeometry, NoiseObjective, PrivacyAccountant, sensitivity_lemma2
from .softmax import (
    SoftmaxParams,
    clip_quadratic,
    cross_entropy,
    descend_quadratic,
    perturb_surrogate,
    predict_label,
    predict_proba,
    softmax_sensitivity,
    taylor_surrogate_coeffs,
)

_ENERGY_CHUNK = 256  # instances per einsum block; bounds peak memory


@dataclass(frozen=True)
class LayerSpec:
    """One CRBM + pooling stage: K filter groups, filter side, pooling ratio."""

    n_groups: int
    filter_side: int
    pool_ratio: int
    kind: ApproximatorKind = ApproximatorKind.CHEBYSHEV_TRUNCATED
    degree: int = 7

    def __post_init__(self):
        if self.n_groups < 1 or self.filter_side < 1 or self.pool_ratio < 1:
            raise GeometryMismatch("layer sizes must be positive")
        if self.degree < 1:
            raise GeometryMismatch("approximator degree must be >= 1")

    def polynomial(self) -> MonomialPolynomial:
        return make_approximator(self.kind, degree=self.degree)

    def as_dict(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "filter_side": self.filter_side,
            "pool_ratio": self.pool_ratio,
            "kind": self.kind.value,
            "degree": self.degree,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            n_groups=int(d["n_groups"]),
            filter_side=int(d["filter_side"]),
            pool_ratio=int(d["pool_ratio"]),
            kind=ApproximatorKind(d["kind"]),
            degree=int(d["degree"]),
        )


@dataclass(frozen=True)
class NetworkSpec:
    """Full pipeline description: layers, budget split, optimizer settings, seed.

    ``epsilon_total = inf`` selects the noiseless pipeline (no perturbation
    anywhere); otherwise ``epsilon_split`` must hold one positive share per
    hidden layer plus one for the softmax, summing to ``epsilon_total``.

    ``feature_head`` maps the last pooled stack to softmax inputs:
    ``group_mean`` averages each group's pooled map into one scalar, ``flat``
    ravels the stack, and ``energy_grid`` takes the group-averaged rectified
    response ``2|p - 1/2|``, block-averages it onto a ``feature_grid`` x
    ``feature_grid`` layout, standardizes the cells per instance, and clips
    them into ``[-feature_scale, feature_scale]``.  A constant intercept
    feature is always appended.  Every head has a hard per-feature bound, so
    the softmax coefficient sensitivity follows from the resulting L1 bound;
    shrinking ``feature_scale`` shrinks that bound (and hence the injected
    noise) without touching the class signal accumulated over instances.
    """

    visible_side: int
    layers: tuple[LayerSpec, ...]
    epsilon_total: float = math.inf
    epsilon_split: Optional[tuple[float, ...]] = None
    feature_head: str = "group_mean"
    feature_grid: int = 6
    feature_scale: float = 0.05
    feature_zclip: float = 1.5
    n_classes: int = 2
    lr: float = 1e-3
    epochs: int = 2
    softmax_lr: float = 0.02
    softmax_epochs: int = 4
    param_bound: float = 0.05
    init_scale: float = 0.05
    normalized: bool = True
    seed: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise GeometryMismatch("need at least one hidden layer")
        if self.feature_head not in ("group_mean", "flat", "energy_grid"):
            raise GeometryMismatch(f"unknown feature head {self.feature_head!r}")
        if self.feature_scale <= 0 or self.feature_zclip <= 0:
            raise GeometryMismatch("feature scale and z-clip must be positive")
        if self.n_classes < 2:
            raise GeometryMismatch("need at least two classes")
        # chain the geometry through every layer up front
        side = self.visible_side
        for i, layer in enumerate(layers):
            hidden = side - layer.filter_side + 1
            if hidden < 1:
                raise GeometryMismatch(f"layer {i}: filter larger than its input grid")
            if hidden % layer.pool_ratio != 0:
                raise IndivisibleShape(
                    f"layer {i}: pooling ratio {layer.pool_ratio} does not divide {hidden}"
                )
            side = hidden // layer.pool_ratio
        if self.feature_head == "energy_grid":
            if self.feature_grid < 1 or side % self.feature_grid != 0:
                raise IndivisibleShape(
                    f"feature grid {self.feature_grid} does not divide the final pooled side {side}"
                )
        split = self.epsilon_split
        if math.isinf(self.epsilon_total):
            if split is not None:
                raise BudgetSplitMismatch("noiseless runs take no budget split")
        else:
            if self.epsilon_total <= 0:
                raise BudgetSplitMismatch("epsilon_total must be positive")
            if split is None:
                share = self.epsilon_total / (len(layers) + 1)
                split = (share,) * (len(layers) + 1)
            split = tuple(float(s) for s in split)
            if len(split) != len(layers) + 1:
                raise BudgetSplitMismatch(
                    f"need {len(layers) + 1} budget shares (layers plus softmax), got {len(split)}"
                )
            if any(s <= 0 for s in split):
                raise BudgetSplitMismatch("every budget share must be positive")
            if abs(sum(split) - self.epsilon_total) > 1e-9 * max(1.0, self.epsilon_total):
                raise BudgetSplitMismatch("budget shares must sum to epsilon_total")
        object.__setattr__(self, "epsilon_split", split)

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.epsilon_total)

    def layer_sides(self) -> list[int]:
        """Input grid side of each layer, then the final pooled side."""
        sides = [self.visible_side]
        for layer in self.layers:
            hidden = sides[-1] - layer.filter_side + 1
            sides.append(hidden // layer.pool_ratio)
        return sides

    @property
    def feature_dim(self) -> int:
        """Softmax input dimension, including the constant intercept feature."""
        last = self.layers[-1]
        pooled_side = self.layer_sides()[-1]
        if self.feature_head == "group_mean":
            return last.n_groups + 1
        if self.feature_head == "energy_grid":
            return self.feature_grid**2 + 1
        return last.n_groups * pooled_side**2 + 1

    @property
    def feature_bound(self) -> float:
        """Hard per-feature magnitude bound enforced by the head."""
        return self.feature_scale if self.feature_head == "energy_grid" else 1.0

    def feature_l1_bound(self) -> float:
        return self.feature_bound * self.feature_dim

    def stage_epsilons(self) -> list[float]:
        if self.noiseless:
            return [math.inf] * (len(self.layers) + 1)
        return list(self.epsilon_split)

    def as_dict(self) -> dict:
        return {
            "visible_side": self.visible_side,
            "layers": [layer.as_dict() for layer in self.layers],
            "epsilon_total": self.epsilon_total,
            "epsilon_split": list(self.epsilon_split) if self.epsilon_split else None,
            "feature_head": self.feature_head,
            "feature_grid": self.feature_grid,
            "feature_scale": self.feature_scale,
            "feature_zclip": self.feature_zclip,
            "n_classes": self.n_classes,
            "lr": self.lr,
            "epochs": self.epochs,
            "softmax_lr": self.softmax_lr,
            "softmax_epochs": self.softmax_epochs,
            "param_bound": self.param_bound,
            "init_scale": self.init_scale,
            "normalized": self.normalized,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            visible_side=int(d["visible_side"]),
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            epsilon_total=float(d["epsilon_total"]),
            epsilon_split=tuple(d["epsilon_split"]) if d.get("epsilon_split") else None,
            feature_head=d["feature_head"],
            feature_grid=int(d["feature_grid"]),
            feature_scale=float(d["feature_scale"]),
            feature_zclip=float(d["feature_zclip"]),
            n_classes=int(d["n_classes"]),
            lr=float(d["lr"]),
            epochs=int(d["epochs"]),
            softmax_lr=float(d["softmax_lr"]),
            softmax_epochs=int(d["softmax_epochs"]),
            param_bound=float(d["param_bound"]),
            init_scale=float(d["init_scale"]),
            normalized=bool(d["normalized"]),
            seed=int(d["seed"]),
        )


class EnergyObjective:
    """Data part of the perturbed layer objective, evaluated directly.

    The value equals the merged coefficient table applied to the parameters
    (normalizers frozen per instance): per hidden unit ``-(sum_l a_l (lin/Z)^l)
    * lin`` plus the visible-bias monomial ``-c * sum(v)``.  Evaluating it as a
    batched convolution instead of through the explicit table keeps large
    geometries affordable; the two paths agree to rounding.
    """

    def __init__(
        self,
        instances: Sequence[np.ndarray],
        poly: MonomialPolynomial,
        geometry: LayerGeometry,
        frozen_z: np.ndarray,
    ):
        if not len(instances):
            raise EmptyDataset("energy objective needs at least one instance")
        self.geometry = geometry
        self.alphas = np.asarray(poly.coeffs, dtype=float)
        images = np.stack([np.asarray(v, dtype=float) for v in instances])
        if images.shape[1:] != (geometry.visible_side, geometry.visible_side):
            raise GeometryMismatch("instances do not match the layer geometry")
        self.images = images
        n_w = geometry.filter_side
        self.windows = np.lib.stride_tricks.sliding_window_view(images, (n_w, n_w), axis=(1, 2))
        self.frozen_z = np.asarray(frozen_z, dtype=float)
        self.pixel_sum = float(images.sum())

    def value_and_grad(self, params: CrbmParams) -> tuple[float, CrbmParams]:
        geom = self.geometry
        w, b, c = params.filters, params.group_bias, params.visible_bias
        value = -c * self.pixel_sum
        d_filters = np.zeros_like(w)
        d_bias = np.zeros_like(b)
        n = self.images.shape[0]
        for lo in range(0, n, _ENERGY_CHUNK):
            hi = min(lo + _ENERGY_CHUNK, n)
            win = self.windows[lo:hi]
            z = self.frozen_z[lo:hi]
            lin = np.einsum("tijrs,krs->tkij", win, w) + b[None, :, None, None]
            ratio = lin / z
            s = np.zeros_like(lin)
            ds = np.zeros_like(lin)  # d s / d lin
            power = np.ones_like(lin)  # ratio^l
            prev = np.zeros_like(lin)  # ratio^(l-1), kept explicitly: safe at ratio = 0
            for l, alpha in enumerate(self.alphas):
                if alpha != 0.0:
                    s += alpha * power
                    if l > 0:
                        ds += (l * alpha / z) * prev
                prev = power
                power = power * ratio
            value -= float(np.sum(s * lin))
            g = s + lin * ds  # d(s*lin)/d lin
            d_filters -= np.einsum("tijrs,tkij->krs", win, g)
            d_bias -= g.sum(axis=(0, 2, 3))
        grad = CrbmParams(d_filters, d_bias, -self.pixel_sum)
        return value, grad


@dataclass(frozen=True)
class TrainedModel:
    """Released pipeline: per-layer optima, softmax weights, sealed ledger."""

    spec: NetworkSpec
    layer_params: tuple[CrbmParams, ...]
    softmax: SoftmaxParams
    accountant: PrivacyAccountant
    metrics: tuple[dict, ...] = ()

    def __post_init__(self):
        if len(self.layer_params) != len(self.spec.layers):
            raise GeometryMismatch("one parameter set per layer is required")
        if not self.accountant.sealed:
            raise ShapeMismatch("the privacy ledger must be sealed before release")
        if not math.isclose(self.accountant.total, self.spec.epsilon_total, rel_tol=1e-9):
            raise BudgetSplitMismatch("ledger total does not match the declared budget")
        object.__setattr__(self, "layer_params", tuple(self.layer_params))
        object.__setattr__(self, "metrics", tuple(self.metrics))

    def features(self, instance: np.ndarray) -> np.ndarray:
        """Deterministic forward pass to the softmax input (no sampling)."""
        v = np.asarray(instance, dtype=float)
        if v.shape != (self.spec.visible_side, self.spec.visible_side):
            raise ShapeMismatch(
                f"instance shape {v.shape} does not match the declared "
                f"{self.spec.visible_side}x{self.spec.visible_side} grid"
            )
        pooled = None
        for layer, params in zip(self.spec.layers, self.layer_params):
            probs = hidden_prob(params, v, normalized=self.spec.normalized)
            pooled = max_pool(probs, layer.pool_ratio)
            # multi-group stacks are merged by the group mean before the next
            # single-channel layer; pooled probabilities are already in [0, 1]
            v = pooled.mean(axis=0)
        return _apply_head(self.spec, pooled)

    def feature_matrix(self, instances: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([self.features(v) for v in instances])

    def predict_proba(self, instance: np.ndarray) -> np.ndarray:
        return predict_proba(self.features(instance), self.softmax)

    def predict(self, instance: np.ndarray):
        label = predict_label(self.features(instance)[None, :], self.softmax)
        return int(label[0])

    def to_payload(self) -> tuple[dict, dict[str, np.ndarray]]:
        # wall times are dropped: serialized bytes must be seed-deterministic
        meta = {
            "spec": self.spec.as_dict(),
            "ledger": self.accountant.as_dicts(),
            "metrics": [
                {k: v for k, v in row.items() if k != "wall_time"} for row in self.metrics
            ],
        }
        arrays: dict[str, np.ndarray] = {}
        for i, params in enumerate(self.layer_params):
            arrays[f"layer{i}.filters"] = params.filters
            arrays[f"layer{i}.group_bias"] = params.group_bias
            arrays[f"layer{i}.visible_bias"] = np.array([params.visible_bias])
        arrays["softmax.weights"] = self.softmax.weights
        return meta, arrays

    @classmethod
    def from_payload(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "TrainedModel":
        spec = NetworkSpec.from_dict(meta["spec"])
        layer_params = tuple(
            CrbmParams(
                arrays[f"layer{i}.filters"],
                arrays[f"layer{i}.group_bias"],
                float(arrays[f"layer{i}.visible_bias"][0]),
            )
            for i in range(len(spec.layers))
        )
        accountant = PrivacyAccountant.from_dicts(meta["ledger"])
        return cls(
            spec=spec,
            layer_params=layer_params,
            softmax=SoftmaxParams(arrays["softmax.weights"]),
            accountant=accountant,
            metrics=tuple(meta["metrics"]),
        )

    def save(self, path) -> None:
        data_io.save_model(self, path)


def _apply_head(spec: NetworkSpec, pooled: np.ndarray) -> np.ndarray:
    """Map the final pooled stack to the bounded softmax feature vector.

    Per-instance standardization in the ``energy_grid`` head is a plain
    per-record function, so the hard clip bound (not the data) determines the
    coefficient sensitivity.  The appended intercept equals the feature bound.
    """
    if spec.feature_head == "group_mean":
        raw = pooled.mean(axis=(1, 2))
    elif spec.feature_head == "flat":
        raw = pooled.ravel()
    else:
        energy = 2.0 * np.abs(pooled - 0.5)
        gm = energy.mean(axis=0)
        r = gm.shape[0] // spec.feature_grid
        cells = gm.reshape(spec.feature_grid, r, spec.feature_grid, r).mean(axis=(1, 3)).ravel()
        z = (cells - cells.mean()) / (cells.std() + 1e-8)
        raw = spec.feature_scale * z / spec.feature_zclip
    bound = spec.feature_bound
    features = np.clip(raw, -bound, bound)
    return np.concatenate([features, [bound]])


def _frozen_normalizers(
    instances: Sequence[np.ndarray], init: CrbmParams, normalized: bool
) -> np.ndarray:
    geometryless = []
    for v in instances:
        pre = all_preactivations(init, np.asarray(v, dtype=float))
        geometryless.append(lrn_normalizers(pre) if normalized else np.ones_like(pre))
    return np.stack(geometryless)


def train(spec: NetworkSpec, dataset: data_io.NormalizedDataset) -> TrainedModel:
    """Run the full private pipeline and return the sealed model.

    Per layer: freeze normalizers from a public seeded initialization, bound
    the coefficient sensitivity, charge that layer's budget share once, then
    gradient-descend the noisy objective (data part plus streamed noise) with
    parameters projected into a box.  The pooled output feeds the next stage;
    the final pooled stack feeds the private softmax.
    """
    if not len(dataset.instances):
        raise EmptyDataset("training needs a non-empty dataset")
    if dataset.labels is None:
        raise EmptyDataset("training needs labels for the output layer")
    seed_seq = np.random.SeedSequence(spec.seed)
    layer_seqs = seed_seq.spawn(len(spec.layers) + 1)
    accountant = PrivacyAccountant()
    metrics: list[dict] = []
    epsilons = spec.stage_epsilons()
    instances = [np.asarray(v, dtype=float) for v in dataset.instances]
    side = spec.visible_side
    layer_params: list[CrbmParams] = []
    pooled_stacks: list[np.ndarray] = []

    for i, layer in enumerate(spec.layers):
        stage = f"layer{i}"
        geometry = LayerGeometry(layer.n_groups, layer.filter_side, side)
        init_seq, noise_seq = layer_seqs[i].spawn(2)
        init_rng = np.random.default_rng(init_seq)
        init = init_params(layer.n_groups, layer.filter_side, init_rng, scale=spec.init_scale)
        frozen_z = _frozen_normalizers(instances, init, spec.normalized)
        poly = layer.polynomial()
        delta = sensitivity_lemma2(instances, poly, geometry, frozen_z)
        accountant.record(stage, delta, epsilons[i])
        noise = None
        if not spec.noiseless:
            noise_seed = int(noise_seq.generate_state(1)[0])
            noise = NoiseObjective(geometry, layer.degree, delta, epsilons[i], noise_seed)
        objective = EnergyObjective(instances, poly, geometry, frozen_z)
        params = init
        for epoch in range(spec.epochs):
            t0 = time.monotonic()
            value, grad = objective.value_and_grad(params)
            if noise is not None:
                n_val, n_grad = noise.value_and_grad(params)
                value += n_val
                grad = CrbmParams(
                    grad.filters + n_grad.filters,
                    grad.group_bias + n_grad.group_bias,
                    grad.visible_bias + n_grad.visible_bias,
                )
            x = geometry.params_to_vector(params)
            x -= spec.lr * geometry.params_to_vector(grad)
            np.clip(x, -spec.param_bound, spec.param_bound, out=x)
            params = geometry.vector_to_params(x)
            metrics.append(
                {
                    "stage": stage,
                    "epoch": epoch,
                    "objective": float(value),
                    "wall_time": time.monotonic() - t0,
                }
            )
        layer_params.append(params)
        pooled_stacks = [
            max_pool(hidden_prob(params, v, normalized=spec.normalized), layer.pool_ratio)
            for v in instances
        ]
        instances = [stack.mean(axis=0) for stack in pooled_stacks]
        side = instances[0].shape[0]

    features = np.stack([_apply_head(spec, stack) for stack in pooled_stacks])
    softmax = _train_output_layer(
        spec, features, np.asarray(dataset.labels), epsilons[-1], layer_seqs[-1], accountant, metrics
    )
    accountant.seal()
    return TrainedModel(
        spec=spec,
        layer_params=tuple(layer_params),
        softmax=softmax,
        accountant=accountant,
        metrics=tuple(metrics),
    )


def _train_output_layer(
    spec: NetworkSpec,
    features: np.ndarray,
    labels: np.ndarray,
    epsilon: float,
    seed_seq: np.random.SeedSequence,
    accountant: PrivacyAccountant,
    metrics: list[dict],
) -> SoftmaxParams:
    delta = softmax_sensitivity(spec.feature_l1_bound())
    accountant.record("softmax", delta, epsilon)
    rng = np.random.default_rng(seed_seq)
    if spec.n_classes == 2:
        rows = [_fit_one_surrogate(spec, features, (labels == 1).astype(float), delta, epsilon, rng, metrics, "softmax")]
        return SoftmaxParams(rows[0])
    eps_class = epsilon / spec.n_classes
    rows = []
    for cls in range(spec.n_classes):
        binary = (labels == cls).astype(float)
        rows.append(
            _fit_one_surrogate(
                spec, features, binary, delta, eps_class, rng, metrics, f"softmax.class{cls}"
            )
        )
    return SoftmaxParams(np.vstack(rows))


def _fit_one_surrogate(spec, features, binary_labels, delta, epsilon, rng, metrics, stage):
    t0 = time.monotonic()
    surrogate = taylor_surrogate_coeffs(features, binary_labels)
    if not math.isinf(epsilon):
        surrogate, _ = perturb_surrogate(surrogate, delta, epsilon, rng)
    floored = clip_quadratic(surrogate)
    # step size capped by the quadratic's top eigenvalue so descent never diverges
    lam_max = float(np.linalg.eigvalsh(floored.quadratic).max())
    lr = min(spec.softmax_lr, 0.9 / (2.0 * lam_max))
    w = descend_quadratic(floored, spec.softmax_epochs, lr)
    metrics.append(
        {
            "stage": stage,
            "epoch": spec.softmax_epochs,
            "objective": floored.value(w),
            "wall_time": time.monotonic() - t0,
        }
    )
    return w


def predict(model: TrainedModel, instance: np.ndarray):
    return model.predict(instance)


def evaluate(model: TrainedModel, dataset: data_io.NormalizedDataset) -> dict:
    """Accuracy, per-class counts and mean loss on a labeled test set."""
    if not len(dataset.instances):
        raise EmptyTestSet("evaluation needs at least one labeled instance")
    if dataset.labels is None:
        raise EmptyTestSet("evaluation needs labels")
    features = model.feature_matrix(dataset.instances)
    labels = np.asarray(dataset.labels).astype(int)
    predictions = predict_label(features, model.softmax)
    correct = int(np.sum(predictions == labels))
    counts: dict[str, dict[str, int]] = {}
    for cls in np.unique(labels):
        mask = labels == cls
        counts[str(int(cls))] = {
            "total": int(mask.sum()),
            "correct": int(np.sum(predictions[mask] == cls)),
        }
    if model.softmax.weights.ndim == 1:
        loss = cross_entropy(features, (labels == 1).astype(float), model.softmax) / len(labels)
    else:
        proba = predict_proba(features, model.softmax)
        proba = proba / np.maximum(proba.sum(axis=1, keepdims=True), 1e-12)
        picked = np.clip(proba[np.arange(len(labels)), labels], 1e-12, 1.0)
        loss = float(-np.mean(np.log(picked)))
    return {
        "accuracy": correct / len(labels),
        "n": len(labels),
        "per_class": counts,
        "loss": float(loss),
    }


def l_sweep(
    spec: NetworkSpec,
    train_set: data_io.NormalizedDataset,
    test_set: data_io.NormalizedDataset,
    l_values: Sequence[int],
) -> list[dict]:
    """Retrain with each approximation degree under a shared seed and compare."""
    rows = []
    for degree in l_values:
        if degree < 1:
            raise GeometryMismatch("approximation degree must be >= 1")
        layers = tuple(replace(layer, degree=int(degree)) for layer in spec.layers)
        variant = replace(spec, layers=layers)
        t0 = time.monotonic()
        model = train(variant, train_set)
        result = evaluate(model, test_set)
        rows.append(
            {
                "L": int(degree),
                "accuracy": result["accuracy"],
                "wall_time": time.monotonic() - t0,
            }
        )
    return rows
