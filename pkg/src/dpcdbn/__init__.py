"""Differentially private convolutional deep belief networks.

Training replaces the intractable sigmoid energy of each convolutional RBM
layer with a Chebyshev polynomial, bounds the polynomial coefficients'
sensitivity to any single record, injects calibrated Laplace noise into the
coefficients once, and then optimizes the noisy objective for as many epochs
as desired at no further privacy cost.  A quadratic surrogate privatizes the
softmax output layer the same way.  The privacy accountant sums the per-stage
budgets and is independent of epochs, batch sizes and restarts.
"""

from .chebyshev import (
    ApproximatorKind,
    ChebyshevSeries,
    ErrorBounds,
    MonomialPolynomial,
    cheb_coefficients,
    cheb_eval,
    cheb_to_monomial,
    certify_logistic_truncation,
    logistic,
    make_approximator,
    monomial_to_cheb,
    truncation_error_bounds,
)
from .crbm import (
    CrbmParams,
    HiddenMap,
    LrnHyper,
    cd1_update,
    energy_approx,
    energy_exact,
    energy_prob,
    gibbs_step,
    hidden_prob,
    init_params,
    lrn_normalizers,
    max_pool,
    reconstruction_error,
    visible_prob,
)
from .data_io import (
    NormalizedDataset,
    RawDataset,
    load_csv,
    load_idx,
    load_idx_pair,
    load_model,
    normalize,
    save_model,
)
from .errors import DpcdbnError
from .estimator import PrivateCdbnClassifier
from .funcmech import (
    CoefficientTable,
    LayerGeometry,
    NoiseObjective,
    PerturbedObjective,
    PrivacyAccountant,
    extract_coefficients,
    laplace_sample,
    laplace_scale,
    objective_value_and_gradient,
    perturb,
    sensitivity_lemma2,
    sensitivity_maximal,
    sensitivity_naive_h,
)
from .network import (
    LayerSpec,
    NetworkSpec,
    TrainedModel,
    evaluate,
    l_sweep,
    predict,
    train,
)
from .softmax import (
    SoftmaxParams,
    cross_entropy,
    softmax_sensitivity,
    taylor_surrogate_coeffs,
    train_private_softmax,
)

__version__ = "0.1.0"
