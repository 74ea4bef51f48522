"""Training engine for deep networks whose per-layer step sizes are
learnable variables, covering a residual (explicit-Euler) family and a
Caputo-fractional family, three step-size regularization modes, and
adaptive layer pruning."""

__version__ = "0.1.0"

from .data import Dataset, load_dataset, load_idx_images, load_idx_labels, preprocess
from .grad import (
    GradientSet,
    backward,
    backward_fractional,
    backward_resnet,
    fd_gradient,
    zeros_like_params,
)
from .linalg import make_rng, matvec, matvec_transposed, outer_accumulate, relu, relu_mask
from .network import (
    Architecture,
    ForwardCache,
    FracCoeffs,
    NetworkParams,
    TauDegeneracyError,
    count_params,
    forward,
    forward_fractional,
    forward_resnet,
    frac_coeff,
    frac_coeffs,
    gamma_factor,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .objective import (
    LossBreakdown,
    Regularization,
    apply_final_tau_dependency,
    assemble_objective,
    l1_penalty,
    softmax_cross_entropy,
    time_horizon_penalty,
)
from .trainer import (
    ConfigError,
    MetricsRecord,
    PruneEvent,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    evaluate_accuracy,
    project_tau_positive,
    prune_check,
    run_training,
    sample_minibatch,
    sgd_step,
)
