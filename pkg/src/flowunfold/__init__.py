"""Linear inverse imaging via an unrolled proximal gradient network with a
trainable invertible (normalizing-flow) prior.

The package is layered bottom-up:

* :mod:`flowunfold.numerics` - seeded PRNG, circular convolution, kernels;
* :mod:`flowunfold.diff` - parameter store, manual reverse-mode gradients,
  finite-difference gradient checking;
* :mod:`flowunfold.flow` - the invertible model (actnorm, 1x1 convolutions,
  affine couplings, multi-scale squeeze) with exact log-determinants;
* :mod:`flowunfold.operators` - measurement operators (identity, center
  mask, circular Gaussian blur) and noisy measurement synthesis;
* :mod:`flowunfold.unfold` - the K-fold unrolled reconstruction network and
  its hand-derived end-to-end gradients;
* :mod:`flowunfold.train` - losses, Adam, early stopping, the two training
  loops (likelihood pretraining, end-to-end fine-tuning);
* :mod:`flowunfold.cli` - file formats, configuration, and the command-line
  pipeline (``flowunfold synth-data | pretrain | train | reconstruct |
  eval | selftest``).
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    FlowUnfoldError,
    GradCheckError,
    ShapeError,
)
from .flow import FlowModel, flow_forward, flow_inverse, log_prob
from .numerics import Prng, derive_seed
from .operators import make_measurement, operator_for_task
from .train import TrainConfig, mse_loss, nll_loss, pretrain, psnr, train_unrolled
from .unfold import UnrolledNet, initial_guess, reconstruct

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "FlowUnfoldError",
    "GradCheckError",
    "ShapeError",
    "FlowModel",
    "flow_forward",
    "flow_inverse",
    "log_prob",
    "Prng",
    "derive_seed",
    "make_measurement",
    "operator_for_task",
    "TrainConfig",
    "mse_loss",
    "nll_loss",
    "pretrain",
    "psnr",
    "train_unrolled",
    "UnrolledNet",
    "initial_guess",
    "reconstruct",
    "__version__",
]
