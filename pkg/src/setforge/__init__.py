"""Conditional set generation with permutation-symmetric models and losses.

The package is organised bottom-up: ``diffcore`` (reverse-mode autodiff over
float64 numpy arrays), ``setloss`` (Chamfer and optimal-assignment losses plus
the padding degeneracy analysis), ``encoders``/``generators`` (set encoders
and the three decoders), ``data``/``harness``/``cli`` (datasets, training
runs, artifacts).
"""

from .diffcore import Adam, NonFiniteError, Tensor, backward, grad, make_rng
from .encoders import ConvImageEncoder, FSPool, SetEncoder
from .generators import CDSPN, DSPN, TSPN, CardinalityHead, SetPrediction
from .harness import ExperimentConfig, build_bundle, evaluate, train
from .setloss import (chamfer, degeneracy_count, hungarian_loss,
                      pad_ground_truth, pairwise_cost)

__version__ = "0.1.0"

__all__ = [
    "Adam", "NonFiniteError", "Tensor", "backward", "grad", "make_rng",
    "ConvImageEncoder", "FSPool", "SetEncoder",
    "CDSPN", "DSPN", "TSPN", "CardinalityHead", "SetPrediction",
    "ExperimentConfig", "build_bundle", "evaluate", "train",
    "chamfer", "degeneracy_count", "hungarian_loss", "pad_ground_truth",
    "pairwise_cost",
    "__version__",
]
