"""Posterior sampling for linearised diffuse optical tomography with
unconditional-to-conditional diffusion scores."""

from .diffusion import DiffusionSchedule, DivergenceError, reverse_em, reverse_em_sample
from .dotfwd import Instrument, OpticalField, forward_data, full_view, jacobian, limited_view
from .dps import DpsConfig, sample_dps, train_unconditional
from .ensemble import SampleEnsemble, ensemble_stats
from .gaussian import CovarianceOperator, GaussianPosterior, NumericalError, analytic_posterior
from .grid import Grid
from .network import ScoreNetwork, TrainingError
from .operator import DenseMatrixOperator, DimensionError, LinearOperator, rescale_jacobian
from .phantom import PhantomSpec, generate_dataset, generate_phantom, ood_phantoms
from .ucos import (TrainingConfig, UcosProblem, conditional_score, regularized_score,
                   sample_posterior, train)

__version__ = "0.1.0"
