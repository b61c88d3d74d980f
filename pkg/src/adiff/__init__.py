"""Differentiable advection-diffusion modelling with divergence-free velocity and PSD diffusion.

Submodules
----------
fields          grids, field containers and the ADGF file format
representation  curl potentials, Cayley-parameterized tensors, symmetric eigensolver
solver          upwind/central stencils, stability checks, Dormand-Prince integration
objective       direct and latent losses with reverse-mode gradients
estimator       Adam, patches, latent estimation, representation fitting
simgen          synthetic moving-Gaussian samples with ground truth
metrics         RAE, FA, orientation and region statistics
api             scikit-learn style estimators
cli             ``adiff`` command line
"""
from .api import DivergenceFreeProjector, LatentPhysicsEstimator, RepresentationFitter
from .estimator import (LatentLossConfig, OptimConfig, estimate, fit_representation,
                        project_divfree)
from .fields import (ConcentrationSeries, Grid, ScalarField, TensorField, VectorField, read_field,
                     read_series, write_field, write_series)
from .objective import direct_loss, gradcheck, latent_loss
from .representation import (EigenDecomp, PhysicsParams, PotentialField, TensorParams,
                             build_tensor, cayley, curl, discrete_divergence, eig_sym)
from .simgen import SimConfig, gen_sample
from .solver import BoundarySpec, StabilityError, integrate, predict_window, stability

__version__ = "0.1.0"

__all__ = [
    "ConcentrationSeries", "Grid", "ScalarField", "TensorField", "VectorField",
    "read_field", "write_field", "read_series", "write_series",
    "EigenDecomp", "PhysicsParams", "PotentialField", "TensorParams",
    "build_tensor", "cayley", "curl", "discrete_divergence", "eig_sym",
    "BoundarySpec", "StabilityError", "integrate", "predict_window", "stability",
    "direct_loss", "latent_loss", "gradcheck",
    "LatentLossConfig", "OptimConfig", "estimate", "fit_representation", "project_divfree",
    "SimConfig", "gen_sample",
    "LatentPhysicsEstimator", "RepresentationFitter", "DivergenceFreeProjector",
]
