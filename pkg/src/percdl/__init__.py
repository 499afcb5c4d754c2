"""Personalized convolutional dictionary learning for physiological time series.

A common dictionary of short atoms is learned across a population of series
while each individual gets a personalized, time-warped version of every atom.
"""

__version__ = "0.1.0"

from .core import (ActivationSet, Dictionary, FitConfig, PersonalizationMatrix,
                   SeriesActivations, TimeSeriesDataset, normalize_atom, validate_dataset)
from .csc import csc_solve
from .federated import run_federated
from .metrics import atom_distance, dtw, recon_error, segmentation_eval
from .solvers import (FitResult, IndCDLResult, cdu_update, fit, fit_indcdl, fit_popcdl,
                      ipu_update, objective, percdu_update, personalized_atoms, reconstruct,
                      recenter_atoms)
from .synth import SynthSpec, add_gaussian_noise, add_impulse_noise, gen_dataset
from .transforms import (FreeTransform, IdentityTransform, RotationTransform,
                         TimeWarpTransform, make_transform, rotation_fit)
from .warp import WarpConfig, apply_timewarp, build_warp_matrix, project_theta, psi_eval

__all__ = [
    "ActivationSet", "Dictionary", "FitConfig", "PersonalizationMatrix", "SeriesActivations",
    "TimeSeriesDataset", "normalize_atom", "validate_dataset", "csc_solve", "run_federated",
    "atom_distance", "dtw", "recon_error", "segmentation_eval", "FitResult", "IndCDLResult",
    "cdu_update", "fit", "fit_indcdl", "fit_popcdl", "ipu_update", "objective", "percdu_update",
    "personalized_atoms", "reconstruct", "recenter_atoms", "SynthSpec", "add_gaussian_noise",
    "add_impulse_noise", "gen_dataset", "FreeTransform", "IdentityTransform", "RotationTransform",
    "TimeWarpTransform", "make_transform", "rotation_fit", "WarpConfig", "apply_timewarp",
    "build_warp_matrix", "project_theta", "psi_eval",
]
