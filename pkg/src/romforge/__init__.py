"""Hybrid data-driven reduced-order-model closures for incompressible flow.

Pipeline: a miniature full-order solver (minifom) produces snapshots, POD
compresses them (pod), Galerkin projection assembles reduced operators
(galerkin), correction closures are fitted by least squares (closure), an
eddy-viscosity coefficient map is trained (evmodel), implicit integrators
evolve the reduced systems (romsolve), and error studies plus artifacts come
out of report.  The cli module ties the stages together.
"""

from .grid import ConfigurationError, GridSpec
from .minifom import FomConfig, NumericalFailureError, SnapshotSet, run_fom
from .pod import PodBasis, pod
from .galerkin import RomOperators, assemble_operators, slice_operators
from .closure import ClosureModel, fit_constrained, fit_joint_ppe, fit_unconstrained
from .evmodel import MlpModel, train_mlp
from .romsolve import RomRunConfig, RomTrajectory, residual_corrections, run_rom
from .report import ErrorSeries, SweepConfig, SweepResult, error_series, mode_sweep

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "GridSpec", "FomConfig", "NumericalFailureError",
    "SnapshotSet", "run_fom", "PodBasis", "pod", "RomOperators",
    "assemble_operators", "slice_operators", "ClosureModel",
    "fit_constrained", "fit_joint_ppe", "fit_unconstrained", "MlpModel",
    "train_mlp", "RomRunConfig", "RomTrajectory", "residual_corrections",
    "run_rom", "ErrorSeries", "SweepConfig", "SweepResult", "error_series",
    "mode_sweep", "__version__",
]
