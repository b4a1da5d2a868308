"""Learning random-walk segmentation weights from hard segmentations.

Soft segmentations are the latent variables of a latent structural SVM;
annotation-consistent inference imputes them and cutting-plane updates
estimate the term weights.
"""

__version__ = "0.1.0"

from ._accel import BACKEND
from .core import (DimensionMismatch, HardSeg, LabelSet, NonConvergence, NonConvergenceWarning,
                   Params, RWSegError, SingularSystem, SoftSeg, Volume, harden, validate_soft)
from .graph import Laplacian, LaplacianSpec, Neighborhood, build_laplacian, build_neighborhood, \
    default_family
from .energy import FeatureVector, PriorTerm, SampleModel, feature_vector, loss, rw_energy, \
    total_energy
from .rw import SolverOpts, rw_infer
from .aci import AciOpts, aci_infer, aci_oracle, is_compatible, project_compatible_simplex
from .learn import (Sample, TrainConfig, TrainReport, cccp_train, evaluate, soften_distance_transform,
                    ssvm_update)
from .data import Manifest, SynthConfig, load_dataset, read_manifest, synth_generate

__all__ = [
    "BACKEND", "DimensionMismatch", "HardSeg", "LabelSet", "NonConvergence",
    "NonConvergenceWarning", "Params", "RWSegError", "SingularSystem", "SoftSeg", "Volume",
    "harden", "validate_soft", "Laplacian", "LaplacianSpec", "Neighborhood", "build_laplacian",
    "build_neighborhood", "default_family", "FeatureVector", "PriorTerm", "SampleModel",
    "feature_vector", "loss", "rw_energy", "total_energy", "SolverOpts", "rw_infer", "AciOpts",
    "aci_infer", "aci_oracle", "is_compatible", "project_compatible_simplex", "Sample",
    "TrainConfig", "TrainReport", "cccp_train", "evaluate", "soften_distance_transform",
    "ssvm_update", "Manifest", "SynthConfig", "load_dataset", "read_manifest", "synth_generate",
    "__version__",
]
