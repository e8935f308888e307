"""Patch-based brain anomaly detection: a siamese convolutional auto-encoder
provides patch embeddings, and a one-class SVM fitted on each patient's own
patches turns them into voxel-wise anomaly scores."""
__version__ = "0.1.0"

from .errors import SaeOcsvmError
from .ocsvm import OcsvmModel, SolverConfig, decision_function, fit_ocsvm
from .pipeline import PatientModel, fit_patient_model, score_volume
from .sae import SaeConfig, SaeModel, build_sae, train_sae
from .volume import AnomalyMap, Volume

__all__ = [
    "AnomalyMap",
    "OcsvmModel",
    "PatientModel",
    "SaeConfig",
    "SaeModel",
    "SaeOcsvmError",
    "SolverConfig",
    "Volume",
    "build_sae",
    "decision_function",
    "fit_ocsvm",
    "fit_patient_model",
    "score_volume",
    "train_sae",
]
