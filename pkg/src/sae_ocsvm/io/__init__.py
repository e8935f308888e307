"""File formats: NIfTI-1 images, model containers and run configuration."""
from .config import RunConfig, format_config, parse_config, read_config, write_config
from .container import (
    load_ocsvm,
    load_patient_model,
    load_sae,
    save_ocsvm,
    save_patient_model,
    save_sae,
)
from .nifti import read_anomaly_map, read_mask, read_volume, write_anomaly_map, write_volume

__all__ = [
    "RunConfig",
    "format_config",
    "load_ocsvm",
    "load_patient_model",
    "load_sae",
    "parse_config",
    "read_anomaly_map",
    "read_config",
    "read_mask",
    "read_volume",
    "save_ocsvm",
    "save_patient_model",
    "save_sae",
    "write_anomaly_map",
    "write_config",
    "write_volume",
]
