from .base import (
    BackendCapabilities,
    LabeledMaskExample,
    LossReport,
    MlmBackend,
    MlmExample,
    ParamSnapshot,
    Vocabulary,
)
from .oracle import OracleBackend
from .remote import RemoteBackend
from .toy import ToyConfig, ToyMlmBackend

__all__ = [
    "BackendCapabilities",
    "LabeledMaskExample",
    "LossReport",
    "MlmBackend",
    "MlmExample",
    "OracleBackend",
    "ParamSnapshot",
    "RemoteBackend",
    "ToyConfig",
    "ToyMlmBackend",
    "Vocabulary",
]
