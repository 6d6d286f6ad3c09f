"""Next-visit diagnosis prediction with temporal heterogeneous graph attention."""
from .ehr import CodeKind, CodeVocabulary, MedicalCode, PatientRecord, Sample, Visit, build_vocabulary, load_cohort
from .model import ModelConfig, TransModel

__all__ = [
    "CodeKind",
    "CodeVocabulary",
    "MedicalCode",
    "ModelConfig",
    "PatientRecord",
    "Sample",
    "TransModel",
    "Visit",
    "build_vocabulary",
    "load_cohort",
]
__version__ = "0.1.0"
