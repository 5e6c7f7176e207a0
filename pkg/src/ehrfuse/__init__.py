"""ehrfuse: multimodal chronic-disease prediction from EHR visit sequences.

A transformer encoder turns per-visit timing (stay duration, inter-visit gap)
into a temporal embedding; a pluggable text stage embeds clinical notes plus
templated lab results; an MLP fuses both into multilabel disease predictions
trained with a hybrid cross-entropy + pairwise hinge objective.
"""

__version__ = "0.1.0"

from .records import (  # noqa: F401
    CohortReport,
    LabResult,
    PatientRecord,
    ScalerParams,
    TemporalFeatures,
    ValidationError,
    Visit,
    VisitSample,
    apply_scaler,
    build_dataset,
    build_samples,
    derive_temporal_features,
    fit_minmax_scaler,
    labs_to_text,
    load_records,
    patient_level_split,
    save_records,
)
from .fusion import NumericalError, fuse  # noqa: F401
from .metrics import MetricReport, PredictionSet  # noqa: F401
from .model import ModelConfig  # noqa: F401
from .synth import GeneratorConfig, generate  # noqa: F401
from .trainer import (  # noqa: F401
    DataConfig,
    TrainConfig,
    TrainedModel,
    evaluate,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train,
)
