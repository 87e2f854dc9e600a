"""Estimate walking centre-of-pressure trajectories from wearable IMU signals.

The package covers the full pipeline: synthetic and converted recordings,
feature assembly, linear and LSTM regressors with an sklearn-style API,
experiment suites (intra-subject, sensor ablation, train-size, transfer
with standing calibration), and gaitogram export.
"""

from .core import (
    Constellation,
    CopFrame,
    CopSeries,
    CopforgeError,
    GamSeries,
    Manifest,
    ProtocolStep,
    Recording,
    SensorId,
    Source,
    validate,
)
from .dataio import (
    ChannelSelection,
    ContiguousSeconds,
    FeatureMatrix,
    PerStepFraction,
    TargetMatrix,
    build_features,
    load_recording,
    save_recording,
    split,
    standardize,
)
from .experiments import (
    RmsReport,
    rms_error,
    run_ablation,
    run_intra_subject,
    run_train_size_curve,
    run_transfer,
    export_gaitogram,
)
from .models import (
    LinearCopRegressor,
    LstmCopRegressor,
    TrainConfig,
    fine_tune,
    load_model,
    save_model,
)
from .synthgait import ButterflyParams, SynthGaitConfig, butterfly_cop, generate_cohort, generate_recording

__version__ = "0.1.0"

__all__ = [
    "ButterflyParams",
    "ChannelSelection",
    "Constellation",
    "ContiguousSeconds",
    "CopforgeError",
    "CopFrame",
    "CopSeries",
    "FeatureMatrix",
    "GamSeries",
    "LinearCopRegressor",
    "LstmCopRegressor",
    "Manifest",
    "PerStepFraction",
    "ProtocolStep",
    "Recording",
    "RmsReport",
    "SensorId",
    "Source",
    "SynthGaitConfig",
    "TargetMatrix",
    "TrainConfig",
    "build_features",
    "butterfly_cop",
    "export_gaitogram",
    "fine_tune",
    "generate_cohort",
    "generate_recording",
    "load_model",
    "load_recording",
    "rms_error",
    "run_ablation",
    "run_intra_subject",
    "run_train_size_curve",
    "run_transfer",
    "save_model",
    "save_recording",
    "split",
    "standardize",
    "validate",
]
