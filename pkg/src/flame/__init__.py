"""Frequency-aware inference latency modeling on a synthetic CPU+GPU device.

The package fits per-layer latency laws from sparse frequency profiles,
reconstructs full-model CPU/GPU timelines, keeps estimates calibrated
online, and governs frequency pairs against latency deadlines.  A seeded
device simulator stands in for hardware and doubles as the test oracle.
"""

from .core import (
    DeltaBranch,
    FrequencyGrid,
    LayerConfig,
    LayerSpan,
    LayerType,
    ModelSpec,
    ProfileSample,
    ValidationError,
    validate_model_spec,
)
from .devicesim import (
    DeviceConfig,
    PowerModel,
    SimulatedDevice,
    load_device,
    make_device,
    save_device,
)
from .governor import (
    Deadline,
    EvalReport,
    GovernorDecision,
    TraceRow,
    evaluate_trace,
    govern_loop,
    greedy_search,
    mape,
    oracle_search,
    ppw,
    qos,
)
from .layerfit import (
    CoefficientSet,
    EstimatorStore,
    FitError,
    LayerTypeEstimator,
    UnderdeterminedError,
    WorkloadFeatures,
    build_estimator_store,
    build_layer_estimator,
    estimate_layer,
    featureize,
    load_store,
    save_store,
)
from .modelest import (
    AdaptationState,
    Timeline,
    adapt_update,
    calibrated_estimate,
    estimate_model,
    reconstruct_timeline,
    record_observation,
)
from .profiler import (
    CampaignError,
    ProfileDataset,
    SamplingPlan,
    load_dataset,
    plan_points,
    run_campaign,
    save_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptationState",
    "CampaignError",
    "CoefficientSet",
    "Deadline",
    "DeltaBranch",
    "DeviceConfig",
    "EstimatorStore",
    "EvalReport",
    "FitError",
    "FrequencyGrid",
    "GovernorDecision",
    "LayerConfig",
    "LayerSpan",
    "LayerType",
    "LayerTypeEstimator",
    "ModelSpec",
    "PowerModel",
    "ProfileDataset",
    "ProfileSample",
    "SamplingPlan",
    "SimulatedDevice",
    "Timeline",
    "TraceRow",
    "UnderdeterminedError",
    "ValidationError",
    "WorkloadFeatures",
    "adapt_update",
    "build_estimator_store",
    "build_layer_estimator",
    "calibrated_estimate",
    "estimate_layer",
    "estimate_model",
    "evaluate_trace",
    "featureize",
    "govern_loop",
    "greedy_search",
    "load_dataset",
    "load_device",
    "load_store",
    "make_device",
    "mape",
    "oracle_search",
    "plan_points",
    "ppw",
    "qos",
    "reconstruct_timeline",
    "record_observation",
    "run_campaign",
    "save_dataset",
    "save_device",
    "save_store",
    "validate_model_spec",
]
