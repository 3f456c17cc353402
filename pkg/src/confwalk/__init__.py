"""Risk-controlled segmentation sets with feature-graph score diffusion.

The pipeline: resample a model's probability map onto the feature grid,
diffuse it over a k-nearest-neighbor cosine graph of the features, resample
back, then calibrate a score threshold so the expected false-negative rate
of the thresholded set stays below a user target with finite-sample
validity.
"""

from .conformal import (
    METHOD_CRC,
    METHOD_DILATION,
    METHOD_RWCP,
    CalibrationResult,
    ConformalConfig,
    RiskCurve,
    calibrate_threshold,
    crc_lower_bound,
    dilation_calibrate,
    dilation_infer,
    fnr_loss,
    inflated_target,
    load_calibration,
    max_set_size_sensitivity,
    min_calibration_size,
    predict_set,
    rwcp_calibrate,
    rwcp_infer,
    save_calibration,
    set_size_curve,
    standard_crc_calibrate,
    standard_crc_infer,
)
from .diffusion import DiffusionConfig, diffuse, diffuse_full
from .errors import (
    ConfigError,
    ConfwalkError,
    DegenerateRow,
    DimensionMismatch,
    EmptyBasePrediction,
    EmptyGroundTruth,
    EmptyMask,
    IoFailure,
    MalformedFile,
    RangeViolation,
    ShapeMismatch,
    TargetInfeasible,
    Unsatisfiable,
    ZeroVector,
)
from .graph import GraphConfig, build_transition_matrix, knn_search
from .metrics import (
    MetricReport,
    assd,
    coverage,
    dsc,
    evaluate_pair,
    extract_contour,
    hd95,
    hd100,
    stretch,
    summarize,
)
from .synthetic import SceneSpec, coverage_simulation, gen_scene, gen_sharp_case
from .tensors import (
    BinaryMask,
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    ProbMap,
    load_manifest,
    load_tensor,
    resample_bilinear,
    resample_nearest,
    save_manifest,
    save_tensor,
)

__version__ = "0.1.0"
