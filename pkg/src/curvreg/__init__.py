"""curvreg: classifier-guided registration of a 3D vessel volume to a
simulated intravascular pullback, with synthetic phantoms and evaluation."""

from .config import CaseGenConfig, RunConfig, load_config, save_config
from .errors import (CenterlineError, ConfigError, CurvRegError,
                     DegenerateHistogramError, DegenerateMaskError,
                     NonFiniteLossError, OutOfExtentError)
from .evaluation import (EvalThresholds, RegistrationReport, batch_report,
                         build_report, centerline_overlap, plane_cosine)
from .features import (DetectorConfig, FeatureMap, HeuristicMovingDetector,
                       OracleMovingDetector, binarize_guidewire,
                       detect_heuristic, detect_oracle, longitudinal_profile,
                       transport_labels)
from .geometry import (Centerline, PolarConfig, PolarImage, Volume3,
                       interpolate_frames, polar_transform,
                       resample_centerline, rotation_minimizing_frames,
                       trilinear_sample)
from .losses import LossValue, dice_ce, masked_nmi, reg_loss, total_loss
from .phantom import (BranchSpec, CalcSpec, GroundTruth, PhantomSpec,
                      PullbackConfig, generate_phantom, simulate_pullback)
from .registration import (OptimizerConfig, RegistrationCase,
                           RegistrationResult, TransformParams,
                           WarpedGeometry, evaluate_objective, optimize_local,
                           prealign, register, sample_warped, warp_geometry)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
