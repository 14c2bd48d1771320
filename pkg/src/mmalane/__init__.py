"""Video instance lane detection with local-global memory aggregation."""

from .annotation import ControlPointSet, LanePolynomial, fit_lane_polynomial, rasterize_lane
from .data import SyntheticSceneConfig, VideoClip, generate_synthetic_clip, select_memory_frames
from .errors import ConfigError, MMALaneError, ValidationError
from .metrics import MetricReport, evaluate_sequences
from .network import MMANet, ModelConfig
from .training import LossConfig, StageConfig, predict_clip, train_stage1, train_stage2

__version__ = "0.1.0"
