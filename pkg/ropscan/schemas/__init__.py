from .detection import Classification, DetectionVerdict, FlaggedChain, Verdict
from .metrics import FoldResult, GridResult, Metrics
from .run import PipelineConfig, RunConfig
from .training import GridCell, GridSpec, ModelConfig, TrainConfig

__all__ = [
    "Classification",
    "DetectionVerdict",
    "FlaggedChain",
    "Verdict",
    "FoldResult",
    "GridResult",
    "Metrics",
    "PipelineConfig",
    "RunConfig",
    "GridCell",
    "GridSpec",
    "ModelConfig",
    "TrainConfig",
]
