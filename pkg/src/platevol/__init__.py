"""Food volume and intake measurement from top-down RGB-D plate images."""

from .errors import (
    ConfigError,
    DataError,
    DimensionMismatch,
    MaskProviderFailure,
    MissingCalibration,
    MissingManifest,
    MissingMask,
    MissingReference,
    NoCircleFound,
)
from .model import (
    BinaryMask,
    DepthMap,
    HeightMap,
    IntakeReport,
    RasterImage,
    SceneRecord,
    average_depth_frames,
    load_scene,
    write_report,
    write_scene,
)
from .pipeline import PipelineConfig, evaluate_dataset, run_scene

__version__ = "0.1.0"
