"""Domain adaptation for LiDAR point-cloud segmentation.

Input-space alignment (shift augmentation, beam matching, field-of-view
cropping, relative features) combined with class-distribution alignment and
entropy minimization on unlabeled target scans, plus a synthetic LiDAR
scanner for producing source/target pairs with controlled sensor shift.
"""

__version__ = "0.1.0"

from .cloud import ClassDef, DatasetManifest, LabeledCloud, load_manifest
from .errors import ConfigError, DataIOError, FormatError, LidarUDAError, NumericError, ValidationError
from .train import TrainConfig, lambda_sweep, run_ablation, train

__all__ = [
    "ClassDef", "DatasetManifest", "LabeledCloud", "load_manifest",
    "ConfigError", "DataIOError", "FormatError", "LidarUDAError", "NumericError", "ValidationError",
    "TrainConfig", "lambda_sweep", "run_ablation", "train", "__version__",
]
