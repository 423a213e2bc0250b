"""Weakly supervised detection and localisation of anatomy in ultrasound
frames with a soft proposal layer."""

from .boxes import BoundingBox, iou
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, GeometryError, NumericError, SplitError, WeaklocError
from .frames import ImageFrame, ScanParameters
from .geometry import crop_depth, frustum_to_polar, preprocess, resize_to_input
from .localisation import extract_bbox, localise
from .model import BackboneConfig, build_network, forward
from .spn import SPConfig, multilabel_soft_margin_loss, propagate, sp_forward

__version__ = "0.1.0"
