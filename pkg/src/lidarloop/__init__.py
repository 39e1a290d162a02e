"""Loop closure for LiDAR mapping with rotation-invariant direction histograms."""

from .cell_map import Cell, CellMap, GridIndex, Shape
from .core_math import InvalidInputError, RigidTransform
from .descriptor import Keyframe, build_keyframe
from .loop_detector import KeyframeDatabase, similarity

__version__ = "0.1.0"
