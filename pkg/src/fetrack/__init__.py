"""Frame-event fusion single-object tracking toolkit."""

from .boxes import BBox, box_iou
from .errors import (
    BoxError,
    ConfigError,
    DataError,
    FetrackError,
    GeometryError,
    NotFound,
    NumericsError,
    ParseError,
    RangeError,
    ShapeError,
    StateError,
)
from .events import EventStream, GroundTruth, Sequence, load_sequence, write_sequence

__version__ = "0.1.0"
