"""Cross-modal visual place recognition: event-camera queries against an image database."""
from .events import DataError, EventStream, GeoTag, SampleRecord
from .model import CrossModalNet, ModelConfig
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = ["CrossModalNet", "DataError", "EventStream", "GeoTag", "ModelConfig", "SampleRecord",
           "TrainConfig", "__version__"]
