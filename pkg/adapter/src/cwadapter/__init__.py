"""Real-image export adapter for the risk-controlled segmentation toolkit.

Produces the toolkit's tensor files (NPY v1.0) and manifest JSON from a
directory of images, using pluggable patch encoders and probability-map
producers. The toolkit itself is never imported; the two packages meet
only at the file formats.
"""

from .encoders import (
    LocalDescriptorEncoder,
    available_encoders,
    get_encoder,
    register_encoder,
)
from .errors import (
    AdapterError,
    BadSpec,
    EncoderUnavailable,
    ExportFailure,
    UndecodableImage,
)
from .extract import (
    PROBABILITY_MODELS,
    ExtractionSpec,
    export_probabilities,
    extract_features,
    list_images,
)
from .preprocess import Preprocess, load_image, preprocess_image
from .tensor_io import save_float_grid, save_mask_grid

__version__ = "0.1.0"

__all__ = [
    "AdapterError",
    "BadSpec",
    "EncoderUnavailable",
    "ExportFailure",
    "ExtractionSpec",
    "LocalDescriptorEncoder",
    "PROBABILITY_MODELS",
    "Preprocess",
    "UndecodableImage",
    "available_encoders",
    "export_probabilities",
    "extract_features",
    "get_encoder",
    "list_images",
    "load_image",
    "preprocess_image",
    "register_encoder",
    "save_float_grid",
    "save_mask_grid",
    "__version__",
]
