from .errors import ConfigError, ExtractorError, ImageError
from .extract import (
    CFM_MAGIC,
    MEAN_RGB,
    ExtractionConfig,
    ExtractionRecord,
    batch_extract,
    crop_query,
    extract,
    extract_array,
    load_rgb,
    resize_factor,
    resized_shape,
    write_cfm,
    write_manifest,
    write_report,
)
from .models import MODELS, LayerSpec, ModelCard, TraceOp, layer_spec, output_grid, stride_product

__all__ = [
    "CFM_MAGIC",
    "MEAN_RGB",
    "MODELS",
    "ConfigError",
    "ExtractionConfig",
    "ExtractionRecord",
    "ExtractorError",
    "ImageError",
    "LayerSpec",
    "ModelCard",
    "TraceOp",
    "batch_extract",
    "crop_query",
    "extract",
    "extract_array",
    "layer_spec",
    "load_rgb",
    "output_grid",
    "resize_factor",
    "resized_shape",
    "stride_product",
    "write_cfm",
    "write_manifest",
    "write_report",
]
