"""Framework checkpoint converter for the portable container format."""

from .errors import ConverterError, ShapeInferenceFailure, ShapeMismatch, UnsupportedArchitecture
from .exporter import ExportManifest, export_container, export_model
from .importer import import_container
from .models import TinyDecoder, TinyDecoderConfig, load_model, save_model

__all__ = [
    "ConverterError", "ExportManifest", "ShapeInferenceFailure", "ShapeMismatch",
    "TinyDecoder", "TinyDecoderConfig", "UnsupportedArchitecture",
    "export_container", "export_model", "import_container", "load_model",
    "save_model",
]
