"""Visual-semantic transformer for scene text recognition, on a small numpy autodiff core."""
from .data import LabelCodec, GlyphDatasetSpec, generate_glyph_dataset, load_samples, preprocess_image
from .estimator import VSTRecognizer
from .model import ModelConfig, VSTModel, compute_loss, decode, parameter_census
from .train import TrainConfig, evaluate, train

__all__ = [
    "GlyphDatasetSpec", "LabelCodec", "ModelConfig", "TrainConfig", "VSTModel", "VSTRecognizer",
    "compute_loss", "decode", "evaluate", "generate_glyph_dataset", "load_samples",
    "parameter_census", "preprocess_image", "train",
]
__version__ = "0.1.0"
