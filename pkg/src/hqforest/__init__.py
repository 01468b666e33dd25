"""Hierarchical quadratic random forest for multichannel volumetric images."""
from .errors import HQForestError
from .forest import ForestModel, Hyperparams, load_model, predict, save_model, train_forest
from .pyramid import LabeledVolume, build_pyramid

__version__ = "0.1.0"

__all__ = ["ForestModel", "HQForestError", "Hyperparams", "LabeledVolume", "build_pyramid",
           "load_model", "predict", "save_model", "train_forest", "__version__"]
