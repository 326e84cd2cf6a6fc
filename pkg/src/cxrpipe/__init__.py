"""Chest X-ray three-class classification pipeline.

Manifest ingestion, affine/mixup/RICAP augmentation, a small VGG-style
numpy CNN trained with RMSprop and early stopping, random hyperparameter
search and repeated-seed evaluation.
"""

from .augment import AffineParams, AugmentationPolicy, DEFAULT_POLICY
from .data_ingest import CLASSES, DatasetSplit, ManifestRecord
from .neuralnet import ArchSpec, DEFAULT_ARCH, HyperParams, ModelState, VGG16_ARCH

__version__ = "0.1.0"

__all__ = [
    "AffineParams", "AugmentationPolicy", "DEFAULT_POLICY", "CLASSES", "DatasetSplit",
    "ManifestRecord", "ArchSpec", "DEFAULT_ARCH", "HyperParams", "ModelState", "VGG16_ARCH",
]
